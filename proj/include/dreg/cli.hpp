// Command-line surface: JSON run configuration, tensor-container
// plumbing for images/fields/codes, and the train / register / exp /
// sample / transport / eval / synth subcommands.
#pragma once

#include <string>

#include <json.hpp>

#include "dreg/model.hpp"
#include "dreg/trainer.hpp"

namespace dreg::cli {

// Exit-code contract shared by every subcommand.
constexpr int kExitOk = 0;
constexpr int kExitConfigError = 2;
constexpr int kExitNumericalAbort = 3;

// The full run configuration as one flat JSON document.  Every field
// has a default; unknown keys are rejected.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
};

RunConfig parse_run_config(const nlohmann::json& doc);
nlohmann::json run_config_json(const RunConfig& cfg);
RunConfig load_run_config(const std::string& path);

// Container conventions: images are stored with shape = grid dims,
// fields channel-first as [D, dims...]; spacing and kind travel in the
// header's meta map.
void write_image(const std::string& path, const ScalarImage& img);
ScalarImage read_image(const std::string& path);
void write_field(const std::string& path, const VectorField& f);
VectorField read_field(const std::string& path);

int run_cli(int argc, const char* const* argv);

}  // namespace dreg::cli
