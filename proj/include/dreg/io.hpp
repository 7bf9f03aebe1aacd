// On-disk formats: the tensor container (8-byte ASCII header length,
// JSON header, newline, little-endian payload) and the checkpoint
// archive bundling all model parameters with a config record.
#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dreg/autodiff.hpp"
#include "dreg/model.hpp"

namespace dreg::io {

struct io_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class Dtype { f32, f64 };

std::string dtype_name(Dtype d);
Dtype dtype_from_name(const std::string& name);

void write_tensor(const std::string& path, const ad::Tensor& t, Dtype dtype,
                  const nlohmann::json& meta = nlohmann::json::object());

struct LoadedTensor {
    ad::Tensor tensor;
    Dtype dtype = Dtype::f64;
    nlohmann::json meta;
};

LoadedTensor read_tensor(const std::string& path);

// Checkpoint: one JSON manifest header (config record + named tensor
// shapes in order) followed by the concatenated f64 payloads.
void write_checkpoint(const std::string& path, const ModelParams& params,
                      const nlohmann::json& config);

struct Checkpoint {
    ModelParams params;
    nlohmann::json config;
};

Checkpoint read_checkpoint(const std::string& path);

// Numbers in reports and logs are rendered with 9 significant digits.
std::string format_number(double v);

// Flat `key=value` report, fully rewritten on each call, keys in the
// given order.
void write_report(const std::string& path,
                  const std::vector<std::pair<std::string, double>>& entries);

std::map<std::string, double> read_report(const std::string& path);

}  // namespace dreg::io
