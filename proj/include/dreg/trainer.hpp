// Optimization loop: Adam with L2 weight decay, online pairwise
// augmentation, per-step loss records and checkpoint cadence.
#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dreg/model.hpp"

namespace dreg {

// Raised when training encounters a non-finite loss.
struct numerical_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    double learning_rate = 5e-4;
    int batch_size = 1;
    int epochs = 20;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    // Augmentation ranges; all zero plus mirror off = identity.
    double shift_fraction = 0.10;  // of each extent
    double rotate_degrees = 15.0;
    double scale_lo = 0.9;
    double scale_hi = 1.1;
    bool mirror = true;
    std::uint64_t seed = 0;
    long checkpoint_every = 0;  // in steps; 0 = final checkpoint only

    void validate() const;
};

struct AdamState {
    std::vector<ad::Tensor> m;  // aligned with ModelParams::order
    std::vector<ad::Tensor> v;
    long step = 0;

    static AdamState init(const ModelParams& params);
};

// In-place bias-corrected Adam update; grads aligned with params.order.
void adam_step(ModelParams& params, const std::vector<ad::Tensor>& grads,
               AdamState& state, double lr, double beta1, double beta2,
               double eps);

// One random similarity transform (shift, rotation, isotropic scale,
// per-axis mirror) applied identically to both images of a pair.
struct AugmentDraw {
    std::vector<double> shift;
    double angle_rad = 0.0;
    double scale = 1.0;
    std::vector<bool> mirror;
};

AugmentDraw draw_augmentation(const TrainConfig& cfg, const Grid& grid,
                              std::mt19937_64& rng);

// Multilinear resampling for images, nearest-neighbor for masks.
ScalarImage apply_augmentation(const ScalarImage& img, const AugmentDraw& draw,
                               bool nearest_neighbor);

struct TrainPair {
    ScalarImage moving;
    ScalarImage fixed;
};

struct StepRecord {
    long step = 0;
    double total = 0.0;
    double reconstruction = 0.0;
    double kl = 0.0;
    double wall_ms = 0.0;
};

// `step, total, reconstruction, kl, wall_ms`, 9 significant digits.
std::string format_step_record(const StepRecord& r);

std::string checkpoint_filename(long step);  // ckpt_<step>.bin

struct TrainCallbacks {
    std::function<void(const StepRecord&)> on_step;
    std::function<void(long step, const ModelParams&)> on_checkpoint;
};

struct TrainResult {
    ModelParams params;
    AdamState state;
    std::vector<StepRecord> history;
};

TrainResult train(const std::vector<TrainPair>& data, const ModelConfig& mcfg,
                  const TrainConfig& tcfg,
                  const TrainCallbacks& callbacks = {});

}  // namespace dreg
