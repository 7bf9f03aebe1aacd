// Probabilistic registration network: a conditional variational encoder
// over stationary velocity fields.  The encoder maps an image pair to a
// low-dimensional latent code; the decoder, conditioned on the moving
// image, emits a velocity field that is smoothed and exponentiated into
// a diffeomorphic transform.
#pragma once

#include <array>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "dreg/autodiff.hpp"
#include "dreg/field.hpp"
#include "dreg/metrics.hpp"

namespace dreg {

struct model_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ModelConfig {
    Grid grid{{64, 64}};
    int latent_dim = 16;
    double lambda = 5000.0;   // reconstruction weight
    double sigma_s = 3.0;     // velocity smoothing layer
    int smooth_kernel = 15;   // odd
    int squaring_steps = 4;
    LccConfig lcc;
    std::array<int, 4> encoder_widths{16, 32, 32, 4};
    std::array<int, 3> decoder_widths{32, 32, 16};
    int decoder_conv_width = 16;
    double weight_decay = 1e-4;

    // Number of stride-2 stages on each side; spatial extents must be
    // divisible by 2^coarse_levels().
    static constexpr int coarse_levels() { return 3; }
    void validate() const;
};

// Named parameter tensors in a fixed order shared by the optimizer and
// the checkpoint format.
struct ModelParams {
    std::vector<std::string> order;
    std::map<std::string, ad::Tensor> values;

    ad::Tensor& at(const std::string& name);
    const ad::Tensor& at(const std::string& name) const;
    std::size_t parameter_count() const;

    static ModelParams init(const ModelConfig& cfg, std::mt19937_64& rng);
};

struct LatentCode {
    std::vector<double> z;
    std::vector<double> mu;
    std::vector<double> logvar;
};

struct RegistrationResult {
    VectorField velocity;       // smoothed decoder output
    Transform phi;              // exponentiate(velocity, N)
    ScalarImage warped;         // moving image resampled by phi
    LatentCode latent;
    std::map<std::string, double> metrics;
};

enum class RegisterMode { deterministic, stochastic };

// Min-max rescale to [0, 1]; constant images map to zero.
ScalarImage normalize_unit_range(const ScalarImage& img);

// Conversions between grid containers and channel-first tensors.
ad::Tensor image_tensor(const ScalarImage& img);
ad::Tensor field_tensor(const VectorField& f);
ScalarImage image_from_tensor(const Grid& g, const ad::Tensor& t);
VectorField field_from_tensor(const Grid& g, const ad::Tensor& t,
                              FieldKind kind);

struct EncodeResult {
    std::vector<double> mu;
    std::vector<double> logvar;
};

EncodeResult encode(const ScalarImage& fixed, const ScalarImage& moving,
                    const ModelParams& params, const ModelConfig& cfg);

VectorField decode(const std::vector<double>& z, const ScalarImage& moving,
                   const ModelParams& params, const ModelConfig& cfg);

// Full forward path: encode, (optionally) sample, decode, exponentiate,
// warp.  `rng` is only consulted in stochastic mode.
RegistrationResult register_pair(const ScalarImage& moving,
                                 const ScalarImage& fixed,
                                 const ModelParams& params,
                                 const ModelConfig& cfg, RegisterMode mode,
                                 std::mt19937_64* rng = nullptr);

struct LossBreakdown {
    double total = 0.0;           // reconstruction + kl
    double reconstruction = 0.0;  // -lambda * lcc with half-way warps
    double kl = 0.0;
    double weight_penalty = 0.0;  // 0.5 * wd * sum(theta^2), not in total
};

// Differentiable loss graph over fresh parameter leaves (aligned with
// params.order).  The trainer backpropagates `total` and reads leaf
// gradients; weight decay is added to the gradients outside the graph.
struct LossGraph {
    ad::NodePtr total;
    ad::NodePtr reconstruction;
    ad::NodePtr kl;
    ad::NodePtr mu;
    ad::NodePtr logvar;
    std::vector<ad::NodePtr> leaves;
};

LossGraph build_loss_graph(const ScalarImage& fixed, const ScalarImage& moving,
                           const ModelParams& params, const ModelConfig& cfg,
                           const std::vector<double>& noise);

LossBreakdown loss(const ScalarImage& fixed, const ScalarImage& moving,
                   const ModelParams& params, const ModelConfig& cfg,
                   const std::vector<double>& noise);

}  // namespace dreg
