// Minimal reverse-mode automatic differentiation over dense tensors.
// Provides exactly the differentiable operations the registration
// network needs: strided convolution / transposed convolution, dense
// layers, activations, concatenation, average pooling, reparameterized
// sampling, differentiable warping and displacement-field composition.
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace dreg::ad {

struct shape_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s);
    Tensor(std::vector<int> s, std::vector<double> d);

    std::size_t size() const { return data.size(); }
    static std::size_t element_count(const std::vector<int>& shape);
    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor scalar(double v) { return Tensor({1}, {v}); }
};

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;  // allocated by backward()
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    // Distributes this node's grad into parents' grads.
    std::function<void(Node&)> backprop;
};

NodePtr leaf(Tensor value, bool requires_grad);
NodePtr constant(Tensor value);

// Elementwise / reduction primitives.
NodePtr add(const NodePtr& a, const NodePtr& b);
NodePtr sub(const NodePtr& a, const NodePtr& b);
NodePtr mul(const NodePtr& a, const NodePtr& b);
NodePtr divide(const NodePtr& a, const NodePtr& b);
NodePtr scale(const NodePtr& a, double factor);
NodePtr add_const(const NodePtr& a, double c);
NodePtr exp_elem(const NodePtr& a);
NodePtr sum(const NodePtr& a);
NodePtr mean(const NodePtr& a);
NodePtr reshape(const NodePtr& a, std::vector<int> new_shape);

enum class Activation { leaky_relu, identity };
constexpr double kLeakySlope = 0.2;
NodePtr activation(const NodePtr& a, Activation kind);

// Channel-first layers; input shape [C, spatial...].
// Conv weights: [Cout, Cin, k, k(, k)], same padding, isotropic stride.
NodePtr conv(const NodePtr& input, const NodePtr& weights,
             const NodePtr& bias, int stride);
// Transposed convolution; weights [Cin, Cout, k, k(, k)].  Without bias
// it is the exact adjoint of conv with the same kernel and stride.
NodePtr deconv(const NodePtr& input, const NodePtr& weights,
               const NodePtr& bias, int stride);
NodePtr dense(const NodePtr& input, const NodePtr& weights,
              const NodePtr& bias);
NodePtr concat(const NodePtr& a, const NodePtr& b);  // along channel axis
NodePtr downsample(const NodePtr& input, int factor);  // average pooling

// z = mu + exp(logvar / 2) * noise; noise carries no gradient.
NodePtr reparameterize(const NodePtr& mu, const NodePtr& logvar,
                       const Tensor& noise);

// Differentiable multilinear warp: image [spatial...], displacement
// [D, spatial...]; out(x) = img(x + u(x)) with border clamping.
NodePtr warp(const NodePtr& image, const NodePtr& displacement);

// u_res(x) = u_in(x) + interp(u_out, x + u_in(x)); both [D, spatial...].
NodePtr compose_displacement(const NodePtr& outer, const NodePtr& inner);

// Scaling and squaring inside the graph, built from compose nodes.
NodePtr exponentiate_node(const NodePtr& velocity, int squaring_steps);

// Separable Gaussian convolution with a fixed (non-trainable) kernel,
// edge replication.  Input [C, spatial...] or [spatial...].
NodePtr gaussian_smooth_node(const NodePtr& input,
                             const std::vector<double>& kernel,
                             int spatial_ndim);

// Reverse-mode sweep from a scalar seed; accumulates into leaf grads.
void backward(const NodePtr& seed);

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    bool ok(double tolerance) const { return max_rel_error <= tolerance; }
};

// Central-difference check of d(build(params))/d(params).  `build` must
// construct a fresh graph on the given leaves and return a scalar node.
// probes_per_tensor < 0 checks every element.
GradCheckReport gradient_check(
    const std::function<NodePtr(const std::vector<NodePtr>&)>& build,
    std::vector<Tensor> params, double step, int probes_per_tensor,
    std::mt19937_64& rng);

// Uniform in +-sqrt(6 / (fan_in + fan_out)).
Tensor glorot_uniform(std::vector<int> shape, int fan_in, int fan_out,
                      std::mt19937_64& rng);

}  // namespace dreg::ad
