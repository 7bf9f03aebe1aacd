#include "dreg/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace dreg::ad {

Tensor::Tensor(std::vector<int> s)
    : shape(std::move(s)), data(element_count(shape), 0.0) {}

Tensor::Tensor(std::vector<int> s, std::vector<double> d)
    : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != element_count(shape))
        throw shape_error("Tensor: data size does not match shape");
}

std::size_t Tensor::element_count(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int e : shape) {
        if (e <= 0) throw shape_error("Tensor: non-positive extent");
        n *= static_cast<size_t>(e);
    }
    return n;
}

namespace {

NodePtr make_node(Tensor value, std::vector<NodePtr> parents,
                  std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->parents = std::move(parents);
    for (const auto& p : n->parents)
        if (p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) n->backprop = std::move(backprop);
    return n;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape != b.shape)
        throw shape_error(std::string(op) + ": shape mismatch");
}

}  // namespace

NodePtr leaf(Tensor value, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return n;
}

NodePtr constant(Tensor value) { return leaf(std::move(value), false); }

// ---------------------------------------------------------------------------
// Elementwise and reduction ops

NodePtr add(const NodePtr& a, const NodePtr& b) {
    require_same_shape(a->value, b->value, "add");
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b->value.data[i];
    return make_node(std::move(out), {a, b}, [](Node& n) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            if (n.parents[0]->requires_grad)
                n.parents[0]->grad.data[i] += n.grad.data[i];
            if (n.parents[1]->requires_grad)
                n.parents[1]->grad.data[i] += n.grad.data[i];
        }
    });
}

NodePtr sub(const NodePtr& a, const NodePtr& b) {
    require_same_shape(a->value, b->value, "sub");
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= b->value.data[i];
    return make_node(std::move(out), {a, b}, [](Node& n) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            if (n.parents[0]->requires_grad)
                n.parents[0]->grad.data[i] += n.grad.data[i];
            if (n.parents[1]->requires_grad)
                n.parents[1]->grad.data[i] -= n.grad.data[i];
        }
    });
}

NodePtr mul(const NodePtr& a, const NodePtr& b) {
    require_same_shape(a->value, b->value, "mul");
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b->value.data[i];
    return make_node(std::move(out), {a, b}, [](Node& n) {
        const auto& av = n.parents[0]->value.data;
        const auto& bv = n.parents[1]->value.data;
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            if (n.parents[0]->requires_grad)
                n.parents[0]->grad.data[i] += n.grad.data[i] * bv[i];
            if (n.parents[1]->requires_grad)
                n.parents[1]->grad.data[i] += n.grad.data[i] * av[i];
        }
    });
}

NodePtr divide(const NodePtr& a, const NodePtr& b) {
    require_same_shape(a->value, b->value, "divide");
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] /= b->value.data[i];
    return make_node(std::move(out), {a, b}, [](Node& n) {
        const auto& av = n.parents[0]->value.data;
        const auto& bv = n.parents[1]->value.data;
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            double inv = 1.0 / bv[i];
            if (n.parents[0]->requires_grad)
                n.parents[0]->grad.data[i] += n.grad.data[i] * inv;
            if (n.parents[1]->requires_grad)
                n.parents[1]->grad.data[i] -= n.grad.data[i] * av[i] * inv * inv;
        }
    });
}

NodePtr scale(const NodePtr& a, double factor) {
    Tensor out = a->value;
    for (double& x : out.data) x *= factor;
    return make_node(std::move(out), {a}, [factor](Node& n) {
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            n.parents[0]->grad.data[i] += n.grad.data[i] * factor;
    });
}

NodePtr add_const(const NodePtr& a, double c) {
    Tensor out = a->value;
    for (double& x : out.data) x += c;
    return make_node(std::move(out), {a}, [](Node& n) {
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            n.parents[0]->grad.data[i] += n.grad.data[i];
    });
}

NodePtr exp_elem(const NodePtr& a) {
    Tensor out = a->value;
    for (double& x : out.data) x = std::exp(x);
    return make_node(std::move(out), {a}, [](Node& n) {
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            n.parents[0]->grad.data[i] += n.grad.data[i] * n.value.data[i];
    });
}

NodePtr sum(const NodePtr& a) {
    double acc = 0.0;
    for (double x : a->value.data) acc += x;
    return make_node(Tensor::scalar(acc), {a}, [](Node& n) {
        const double g = n.grad.data[0];
        for (double& x : n.parents[0]->grad.data) x += g;
    });
}

NodePtr mean(const NodePtr& a) {
    return scale(sum(a), 1.0 / static_cast<double>(a->value.size()));
}

NodePtr reshape(const NodePtr& a, std::vector<int> new_shape) {
    if (Tensor::element_count(new_shape) != a->value.size())
        throw shape_error("reshape: element count changed");
    Tensor out(std::move(new_shape), a->value.data);
    return make_node(std::move(out), {a}, [](Node& n) {
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            n.parents[0]->grad.data[i] += n.grad.data[i];
    });
}

NodePtr activation(const NodePtr& a, Activation kind) {
    if (kind == Activation::identity) return a;
    Tensor out = a->value;
    for (double& x : out.data)
        if (x < 0.0) x *= kLeakySlope;
    return make_node(std::move(out), {a}, [](Node& n) {
        const auto& in = n.parents[0]->value.data;
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            n.parents[0]->grad.data[i] +=
                n.grad.data[i] * (in[i] < 0.0 ? kLeakySlope : 1.0);
    });
}

// ---------------------------------------------------------------------------
// Convolution.  Internally everything runs as 3-D with trailing extents
// padded to 1, so one set of loops serves both D=2 and D=3.

namespace {

struct ConvDims {
    int cin = 1, cout = 1;
    int in[3] = {1, 1, 1};
    int out[3] = {1, 1, 1};
    int k[3] = {1, 1, 1};
    int s[3] = {1, 1, 1};
    int pad[3] = {0, 0, 0};

    std::size_t in_voxels() const {
        return static_cast<size_t>(in[0]) * static_cast<size_t>(in[1]) *
               static_cast<size_t>(in[2]);
    }
    std::size_t out_voxels() const {
        return static_cast<size_t>(out[0]) * static_cast<size_t>(out[1]) *
               static_cast<size_t>(out[2]);
    }
    std::size_t kernel_voxels() const {
        return static_cast<size_t>(k[0]) * static_cast<size_t>(k[1]) *
               static_cast<size_t>(k[2]);
    }
};

// Same-padding dims for conv: out = ceil(in / s).
ConvDims conv_dims(const std::vector<int>& in_shape,
                   const std::vector<int>& w_shape, int stride) {
    const int D = static_cast<int>(w_shape.size()) - 2;
    if (D != 2 && D != 3) throw shape_error("conv: weights must be rank 4 or 5");
    if (static_cast<int>(in_shape.size()) != D + 1)
        throw shape_error("conv: input must be [C, spatial...]");
    if (in_shape[0] != w_shape[1])
        throw shape_error("conv: input channels do not match weights");
    ConvDims d;
    d.cout = w_shape[0];
    d.cin = w_shape[1];
    for (int a = 0; a < D; ++a) {
        d.in[a] = in_shape[static_cast<size_t>(a) + 1];
        d.k[a] = w_shape[static_cast<size_t>(a) + 2];
        d.s[a] = stride;
        d.out[a] = (d.in[a] + stride - 1) / stride;
        int pad_total = std::max((d.out[a] - 1) * stride + d.k[a] - d.in[a], 0);
        d.pad[a] = pad_total / 2;
    }
    return d;
}

// y[co, o] += sum_{ci, t} W[co, ci, t] * x[ci, o*s - pad + t]
void conv_gather(const ConvDims& d, const double* x, const double* W,
                 double* y) {
    const std::size_t inv = d.in_voxels(), outv = d.out_voxels();
    const std::size_t kv = d.kernel_voxels();
    for (int co = 0; co < d.cout; ++co) {
        double* yc = y + static_cast<size_t>(co) * outv;
        for (int o0 = 0; o0 < d.out[0]; ++o0)
            for (int o1 = 0; o1 < d.out[1]; ++o1)
                for (int o2 = 0; o2 < d.out[2]; ++o2) {
                    const int b0 = o0 * d.s[0] - d.pad[0];
                    const int b1 = o1 * d.s[1] - d.pad[1];
                    const int b2 = o2 * d.s[2] - d.pad[2];
                    double acc = 0.0;
                    for (int ci = 0; ci < d.cin; ++ci) {
                        const double* xc = x + static_cast<size_t>(ci) * inv;
                        const double* wc =
                            W + (static_cast<size_t>(co) *
                                     static_cast<size_t>(d.cin) +
                                 static_cast<size_t>(ci)) *
                                    kv;
                        for (int t0 = 0; t0 < d.k[0]; ++t0) {
                            const int i0 = b0 + t0;
                            if (i0 < 0 || i0 >= d.in[0]) continue;
                            for (int t1 = 0; t1 < d.k[1]; ++t1) {
                                const int i1 = b1 + t1;
                                if (i1 < 0 || i1 >= d.in[1]) continue;
                                for (int t2 = 0; t2 < d.k[2]; ++t2) {
                                    const int i2 = b2 + t2;
                                    if (i2 < 0 || i2 >= d.in[2]) continue;
                                    acc += wc[(static_cast<size_t>(t0) *
                                                   static_cast<size_t>(d.k[1]) +
                                               static_cast<size_t>(t1)) *
                                                  static_cast<size_t>(d.k[2]) +
                                              static_cast<size_t>(t2)] *
                                           xc[(static_cast<size_t>(i0) *
                                                   static_cast<size_t>(d.in[1]) +
                                               static_cast<size_t>(i1)) *
                                                  static_cast<size_t>(d.in[2]) +
                                              static_cast<size_t>(i2)];
                                }
                            }
                        }
                    }
                    yc[(static_cast<size_t>(o0) * static_cast<size_t>(d.out[1]) +
                        static_cast<size_t>(o1)) *
                           static_cast<size_t>(d.out[2]) +
                       static_cast<size_t>(o2)] += acc;
                }
    }
}

// x[ci, o*s - pad + t] += sum_co W[co, ci, t] * y[co, o]   (adjoint)
void conv_scatter(const ConvDims& d, const double* y, const double* W,
                  double* x) {
    const std::size_t inv = d.in_voxels(), outv = d.out_voxels();
    const std::size_t kv = d.kernel_voxels();
    for (int co = 0; co < d.cout; ++co) {
        const double* yc = y + static_cast<size_t>(co) * outv;
        for (int o0 = 0; o0 < d.out[0]; ++o0)
            for (int o1 = 0; o1 < d.out[1]; ++o1)
                for (int o2 = 0; o2 < d.out[2]; ++o2) {
                    const double g =
                        yc[(static_cast<size_t>(o0) *
                                static_cast<size_t>(d.out[1]) +
                            static_cast<size_t>(o1)) *
                               static_cast<size_t>(d.out[2]) +
                           static_cast<size_t>(o2)];
                    if (g == 0.0) continue;
                    const int b0 = o0 * d.s[0] - d.pad[0];
                    const int b1 = o1 * d.s[1] - d.pad[1];
                    const int b2 = o2 * d.s[2] - d.pad[2];
                    for (int ci = 0; ci < d.cin; ++ci) {
                        double* xc = x + static_cast<size_t>(ci) * inv;
                        const double* wc =
                            W + (static_cast<size_t>(co) *
                                     static_cast<size_t>(d.cin) +
                                 static_cast<size_t>(ci)) *
                                    kv;
                        for (int t0 = 0; t0 < d.k[0]; ++t0) {
                            const int i0 = b0 + t0;
                            if (i0 < 0 || i0 >= d.in[0]) continue;
                            for (int t1 = 0; t1 < d.k[1]; ++t1) {
                                const int i1 = b1 + t1;
                                if (i1 < 0 || i1 >= d.in[1]) continue;
                                for (int t2 = 0; t2 < d.k[2]; ++t2) {
                                    const int i2 = b2 + t2;
                                    if (i2 < 0 || i2 >= d.in[2]) continue;
                                    xc[(static_cast<size_t>(i0) *
                                            static_cast<size_t>(d.in[1]) +
                                        static_cast<size_t>(i1)) *
                                           static_cast<size_t>(d.in[2]) +
                                       static_cast<size_t>(i2)] +=
                                        g * wc[(static_cast<size_t>(t0) *
                                                    static_cast<size_t>(d.k[1]) +
                                                static_cast<size_t>(t1)) *
                                                   static_cast<size_t>(d.k[2]) +
                                               static_cast<size_t>(t2)];
                                }
                            }
                        }
                    }
                }
    }
}

// Wg[co, ci, t] += sum_o y[co, o] * x[ci, o*s - pad + t]
void conv_weight_grad(const ConvDims& d, const double* x, const double* y,
                      double* Wg) {
    const std::size_t inv = d.in_voxels(), outv = d.out_voxels();
    const std::size_t kv = d.kernel_voxels();
    for (int co = 0; co < d.cout; ++co) {
        const double* yc = y + static_cast<size_t>(co) * outv;
        for (int o0 = 0; o0 < d.out[0]; ++o0)
            for (int o1 = 0; o1 < d.out[1]; ++o1)
                for (int o2 = 0; o2 < d.out[2]; ++o2) {
                    const double g =
                        yc[(static_cast<size_t>(o0) *
                                static_cast<size_t>(d.out[1]) +
                            static_cast<size_t>(o1)) *
                               static_cast<size_t>(d.out[2]) +
                           static_cast<size_t>(o2)];
                    if (g == 0.0) continue;
                    const int b0 = o0 * d.s[0] - d.pad[0];
                    const int b1 = o1 * d.s[1] - d.pad[1];
                    const int b2 = o2 * d.s[2] - d.pad[2];
                    for (int ci = 0; ci < d.cin; ++ci) {
                        const double* xc = x + static_cast<size_t>(ci) * inv;
                        double* wc =
                            Wg + (static_cast<size_t>(co) *
                                      static_cast<size_t>(d.cin) +
                                  static_cast<size_t>(ci)) *
                                     kv;
                        for (int t0 = 0; t0 < d.k[0]; ++t0) {
                            const int i0 = b0 + t0;
                            if (i0 < 0 || i0 >= d.in[0]) continue;
                            for (int t1 = 0; t1 < d.k[1]; ++t1) {
                                const int i1 = b1 + t1;
                                if (i1 < 0 || i1 >= d.in[1]) continue;
                                for (int t2 = 0; t2 < d.k[2]; ++t2) {
                                    const int i2 = b2 + t2;
                                    if (i2 < 0 || i2 >= d.in[2]) continue;
                                    wc[(static_cast<size_t>(t0) *
                                            static_cast<size_t>(d.k[1]) +
                                        static_cast<size_t>(t1)) *
                                           static_cast<size_t>(d.k[2]) +
                                       static_cast<size_t>(t2)] +=
                                        g * xc[(static_cast<size_t>(i0) *
                                                    static_cast<size_t>(d.in[1]) +
                                                static_cast<size_t>(i1)) *
                                                   static_cast<size_t>(d.in[2]) +
                                               static_cast<size_t>(i2)];
                                }
                            }
                        }
                    }
                }
    }
}

}  // namespace

NodePtr conv(const NodePtr& input, const NodePtr& weights,
             const NodePtr& bias, int stride) {
    ConvDims d = conv_dims(input->value.shape, weights->value.shape, stride);
    const int D = static_cast<int>(weights->value.shape.size()) - 2;
    if (bias->value.shape != std::vector<int>{d.cout})
        throw shape_error("conv: bias must be [Cout]");

    std::vector<int> out_shape{d.cout};
    for (int a = 0; a < D; ++a) out_shape.push_back(d.out[a]);
    Tensor out(out_shape);
    const std::size_t outv = d.out_voxels();
    for (int co = 0; co < d.cout; ++co)
        std::fill_n(out.data.begin() +
                        static_cast<std::ptrdiff_t>(static_cast<size_t>(co) * outv),
                    outv, bias->value.data[static_cast<size_t>(co)]);
    conv_gather(d, input->value.data.data(), weights->value.data.data(),
                out.data.data());

    return make_node(std::move(out), {input, weights, bias}, [d](Node& n) {
        const auto& x = n.parents[0];
        const auto& W = n.parents[1];
        const auto& b = n.parents[2];
        if (x->requires_grad)
            conv_scatter(d, n.grad.data.data(), W->value.data.data(),
                         x->grad.data.data());
        if (W->requires_grad)
            conv_weight_grad(d, x->value.data.data(), n.grad.data.data(),
                             W->grad.data.data());
        if (b->requires_grad) {
            const std::size_t outv = d.out_voxels();
            for (int co = 0; co < d.cout; ++co) {
                double acc = 0.0;
                for (std::size_t i = 0; i < outv; ++i)
                    acc += n.grad.data[static_cast<size_t>(co) * outv + i];
                b->grad.data[static_cast<size_t>(co)] += acc;
            }
        }
    });
}

NodePtr deconv(const NodePtr& input, const NodePtr& weights,
               const NodePtr& bias, int stride) {
    // Weights [Cin, Cout, k...]; output spatial extent = input * stride.
    const auto& ws = weights->value.shape;
    const int D = static_cast<int>(ws.size()) - 2;
    if (D != 2 && D != 3) throw shape_error("deconv: weights must be rank 4 or 5");
    const auto& is = input->value.shape;
    if (static_cast<int>(is.size()) != D + 1 || is[0] != ws[0])
        throw shape_error("deconv: input channels do not match weights");
    const int cout = ws[1];
    if (bias->value.shape != std::vector<int>{cout})
        throw shape_error("deconv: bias must be [Cout]");

    std::vector<int> big_shape{cout};
    for (int a = 0; a < D; ++a)
        big_shape.push_back(is[static_cast<size_t>(a) + 1] * stride);
    // The adjoint view: conv from the big (output) side down to the input.
    ConvDims d = conv_dims(big_shape, ws, stride);
    for (int a = 0; a < D; ++a) {
        if (d.out[a] != is[static_cast<size_t>(a) + 1])
            throw shape_error("deconv: inconsistent extents");
    }

    Tensor out(big_shape);
    const std::size_t big_v = d.in_voxels();
    for (int co = 0; co < cout; ++co)
        std::fill_n(out.data.begin() + static_cast<std::ptrdiff_t>(
                                           static_cast<size_t>(co) * big_v),
                    big_v, bias->value.data[static_cast<size_t>(co)]);
    conv_scatter(d, input->value.data.data(), weights->value.data.data(),
                 out.data.data());

    return make_node(std::move(out), {input, weights, bias}, [d, cout](Node& n) {
        const auto& y = n.parents[0];  // deconv input (small side)
        const auto& W = n.parents[1];
        const auto& b = n.parents[2];
        if (y->requires_grad)
            conv_gather(d, n.grad.data.data(), W->value.data.data(),
                        y->grad.data.data());
        if (W->requires_grad)
            conv_weight_grad(d, n.grad.data.data(), y->value.data.data(),
                             W->grad.data.data());
        if (b->requires_grad) {
            const std::size_t big_v = d.in_voxels();
            for (int co = 0; co < cout; ++co) {
                double acc = 0.0;
                for (std::size_t i = 0; i < big_v; ++i)
                    acc += n.grad.data[static_cast<size_t>(co) * big_v + i];
                b->grad.data[static_cast<size_t>(co)] += acc;
            }
        }
    });
}

NodePtr dense(const NodePtr& input, const NodePtr& weights,
              const NodePtr& bias) {
    const auto& ws = weights->value.shape;
    if (ws.size() != 2) throw shape_error("dense: weights must be rank 2");
    const int n_out = ws[0], n_in = ws[1];
    if (static_cast<int>(input->value.size()) != n_in)
        throw shape_error("dense: input size does not match weights");
    if (bias->value.shape != std::vector<int>{n_out})
        throw shape_error("dense: bias must be [n_out]");

    Tensor out({n_out});
    for (int o = 0; o < n_out; ++o) {
        double acc = bias->value.data[static_cast<size_t>(o)];
        const double* wrow =
            weights->value.data.data() +
            static_cast<size_t>(o) * static_cast<size_t>(n_in);
        for (int i = 0; i < n_in; ++i)
            acc += wrow[i] * input->value.data[static_cast<size_t>(i)];
        out.data[static_cast<size_t>(o)] = acc;
    }
    return make_node(std::move(out), {input, weights, bias},
                     [n_out, n_in](Node& n) {
                         const auto& x = n.parents[0];
                         const auto& W = n.parents[1];
                         const auto& b = n.parents[2];
                         for (int o = 0; o < n_out; ++o) {
                             const double g = n.grad.data[static_cast<size_t>(o)];
                             const double* wrow =
                                 W->value.data.data() +
                                 static_cast<size_t>(o) *
                                     static_cast<size_t>(n_in);
                             if (x->requires_grad)
                                 for (int i = 0; i < n_in; ++i)
                                     x->grad.data[static_cast<size_t>(i)] +=
                                         g * wrow[i];
                             if (W->requires_grad) {
                                 double* wg =
                                     W->grad.data.data() +
                                     static_cast<size_t>(o) *
                                         static_cast<size_t>(n_in);
                                 for (int i = 0; i < n_in; ++i)
                                     wg[i] +=
                                         g * x->value.data[static_cast<size_t>(i)];
                             }
                             if (b->requires_grad)
                                 b->grad.data[static_cast<size_t>(o)] += g;
                         }
                     });
}

NodePtr concat(const NodePtr& a, const NodePtr& b) {
    const auto& as = a->value.shape;
    const auto& bs = b->value.shape;
    if (as.size() != bs.size() || as.size() < 2)
        throw shape_error("concat: rank mismatch");
    for (std::size_t i = 1; i < as.size(); ++i)
        if (as[i] != bs[i]) throw shape_error("concat: spatial shape mismatch");

    std::vector<int> out_shape = as;
    out_shape[0] = as[0] + bs[0];
    Tensor out(out_shape);
    std::copy(a->value.data.begin(), a->value.data.end(), out.data.begin());
    std::copy(b->value.data.begin(), b->value.data.end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(a->value.size()));
    const std::size_t na = a->value.size();
    return make_node(std::move(out), {a, b}, [na](Node& n) {
        if (n.parents[0]->requires_grad)
            for (std::size_t i = 0; i < na; ++i)
                n.parents[0]->grad.data[i] += n.grad.data[i];
        if (n.parents[1]->requires_grad) {
            const std::size_t nb = n.parents[1]->value.size();
            for (std::size_t i = 0; i < nb; ++i)
                n.parents[1]->grad.data[i] += n.grad.data[na + i];
        }
    });
}

NodePtr downsample(const NodePtr& input, int factor) {
    if (factor < 1) throw shape_error("downsample: factor must be >= 1");
    if (factor == 1) return input;
    const auto& is = input->value.shape;
    if (is.size() < 2) throw shape_error("downsample: input must be [C, sp...]");
    const int D = static_cast<int>(is.size()) - 1;
    int in[3] = {1, 1, 1}, out[3] = {1, 1, 1};
    for (int a = 0; a < D; ++a) {
        in[a] = is[static_cast<size_t>(a) + 1];
        if (in[a] % factor != 0)
            throw shape_error("downsample: extent not divisible by factor");
        out[a] = in[a] / factor;
    }
    const int C = is[0];
    std::vector<int> out_shape{C};
    for (int a = 0; a < D; ++a) out_shape.push_back(out[a]);
    Tensor result(out_shape);
    const std::size_t inv = static_cast<size_t>(in[0]) *
                            static_cast<size_t>(in[1]) *
                            static_cast<size_t>(in[2]);
    const std::size_t outv = static_cast<size_t>(out[0]) *
                             static_cast<size_t>(out[1]) *
                             static_cast<size_t>(out[2]);
    const int f2 = (D == 3) ? factor : 1;
    const double inv_count = 1.0 / static_cast<double>(factor * factor * f2);
    auto in_lin = [&](int i0, int i1, int i2) {
        return (static_cast<size_t>(i0) * static_cast<size_t>(in[1]) +
                static_cast<size_t>(i1)) *
                   static_cast<size_t>(in[2]) +
               static_cast<size_t>(i2);
    };
    for (int c = 0; c < C; ++c) {
        const double* src = input->value.data.data() + static_cast<size_t>(c) * inv;
        double* dst = result.data.data() + static_cast<size_t>(c) * outv;
        std::size_t w = 0;
        for (int o0 = 0; o0 < out[0]; ++o0)
            for (int o1 = 0; o1 < out[1]; ++o1)
                for (int o2 = 0; o2 < out[2]; ++o2, ++w) {
                    double acc = 0.0;
                    for (int t0 = 0; t0 < factor; ++t0)
                        for (int t1 = 0; t1 < factor; ++t1)
                            for (int t2 = 0; t2 < f2; ++t2)
                                acc += src[in_lin(o0 * factor + t0,
                                                  o1 * factor + t1,
                                                  o2 * f2 + t2)];
                    dst[w] = acc * inv_count;
                }
    }
    int cin[3] = {in[0], in[1], in[2]}, cout_sp[3] = {out[0], out[1], out[2]};
    return make_node(std::move(result), {input},
                     [C, factor, f2, inv_count, cin, cout_sp, inv,
                      outv](Node& n) {
                         auto lin = [&cin](int i0, int i1, int i2) {
                             return (static_cast<size_t>(i0) *
                                         static_cast<size_t>(cin[1]) +
                                     static_cast<size_t>(i1)) *
                                        static_cast<size_t>(cin[2]) +
                                    static_cast<size_t>(i2);
                         };
                         for (int c = 0; c < C; ++c) {
                             double* gx = n.parents[0]->grad.data.data() +
                                          static_cast<size_t>(c) * inv;
                             const double* gy = n.grad.data.data() +
                                                static_cast<size_t>(c) * outv;
                             std::size_t w = 0;
                             for (int o0 = 0; o0 < cout_sp[0]; ++o0)
                                 for (int o1 = 0; o1 < cout_sp[1]; ++o1)
                                     for (int o2 = 0; o2 < cout_sp[2];
                                          ++o2, ++w) {
                                         const double g = gy[w] * inv_count;
                                         for (int t0 = 0; t0 < factor; ++t0)
                                             for (int t1 = 0; t1 < factor; ++t1)
                                                 for (int t2 = 0; t2 < f2; ++t2)
                                                     gx[lin(
                                                         o0 * factor + t0,
                                                         o1 * factor + t1,
                                                         o2 * f2 + t2)] += g;
                                     }
                         }
                     });
}

NodePtr reparameterize(const NodePtr& mu, const NodePtr& logvar,
                       const Tensor& noise) {
    require_same_shape(mu->value, logvar->value, "reparameterize");
    if (noise.shape != mu->value.shape)
        throw shape_error("reparameterize: noise shape mismatch");
    NodePtr sigma = exp_elem(scale(logvar, 0.5));
    return add(mu, mul(sigma, constant(noise)));
}

// ---------------------------------------------------------------------------
// Differentiable sampling (warp, composition)

namespace {

struct SampleGeom {
    int D = 2;
    int dim[3] = {1, 1, 1};
    std::size_t nvox = 0;

    std::size_t lin(const int* idx) const {
        std::size_t l = 0;
        for (int a = 0; a < D; ++a)
            l = l * static_cast<size_t>(dim[a]) + static_cast<size_t>(idx[a]);
        return l;
    }
};

SampleGeom geom_from_spatial(const std::vector<int>& shape, std::size_t skip) {
    SampleGeom g;
    g.D = static_cast<int>(shape.size() - skip);
    if (g.D != 2 && g.D != 3) throw shape_error("sampling: spatial rank must be 2 or 3");
    g.nvox = 1;
    for (int a = 0; a < g.D; ++a) {
        g.dim[a] = shape[skip + static_cast<size_t>(a)];
        g.nvox *= static_cast<size_t>(g.dim[a]);
    }
    return g;
}

// Corner indices, weights and weight derivatives for one clamped
// multilinear sample.  dw[a][m] is d(weight_m)/d(coord_a); zero when the
// coordinate was clamped outside the domain.
struct SampleTaps {
    std::size_t corner[8];
    double w[8];
    double dw[3][8];
    int corners;
};

void sample_taps(const SampleGeom& g, const double* coord, SampleTaps& t) {
    int lo[3];
    double frac[3];
    bool clamped[3];
    for (int a = 0; a < g.D; ++a) {
        double x = coord[a];
        if (!std::isfinite(x)) x = 0.0;  // keeps indices valid; the loss
                                         // check reports the blow-up
        const double hi = static_cast<double>(g.dim[a] - 1);
        clamped[a] = (x < 0.0 || x > hi);
        if (x < 0.0) x = 0.0;
        if (x > hi) x = hi;
        int i = static_cast<int>(std::floor(x));
        if (i > g.dim[a] - 2) i = g.dim[a] - 2;
        lo[a] = i;
        frac[a] = x - static_cast<double>(i);
    }
    t.corners = 1 << g.D;
    for (int m = 0; m < t.corners; ++m) {
        int idx[3];
        double w = 1.0;
        for (int a = 0; a < g.D; ++a) {
            const int bit = (m >> a) & 1;
            idx[a] = lo[a] + bit;
            w *= bit ? frac[a] : 1.0 - frac[a];
        }
        t.corner[m] = g.lin(idx);
        t.w[m] = w;
        for (int a = 0; a < g.D; ++a) {
            if (clamped[a]) {
                t.dw[a][m] = 0.0;
                continue;
            }
            double dw = 1.0;
            for (int b = 0; b < g.D; ++b) {
                const int bit = (m >> b) & 1;
                if (b == a)
                    dw *= bit ? 1.0 : -1.0;
                else
                    dw *= bit ? frac[b] : 1.0 - frac[b];
            }
            t.dw[a][m] = dw;
        }
    }
}

}  // namespace

NodePtr warp(const NodePtr& image, const NodePtr& displacement) {
    SampleGeom g = geom_from_spatial(image->value.shape, 0);
    const auto& ds = displacement->value.shape;
    if (static_cast<int>(ds.size()) != g.D + 1 || ds[0] != g.D)
        throw shape_error("warp: displacement must be [D, spatial...]");
    for (int a = 0; a < g.D; ++a)
        if (ds[static_cast<size_t>(a) + 1] != g.dim[a])
            throw shape_error("warp: grid mismatch");

    Tensor out(image->value.shape);
    const double* img = image->value.data.data();
    const double* disp = displacement->value.data.data();
    int idx[3] = {0, 0, 0};
    for (std::size_t v = 0; v < g.nvox; ++v) {
        double coord[3];
        for (int a = 0; a < g.D; ++a)
            coord[a] = static_cast<double>(idx[a]) +
                       disp[static_cast<size_t>(a) * g.nvox + v];
        SampleTaps t;
        sample_taps(g, coord, t);
        double acc = 0.0;
        for (int m = 0; m < t.corners; ++m) acc += t.w[m] * img[t.corner[m]];
        out.data[v] = acc;
        for (int a = g.D - 1; a >= 0; --a) {
            if (++idx[a] < g.dim[a]) break;
            idx[a] = 0;
        }
    }

    return make_node(std::move(out), {image, displacement}, [g](Node& n) {
        const auto& image = n.parents[0];
        const auto& displacement = n.parents[1];
        const double* img = image->value.data.data();
        const double* disp = displacement->value.data.data();
        int idx[3] = {0, 0, 0};
        for (std::size_t v = 0; v < g.nvox; ++v) {
            const double gout = n.grad.data[v];
            if (gout != 0.0) {
                double coord[3];
                for (int a = 0; a < g.D; ++a)
                    coord[a] = static_cast<double>(idx[a]) +
                               disp[static_cast<size_t>(a) * g.nvox + v];
                SampleTaps t;
                sample_taps(g, coord, t);
                if (image->requires_grad)
                    for (int m = 0; m < t.corners; ++m)
                        image->grad.data[t.corner[m]] += gout * t.w[m];
                if (displacement->requires_grad) {
                    for (int a = 0; a < g.D; ++a) {
                        double d = 0.0;
                        for (int m = 0; m < t.corners; ++m)
                            d += t.dw[a][m] * img[t.corner[m]];
                        displacement->grad
                            .data[static_cast<size_t>(a) * g.nvox + v] +=
                            gout * d;
                    }
                }
            }
            for (int a = g.D - 1; a >= 0; --a) {
                if (++idx[a] < g.dim[a]) break;
                idx[a] = 0;
            }
        }
    });
}

NodePtr compose_displacement(const NodePtr& outer, const NodePtr& inner) {
    require_same_shape(outer->value, inner->value, "compose_displacement");
    SampleGeom g = geom_from_spatial(outer->value.shape, 1);
    if (outer->value.shape[0] != g.D)
        throw shape_error("compose_displacement: field must be [D, spatial...]");

    Tensor out(outer->value.shape);
    const double* uo = outer->value.data.data();
    const double* ui = inner->value.data.data();
    int idx[3] = {0, 0, 0};
    for (std::size_t v = 0; v < g.nvox; ++v) {
        double coord[3];
        for (int a = 0; a < g.D; ++a)
            coord[a] = static_cast<double>(idx[a]) +
                       ui[static_cast<size_t>(a) * g.nvox + v];
        SampleTaps t;
        sample_taps(g, coord, t);
        for (int c = 0; c < g.D; ++c) {
            double acc = ui[static_cast<size_t>(c) * g.nvox + v];
            const double* plane = uo + static_cast<size_t>(c) * g.nvox;
            for (int m = 0; m < t.corners; ++m)
                acc += t.w[m] * plane[t.corner[m]];
            out.data[static_cast<size_t>(c) * g.nvox + v] = acc;
        }
        for (int a = g.D - 1; a >= 0; --a) {
            if (++idx[a] < g.dim[a]) break;
            idx[a] = 0;
        }
    }

    return make_node(std::move(out), {outer, inner}, [g](Node& n) {
        const auto& outer = n.parents[0];
        const auto& inner = n.parents[1];
        const double* uo = outer->value.data.data();
        const double* ui = inner->value.data.data();
        int idx[3] = {0, 0, 0};
        for (std::size_t v = 0; v < g.nvox; ++v) {
            double coord[3];
            for (int a = 0; a < g.D; ++a)
                coord[a] = static_cast<double>(idx[a]) +
                           ui[static_cast<size_t>(a) * g.nvox + v];
            SampleTaps t;
            sample_taps(g, coord, t);
            for (int c = 0; c < g.D; ++c) {
                const double gout = n.grad.data[static_cast<size_t>(c) * g.nvox + v];
                if (gout == 0.0) continue;
                // direct term
                if (inner->requires_grad)
                    inner->grad.data[static_cast<size_t>(c) * g.nvox + v] += gout;
                const double* plane = uo + static_cast<size_t>(c) * g.nvox;
                if (outer->requires_grad) {
                    double* gplane =
                        outer->grad.data.data() + static_cast<size_t>(c) * g.nvox;
                    for (int m = 0; m < t.corners; ++m)
                        gplane[t.corner[m]] += gout * t.w[m];
                }
                if (inner->requires_grad) {
                    for (int a = 0; a < g.D; ++a) {
                        double d = 0.0;
                        for (int m = 0; m < t.corners; ++m)
                            d += t.dw[a][m] * plane[t.corner[m]];
                        inner->grad.data[static_cast<size_t>(a) * g.nvox + v] +=
                            gout * d;
                    }
                }
            }
            for (int a = g.D - 1; a >= 0; --a) {
                if (++idx[a] < g.dim[a]) break;
                idx[a] = 0;
            }
        }
    });
}

NodePtr exponentiate_node(const NodePtr& velocity, int squaring_steps) {
    if (squaring_steps < 0)
        throw shape_error("exponentiate_node: N must be >= 0");
    NodePtr u = scale(velocity, std::ldexp(1.0, -squaring_steps));
    for (int k = 0; k < squaring_steps; ++k) u = compose_displacement(u, u);
    return u;
}

// ---------------------------------------------------------------------------
// Gaussian smoothing node (fixed kernel, edge replication)

namespace {

// One smoothing pass along `axis` of a [C, sp...] buffer; adjoint=false
// clamps the read index, adjoint=true scatters into the clamped index.
void smooth_pass(const SampleGeom& g, int channels, int axis,
                 const std::vector<double>& kernel, const double* in,
                 double* out, bool adjoint) {
    const int half = static_cast<int>(kernel.size()) / 2;
    std::size_t stride = 1;
    for (int a = axis + 1; a < g.D; ++a) stride *= static_cast<size_t>(g.dim[a]);
    for (int c = 0; c < channels; ++c) {
        const double* src = in + static_cast<size_t>(c) * g.nvox;
        double* dst = out + static_cast<size_t>(c) * g.nvox;
        int idx[3] = {0, 0, 0};
        for (std::size_t v = 0; v < g.nvox; ++v) {
            if (adjoint) {
                const double gv = src[v];
                for (int t = -half; t <= half; ++t) {
                    int j = idx[axis] + t;
                    if (j < 0) j = 0;
                    if (j > g.dim[axis] - 1) j = g.dim[axis] - 1;
                    const std::ptrdiff_t off =
                        static_cast<std::ptrdiff_t>(j - idx[axis]) *
                        static_cast<std::ptrdiff_t>(stride);
                    dst[static_cast<std::size_t>(
                        static_cast<std::ptrdiff_t>(v) + off)] +=
                        gv * kernel[static_cast<size_t>(t + half)];
                }
            } else {
                double acc = 0.0;
                for (int t = -half; t <= half; ++t) {
                    int j = idx[axis] + t;
                    if (j < 0) j = 0;
                    if (j > g.dim[axis] - 1) j = g.dim[axis] - 1;
                    const std::ptrdiff_t off =
                        static_cast<std::ptrdiff_t>(j - idx[axis]) *
                        static_cast<std::ptrdiff_t>(stride);
                    acc += kernel[static_cast<size_t>(t + half)] *
                           src[static_cast<std::size_t>(
                               static_cast<std::ptrdiff_t>(v) + off)];
                }
                dst[v] = acc;
            }
            for (int a = g.D - 1; a >= 0; --a) {
                if (++idx[a] < g.dim[a]) break;
                idx[a] = 0;
            }
        }
    }
}

}  // namespace

NodePtr gaussian_smooth_node(const NodePtr& input,
                             const std::vector<double>& kernel,
                             int spatial_ndim) {
    const auto& shape = input->value.shape;
    const std::size_t skip = shape.size() - static_cast<size_t>(spatial_ndim);
    if (skip > 1) throw shape_error("gaussian_smooth_node: bad rank");
    SampleGeom g = geom_from_spatial(shape, skip);
    const int channels = (skip == 1) ? shape[0] : 1;

    Tensor out(shape);
    std::vector<double> tmp(input->value.data.size());
    std::vector<double> buf_a = input->value.data;
    for (int axis = 0; axis < g.D; ++axis) {
        smooth_pass(g, channels, axis, kernel, buf_a.data(), tmp.data(), false);
        std::swap(buf_a, tmp);
    }
    out.data = std::move(buf_a);

    return make_node(std::move(out), {input}, [g, channels, kernel](Node& n) {
        std::vector<double> acc = n.grad.data;
        std::vector<double> tmp(acc.size());
        // Adjoint of each pass, applied in reverse order.
        for (int axis = g.D - 1; axis >= 0; --axis) {
            std::fill(tmp.begin(), tmp.end(), 0.0);
            smooth_pass(g, channels, axis, kernel, acc.data(), tmp.data(), true);
            std::swap(acc, tmp);
        }
        for (std::size_t i = 0; i < acc.size(); ++i)
            n.parents[0]->grad.data[i] += acc[i];
    });
}

// ---------------------------------------------------------------------------
// Backward sweep

void backward(const NodePtr& seed) {
    if (seed->value.size() != 1)
        throw shape_error("backward: seed must be scalar");

    // Iterative topological sort over parents.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<NodePtr, std::size_t>> stack;
    stack.emplace_back(seed, 0);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next == 0 && visited.count(node.get())) {
            stack.pop_back();
            continue;
        }
        if (next < node->parents.size()) {
            NodePtr child = node->parents[next++];
            if (!visited.count(child.get()) && child->requires_grad)
                stack.emplace_back(child, 0);
        } else {
            visited.insert(node.get());
            order.push_back(node.get());
            stack.pop_back();
        }
    }

    for (Node* n : order) {
        if (n->grad.data.size() != n->value.size())
            n->grad = Tensor(n->value.shape);
        else
            std::fill(n->grad.data.begin(), n->grad.data.end(), 0.0);
    }
    seed->grad.data[0] = 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop) {
            // Parents' grads must exist even if accumulation skips them.
            for (auto& p : n->parents)
                if (p->requires_grad && p->grad.data.size() != p->value.size())
                    p->grad = Tensor(p->value.shape);
            n->backprop(*n);
        }
    }
}

// ---------------------------------------------------------------------------
// Gradient checking

GradCheckReport gradient_check(
    const std::function<NodePtr(const std::vector<NodePtr>&)>& build,
    std::vector<Tensor> params, double step, int probes_per_tensor,
    std::mt19937_64& rng) {
    std::vector<NodePtr> leaves;
    leaves.reserve(params.size());
    for (auto& p : params) leaves.push_back(leaf(p, true));
    NodePtr out = build(leaves);
    backward(out);

    auto eval = [&](const std::vector<Tensor>& ps) {
        std::vector<NodePtr> ls;
        ls.reserve(ps.size());
        for (const auto& p : ps) ls.push_back(leaf(p, false));
        return build(ls)->value.data[0];
    };

    GradCheckReport report;
    for (std::size_t t = 0; t < params.size(); ++t) {
        const std::size_t n = params[t].size();
        std::vector<std::size_t> indices;
        if (probes_per_tensor < 0 ||
            static_cast<std::size_t>(probes_per_tensor) >= n) {
            indices.resize(n);
            for (std::size_t i = 0; i < n; ++i) indices[i] = i;
        } else {
            std::uniform_int_distribution<std::size_t> pick(0, n - 1);
            for (int i = 0; i < probes_per_tensor; ++i)
                indices.push_back(pick(rng));
        }
        for (std::size_t i : indices) {
            const double saved = params[t].data[i];
            params[t].data[i] = saved + step;
            const double f_plus = eval(params);
            params[t].data[i] = saved - step;
            const double f_minus = eval(params);
            params[t].data[i] = saved;
            const double fd = (f_plus - f_minus) / (2.0 * step);
            const double an = leaves[t]->grad.data[i];
            const double denom = std::max({std::abs(fd), std::abs(an), 1e-3});
            report.max_rel_error =
                std::max(report.max_rel_error, std::abs(fd - an) / denom);
            ++report.checked;
        }
    }
    return report;
}

Tensor glorot_uniform(std::vector<int> shape, int fan_in, int fan_out,
                      std::mt19937_64& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Tensor t(std::move(shape));
    for (double& x : t.data) x = dist(rng);
    return t;
}

}  // namespace dreg::ad
