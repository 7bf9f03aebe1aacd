#include "dreg/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dreg {

namespace {

using ad::NodePtr;
using ad::Tensor;

int spatial_prod(const Grid& g) {
    return static_cast<int>(g.voxel_count());
}

std::vector<int> coarse_dims(const Grid& g) {
    const int f = 1 << ModelConfig::coarse_levels();
    std::vector<int> out;
    for (int d : g.dims()) out.push_back(d / f);
    return out;
}

int kernel_volume(int ndim) {
    int v = 1;
    for (int a = 0; a < ndim; ++a) v *= 3;
    return v;
}

std::vector<int> conv_weight_shape(int cout, int cin, int ndim) {
    std::vector<int> s{cout, cin};
    for (int a = 0; a < ndim; ++a) s.push_back(3);
    return s;
}

// Leaves aligned with params.order, usable as a name -> node map.
struct Leaves {
    std::vector<NodePtr> nodes;
    std::map<std::string, std::size_t> index;

    const NodePtr& at(const std::string& name) const {
        auto it = index.find(name);
        if (it == index.end())
            throw model_error("missing parameter tensor: " + name);
        return nodes[it->second];
    }
};

Leaves make_leaves(const ModelParams& params, bool requires_grad) {
    Leaves l;
    l.nodes.reserve(params.order.size());
    for (std::size_t i = 0; i < params.order.size(); ++i) {
        l.nodes.push_back(
            ad::leaf(params.values.at(params.order[i]), requires_grad));
        l.index.emplace(params.order[i], i);
    }
    return l;
}

NodePtr conv_block(const NodePtr& x, const Leaves& l, const std::string& name,
                   int stride, ad::Activation act) {
    return ad::activation(
        ad::conv(x, l.at(name + ".w"), l.at(name + ".b"), stride), act);
}

NodePtr deconv_block(const NodePtr& x, const Leaves& l,
                     const std::string& name) {
    return ad::activation(
        ad::deconv(x, l.at(name + ".w"), l.at(name + ".b"), 2),
        ad::Activation::leaky_relu);
}

struct EncodeNodes {
    NodePtr mu;
    NodePtr logvar;
};

EncodeNodes encode_graph(const ModelConfig& cfg, const Leaves& l,
                         const NodePtr& pair /* [2, spatial...] */) {
    NodePtr h = conv_block(pair, l, "enc.conv1", 2, ad::Activation::leaky_relu);
    h = conv_block(h, l, "enc.conv2", 2, ad::Activation::leaky_relu);
    h = conv_block(h, l, "enc.conv3", 2, ad::Activation::leaky_relu);
    h = conv_block(h, l, "enc.conv4", 1, ad::Activation::leaky_relu);
    h = ad::reshape(h, {static_cast<int>(h->value.size())});
    NodePtr mu = ad::dense(h, l.at("enc.mu.w"), l.at("enc.mu.b"));
    NodePtr lv = ad::dense(h, l.at("enc.logvar.w"), l.at("enc.logvar.b"));
    (void)cfg;
    return {mu, lv};
}

// z conditioned on the moving image at every upsampling scale.
NodePtr decode_graph(const ModelConfig& cfg, const Leaves& l, const NodePtr& z,
                     const NodePtr& moving /* [1, spatial...] */) {
    const std::vector<int> cd = coarse_dims(cfg.grid);
    std::vector<int> coarse_shape{cfg.encoder_widths[3]};
    for (int d : cd) coarse_shape.push_back(d);

    NodePtr h = ad::activation(
        ad::dense(z, l.at("dec.dense.w"), l.at("dec.dense.b")),
        ad::Activation::leaky_relu);
    h = ad::reshape(h, coarse_shape);

    h = deconv_block(h, l, "dec.deconv1");
    h = ad::concat(h, ad::downsample(moving, 4));
    h = deconv_block(h, l, "dec.deconv2");
    h = ad::concat(h, ad::downsample(moving, 2));
    h = deconv_block(h, l, "dec.deconv3");
    h = ad::concat(h, moving);

    h = conv_block(h, l, "dec.conv1", 1, ad::Activation::leaky_relu);
    h = conv_block(h, l, "dec.conv2", 1, ad::Activation::leaky_relu);
    NodePtr v = conv_block(h, l, "dec.head", 1, ad::Activation::identity);
    return ad::gaussian_smooth_node(
        v, gaussian_kernel(cfg.sigma_s, cfg.smooth_kernel), cfg.grid.ndim());
}

NodePtr moving_tensor_node(const ModelConfig& cfg, const ScalarImage& moving) {
    std::vector<int> shape{1};
    for (int d : cfg.grid.dims()) shape.push_back(d);
    return ad::constant(Tensor(shape, moving.values()));
}

NodePtr pair_tensor_node(const ModelConfig& cfg, const ScalarImage& fixed,
                         const ScalarImage& moving) {
    std::vector<int> shape{2};
    for (int d : cfg.grid.dims()) shape.push_back(d);
    Tensor t(shape);
    std::copy(fixed.values().begin(), fixed.values().end(), t.data.begin());
    std::copy(moving.values().begin(), moving.values().end(),
              t.data.begin() + static_cast<long>(cfg.grid.voxel_count()));
    return ad::constant(std::move(t));
}

void require_model_grid(const ModelConfig& cfg, const ScalarImage& img,
                        const char* what) {
    if (!img.grid().same_dims(cfg.grid))
        throw grid_mismatch_error(std::string(what) +
                                  ": image does not match the model grid");
}

// KL(N(mu, diag exp(lv)) || N(0, I)) as graph nodes.
NodePtr kl_node(const NodePtr& mu, const NodePtr& lv) {
    NodePtr inner =
        ad::add_const(ad::sub(ad::add(ad::mul(mu, mu), ad::exp_elem(lv)), lv),
                      -1.0);
    return ad::scale(ad::sum(inner), 0.5);
}

// -lambda * mean over voxels of the local squared correlation between
// the two half-way warped images.
NodePtr lcc_loss_node(const ModelConfig& cfg, const NodePtr& fixed,
                      const NodePtr& moving, const NodePtr& velocity) {
    const int D = cfg.grid.ndim();
    const auto kernel = gaussian_kernel(cfg.lcc.sigma_g, cfg.lcc.kernel_size);
    NodePtr phi_half = ad::exponentiate_node(ad::scale(velocity, 0.5),
                                             cfg.squaring_steps);
    NodePtr phi_half_neg = ad::exponentiate_node(ad::scale(velocity, -0.5),
                                                 cfg.squaring_steps);
    NodePtr mw = ad::warp(moving, phi_half);
    NodePtr fw = ad::warp(fixed, phi_half_neg);

    NodePtr s_fm = ad::gaussian_smooth_node(ad::mul(fw, mw), kernel, D);
    NodePtr s_ff = ad::gaussian_smooth_node(ad::mul(fw, fw), kernel, D);
    NodePtr s_mm = ad::gaussian_smooth_node(ad::mul(mw, mw), kernel, D);
    NodePtr local = ad::divide(ad::mul(s_fm, s_fm),
                               ad::add_const(ad::mul(s_ff, s_mm),
                                             cfg.lcc.epsilon));
    return ad::scale(ad::mean(local), -cfg.lambda);
}

}  // namespace

void ModelConfig::validate() const {
    if (latent_dim < 1) throw model_error("latent_dim must be >= 1");
    if (lambda <= 0.0) throw model_error("lambda must be positive");
    if (squaring_steps < 0) throw model_error("squaring_steps must be >= 0");
    if (sigma_s <= 0.0) throw model_error("sigma_s must be positive");
    if (smooth_kernel < 1 || smooth_kernel % 2 == 0)
        throw model_error("smooth_kernel must be odd and positive");
    for (int w : encoder_widths)
        if (w < 1) throw model_error("encoder widths must be >= 1");
    for (int w : decoder_widths)
        if (w < 1) throw model_error("decoder widths must be >= 1");
    if (decoder_conv_width < 1)
        throw model_error("decoder_conv_width must be >= 1");
    const int f = 1 << coarse_levels();
    for (int d : grid.dims())
        if (d % f != 0)
            throw model_error("grid extents must be divisible by " +
                              std::to_string(f));
}

ad::Tensor& ModelParams::at(const std::string& name) {
    auto it = values.find(name);
    if (it == values.end())
        throw model_error("missing parameter tensor: " + name);
    return it->second;
}

const ad::Tensor& ModelParams::at(const std::string& name) const {
    auto it = values.find(name);
    if (it == values.end())
        throw model_error("missing parameter tensor: " + name);
    return it->second;
}

std::size_t ModelParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : values) n += t.size();
    return n;
}

ModelParams ModelParams::init(const ModelConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    const int D = cfg.grid.ndim();
    const int kv = kernel_volume(D);
    ModelParams p;
    auto add = [&p](const std::string& name, Tensor t) {
        p.order.push_back(name);
        p.values.emplace(name, std::move(t));
    };
    auto add_conv = [&](const std::string& name, int cin, int cout) {
        add(name + ".w", ad::glorot_uniform(conv_weight_shape(cout, cin, D),
                                            cin * kv, cout * kv, rng));
        add(name + ".b", Tensor({cout}));
    };
    // deconv weights store [Cin, Cout, k...]
    auto add_deconv = [&](const std::string& name, int cin, int cout) {
        add(name + ".w", ad::glorot_uniform(conv_weight_shape(cin, cout, D),
                                            cin * kv, cout * kv, rng));
        add(name + ".b", Tensor({cout}));
    };
    auto add_dense = [&](const std::string& name, int in, int out) {
        add(name + ".w", ad::glorot_uniform({out, in}, in, out, rng));
        add(name + ".b", Tensor({out}));
    };

    const auto& ew = cfg.encoder_widths;
    add_conv("enc.conv1", 2, ew[0]);
    add_conv("enc.conv2", ew[0], ew[1]);
    add_conv("enc.conv3", ew[1], ew[2]);
    add_conv("enc.conv4", ew[2], ew[3]);
    int coarse = ew[3];
    for (int d : coarse_dims(cfg.grid)) coarse *= d;
    add_dense("enc.mu", coarse, cfg.latent_dim);
    add_dense("enc.logvar", coarse, cfg.latent_dim);

    const auto& dw = cfg.decoder_widths;
    add_dense("dec.dense", cfg.latent_dim, coarse);
    add_deconv("dec.deconv1", ew[3], dw[0]);
    add_deconv("dec.deconv2", dw[0] + 1, dw[1]);
    add_deconv("dec.deconv3", dw[1] + 1, dw[2]);
    add_conv("dec.conv1", dw[2] + 1, cfg.decoder_conv_width);
    add_conv("dec.conv2", cfg.decoder_conv_width, cfg.decoder_conv_width);
    add_conv("dec.head", cfg.decoder_conv_width, D);
    return p;
}

ScalarImage normalize_unit_range(const ScalarImage& img) {
    const auto [lo_it, hi_it] =
        std::minmax_element(img.values().begin(), img.values().end());
    const double lo = *lo_it, hi = *hi_it;
    ScalarImage out(img.grid());
    if (hi > lo) {
        const double inv = 1.0 / (hi - lo);
        for (std::size_t i = 0; i < img.values().size(); ++i)
            out.at(i) = (img.at(i) - lo) * inv;
    }
    return out;
}

ad::Tensor image_tensor(const ScalarImage& img) {
    std::vector<int> shape;
    for (int d : img.grid().dims()) shape.push_back(d);
    return Tensor(shape, img.values());
}

ad::Tensor field_tensor(const VectorField& f) {
    const int D = f.grid().ndim();
    const std::size_t n = f.grid().voxel_count();
    std::vector<int> shape{D};
    for (int d : f.grid().dims()) shape.push_back(d);
    Tensor t(shape);
    for (std::size_t v = 0; v < n; ++v)
        for (int c = 0; c < D; ++c)
            t.data[static_cast<size_t>(c) * n + v] = f.component(v, c);
    return t;
}

ScalarImage image_from_tensor(const Grid& g, const ad::Tensor& t) {
    if (t.size() != g.voxel_count())
        throw model_error("image tensor does not match the grid");
    return ScalarImage(g, t.data);
}

VectorField field_from_tensor(const Grid& g, const ad::Tensor& t,
                              FieldKind kind) {
    const int D = g.ndim();
    const std::size_t n = g.voxel_count();
    if (t.size() != n * static_cast<size_t>(D))
        throw model_error("field tensor does not match the grid");
    VectorField f(g, kind);
    for (std::size_t v = 0; v < n; ++v)
        for (int c = 0; c < D; ++c)
            f.component(v, c) = t.data[static_cast<size_t>(c) * n + v];
    return f;
}

EncodeResult encode(const ScalarImage& fixed, const ScalarImage& moving,
                    const ModelParams& params, const ModelConfig& cfg) {
    cfg.validate();
    require_model_grid(cfg, fixed, "encode");
    require_model_grid(cfg, moving, "encode");
    Leaves l = make_leaves(params, false);
    EncodeNodes e = encode_graph(
        cfg, l,
        pair_tensor_node(cfg, normalize_unit_range(fixed),
                         normalize_unit_range(moving)));
    return {e.mu->value.data, e.logvar->value.data};
}

VectorField decode(const std::vector<double>& z, const ScalarImage& moving,
                   const ModelParams& params, const ModelConfig& cfg) {
    cfg.validate();
    require_model_grid(cfg, moving, "decode");
    if (static_cast<int>(z.size()) != cfg.latent_dim)
        throw model_error("latent code dimension mismatch");
    Leaves l = make_leaves(params, false);
    NodePtr zn = ad::constant(Tensor({cfg.latent_dim}, z));
    NodePtr v = decode_graph(
        cfg, l, zn, moving_tensor_node(cfg, normalize_unit_range(moving)));
    return field_from_tensor(cfg.grid, v->value, FieldKind::velocity);
}

RegistrationResult register_pair(const ScalarImage& moving,
                                 const ScalarImage& fixed,
                                 const ModelParams& params,
                                 const ModelConfig& cfg, RegisterMode mode,
                                 std::mt19937_64* rng) {
    cfg.validate();
    require_model_grid(cfg, moving, "register");
    require_model_grid(cfg, fixed, "register");
    const ScalarImage f_n = normalize_unit_range(fixed);
    const ScalarImage m_n = normalize_unit_range(moving);

    Leaves l = make_leaves(params, false);
    EncodeNodes e = encode_graph(cfg, l, pair_tensor_node(cfg, f_n, m_n));

    RegistrationResult r;
    r.latent.mu = e.mu->value.data;
    r.latent.logvar = e.logvar->value.data;
    r.latent.z = r.latent.mu;
    if (mode == RegisterMode::stochastic) {
        if (rng == nullptr)
            throw model_error("stochastic registration needs an rng");
        std::normal_distribution<double> d(0.0, 1.0);
        for (int i = 0; i < cfg.latent_dim; ++i)
            r.latent.z[static_cast<size_t>(i)] +=
                std::exp(0.5 *
                         r.latent.logvar[static_cast<size_t>(i)]) *
                d(*rng);
    }

    NodePtr zn = ad::constant(Tensor({cfg.latent_dim}, r.latent.z));
    NodePtr vn = decode_graph(cfg, l, zn, moving_tensor_node(cfg, m_n));
    r.velocity = field_from_tensor(cfg.grid, vn->value, FieldKind::velocity);
    r.phi = exponentiate(r.velocity, cfg.squaring_steps);
    r.warped = warp_image(m_n, r.phi);

    const FieldStats fs = field_stats(r.phi.displacement());
    r.metrics["rmse"] = rmse(f_n, r.warped);
    r.metrics["lcc"] = lcc(f_n, m_n, r.velocity, cfg.lcc, cfg.squaring_steps);
    r.metrics["mean_magnitude"] = fs.mean_magnitude;
    r.metrics["mean_gradient"] = fs.mean_gradient_magnitude;
    r.metrics["neg_jac_fraction"] = negative_jacobian_fraction(r.phi);
    return r;
}

LossGraph build_loss_graph(const ScalarImage& fixed, const ScalarImage& moving,
                           const ModelParams& params, const ModelConfig& cfg,
                           const std::vector<double>& noise) {
    cfg.validate();
    require_model_grid(cfg, fixed, "loss");
    require_model_grid(cfg, moving, "loss");
    if (static_cast<int>(noise.size()) != cfg.latent_dim)
        throw model_error("noise dimension mismatch");
    const ScalarImage f_n = normalize_unit_range(fixed);
    const ScalarImage m_n = normalize_unit_range(moving);

    Leaves l = make_leaves(params, true);
    EncodeNodes e = encode_graph(cfg, l, pair_tensor_node(cfg, f_n, m_n));
    NodePtr z = ad::reparameterize(e.mu, e.logvar,
                                   Tensor({cfg.latent_dim}, noise));
    NodePtr v = decode_graph(cfg, l, z, moving_tensor_node(cfg, m_n));

    NodePtr fixed_node = ad::constant(image_tensor(f_n));
    NodePtr moving_node = ad::constant(image_tensor(m_n));
    LossGraph g;
    g.reconstruction = lcc_loss_node(cfg, fixed_node, moving_node, v);
    g.kl = kl_node(e.mu, e.logvar);
    g.total = ad::add(g.reconstruction, g.kl);
    g.mu = e.mu;
    g.logvar = e.logvar;
    g.leaves = std::move(l.nodes);
    return g;
}

LossBreakdown loss(const ScalarImage& fixed, const ScalarImage& moving,
                   const ModelParams& params, const ModelConfig& cfg,
                   const std::vector<double>& noise) {
    LossGraph g = build_loss_graph(fixed, moving, params, cfg, noise);
    LossBreakdown b;
    b.total = g.total->value.data[0];
    b.reconstruction = g.reconstruction->value.data[0];
    b.kl = g.kl->value.data[0];
    double sq = 0.0;
    for (const auto& [name, t] : params.values)
        for (double x : t.data) sq += x * x;
    b.weight_penalty = 0.5 * cfg.weight_decay * sq;
    return b;
}

}  // namespace dreg
