#include "dreg/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "dreg/io.hpp"

namespace dreg {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Source coordinate for output voxel x: undo shift, scale, rotation
// (axes 0/1) and mirroring about the grid center.
void source_coord(const AugmentDraw& d, const Grid& g, const int* idx,
                  double* out) {
    const int D = g.ndim();
    double p[3];
    for (int a = 0; a < D; ++a) {
        const double c = 0.5 * (g.dim(a) - 1);
        p[a] = (static_cast<double>(idx[a]) - d.shift[static_cast<size_t>(a)] -
                c) /
               d.scale;
        if (a >= 2) out[a] = p[a];
    }
    const double ca = std::cos(-d.angle_rad), sa = std::sin(-d.angle_rad);
    out[0] = ca * p[0] - sa * p[1];
    out[1] = sa * p[0] + ca * p[1];
    for (int a = 0; a < D; ++a) {
        const double c = 0.5 * (g.dim(a) - 1);
        if (d.mirror[static_cast<size_t>(a)]) out[a] = -out[a];
        out[a] += c;
    }
}

std::vector<ad::Tensor> zero_like(const ModelParams& p) {
    std::vector<ad::Tensor> out;
    out.reserve(p.order.size());
    for (const std::string& name : p.order)
        out.push_back(ad::Tensor(p.at(name).shape));
    return out;
}

}  // namespace

void TrainConfig::validate() const {
    if (learning_rate <= 0.0)
        throw model_error("learning_rate must be positive");
    if (batch_size < 1) throw model_error("batch_size must be >= 1");
    if (epochs < 1) throw model_error("epochs must be >= 1");
    if (weight_decay < 0.0)
        throw model_error("weight_decay must be non-negative");
    if (scale_lo <= 0.0 || scale_hi < scale_lo)
        throw model_error("invalid augmentation scale range");
    if (checkpoint_every < 0)
        throw model_error("checkpoint_every must be >= 0");
}

AdamState AdamState::init(const ModelParams& params) {
    AdamState s;
    s.m = zero_like(params);
    s.v = zero_like(params);
    return s;
}

void adam_step(ModelParams& params, const std::vector<ad::Tensor>& grads,
               AdamState& state, double lr, double beta1, double beta2,
               double eps) {
    if (grads.size() != params.order.size() ||
        state.m.size() != params.order.size())
        throw model_error("adam_step: gradient/state arity mismatch");
    ++state.step;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
    for (std::size_t ti = 0; ti < params.order.size(); ++ti) {
        ad::Tensor& theta = params.at(params.order[ti]);
        const ad::Tensor& g = grads[ti];
        ad::Tensor& m = state.m[ti];
        ad::Tensor& v = state.v[ti];
        if (g.shape != theta.shape)
            throw model_error("adam_step: gradient shape mismatch for " +
                              params.order[ti]);
        for (std::size_t i = 0; i < theta.size(); ++i) {
            m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * g.data[i];
            v.data[i] =
                beta2 * v.data[i] + (1.0 - beta2) * g.data[i] * g.data[i];
            const double mhat = m.data[i] / bc1;
            const double vhat = v.data[i] / bc2;
            theta.data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

AugmentDraw draw_augmentation(const TrainConfig& cfg, const Grid& grid,
                              std::mt19937_64& rng) {
    const int D = grid.ndim();
    AugmentDraw d;
    d.shift.resize(static_cast<size_t>(D));
    d.mirror.resize(static_cast<size_t>(D));
    for (int a = 0; a < D; ++a) {
        const double range = cfg.shift_fraction * grid.dim(a);
        d.shift[static_cast<size_t>(a)] =
            std::uniform_real_distribution<double>(-range, range)(rng);
    }
    const double amax = cfg.rotate_degrees * kPi / 180.0;
    d.angle_rad = std::uniform_real_distribution<double>(-amax, amax)(rng);
    d.scale =
        std::uniform_real_distribution<double>(cfg.scale_lo, cfg.scale_hi)(rng);
    for (int a = 0; a < D; ++a)
        d.mirror[static_cast<size_t>(a)] =
            cfg.mirror && (rng() & 1u) != 0;
    return d;
}

ScalarImage apply_augmentation(const ScalarImage& img, const AugmentDraw& draw,
                               bool nearest_neighbor) {
    const Grid& g = img.grid();
    const int D = g.ndim();
    if (draw.shift.size() != static_cast<size_t>(D) ||
        draw.mirror.size() != static_cast<size_t>(D))
        throw grid_mismatch_error("augmentation draw does not match the grid");
    ScalarImage out(g);
    int idx[3] = {0, 0, 0};
    const std::size_t n = g.voxel_count();
    for (std::size_t lin = 0; lin < n; ++lin) {
        double coord[3];
        source_coord(draw, g, idx, coord);
        if (nearest_neighbor) {
            for (int a = 0; a < D; ++a)
                coord[a] = std::clamp(std::round(coord[a]), 0.0,
                                      static_cast<double>(g.dim(a) - 1));
        }
        out.at(lin) = sample_scalar(img, coord);
        for (int a = D - 1; a >= 0; --a) {
            if (++idx[a] < g.dim(a)) break;
            idx[a] = 0;
        }
    }
    return out;
}

std::string format_step_record(const StepRecord& r) {
    return std::to_string(r.step) + ", " + io::format_number(r.total) + ", " +
           io::format_number(r.reconstruction) + ", " +
           io::format_number(r.kl) + ", " + io::format_number(r.wall_ms);
}

std::string checkpoint_filename(long step) {
    return "ckpt_" + std::to_string(step) + ".bin";
}

TrainResult train(const std::vector<TrainPair>& data, const ModelConfig& mcfg,
                  const TrainConfig& tcfg, const TrainCallbacks& callbacks) {
    mcfg.validate();
    tcfg.validate();
    if (data.empty()) throw model_error("train: empty dataset");
    for (const TrainPair& p : data) {
        if (!p.moving.grid().same_dims(mcfg.grid) ||
            !p.fixed.grid().same_dims(mcfg.grid))
            throw grid_mismatch_error("train: pair does not match model grid");
    }

    std::mt19937_64 rng(tcfg.seed);
    TrainResult result;
    result.params = ModelParams::init(mcfg, rng);
    result.state = AdamState::init(result.params);

    std::vector<ad::Tensor> grad_acc = zero_like(result.params);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::normal_distribution<double> normal(0.0, 1.0);

    int in_batch = 0;
    double batch_total = 0.0, batch_recon = 0.0, batch_kl = 0.0;
    auto batch_start = std::chrono::steady_clock::now();

    auto flush_batch = [&]() {
        const double inv = 1.0 / in_batch;
        for (ad::Tensor& g : grad_acc)
            for (double& x : g.data) x *= inv;
        // L2 weight decay enters through the gradient
        if (tcfg.weight_decay > 0.0) {
            for (std::size_t ti = 0; ti < grad_acc.size(); ++ti) {
                const ad::Tensor& theta =
                    result.params.at(result.params.order[ti]);
                for (std::size_t i = 0; i < theta.size(); ++i)
                    grad_acc[ti].data[i] += tcfg.weight_decay * theta.data[i];
            }
        }
        adam_step(result.params, grad_acc, result.state, tcfg.learning_rate,
                  tcfg.beta1, tcfg.beta2, tcfg.epsilon);
        for (ad::Tensor& g : grad_acc)
            std::fill(g.data.begin(), g.data.end(), 0.0);

        StepRecord rec;
        rec.step = result.state.step;
        rec.total = batch_total * inv;
        rec.reconstruction = batch_recon * inv;
        rec.kl = batch_kl * inv;
        rec.wall_ms =
            std::chrono::duration<double, std::milli>(
                std::chrono::steady_clock::now() - batch_start)
                .count();
        result.history.push_back(rec);
        if (callbacks.on_step) callbacks.on_step(rec);
        if (callbacks.on_checkpoint && tcfg.checkpoint_every > 0 &&
            rec.step % tcfg.checkpoint_every == 0)
            callbacks.on_checkpoint(rec.step, result.params);
        in_batch = 0;
        batch_total = batch_recon = batch_kl = 0.0;
        batch_start = std::chrono::steady_clock::now();
    };

    for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t oi : order) {
            const TrainPair& pair = data[oi];
            const AugmentDraw draw =
                draw_augmentation(tcfg, mcfg.grid, rng);
            ScalarImage moving = apply_augmentation(pair.moving, draw, false);
            ScalarImage fixed = apply_augmentation(pair.fixed, draw, false);
            std::vector<double> noise(static_cast<size_t>(mcfg.latent_dim));
            for (double& x : noise) x = normal(rng);

            LossGraph g =
                build_loss_graph(fixed, moving, result.params, mcfg, noise);
            const double total = g.total->value.data[0];
            if (!std::isfinite(total)) {
                if (callbacks.on_checkpoint)
                    callbacks.on_checkpoint(result.state.step, result.params);
                throw numerical_error(
                    "non-finite loss at optimizer step " +
                    std::to_string(result.state.step + 1));
            }
            ad::backward(g.total);
            for (std::size_t ti = 0; ti < grad_acc.size(); ++ti)
                for (std::size_t i = 0; i < grad_acc[ti].size(); ++i)
                    grad_acc[ti].data[i] += g.leaves[ti]->grad.data[i];
            batch_total += total;
            batch_recon += g.reconstruction->value.data[0];
            batch_kl += g.kl->value.data[0];
            if (++in_batch == tcfg.batch_size) flush_batch();
        }
    }
    if (in_batch > 0) flush_batch();
    if (callbacks.on_checkpoint)
        callbacks.on_checkpoint(result.state.step, result.params);
    return result;
}

}  // namespace dreg
