#include "dreg/latent.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include <Eigen/Dense>

namespace dreg {

namespace {

RegistrationResult apply_code(const std::vector<double>& z,
                              const ScalarImage& moving,
                              const ModelParams& params,
                              const ModelConfig& cfg) {
    RegistrationResult r;
    r.latent.z = z;
    r.velocity = decode(z, moving, params, cfg);
    r.phi = exponentiate(r.velocity, cfg.squaring_steps);
    r.warped = warp_image(normalize_unit_range(moving), r.phi);
    const FieldStats fs = field_stats(r.phi.displacement());
    r.metrics["mean_magnitude"] = fs.mean_magnitude;
    r.metrics["mean_gradient"] = fs.mean_gradient_magnitude;
    r.metrics["neg_jac_fraction"] = negative_jacobian_fraction(r.phi);
    return r;
}

Eigen::MatrixXd centered(const std::vector<std::vector<double>>& rows,
                         Eigen::VectorXd* mean_out) {
    const int n = static_cast<int>(rows.size());
    const int d = static_cast<int>(rows.front().size());
    Eigen::MatrixXd X(n, d);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
            X(i, j) = rows[static_cast<size_t>(i)][static_cast<size_t>(j)];
    Eigen::VectorXd mean = X.colwise().mean();
    X.rowwise() -= mean.transpose();
    if (mean_out) *mean_out = mean;
    return X;
}

constexpr double kRidge = 1e-6;

}  // namespace

RegistrationResult sample_deformation(const ScalarImage& moving,
                                      const ModelParams& params,
                                      const ModelConfig& cfg,
                                      std::mt19937_64& rng) {
    std::normal_distribution<double> nd(0.0, 1.0);
    std::vector<double> z(static_cast<size_t>(cfg.latent_dim));
    for (double& x : z) x = nd(rng);
    return apply_code(z, moving, params, cfg);
}

RegistrationResult transport(const std::vector<double>& z,
                             const ScalarImage& target,
                             const ModelParams& params,
                             const ModelConfig& cfg) {
    return apply_code(z, target, params, cfg);
}

CcaModel cca_fit(const std::vector<std::vector<double>>& Z,
                 const std::vector<int>& labels, int components) {
    if (Z.empty() || Z.size() != labels.size())
        throw model_error("cca_fit: inconsistent inputs");
    const int n = static_cast<int>(Z.size());
    const int d = static_cast<int>(Z.front().size());

    std::vector<int> class_ids(labels);
    std::sort(class_ids.begin(), class_ids.end());
    class_ids.erase(std::unique(class_ids.begin(), class_ids.end()),
                    class_ids.end());
    const int k = static_cast<int>(class_ids.size());
    if (n <= k) throw model_error("cca_fit: need more samples than classes");
    if (components < 1 || components > std::min(d, k - 1))
        throw model_error("cca_fit: invalid component count");

    Eigen::VectorXd mean;
    Eigen::MatrixXd X = centered(Z, &mean);

    std::vector<std::vector<double>> onehot(
        static_cast<size_t>(n), std::vector<double>(static_cast<size_t>(k)));
    for (int i = 0; i < n; ++i) {
        const int c = static_cast<int>(
            std::lower_bound(class_ids.begin(), class_ids.end(),
                             labels[static_cast<size_t>(i)]) -
            class_ids.begin());
        onehot[static_cast<size_t>(i)][static_cast<size_t>(c)] = 1.0;
    }
    Eigen::MatrixXd Y = centered(onehot, nullptr);

    const double inv = 1.0 / static_cast<double>(n - 1);
    Eigen::MatrixXd sxx = X.transpose() * X * inv;
    Eigen::MatrixXd syy = Y.transpose() * Y * inv;
    Eigen::MatrixXd sxy = X.transpose() * Y * inv;
    sxx.diagonal().array() += kRidge;
    syy.diagonal().array() += kRidge;

    // symmetric reduction: sxx^{-1/2} sxy syy^{-1} syx sxx^{-1/2}
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> sxx_eig(sxx);
    if (sxx_eig.info() != Eigen::Success ||
        sxx_eig.eigenvalues().minCoeff() <= 0.0)
        throw model_error("cca_fit: degenerate covariance");
    Eigen::MatrixXd sxx_isqrt =
        sxx_eig.eigenvectors() *
        sxx_eig.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() *
        sxx_eig.eigenvectors().transpose();
    Eigen::MatrixXd middle = syy.ldlt().solve(sxy.transpose());
    Eigen::MatrixXd core = sxx_isqrt * sxy * middle * sxx_isqrt;
    core = 0.5 * (core + core.transpose());

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(core);
    if (eig.info() != Eigen::Success)
        throw model_error("cca_fit: eigensolver failed");

    CcaModel model;
    model.mean.assign(mean.data(), mean.data() + d);
    model.class_ids = class_ids;
    // eigenvalues ascending; take the top `components`
    for (int ci = 0; ci < components; ++ci) {
        const int idx = d - 1 - ci;
        const double rho2 = std::clamp(eig.eigenvalues()(idx), 0.0, 1.0);
        Eigen::VectorXd w = sxx_isqrt * eig.eigenvectors().col(idx);
        // reproducible sign: largest-magnitude coefficient positive
        int arg = 0;
        for (int j = 1; j < d; ++j)
            if (std::abs(w(j)) > std::abs(w(arg))) arg = j;
        if (w(arg) < 0.0) w = -w;
        model.correlations.push_back(std::sqrt(rho2));
        model.basis.emplace_back(w.data(), w.data() + d);
    }

    std::vector<std::vector<double>> sums(
        static_cast<size_t>(k),
        std::vector<double>(static_cast<size_t>(components)));
    std::vector<int> counts(static_cast<size_t>(k), 0);
    for (int i = 0; i < n; ++i) {
        const std::vector<double> p =
            cca_project(model, Z[static_cast<size_t>(i)]);
        const int c = static_cast<int>(
            std::lower_bound(class_ids.begin(), class_ids.end(),
                             labels[static_cast<size_t>(i)]) -
            class_ids.begin());
        for (int j = 0; j < components; ++j)
            sums[static_cast<size_t>(c)][static_cast<size_t>(j)] +=
                p[static_cast<size_t>(j)];
        ++counts[static_cast<size_t>(c)];
    }
    for (int c = 0; c < k; ++c) {
        for (double& s : sums[static_cast<size_t>(c)])
            s /= counts[static_cast<size_t>(c)];
        model.centroids.push_back(sums[static_cast<size_t>(c)]);
    }
    return model;
}

std::vector<double> cca_project(const CcaModel& model,
                                const std::vector<double>& z) {
    if (static_cast<int>(z.size()) != model.dim())
        throw model_error("cca_project: dimension mismatch");
    std::vector<double> out(static_cast<size_t>(model.components()));
    for (int c = 0; c < model.components(); ++c) {
        double acc = 0.0;
        for (int j = 0; j < model.dim(); ++j)
            acc += model.basis[static_cast<size_t>(c)][static_cast<size_t>(j)] *
                   (z[static_cast<size_t>(j)] -
                    model.mean[static_cast<size_t>(j)]);
        out[static_cast<size_t>(c)] = acc;
    }
    return out;
}

int classify_nearest_centroid(const CcaModel& model,
                              const std::vector<double>& z) {
    const std::vector<double> p = cca_project(model, z);
    int best = -1;
    double best_d = 0.0;
    for (std::size_t c = 0; c < model.centroids.size(); ++c) {
        double d2 = 0.0;
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double diff = p[j] - model.centroids[c][j];
            d2 += diff * diff;
        }
        if (best < 0 || d2 < best_d) {
            best = static_cast<int>(c);
            best_d = d2;
        }
    }
    return model.class_ids[static_cast<size_t>(best)];
}

double cross_validated_accuracy(const std::vector<std::vector<double>>& Z,
                                const std::vector<int>& labels, int components,
                                int folds) {
    if (folds < 2 || static_cast<std::size_t>(folds) > Z.size())
        throw model_error("cross_validated_accuracy: invalid fold count");
    int correct = 0, total = 0;
    for (int f = 0; f < folds; ++f) {
        std::vector<std::vector<double>> ztr;
        std::vector<int> ltr;
        std::vector<std::size_t> test_idx;
        for (std::size_t i = 0; i < Z.size(); ++i) {
            if (static_cast<int>(i % static_cast<size_t>(folds)) == f) {
                test_idx.push_back(i);
            } else {
                ztr.push_back(Z[i]);
                ltr.push_back(labels[i]);
            }
        }
        if (test_idx.empty()) continue;
        const CcaModel m = cca_fit(ztr, ltr, components);
        for (std::size_t i : test_idx) {
            if (classify_nearest_centroid(m, Z[i]) == labels[i]) ++correct;
            ++total;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace dreg
