#include "dreg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dreg {

double lcc(const ScalarImage& fixed, const ScalarImage& moving,
           const VectorField& velocity, const LccConfig& cfg,
           int squaring_steps) {
    if (!(fixed.grid() == moving.grid()) ||
        !(fixed.grid() == velocity.grid()))
        throw grid_mismatch_error("lcc: inputs on different grids");

    VectorField half_pos = velocity;
    VectorField half_neg = velocity;
    for (double& x : half_pos.vectors()) x *= 0.5;
    for (double& x : half_neg.vectors()) x *= -0.5;
    ScalarImage f_half =
        warp_image(fixed, exponentiate(half_neg, squaring_steps));
    ScalarImage m_half =
        warp_image(moving, exponentiate(half_pos, squaring_steps));

    const std::size_t n = fixed.grid().voxel_count();
    std::vector<double> fm(n), ff(n), mm(n);
    for (std::size_t i = 0; i < n; ++i) {
        double f = f_half.at(i), m = m_half.at(i);
        fm[i] = f * m;
        ff[i] = f * f;
        mm[i] = m * m;
    }
    const Grid& g = fixed.grid();
    ScalarImage sfm = gaussian_smooth(ScalarImage(g, std::move(fm)),
                                      cfg.sigma_g, cfg.kernel_size);
    ScalarImage sff = gaussian_smooth(ScalarImage(g, std::move(ff)),
                                      cfg.sigma_g, cfg.kernel_size);
    ScalarImage smm = gaussian_smooth(ScalarImage(g, std::move(mm)),
                                      cfg.sigma_g, cfg.kernel_size);

    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double num = sfm.at(i) * sfm.at(i);
        double den = sff.at(i) * smm.at(i) + cfg.epsilon;
        acc += num / den;
    }
    return acc / static_cast<double>(n);
}

double lcc_loss_term(const ScalarImage& fixed, const ScalarImage& moving,
                     const VectorField& velocity, const LccConfig& cfg,
                     int squaring_steps, double lambda) {
    if (!(lambda > 0.0))
        throw invalid_field_error("lcc_loss_term: lambda must be > 0");
    return -lambda * lcc(fixed, moving, velocity, cfg, squaring_steps);
}

double kl_diag_gaussian(const std::vector<double>& mu,
                        const std::vector<double>& logvar) {
    if (mu.size() != logvar.size())
        throw invalid_field_error("kl_diag_gaussian: dimension mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < mu.size(); ++i)
        acc += mu[i] * mu[i] + std::exp(logvar[i]) - logvar[i] - 1.0;
    return 0.5 * acc;
}

double ssd(const ScalarImage& fixed, const ScalarImage& warped) {
    if (!(fixed.grid() == warped.grid()))
        throw grid_mismatch_error("ssd: grids differ");
    double acc = 0.0;
    const std::size_t n = fixed.values().size();
    for (std::size_t i = 0; i < n; ++i) {
        double d = fixed.at(i) - warped.at(i);
        acc += d * d;
    }
    return acc / static_cast<double>(n);
}

double rmse(const ScalarImage& fixed, const ScalarImage& warped) {
    return std::sqrt(ssd(fixed, warped));
}

double dice(const ScalarImage& a, const ScalarImage& b) {
    if (!(a.grid() == b.grid()))
        throw grid_mismatch_error("dice: grids differ");
    std::size_t na = 0, nb = 0, nab = 0;
    const std::size_t n = a.values().size();
    for (std::size_t i = 0; i < n; ++i) {
        bool fa = a.at(i) != 0.0, fb = b.at(i) != 0.0;
        na += fa;
        nb += fb;
        nab += fa && fb;
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(nab) / static_cast<double>(na + nb);
}

namespace {

// Boundary voxels: foreground with a face-connected background neighbor;
// the outside of the domain counts as background.
std::vector<std::vector<int>> boundary_voxels(const ScalarImage& mask) {
    const Grid& g = mask.grid();
    const int D = g.ndim();
    std::vector<std::vector<int>> result;
    std::size_t strides[3];
    {
        std::size_t s = 1;
        for (int a = D - 1; a >= 0; --a) {
            strides[a] = s;
            s *= static_cast<size_t>(g.dim(a));
        }
    }
    int idx[3] = {0, 0, 0};
    const std::size_t n = g.voxel_count();
    for (std::size_t lin = 0; lin < n; ++lin) {
        if (mask.at(lin) != 0.0) {
            bool boundary = false;
            for (int a = 0; a < D && !boundary; ++a) {
                for (int dir = -1; dir <= 1 && !boundary; dir += 2) {
                    int j = idx[a] + dir;
                    if (j < 0 || j >= g.dim(a)) {
                        boundary = true;
                    } else {
                        std::ptrdiff_t off =
                            static_cast<std::ptrdiff_t>(dir) *
                            static_cast<std::ptrdiff_t>(strides[a]);
                        if (mask.at(static_cast<std::size_t>(
                                static_cast<std::ptrdiff_t>(lin) + off)) ==
                            0.0)
                            boundary = true;
                    }
                }
            }
            if (boundary) result.push_back({idx[0], idx[1], D == 3 ? idx[2] : 0});
        }
        for (int a = D - 1; a >= 0; --a) {
            if (++idx[a] < g.dim(a)) break;
            idx[a] = 0;
        }
    }
    return result;
}

double directed_percentile95(const std::vector<std::vector<int>>& from,
                             const std::vector<std::vector<int>>& to,
                             const std::vector<double>& spacing, int D) {
    std::vector<double> dists;
    dists.reserve(from.size());
    for (const auto& p : from) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& q : to) {
            double s = 0.0;
            for (int a = 0; a < D; ++a) {
                double d = static_cast<double>(p[static_cast<size_t>(a)] -
                                               q[static_cast<size_t>(a)]) *
                           spacing[static_cast<size_t>(a)];
                s += d * d;
            }
            best = std::min(best, s);
        }
        dists.push_back(std::sqrt(best));
    }
    std::sort(dists.begin(), dists.end());
    // nearest-rank: smallest value with at least 95% of mass at or below
    std::size_t rank = static_cast<std::size_t>(
        std::ceil(0.95 * static_cast<double>(dists.size())));
    if (rank == 0) rank = 1;
    return dists[rank - 1];
}

}  // namespace

double hausdorff95(const ScalarImage& a, const ScalarImage& b) {
    if (!(a.grid() == b.grid()))
        throw grid_mismatch_error("hausdorff95: grids differ");
    auto ba = boundary_voxels(a);
    auto bb = boundary_voxels(b);
    if (ba.empty() || bb.empty())
        throw invalid_field_error("hausdorff95: empty mask");
    const int D = a.grid().ndim();
    const auto& spacing = a.grid().spacing();
    double dab = directed_percentile95(ba, bb, spacing, D);
    double dba = directed_percentile95(bb, ba, spacing, D);
    return std::max(dab, dba);
}

FieldStats field_stats(const VectorField& u) {
    const Grid& g = u.grid();
    const int D = g.ndim();
    std::size_t strides[3];
    {
        std::size_t s = 1;
        for (int a = D - 1; a >= 0; --a) {
            strides[a] = s;
            s *= static_cast<size_t>(g.dim(a));
        }
    }
    double mag_acc = 0.0, grad_acc = 0.0;
    int idx[3] = {0, 0, 0};
    const std::size_t n = g.voxel_count();
    for (std::size_t lin = 0; lin < n; ++lin) {
        double m = 0.0;
        for (int c = 0; c < D; ++c) {
            double x = u.component(lin, c);
            m += x * x;
        }
        mag_acc += std::sqrt(m);

        double fro = 0.0;
        for (int c = 0; c < D; ++c) {
            for (int a = 0; a < D; ++a) {
                const auto s = static_cast<std::ptrdiff_t>(strides[a]);
                auto uc = [&](std::ptrdiff_t off) {
                    return u.component(
                        static_cast<std::size_t>(
                            static_cast<std::ptrdiff_t>(lin) + off),
                        c);
                };
                double d;
                if (idx[a] == 0)
                    d = uc(s) - uc(0);
                else if (idx[a] == g.dim(a) - 1)
                    d = uc(0) - uc(-s);
                else
                    d = 0.5 * (uc(s) - uc(-s));
                fro += d * d;
            }
        }
        grad_acc += std::sqrt(fro);

        for (int a = D - 1; a >= 0; --a) {
            if (++idx[a] < g.dim(a)) break;
            idx[a] = 0;
        }
    }
    FieldStats st;
    st.mean_magnitude = mag_acc / static_cast<double>(n);
    st.mean_gradient_magnitude = grad_acc / static_cast<double>(n);
    return st;
}

}  // namespace dreg
