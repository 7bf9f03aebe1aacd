#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "dreg/field.hpp"

using namespace dreg;

namespace {

// Independent double-loop bilinear interpolation, 2-D only, clamped.
double oracle_bilinear(const ScalarImage& img, double x, double y) {
    const int nx = img.grid().dim(0), ny = img.grid().dim(1);
    x = std::clamp(x, 0.0, static_cast<double>(nx - 1));
    y = std::clamp(y, 0.0, static_cast<double>(ny - 1));
    int x0 = std::min(static_cast<int>(std::floor(x)), nx - 2);
    int y0 = std::min(static_cast<int>(std::floor(y)), ny - 2);
    double fx = x - x0, fy = y - y0;
    auto v = [&](int i, int j) {
        return img.at(static_cast<size_t>(i) * static_cast<size_t>(ny) +
                      static_cast<size_t>(j));
    };
    return (1 - fx) * (1 - fy) * v(x0, y0) + (1 - fx) * fy * v(x0, y0 + 1) +
           fx * (1 - fy) * v(x0 + 1, y0) + fx * fy * v(x0 + 1, y0 + 1);
}

ScalarImage random_image(const Grid& g, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> d(0.0, 1.0);
    std::vector<double> vals(g.voxel_count());
    for (double& v : vals) v = d(rng);
    return ScalarImage(g, vals);
}

// Smooth random field: random values scaled then Gaussian smoothed.
VectorField random_smooth_field(const Grid& g, double amplitude,
                                std::mt19937_64& rng) {
    std::uniform_real_distribution<double> d(-1.0, 1.0);
    VectorField f(g, FieldKind::velocity);
    for (double& v : f.vectors()) v = d(rng);
    f = gaussian_smooth(f, 2.0, 9);
    double mn = f.max_norm();
    if (mn > 0)
        for (double& v : f.vectors()) v *= amplitude / mn;
    return f;
}

std::size_t lin2(const Grid& g, int i, int j) {
    return static_cast<size_t>(i) * static_cast<size_t>(g.dim(1)) +
           static_cast<size_t>(j);
}

}  // namespace

TEST_CASE("warp_image with identity is exact on the interior") {
    std::mt19937_64 rng(7);
    Grid g({12, 12});
    ScalarImage img = random_image(g, rng);
    ScalarImage w = warp_image(img, Transform::identity(g));
    for (std::size_t i = 0; i < img.values().size(); ++i)
        CHECK(w.at(i) == img.at(i));
}

TEST_CASE("warp_image integer translation shifts rows") {
    Grid g({8, 8});
    std::mt19937_64 rng(3);
    ScalarImage img = random_image(g, rng);
    VectorField u(g, FieldKind::displacement);
    for (std::size_t v = 0; v < g.voxel_count(); ++v) u.component(v, 0) = 1.0;
    ScalarImage w = warp_image(img, Transform(u));
    for (int i = 0; i < 7; ++i)
        for (int j = 0; j < 8; ++j)
            CHECK(w.at(lin2(g, i, j)) == doctest::Approx(img.at(lin2(g, i + 1, j)))
                                             .epsilon(1e-14));
}

TEST_CASE("warp_image matches per-pixel interpolation oracle") {
    std::mt19937_64 rng(11);
    Grid g({16, 16});
    ScalarImage img = random_image(g, rng);
    VectorField u = random_smooth_field(g, 2.5, rng);
    ScalarImage w = warp_image(img, Transform(u));
    for (int i = 0; i < 16; ++i)
        for (int j = 0; j < 16; ++j) {
            std::size_t v = lin2(g, i, j);
            double expect = oracle_bilinear(img, i + u.component(v, 0),
                                            j + u.component(v, 1));
            CHECK(w.at(v) == doctest::Approx(expect).epsilon(1e-12));
        }
}

TEST_CASE("warp_image rejects grid mismatch") {
    std::mt19937_64 rng(1);
    ScalarImage img = random_image(Grid({8, 8}), rng);
    CHECK_THROWS_AS(warp_image(img, Transform::identity(Grid({10, 10}))),
                    grid_mismatch_error);
}

TEST_CASE("compose with identity is the identity element") {
    std::mt19937_64 rng(5);
    Grid g({12, 12});
    VectorField u = random_smooth_field(g, 2.0, rng);
    Transform phi(u), id = Transform::identity(g);
    Transform left = compose(id, phi), right = compose(phi, id);
    // interior voxels: 2 away from border
    for (int i = 2; i < 10; ++i)
        for (int j = 2; j < 10; ++j) {
            std::size_t v = lin2(g, i, j);
            for (int c = 0; c < 2; ++c) {
                CHECK(left.displacement().component(v, c) ==
                      doctest::Approx(u.component(v, c)).epsilon(1e-12));
                CHECK(right.displacement().component(v, c) ==
                      doctest::Approx(u.component(v, c)).epsilon(1e-12));
            }
        }
}

TEST_CASE("compose of constant translations adds") {
    Grid g({10, 10});
    VectorField a(g, FieldKind::displacement), b(g, FieldKind::displacement);
    for (std::size_t v = 0; v < g.voxel_count(); ++v) {
        a.component(v, 0) = 0.5;
        a.component(v, 1) = -0.25;
        b.component(v, 0) = 1.0;
        b.component(v, 1) = 0.75;
    }
    Transform ab = compose(Transform(a), Transform(b));
    for (int i = 2; i < 8; ++i)
        for (int j = 2; j < 8; ++j) {
            std::size_t v = lin2(g, i, j);
            CHECK(ab.displacement().component(v, 0) == doctest::Approx(1.5));
            CHECK(ab.displacement().component(v, 1) == doctest::Approx(0.5));
        }
}

TEST_CASE("compose matches per-pixel direct evaluation oracle") {
    std::mt19937_64 rng(17);
    Grid g({16, 16});
    VectorField uo = random_smooth_field(g, 1.7, rng);
    VectorField ui = random_smooth_field(g, 1.3, rng);
    Transform res = compose(Transform(uo), Transform(ui));
    for (int i = 0; i < 16; ++i)
        for (int j = 0; j < 16; ++j) {
            std::size_t v = lin2(g, i, j);
            double px = i + ui.component(v, 0);
            double py = j + ui.component(v, 1);
            double s[2];
            double coord[2] = {px, py};
            sample_vector(uo, coord, s);
            CHECK(res.displacement().component(v, 0) ==
                  doctest::Approx(ui.component(v, 0) + s[0]).epsilon(1e-12));
            CHECK(res.displacement().component(v, 1) ==
                  doctest::Approx(ui.component(v, 1) + s[1]).epsilon(1e-12));
        }
}

namespace {

// Near-affine field: multilinear interpolation reproduces affine maps
// exactly, so composition round-off stays tiny; the long-wavelength
// ripple keeps the field non-trivial.
VectorField near_affine_field(const Grid& g, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> aff(-0.03, 0.03), ph(0.0, 6.28);
    const int n0 = g.dim(0), n1 = g.dim(1);
    const double c0 = (n0 - 1) / 2.0, c1 = (n1 - 1) / 2.0;
    double A[2][2] = {{aff(rng), aff(rng)}, {aff(rng), aff(rng)}};
    double t0 = 10 * aff(rng), t1 = 10 * aff(rng);
    double p0 = ph(rng), p1 = ph(rng);
    VectorField v(g, FieldKind::velocity);
    for (int i = 0; i < n0; ++i)
        for (int j = 0; j < n1; ++j) {
            std::size_t idx =
                static_cast<size_t>(i) * static_cast<size_t>(n1) +
                static_cast<size_t>(j);
            double rip = 0.02 * std::sin(2 * M_PI * i / 512.0 + p0) *
                         std::cos(2 * M_PI * j / 512.0 + p1);
            v.component(idx, 0) =
                t0 + A[0][0] * (i - c0) + A[0][1] * (j - c1) + rip;
            v.component(idx, 1) =
                t1 + A[1][0] * (i - c0) + A[1][1] * (j - c1) - rip;
        }
    return v;
}

// Registration-style smooth field: border-tapered translation plus a
// small affine part and a gentle ripple, rescaled to a given max norm.
VectorField registration_style_field(const Grid& g, double amplitude,
                                     std::mt19937_64& rng) {
    const int n0 = g.dim(0), n1 = g.dim(1);
    std::uniform_real_distribution<double> aff(-0.02, 0.02), ph(0, 2 * M_PI),
        wl(60.0, 100.0), dir(0, 2 * M_PI);
    double A[2][2] = {{aff(rng), aff(rng)}, {aff(rng), aff(rng)}};
    const double c0 = (n0 - 1) / 2.0, c1 = (n1 - 1) / 2.0;
    double th = dir(rng), cx = std::cos(th), cy = std::sin(th);
    double l0 = wl(rng), l1 = wl(rng);
    double p0 = ph(rng), p1 = ph(rng), p2 = ph(rng), p3 = ph(rng);
    auto win = [&](double t, int n) {
        double d = std::min(t, n - 1 - t) / 28.0;
        d = std::clamp(d, 0.0, 1.0);
        return d * d * (3 - 2 * d);
    };
    VectorField v(g, FieldKind::velocity);
    for (int i = 0; i < n0; ++i)
        for (int j = 0; j < n1; ++j) {
            std::size_t idx =
                static_cast<size_t>(i) * static_cast<size_t>(n1) +
                static_cast<size_t>(j);
            double w = win(i, n0) * win(j, n1);
            double sx = std::sin(2 * M_PI * i / l0 + p0) *
                        std::cos(2 * M_PI * j / l1 + p1);
            double sy = std::cos(2 * M_PI * i / l0 + p2) *
                        std::sin(2 * M_PI * j / l1 + p3);
            v.component(idx, 0) =
                w * (cx + A[0][0] * (i - c0) + A[0][1] * (j - c1) + 0.25 * sx);
            v.component(idx, 1) =
                w * (cy + A[1][0] * (i - c0) + A[1][1] * (j - c1) + 0.25 * sy);
        }
    double mn = v.max_norm();
    if (mn > 0)
        for (double& x : v.vectors()) x *= amplitude / mn;
    return v;
}

}  // namespace

TEST_CASE("compose is associative on the interior for smooth fields") {
    std::mt19937_64 rng(23);
    Grid g({24, 24});
    Transform a(near_affine_field(g, rng));
    Transform b(near_affine_field(g, rng));
    Transform c(near_affine_field(g, rng));
    Transform ab_c = compose(compose(a, b), c);
    Transform a_bc = compose(a, compose(b, c));
    double err = 0.0;
    for (int i = 4; i < 20; ++i)
        for (int j = 4; j < 20; ++j) {
            std::size_t v = lin2(g, i, j);
            for (int cc = 0; cc < 2; ++cc)
                err = std::max(err,
                               std::abs(ab_c.displacement().component(v, cc) -
                                        a_bc.displacement().component(v, cc)));
        }
    CHECK(err <= 1e-6);
}

TEST_CASE("exponentiate of zero is the identity") {
    Grid g({10, 10});
    VectorField v(g, FieldKind::velocity);
    Transform phi = exponentiate(v, 4);
    for (double d : phi.displacement().vectors()) CHECK(d == 0.0);
}

TEST_CASE("exponentiate of a constant field is a translation") {
    Grid g({20, 20});
    VectorField v(g, FieldKind::velocity);
    for (std::size_t i = 0; i < g.voxel_count(); ++i) {
        v.component(i, 0) = 0.8;
        v.component(i, 1) = -0.4;
    }
    Transform phi = exponentiate(v, 4);
    // interior: far enough from the border that clamping never bites
    for (int i = 4; i < 16; ++i)
        for (int j = 4; j < 16; ++j) {
            std::size_t idx = lin2(g, i, j);
            CHECK(phi.displacement().component(idx, 0) ==
                  doctest::Approx(0.8).epsilon(1e-12));
            CHECK(phi.displacement().component(idx, 1) ==
                  doctest::Approx(-0.4).epsilon(1e-12));
        }
}

namespace {

// 2x2 matrix exponential by scaled Taylor series.
void expm2(const double A[2][2], double E[2][2]) {
    // scale so the series converges fast
    double norm = std::abs(A[0][0]) + std::abs(A[0][1]) + std::abs(A[1][0]) +
                  std::abs(A[1][1]);
    int s = 0;
    while (norm > 0.25) {
        norm /= 2;
        ++s;
    }
    double B[2][2] = {{A[0][0] * std::ldexp(1.0, -s), A[0][1] * std::ldexp(1.0, -s)},
                      {A[1][0] * std::ldexp(1.0, -s), A[1][1] * std::ldexp(1.0, -s)}};
    double R[2][2] = {{1, 0}, {0, 1}};
    double T[2][2] = {{1, 0}, {0, 1}};
    for (int k = 1; k <= 16; ++k) {
        double N[2][2];
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j)
                N[i][j] = (T[i][0] * B[0][j] + T[i][1] * B[1][j]) / k;
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j) {
                T[i][j] = N[i][j];
                R[i][j] += N[i][j];
            }
    }
    for (int k = 0; k < s; ++k) {
        double N[2][2];
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j)
                N[i][j] = R[i][0] * R[0][j] + R[i][1] * R[1][j];
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j) E[i][j] = R[i][j] = N[i][j];
    }
    if (s == 0)
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j) E[i][j] = R[i][j];
}

}  // namespace

TEST_CASE("exponentiate of a linear field matches the matrix exponential") {
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> d(-0.15, 0.15);
    Grid g({32, 32});
    const double c0 = 15.5, c1 = 15.5;
    for (int trial = 0; trial < 5; ++trial) {
        double A[2][2] = {{d(rng), d(rng)}, {d(rng), d(rng)}};
        VectorField v(g, FieldKind::velocity);
        for (int i = 0; i < 32; ++i)
            for (int j = 0; j < 32; ++j) {
                std::size_t idx = lin2(g, i, j);
                v.component(idx, 0) = A[0][0] * (i - c0) + A[0][1] * (j - c1);
                v.component(idx, 1) = A[1][0] * (i - c0) + A[1][1] * (j - c1);
            }
        Transform phi = exponentiate(v, 6);
        double E[2][2];
        expm2(A, E);
        // interior voxels, displacement vs (expm(A) - I)(x - x0)
        for (int i = 8; i < 24; ++i)
            for (int j = 8; j < 24; ++j) {
                std::size_t idx = lin2(g, i, j);
                double ex = (E[0][0] - 1) * (i - c0) + E[0][1] * (j - c1);
                double ey = E[1][0] * (i - c0) + (E[1][1] - 1) * (j - c1);
                double mag = std::max(1.0, std::hypot(ex, ey));
                CHECK(std::abs(phi.displacement().component(idx, 0) - ex) / mag <=
                      1e-2);
                CHECK(std::abs(phi.displacement().component(idx, 1) - ey) / mag <=
                      1e-2);
            }
    }
}

TEST_CASE("exponentiate matches small-step Euler integration") {
    std::mt19937_64 rng(37);
    std::uniform_real_distribution<double> d(-0.12, 0.12);
    Grid g({32, 32});
    double A[2][2] = {{d(rng), d(rng)}, {d(rng), d(rng)}};
    VectorField v(g, FieldKind::velocity);
    for (int i = 0; i < 32; ++i)
        for (int j = 0; j < 32; ++j) {
            std::size_t idx = lin2(g, i, j);
            v.component(idx, 0) = A[0][0] * (i - 15.5) + A[0][1] * (j - 15.5);
            v.component(idx, 1) = A[1][0] * (i - 15.5) + A[1][1] * (j - 15.5);
        }
    const int N = 6;
    Transform phi = exponentiate(v, N);
    const int steps = 1 << N;
    const double h = 1.0 / steps;
    double err_sum = 0.0;
    int count = 0;
    for (int i = 4; i < 28; ++i)
        for (int j = 4; j < 28; ++j) {
            double p[2] = {double(i), double(j)};
            for (int s = 0; s < steps; ++s) {
                double vel[2];
                sample_vector(v, p, vel);
                p[0] += h * vel[0];
                p[1] += h * vel[1];
            }
            std::size_t idx = lin2(g, i, j);
            err_sum += std::abs(p[0] - i - phi.displacement().component(idx, 0));
            err_sum += std::abs(p[1] - j - phi.displacement().component(idx, 1));
            count += 2;
        }
    CHECK(err_sum / count <= 1e-3);
}

TEST_CASE("choose_scaling_steps") {
    Grid g({8, 8});
    VectorField f(g, FieldKind::velocity);
    f.component(0, 0) = 8.0;
    CHECK(choose_scaling_steps({f}) == 4);
    VectorField s(g, FieldKind::velocity);
    s.component(0, 0) = 0.4;
    CHECK(choose_scaling_steps({s}) == 0);
    CHECK(kDefaultScalingSteps == 4);
    CHECK_THROWS_AS(choose_scaling_steps({}), invalid_field_error);
}

TEST_CASE("exponentiate inverse consistency") {
    std::mt19937_64 rng(41);
    const int n = 96;
    Grid g({n, n});
    for (int trial = 0; trial < 5; ++trial) {
        VectorField v = registration_style_field(g, 4.8, rng);
        int N = choose_scaling_steps({v});
        Transform fwd = exponentiate(v, N);
        VectorField vneg = v;
        for (double& x : vneg.vectors()) x = -x;
        Transform bwd = exponentiate(vneg, N);
        Transform round = compose(fwd, bwd);
        double worst = 0.0;
        for (int i = 2; i < n - 2; ++i)
            for (int j = 2; j < n - 2; ++j) {
                std::size_t idx = lin2(g, i, j);
                worst = std::max(worst,
                                 std::abs(round.displacement().component(idx, 0)));
                worst = std::max(worst,
                                 std::abs(round.displacement().component(idx, 1)));
            }
        CHECK(worst <= 0.1);
    }
}

TEST_CASE("gaussian_smooth preserves constants") {
    Grid g({12, 12});
    ScalarImage img(g, 0.37);
    ScalarImage s = gaussian_smooth(img, 3.0, 15);
    for (double v : s.values()) CHECK(v == doctest::Approx(0.37).epsilon(1e-13));
}

TEST_CASE("gaussian_smooth impulse center matches kernel oracle") {
    Grid g({21, 21});
    ScalarImage img(g, 0.0);
    img.at(lin2(g, 10, 10)) = 1.0;
    ScalarImage s = gaussian_smooth(img, 2.0, 9);
    // direct evaluation of the normalized kernel at the center
    double sum = 0.0;
    for (int i = -4; i <= 4; ++i) sum += std::exp(-0.5 * i * i / 4.0);
    double w0 = 1.0 / sum;
    CHECK(s.at(lin2(g, 10, 10)) == doctest::Approx(w0 * w0).epsilon(1e-12));
}

TEST_CASE("gaussian_smooth rejects even kernels") {
    Grid g({8, 8});
    CHECK_THROWS_AS(gaussian_smooth(ScalarImage(g, 0.0), 2.0, 8),
                    invalid_field_error);
}

TEST_CASE("gaussian_smooth is linear") {
    std::mt19937_64 rng(43);
    Grid g({14, 14});
    ScalarImage f = random_image(g, rng), h = random_image(g, rng);
    double a = 1.7, b = -0.6;
    std::vector<double> combo(g.voxel_count());
    for (std::size_t i = 0; i < combo.size(); ++i)
        combo[i] = a * f.at(i) + b * h.at(i);
    ScalarImage lhs = gaussian_smooth(ScalarImage(g, combo), 2.0, 9);
    ScalarImage sf = gaussian_smooth(f, 2.0, 9);
    ScalarImage sh = gaussian_smooth(h, 2.0, 9);
    for (std::size_t i = 0; i < combo.size(); ++i)
        CHECK(std::abs(lhs.at(i) - (a * sf.at(i) + b * sh.at(i))) <= 1e-10);
}

TEST_CASE("jacobian_map of identity is one") {
    Grid g({10, 10});
    ScalarImage jm = jacobian_map(Transform::identity(g));
    for (double v : jm.values()) CHECK(v == doctest::Approx(1.0));
}

TEST_CASE("jacobian_map of uniform scaling is s^2 in the interior") {
    Grid g({16, 16});
    const double s = 1.25;
    VectorField u(g, FieldKind::displacement);
    for (int i = 0; i < 16; ++i)
        for (int j = 0; j < 16; ++j) {
            std::size_t idx = lin2(g, i, j);
            u.component(idx, 0) = (s - 1.0) * i;
            u.component(idx, 1) = (s - 1.0) * j;
        }
    ScalarImage jm = jacobian_map(Transform(u));
    for (int i = 1; i < 15; ++i)
        for (int j = 1; j < 15; ++j)
            CHECK(jm.at(lin2(g, i, j)) == doctest::Approx(s * s).epsilon(1e-10));
}

TEST_CASE("jacobian_map matches an independent stencil oracle") {
    std::mt19937_64 rng(47);
    Grid g({16, 16});
    VectorField u = random_smooth_field(g, 2.0, rng);
    ScalarImage jm = jacobian_map(Transform(u));
    auto uc = [&](int i, int j, int c) {
        return u.component(lin2(g, i, j), c);
    };
    // independent central-difference oracle on interior voxels
    for (int i = 1; i < 15; ++i)
        for (int j = 1; j < 15; ++j) {
            double dux_dx = 0.5 * (uc(i + 1, j, 0) - uc(i - 1, j, 0)) + 1.0;
            double dux_dy = 0.5 * (uc(i, j + 1, 0) - uc(i, j - 1, 0));
            double duy_dx = 0.5 * (uc(i + 1, j, 1) - uc(i - 1, j, 1));
            double duy_dy = 0.5 * (uc(i, j + 1, 1) - uc(i, j - 1, 1)) + 1.0;
            double det = dux_dx * duy_dy - dux_dy * duy_dx;
            CHECK(std::abs(jm.at(lin2(g, i, j)) - det) <= 1e-10);
        }
}

TEST_CASE("negative_jacobian_fraction") {
    Grid g({16, 16});
    CHECK(negative_jacobian_fraction(Transform::identity(g)) == 0.0);
    // reflection on half the domain folds the grid
    VectorField u(g, FieldKind::displacement);
    for (int i = 8; i < 16; ++i)
        for (int j = 0; j < 16; ++j)
            u.component(lin2(g, i, j), 0) = -2.0 * (i - 8);
    CHECK(negative_jacobian_fraction(Transform(u)) > 0.0);
}

TEST_CASE("3-D fields: identity warp and jacobian") {
    Grid g({6, 6, 6});
    std::mt19937_64 rng(53);
    std::uniform_real_distribution<double> d(0.0, 1.0);
    std::vector<double> vals(g.voxel_count());
    for (double& v : vals) v = d(rng);
    ScalarImage img(g, vals);
    ScalarImage w = warp_image(img, Transform::identity(g));
    for (std::size_t i = 0; i < vals.size(); ++i) CHECK(w.at(i) == img.at(i));
    ScalarImage jm = jacobian_map(Transform::identity(g));
    for (double v : jm.values()) CHECK(v == doctest::Approx(1.0));
}

TEST_CASE("grid invariants") {
    CHECK_THROWS_AS(Grid({1, 8}), invalid_field_error);
    CHECK_THROWS_AS(Grid({8, 8}, {1.0, 0.0}), invalid_field_error);
    CHECK_THROWS_AS(Grid({8, 8, 8, 8}), invalid_field_error);
}
