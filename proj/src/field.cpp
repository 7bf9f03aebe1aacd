#include "dreg/field.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dreg {

namespace {

void check_finite(const std::vector<double>& v, const char* what) {
    for (double x : v) {
        if (!std::isfinite(x))
            throw invalid_field_error(std::string(what) +
                                      ": non-finite component");
    }
}

}  // namespace

Grid::Grid(std::vector<int> dims, std::vector<double> spacing)
    : dims_(std::move(dims)), spacing_(std::move(spacing)) {
    if (dims_.size() != 2 && dims_.size() != 3)
        throw invalid_field_error("Grid: dimensionality must be 2 or 3");
    if (spacing_.size() != dims_.size())
        throw invalid_field_error("Grid: spacing/dims size mismatch");
    for (int d : dims_)
        if (d < 2) throw invalid_field_error("Grid: all dims must be >= 2");
    for (double s : spacing_)
        if (!(s > 0.0)) throw invalid_field_error("Grid: spacing must be > 0");
}

Grid::Grid(std::vector<int> dims)
    : Grid(dims, std::vector<double>(dims.size(), 1.0)) {}

std::size_t Grid::voxel_count() const {
    std::size_t n = 1;
    for (int d : dims_) n *= static_cast<size_t>(d);
    return n;
}

ScalarImage::ScalarImage(Grid grid, std::vector<double> values)
    : grid_(std::move(grid)), values_(std::move(values)) {
    if (values_.size() != grid_.voxel_count())
        throw invalid_field_error("ScalarImage: value count != voxel count");
    check_finite(values_, "ScalarImage");
}

ScalarImage::ScalarImage(Grid grid, double fill)
    : grid_(std::move(grid)), values_(grid_.voxel_count(), fill) {}

VectorField::VectorField(Grid grid, std::vector<double> vectors,
                         FieldKind kind)
    : grid_(std::move(grid)), vectors_(std::move(vectors)), kind_(kind) {
    if (vectors_.size() != grid_.voxel_count() * static_cast<size_t>(grid_.ndim()))
        throw invalid_field_error("VectorField: vector count != voxel count");
    check_finite(vectors_, "VectorField");
}

VectorField::VectorField(Grid grid, FieldKind kind)
    : grid_(std::move(grid)),
      vectors_(grid_.voxel_count() * static_cast<size_t>(grid_.ndim()), 0.0),
      kind_(kind) {}

double VectorField::max_norm() const {
    const int D = grid_.ndim();
    double best = 0.0;
    for (std::size_t v = 0; v < grid_.voxel_count(); ++v) {
        double s = 0.0;
        for (int c = 0; c < D; ++c) {
            double x = component(v, c);
            s += x * x;
        }
        best = std::max(best, s);
    }
    return std::sqrt(best);
}

Transform::Transform(VectorField displacement)
    : displacement_(std::move(displacement)) {
    displacement_.set_kind(FieldKind::displacement);
}

Transform Transform::identity(const Grid& grid) {
    return Transform(VectorField(grid, FieldKind::displacement));
}

// ---------------------------------------------------------------------------
// Interpolation

namespace {

struct InterpWeights {
    // Per axis: lower index, fractional weight.  Clamped to the domain.
    std::array<int, 3> lo;
    std::array<double, 3> frac;
};

inline InterpWeights interp_setup(const Grid& g, const double* coord) {
    InterpWeights w{};
    const int D = g.ndim();
    for (int a = 0; a < D; ++a) {
        double x = coord[a];
        if (!std::isfinite(x)) x = 0.0;
        double hi = static_cast<double>(g.dim(a) - 1);
        if (x < 0.0) x = 0.0;
        if (x > hi) x = hi;
        double fl = std::floor(x);
        int i = static_cast<int>(fl);
        if (i > g.dim(a) - 2) i = g.dim(a) - 2;
        w.lo[static_cast<size_t>(a)] = i;
        w.frac[static_cast<size_t>(a)] = x - static_cast<double>(i);
    }
    return w;
}

inline std::size_t linear_index(const Grid& g, const int* idx) {
    std::size_t lin = 0;
    for (int a = 0; a < g.ndim(); ++a)
        lin = lin * static_cast<size_t>(g.dim(a)) + static_cast<size_t>(idx[a]);
    return lin;
}

}  // namespace

double sample_scalar(const ScalarImage& img, const double* coord) {
    const Grid& g = img.grid();
    const int D = g.ndim();
    InterpWeights w = interp_setup(g, coord);
    double acc = 0.0;
    const int corners = 1 << D;
    for (int m = 0; m < corners; ++m) {
        int idx[3];
        double wt = 1.0;
        for (int a = 0; a < D; ++a) {
            int bit = (m >> a) & 1;
            idx[a] = w.lo[static_cast<size_t>(a)] + bit;
            wt *= bit ? w.frac[static_cast<size_t>(a)]
                      : 1.0 - w.frac[static_cast<size_t>(a)];
        }
        acc += wt * img.at(linear_index(g, idx));
    }
    return acc;
}

void sample_vector(const VectorField& f, const double* coord, double* out) {
    const Grid& g = f.grid();
    const int D = g.ndim();
    InterpWeights w = interp_setup(g, coord);
    for (int c = 0; c < D; ++c) out[c] = 0.0;
    const int corners = 1 << D;
    for (int m = 0; m < corners; ++m) {
        int idx[3];
        double wt = 1.0;
        for (int a = 0; a < D; ++a) {
            int bit = (m >> a) & 1;
            idx[a] = w.lo[static_cast<size_t>(a)] + bit;
            wt *= bit ? w.frac[static_cast<size_t>(a)]
                      : 1.0 - w.frac[static_cast<size_t>(a)];
        }
        std::size_t lin = linear_index(g, idx);
        for (int c = 0; c < D; ++c) out[c] += wt * f.component(lin, c);
    }
}

// ---------------------------------------------------------------------------
// Voxel iteration helper: runs fn(linear, idx[D]) over the whole grid.

namespace {

template <typename Fn>
void for_each_voxel(const Grid& g, Fn&& fn) {
    const int D = g.ndim();
    int idx[3] = {0, 0, 0};
    const std::size_t n = g.voxel_count();
    for (std::size_t lin = 0; lin < n; ++lin) {
        fn(lin, idx);
        for (int a = D - 1; a >= 0; --a) {
            if (++idx[a] < g.dim(a)) break;
            idx[a] = 0;
        }
    }
}

}  // namespace

ScalarImage warp_image(const ScalarImage& img, const Transform& phi) {
    if (!(img.grid() == phi.grid()))
        throw grid_mismatch_error("warp_image: image and transform grids differ");
    const Grid& g = img.grid();
    const int D = g.ndim();
    const VectorField& u = phi.displacement();
    ScalarImage out(g);
    for_each_voxel(g, [&](std::size_t lin, const int* idx) {
        double coord[3];
        for (int a = 0; a < D; ++a)
            coord[a] = static_cast<double>(idx[a]) + u.component(lin, a);
        out.at(lin) = sample_scalar(img, coord);
    });
    return out;
}

ScalarImage warp_image_nearest(const ScalarImage& img, const Transform& phi) {
    if (!(img.grid() == phi.grid()))
        throw grid_mismatch_error("warp_image: image and transform grids differ");
    const Grid& g = img.grid();
    const int D = g.ndim();
    const VectorField& u = phi.displacement();
    ScalarImage out(g);
    for_each_voxel(g, [&](std::size_t lin, const int* idx) {
        int src[3] = {0, 0, 0};
        for (int a = 0; a < D; ++a) {
            const double c = std::round(static_cast<double>(idx[a]) +
                                        u.component(lin, a));
            src[a] = std::clamp(static_cast<int>(c), 0, g.dim(a) - 1);
        }
        out.at(lin) = img.at(linear_index(g, src));
    });
    return out;
}

Transform compose(const Transform& outer, const Transform& inner) {
    if (!(outer.grid() == inner.grid()))
        throw grid_mismatch_error("compose: transform grids differ");
    const Grid& g = outer.grid();
    const int D = g.ndim();
    const VectorField& uo = outer.displacement();
    const VectorField& ui = inner.displacement();
    VectorField res(g, FieldKind::displacement);
    for_each_voxel(g, [&](std::size_t lin, const int* idx) {
        double coord[3], sampled[3];
        for (int a = 0; a < D; ++a)
            coord[a] = static_cast<double>(idx[a]) + ui.component(lin, a);
        sample_vector(uo, coord, sampled);
        for (int a = 0; a < D; ++a)
            res.component(lin, a) = ui.component(lin, a) + sampled[a];
    });
    return Transform(std::move(res));
}

Transform exponentiate(const VectorField& velocity, int squaring_steps) {
    if (squaring_steps < 0)
        throw invalid_field_error("exponentiate: N must be >= 0");
    check_finite(velocity.vectors(), "exponentiate");
    const double scale = std::ldexp(1.0, -squaring_steps);
    VectorField u = velocity;
    u.set_kind(FieldKind::displacement);
    for (double& x : u.vectors()) x *= scale;
    Transform phi(std::move(u));
    for (int k = 0; k < squaring_steps; ++k) phi = compose(phi, phi);
    return phi;
}

int choose_scaling_steps(const std::vector<VectorField>& samples) {
    if (samples.empty())
        throw invalid_field_error("choose_scaling_steps: empty sample list");
    double max_norm = 0.0;
    for (const VectorField& f : samples)
        max_norm = std::max(max_norm, f.max_norm());
    int n = 0;
    while (max_norm * std::ldexp(1.0, -n) > 0.5) ++n;
    return n;
}

// ---------------------------------------------------------------------------
// Gaussian smoothing, separable with edge replication.

std::vector<double> gaussian_kernel(double sigma, int kernel_size) {
    if (!(sigma > 0.0))
        throw invalid_field_error("gaussian_kernel: sigma must be > 0");
    if (kernel_size < 1 || kernel_size % 2 == 0)
        throw invalid_field_error("gaussian_kernel: kernel size must be odd");
    const int half = kernel_size / 2;
    std::vector<double> k(static_cast<size_t>(kernel_size));
    double sum = 0.0;
    for (int i = -half; i <= half; ++i) {
        double w = std::exp(-0.5 * (i * i) / (sigma * sigma));
        k[static_cast<size_t>(i + half)] = w;
        sum += w;
    }
    for (double& w : k) w /= sum;
    return k;
}

namespace {

// Smooth a multi-channel axis-major buffer along one axis, clamped borders.
void smooth_axis(const Grid& g, int axis, int channels,
                 const std::vector<double>& kernel,
                 const std::vector<double>& in, std::vector<double>& out) {
    const int D = g.ndim();
    const int half = static_cast<int>(kernel.size()) / 2;
    // Stride of one step along `axis` in voxel units.
    std::size_t stride = 1;
    for (int a = axis + 1; a < D; ++a) stride *= static_cast<size_t>(g.dim(a));
    const std::size_t cstride = static_cast<size_t>(channels);

    int idx[3] = {0, 0, 0};
    const std::size_t n = g.voxel_count();
    for (std::size_t lin = 0; lin < n; ++lin) {
        for (int c = 0; c < channels; ++c) {
            double acc = 0.0;
            for (int t = -half; t <= half; ++t) {
                int j = idx[axis] + t;
                if (j < 0) j = 0;
                if (j > g.dim(axis) - 1) j = g.dim(axis) - 1;
                std::ptrdiff_t off =
                    static_cast<std::ptrdiff_t>(j - idx[axis]) *
                    static_cast<std::ptrdiff_t>(stride);
                std::size_t src = static_cast<std::size_t>(
                                      static_cast<std::ptrdiff_t>(lin) + off) *
                                      cstride +
                                  static_cast<size_t>(c);
                acc += kernel[static_cast<size_t>(t + half)] * in[src];
            }
            out[lin * cstride + static_cast<size_t>(c)] = acc;
        }
        for (int a = D - 1; a >= 0; --a) {
            if (++idx[a] < g.dim(a)) break;
            idx[a] = 0;
        }
    }
}

std::vector<double> smooth_buffer(const Grid& g, int channels,
                                  const std::vector<double>& values,
                                  double sigma, int kernel_size) {
    std::vector<double> kernel = gaussian_kernel(sigma, kernel_size);
    std::vector<double> a = values, b(values.size());
    for (int axis = 0; axis < g.ndim(); ++axis) {
        smooth_axis(g, axis, channels, kernel, a, b);
        std::swap(a, b);
    }
    return a;
}

}  // namespace

ScalarImage gaussian_smooth(const ScalarImage& img, double sigma,
                            int kernel_size) {
    return ScalarImage(img.grid(),
                       smooth_buffer(img.grid(), 1, img.values(), sigma,
                                     kernel_size));
}

VectorField gaussian_smooth(const VectorField& f, double sigma,
                            int kernel_size) {
    return VectorField(f.grid(),
                       smooth_buffer(f.grid(), f.grid().ndim(), f.vectors(),
                                     sigma, kernel_size),
                       f.kind());
}

// ---------------------------------------------------------------------------
// Jacobian analysis.

namespace {

// d(phi_i)/d(axis) at voxel idx, central in the interior, one-sided at
// the borders.  phi = id + u.
double phi_derivative(const VectorField& u, const int* idx, int comp,
                      int axis, std::size_t lin, std::size_t stride) {
    const Grid& g = u.grid();
    const int n = g.dim(axis);
    const int i = idx[axis];
    auto uc = [&](std::ptrdiff_t off) {
        return u.component(static_cast<std::size_t>(
                               static_cast<std::ptrdiff_t>(lin) + off),
                           comp);
    };
    const auto s = static_cast<std::ptrdiff_t>(stride);
    double du;
    if (i == 0)
        du = uc(s) - uc(0);
    else if (i == n - 1)
        du = uc(0) - uc(-s);
    else
        du = 0.5 * (uc(s) - uc(-s));
    return du + (comp == axis ? 1.0 : 0.0);
}

}  // namespace

ScalarImage jacobian_map(const Transform& phi) {
    const Grid& g = phi.grid();
    const int D = g.ndim();
    const VectorField& u = phi.displacement();
    std::size_t strides[3];
    {
        std::size_t s = 1;
        for (int a = D - 1; a >= 0; --a) {
            strides[a] = s;
            s *= static_cast<size_t>(g.dim(a));
        }
    }
    ScalarImage out(g);
    for_each_voxel(g, [&](std::size_t lin, const int* idx) {
        double J[3][3];
        for (int i = 0; i < D; ++i)
            for (int j = 0; j < D; ++j)
                J[i][j] = phi_derivative(u, idx, i, j, lin, strides[j]);
        double det;
        if (D == 2) {
            det = J[0][0] * J[1][1] - J[0][1] * J[1][0];
        } else {
            det = J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1]) -
                  J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0]) +
                  J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0]);
        }
        out.at(lin) = det;
    });
    return out;
}

double negative_jacobian_fraction(const Transform& phi) {
    ScalarImage jm = jacobian_map(phi);
    std::size_t neg = 0;
    for (double d : jm.values())
        if (d < 0.0) ++neg;
    return static_cast<double>(neg) /
           static_cast<double>(jm.values().size());
}

}  // namespace dreg
