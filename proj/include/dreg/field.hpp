// Dense scalar/vector fields on regular grids: warping, composition,
// the scaling-and-squaring exponential map, Gaussian smoothing and
// Jacobian analysis.
#pragma once

#include <array>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace dreg {

// Thrown when two fields that must live on the same grid do not.
struct grid_mismatch_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct invalid_field_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Regular grid: per-axis voxel counts and physical spacing in mm.
// Dimensionality is 2 or 3.
class Grid {
  public:
    Grid() = default;
    Grid(std::vector<int> dims, std::vector<double> spacing);
    explicit Grid(std::vector<int> dims);  // unit spacing

    int ndim() const { return static_cast<int>(dims_.size()); }
    const std::vector<int>& dims() const { return dims_; }
    const std::vector<double>& spacing() const { return spacing_; }
    int dim(int axis) const { return dims_[static_cast<size_t>(axis)]; }
    std::size_t voxel_count() const;

    bool operator==(const Grid& o) const {
        return dims_ == o.dims_ && spacing_ == o.spacing_;
    }
    bool same_dims(const Grid& o) const { return dims_ == o.dims_; }

  private:
    std::vector<int> dims_;
    std::vector<double> spacing_;
};

// One real intensity per voxel, axis-major contiguous (last axis fastest).
class ScalarImage {
  public:
    ScalarImage() = default;
    ScalarImage(Grid grid, std::vector<double> values);
    explicit ScalarImage(Grid grid, double fill = 0.0);

    const Grid& grid() const { return grid_; }
    const std::vector<double>& values() const { return values_; }
    std::vector<double>& values() { return values_; }

    double& at(std::size_t linear) { return values_[linear]; }
    double at(std::size_t linear) const { return values_[linear]; }

  private:
    Grid grid_;
    std::vector<double> values_;
};

enum class FieldKind { velocity, displacement };

// One D-vector per voxel, components interleaved last; units are voxels.
class VectorField {
  public:
    VectorField() = default;
    VectorField(Grid grid, std::vector<double> vectors, FieldKind kind);
    explicit VectorField(Grid grid, FieldKind kind = FieldKind::displacement);

    const Grid& grid() const { return grid_; }
    FieldKind kind() const { return kind_; }
    void set_kind(FieldKind k) { kind_ = k; }
    const std::vector<double>& vectors() const { return vectors_; }
    std::vector<double>& vectors() { return vectors_; }

    double component(std::size_t voxel, int c) const {
        return vectors_[voxel * static_cast<size_t>(grid_.ndim()) +
                        static_cast<size_t>(c)];
    }
    double& component(std::size_t voxel, int c) {
        return vectors_[voxel * static_cast<size_t>(grid_.ndim()) +
                        static_cast<size_t>(c)];
    }

    double max_norm() const;

  private:
    Grid grid_;
    std::vector<double> vectors_;
    FieldKind kind_;
};

// phi(x) = x + u(x), u stored as a displacement field in voxel units.
class Transform {
  public:
    Transform() = default;
    explicit Transform(VectorField displacement);

    static Transform identity(const Grid& grid);

    const Grid& grid() const { return displacement_.grid(); }
    const VectorField& displacement() const { return displacement_; }
    VectorField& displacement() { return displacement_; }

  private:
    VectorField displacement_;
};

// Multilinear interpolation with coordinates clamped to the domain.
double sample_scalar(const ScalarImage& img, const double* coord);
void sample_vector(const VectorField& f, const double* coord, double* out);

ScalarImage warp_image(const ScalarImage& img, const Transform& phi);
// Nearest-neighbor variant, for label masks.
ScalarImage warp_image_nearest(const ScalarImage& img, const Transform& phi);
Transform compose(const Transform& outer, const Transform& inner);

// Scaling and squaring: phi_0 = id + v * 2^-N, squared N times.
Transform exponentiate(const VectorField& velocity, int squaring_steps);

// Smallest N >= 0 with max per-voxel norm * 2^-N <= 0.5 voxel.
int choose_scaling_steps(const std::vector<VectorField>& samples);
constexpr int kDefaultScalingSteps = 4;

ScalarImage gaussian_smooth(const ScalarImage& img, double sigma,
                            int kernel_size);
VectorField gaussian_smooth(const VectorField& f, double sigma,
                            int kernel_size);
std::vector<double> gaussian_kernel(double sigma, int kernel_size);

// Per-voxel determinant of the transform gradient, central differences
// in the interior and one-sided at the borders.
ScalarImage jacobian_map(const Transform& phi);
double negative_jacobian_fraction(const Transform& phi);

}  // namespace dreg
