#include "dreg/synth.hpp"

#include <algorithm>
#include <cmath>

namespace dreg {

namespace {

double smooth_edge(double d, double edge, double sharpness = 1.5) {
    return 1.0 / (1.0 + std::exp((d - edge) * sharpness));
}

struct RingGeometry {
    double cx, cy;
    double r_inner, r_outer;
};

RingGeometry draw_geometry(const Grid& g, std::mt19937_64& rng) {
    const double n0 = g.dim(0), n1 = g.dim(1);
    std::uniform_real_distribution<double> jitter(-2.0, 2.0);
    std::uniform_real_distribution<double> rad(0.24, 0.30);
    std::uniform_real_distribution<double> frac(0.50, 0.60);
    RingGeometry geo;
    geo.cx = 0.5 * (n0 - 1) + jitter(rng);
    geo.cy = 0.5 * (n1 - 1) + jitter(rng);
    geo.r_outer = rad(rng) * std::min(n0, n1);
    geo.r_inner = frac(rng) * geo.r_outer;
    return geo;
}

ScalarImage background_texture(const Grid& g, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> d(0.0, 1.0);
    ScalarImage noise(g);
    for (std::size_t i = 0; i < g.voxel_count(); ++i) noise.at(i) = d(rng);
    ScalarImage tex = gaussian_smooth(noise, 2.5, 11);
    const auto [lo, hi] =
        std::minmax_element(tex.values().begin(), tex.values().end());
    const double span = (*hi > *lo) ? (*hi - *lo) : 1.0;
    for (double& v : tex.values()) v = (v - *lo) / span;
    return tex;
}

double radial_distance(const RingGeometry& geo, double x, double y) {
    return std::hypot(x - geo.cx, y - geo.cy);
}

ScalarImage render_image(const Grid& g, const RingGeometry& geo,
                         const ScalarImage& tex) {
    const int n1 = g.dim(1);
    ScalarImage img(g);
    for (int i = 0; i < g.dim(0); ++i)
        for (int j = 0; j < n1; ++j) {
            const double d = radial_distance(geo, i, j);
            const double ring = smooth_edge(d, geo.r_outer) *
                                (1.0 - smooth_edge(d, geo.r_inner));
            const double pool = smooth_edge(d, geo.r_inner);
            const std::size_t v = static_cast<size_t>(i * n1 + j);
            img.at(v) = std::clamp(
                0.12 + 0.22 * tex.at(v) + 0.58 * ring + 0.18 * pool, 0.0, 1.0);
        }
    return img;
}

ScalarImage digitize_ring(const Grid& g, const RingGeometry& geo,
                          const Transform* phi, bool inner_disk) {
    const int n1 = g.dim(1);
    ScalarImage m(g);
    for (int i = 0; i < g.dim(0); ++i)
        for (int j = 0; j < n1; ++j) {
            const std::size_t v = static_cast<size_t>(i * n1 + j);
            double x = i, y = j;
            if (phi != nullptr) {
                x += phi->displacement().component(v, 0);
                y += phi->displacement().component(v, 1);
            }
            const double d = radial_distance(geo, x, y);
            const bool in = inner_disk
                                ? (d < geo.r_inner)
                                : (d >= geo.r_inner && d <= geo.r_outer);
            m.at(v) = in ? 1.0 : 0.0;
        }
    return m;
}

double draw_magnitude(const SynthSpec& spec, std::mt19937_64& rng) {
    auto pick = [&rng](double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(rng);
    };
    switch (spec.cls) {
        case DeformClass::contraction_strong:
            return pick(spec.contraction_strong_lo, spec.contraction_strong_hi);
        case DeformClass::contraction_weak:
            return pick(spec.contraction_weak_lo, spec.contraction_weak_hi);
        case DeformClass::rotation: {
            const double w = pick(spec.rotation_lo, spec.rotation_hi);
            return rng() % 2 == 0 ? w : -w;
        }
        case DeformClass::shear: {
            const double a = pick(spec.shear_lo, spec.shear_hi);
            return rng() % 2 == 0 ? a : -a;
        }
    }
    throw invalid_field_error("unknown deformation class");
}

// Class-specific stationary velocity, localized around the ring by a
// Gaussian envelope so displacements vanish at the border.
VectorField class_velocity(const Grid& g, const RingGeometry& geo,
                           DeformClass cls, double magnitude) {
    const int n1 = g.dim(1);
    const double s = geo.r_outer;
    VectorField v(g, FieldKind::velocity);
    for (int i = 0; i < g.dim(0); ++i)
        for (int j = 0; j < n1; ++j) {
            const std::size_t vox = static_cast<size_t>(i * n1 + j);
            const double dx = i - geo.cx, dy = j - geo.cy;
            const double env =
                std::exp(-(dx * dx + dy * dy) / (2.0 * s * s));
            double vx = 0.0, vy = 0.0;
            switch (cls) {
                case DeformClass::contraction_strong:
                case DeformClass::contraction_weak:
                    // outward phi; the observed F structure contracts
                    vx = magnitude * dx;
                    vy = magnitude * dy;
                    break;
                case DeformClass::rotation:
                    vx = -magnitude * dy;
                    vy = magnitude * dx;
                    break;
                case DeformClass::shear:
                    vx = magnitude * dy;
                    break;
            }
            v.component(vox, 0) = vx * env;
            v.component(vox, 1) = vy * env;
        }
    return v;
}

}  // namespace

std::string deform_class_name(DeformClass c) {
    switch (c) {
        case DeformClass::contraction_strong: return "contraction_strong";
        case DeformClass::contraction_weak: return "contraction_weak";
        case DeformClass::rotation: return "rotation";
        case DeformClass::shear: return "shear";
    }
    return "unknown";
}

SynthPair generate_pair(const SynthSpec& spec, std::mt19937_64& rng) {
    if (spec.grid.ndim() != 2)
        throw invalid_field_error("synthetic generator is 2-D");
    const Grid& g = spec.grid;
    const RingGeometry geo = draw_geometry(g, rng);
    const ScalarImage tex = background_texture(g, rng);

    SynthPair p;
    p.cls = spec.cls;
    p.moving = render_image(g, geo, tex);
    p.velocity = class_velocity(g, geo, spec.cls, draw_magnitude(spec, rng));
    p.phi = exponentiate(p.velocity, kDefaultScalingSteps);
    p.fixed = warp_image(p.moving, p.phi);
    if (spec.noise_sigma > 0.0) {
        std::normal_distribution<double> nd(0.0, spec.noise_sigma);
        for (double& x : p.fixed.values())
            x = std::clamp(x + nd(rng), 0.0, 1.0);
    }
    p.annulus_mask_m = digitize_ring(g, geo, nullptr, false);
    p.inner_mask_m = digitize_ring(g, geo, nullptr, true);
    p.annulus_mask_f = digitize_ring(g, geo, &p.phi, false);
    p.inner_mask_f = digitize_ring(g, geo, &p.phi, true);
    return p;
}

SynthDataset generate_dataset(const std::vector<SynthSpec>& specs,
                              int n_per_class, std::mt19937_64& rng) {
    if (n_per_class < 1)
        throw invalid_field_error("n_per_class must be >= 1");
    SynthDataset ds;
    for (const SynthSpec& spec : specs)
        for (int i = 0; i < n_per_class; ++i)
            ds.pairs.push_back(generate_pair(spec, rng));
    ds.is_test.resize(ds.pairs.size());
    for (std::size_t i = 0; i < ds.pairs.size(); ++i)
        ds.is_test[i] = (i % 2 == 1);
    return ds;
}

}  // namespace dreg
