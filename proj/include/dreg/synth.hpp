// Synthetic desk-scale corpus: ring-shaped structures ("myocardium")
// over textured background, deformed by analytically defined velocity
// fields with known class labels and ground-truth transforms.
#pragma once

#include <random>
#include <string>
#include <vector>

#include "dreg/field.hpp"

namespace dreg {

enum class DeformClass {
    contraction_strong = 0,
    contraction_weak = 1,
    rotation = 2,
    shear = 3,
};

constexpr int kDeformClassCount = 4;
std::string deform_class_name(DeformClass c);

struct SynthSpec {
    Grid grid{{64, 64}};
    DeformClass cls = DeformClass::contraction_strong;
    double noise_sigma = 0.02;  // additive intensity noise on F
    // Per-class deformation parameter ranges; magnitudes are bounded so
    // the maximum displacement stays under 8 voxels.
    double contraction_strong_lo = 0.20, contraction_strong_hi = 0.30;
    double contraction_weak_lo = 0.06, contraction_weak_hi = 0.12;
    double rotation_lo = 0.25, rotation_hi = 0.40;  // radians
    double shear_lo = 0.15, shear_hi = 0.25;
};

struct SynthPair {
    ScalarImage moving;        // M
    ScalarImage fixed;         // F = M o phi + noise
    Transform phi;             // ground truth
    VectorField velocity;      // ground-truth stationary velocity
    ScalarImage annulus_mask_m;
    ScalarImage inner_mask_m;
    ScalarImage annulus_mask_f;  // ground-truth masks carried onto F
    ScalarImage inner_mask_f;
    DeformClass cls = DeformClass::contraction_strong;
};

SynthPair generate_pair(const SynthSpec& spec, std::mt19937_64& rng);

struct SynthDataset {
    std::vector<SynthPair> pairs;
    std::vector<bool> is_test;  // split by index parity (odd = test)
};

// Balanced dataset: n_per_class pairs for each spec, interleaved by
// class so the parity split is balanced too.
SynthDataset generate_dataset(const std::vector<SynthSpec>& specs,
                              int n_per_class, std::mt19937_64& rng);

}  // namespace dreg
