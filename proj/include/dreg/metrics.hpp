// Training criteria (symmetric LCC, SSD, KL divergence) and evaluation
// metrics (RMSE, Dice, 95%-tile Hausdorff, field statistics).
#pragma once

#include <vector>

#include "dreg/field.hpp"

namespace dreg {

struct LccConfig {
    double sigma_g = 2.0;   // Gaussian strength for local means
    int kernel_size = 9;    // odd
    double epsilon = 1e-5;  // stabilizer, calibrated for [0,1] intensities
};

// Symmetric local cross-correlation with half-way warps exp(+-v/2).
// Value in [0, 1); higher means more similar.
double lcc(const ScalarImage& fixed, const ScalarImage& moving,
           const VectorField& velocity, const LccConfig& cfg,
           int squaring_steps);

// Reconstruction negative-log-likelihood term: -lambda * lcc(...).
double lcc_loss_term(const ScalarImage& fixed, const ScalarImage& moving,
                     const VectorField& velocity, const LccConfig& cfg,
                     int squaring_steps, double lambda);

// KL( N(mu, diag exp(logvar)) || N(0, I) ), closed form.
double kl_diag_gaussian(const std::vector<double>& mu,
                        const std::vector<double>& logvar);

// Mean squared intensity difference.
double ssd(const ScalarImage& fixed, const ScalarImage& warped);
double rmse(const ScalarImage& fixed, const ScalarImage& warped);

// Masks are ScalarImages with values in {0, 1} (nonzero = foreground).
double dice(const ScalarImage& a, const ScalarImage& b);

// Symmetric 95th-percentile boundary distance in physical units (mm).
// Percentile by nearest rank per directed set, symmetrized by max.
double hausdorff95(const ScalarImage& a, const ScalarImage& b);

struct FieldStats {
    double mean_magnitude = 0.0;
    double mean_gradient_magnitude = 0.0;  // Frobenius norm of grad u
};

FieldStats field_stats(const VectorField& u);

}  // namespace dreg
