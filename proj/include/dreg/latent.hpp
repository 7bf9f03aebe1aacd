// Applications of the learned deformation encoding: sampling from the
// prior, transporting codes onto new subjects, canonical correlation
// projection against class labels, nearest-centroid classification.
#pragma once

#include <random>
#include <vector>

#include "dreg/model.hpp"

namespace dreg {

// z ~ N(0, I); the decoded deformation applied to `moving`.
RegistrationResult sample_deformation(const ScalarImage& moving,
                                      const ModelParams& params,
                                      const ModelConfig& cfg,
                                      std::mt19937_64& rng);

// Decode a foreign code conditioned on a new target image.
RegistrationResult transport(const std::vector<double>& z,
                             const ScalarImage& target,
                             const ModelParams& params,
                             const ModelConfig& cfg);

struct CcaModel {
    std::vector<double> mean;                    // length d
    std::vector<std::vector<double>> basis;      // c rows, each length d
    std::vector<double> correlations;            // c, non-increasing
    std::vector<int> class_ids;                  // distinct labels seen
    std::vector<std::vector<double>> centroids;  // per class, projected

    int components() const { return static_cast<int>(basis.size()); }
    int dim() const { return static_cast<int>(mean.size()); }
};

// Canonical correlation of Z against one-hot class labels, solved as a
// generalized eigenproblem on ridge-regularized covariance blocks.
CcaModel cca_fit(const std::vector<std::vector<double>>& Z,
                 const std::vector<int>& labels, int components);

std::vector<double> cca_project(const CcaModel& model,
                                const std::vector<double>& z);

int classify_nearest_centroid(const CcaModel& model,
                              const std::vector<double>& z);

// k-fold cross-validation, refitting the CCA per fold.
double cross_validated_accuracy(const std::vector<std::vector<double>>& Z,
                                const std::vector<int>& labels, int components,
                                int folds);

}  // namespace dreg
