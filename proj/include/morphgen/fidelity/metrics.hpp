#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "morphgen/io/volume.hpp"
#include "morphgen/nn/feature_net.hpp"

namespace morphgen::fidelity {

// Rows are samples, columns are extractor features.
struct FeatureSet {
  Eigen::MatrixXd features;
  std::string extractor_id;
  std::uint64_t extractor_seed = 0;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

// Gathers the middle slice (index floor(dim/2)) of each volume along `axis`
// and maps it through the extractor.
FeatureSet extract_middle_slice_features(const std::vector<io::Volume>& volumes, int axis,
                                         const nn::FeaturePyramid2d<double>& extractor);

// ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}) with covariances
// regularized by +eps I.
double frechet_distance(const FeatureSet& a, const FeatureSet& b, double eps = 1e-6);

// Dot-kernel biased MMD^2, which equals ||mean(a) - mean(b)||^2 exactly.
double mmd2_dot(const std::vector<io::Volume>& a, const std::vector<io::Volume>& b);

// Table-1 convention: mean +- std of mmd2_dot over seeded batch draws.
MeanStd mmd2_batchwise(const std::vector<io::Volume>& a, const std::vector<io::Volume>& b,
                       long batch_size, long draws, std::uint64_t seed);

// Largest level count such that every dim, halved (levels-1) times, still
// covers the 11-voxel SSIM window.
int msssim_supported_levels(Shape3 s, int max_levels = 5);

// Standard 5-level exponent weights, truncated and renormalized to sum 1.
std::vector<double> msssim_weights(int levels);

// 3D MS-SSIM, Gaussian window 11 / sigma 1.5, dynamic range 1, average-pool
// downsampling between levels.
double msssim3d(const io::Volume& x, const io::Volume& y, int levels,
                std::span<const double> weights);

// msssim3d at the supported level count with renormalized weights.
double msssim3d_auto(const io::Volume& x, const io::Volume& y);

// Mean +- std over all unordered pairs.
MeanStd pairwise_msssim(const std::vector<io::Volume>& samples);

}  // namespace morphgen::fidelity
