#pragma once

#include <array>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "morphgen/io/volume.hpp"
#include "morphgen/phantom/phantom.hpp"

namespace morphgen::morpho {

// Separable Gaussian with sigma = fwhm / (2 sqrt(2 ln 2)) per axis, kernel
// normalized to sum 1, reflect boundary; fwhm 0 is the identity.
io::Volume gaussian_smooth(const io::Volume& map, const std::array<double, 3>& fwhm_voxels);

struct TMap {
  io::Volume t;
  io::Volume dof;  // Welch-Satterthwaite, per voxel
  long n_a = 0, n_b = 0;
  std::array<double, 3> fwhm{0, 0, 0};
};

// Voxel-wise Welch t between two groups of smoothed maps. The low-variance
// correction adds eps = variance_floor_fraction * (max over voxels of the
// combined-sample variance) to every per-group variance.
TMap welch_tmap(const std::vector<io::Volume>& group_a, const std::vector<io::Volume>& group_b,
                const std::array<double, 3>& fwhm_voxels, double variance_floor_fraction);

// Total tissue volume in mm^3: sum of probabilities times voxel volume.
std::map<std::string, double> region_volumes(const phantom::TissueMaps& maps,
                                             const std::array<double, 3>& voxel_spacing_mm);

// Two-sided p of Student's t via the regularized incomplete beta function.
double student_t_two_sided_p(double t, double dof);

struct WelchResult {
  double t = 0.0;
  double dof = 0.0;
  double p = 1.0;
  bool degenerate = false;  // zero variance on both sides and no floor
};

WelchResult welch_ttest(std::span<const double> a, std::span<const double> b,
                        double variance_floor = 0.0);

struct VolumeTTestRow {
  std::string cohort, tissue;
  double real_mean = 0, real_std = 0;
  double synth_mean = 0, synth_std = 0;
  double t = 0, p = 1, dof = 0;
  bool significant = false;
  bool degenerate = false;
};

struct VolumeTTestTable {
  double target_p = 2.083e-05;
  std::vector<VolumeTTestRow> rows;
};

// cohort -> tissue -> per-subject volumes
using VolumeSamples = std::map<std::string, std::map<std::string, std::vector<double>>>;

VolumeTTestTable volume_ttests(const VolumeSamples& real, const VolumeSamples& synthetic,
                               double target_p, double variance_floor = 0.0);

// Intensity-based soft segmentation: stands in for the multi-atlas /
// unified-segmentation pipeline when scoring synthetic volumes. Class
// weights are Gaussian in intensity distance (classes: background 0, the
// four tissues, shell), normalized per voxel.
phantom::TissueMaps segment_tissues(const io::Volume& v,
                                    const phantom::TissueIntensities& intensities,
                                    double sigma = 0.03);

}  // namespace morphgen::morpho
