#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "morphgen/io/manifest.hpp"
#include "morphgen/io/volume.hpp"

namespace morphgen::phantom {

using io::Volume;

enum class Tissue { GM = 0, WM = 1, CSF = 2, DeepGM = 3 };

inline const char* tissue_name(Tissue t) {
  switch (t) {
    case Tissue::GM: return "GM";
    case Tissue::WM: return "WM";
    case Tissue::CSF: return "CSF";
    case Tissue::DeepGM: return "DeepGM";
  }
  return "?";
}

constexpr Tissue kAllTissues[4] = {Tissue::GM, Tissue::WM, Tissue::CSF, Tissue::DeepGM};

// Per-tissue probability maps, plus the non-brain head shell which carries
// intensity but is not a statistical tissue class.
struct TissueMaps {
  Volume gm, wm, csf, deep_gm;
  Volume shell;

  const Volume& of(Tissue t) const {
    switch (t) {
      case Tissue::GM: return gm;
      case Tissue::WM: return wm;
      case Tissue::CSF: return csf;
      case Tissue::DeepGM: return deep_gm;
    }
    return gm;
  }
  Volume& of(Tissue t) { return const_cast<Volume&>(static_cast<const TissueMaps*>(this)->of(t)); }
};

struct TissueIntensities {
  double gm = 0.45;
  double wm = 0.80;
  double csf = 0.12;
  double deep_gm = 0.60;
  double shell = 1.0;

  double of(Tissue t) const {
    switch (t) {
      case Tissue::GM: return gm;
      case Tissue::WM: return wm;
      case Tissue::CSF: return csf;
      case Tissue::DeepGM: return deep_gm;
    }
    return 0.0;
  }
};

struct PhantomSpec {
  Shape3 grid_shape{32, 48, 32};
  double ventricle_scale = 1.0;        // in [0.5, 1.5]
  double atrophy = 0.0;                // in [0, 0.3], thins the GM shell
  double deformation_amplitude = 0.0;  // voxels, per-subject smooth warp
  double noise_sigma = 0.0;            // additive Gaussian on the volume only
  TissueIntensities intensities;
  long downsample_divisor = 4;  // every grid dim must divide by this

  void validate() const;  // throws ValidationError naming the offending field
};

// Base (undeformed) geometry of the phantom, exposed so analyses can build
// ground-truth region masks. Semi-axes and centers are in voxel units.
struct Ellipsoid {
  double cx, cy, cz;
  double ax, ay, az;

  double volume() const;  // 4/3 pi a b c
  bool contains(double x, double y, double z) const;
};

struct PhantomGeometry {
  Ellipsoid head, brain, wm_boundary;
  std::vector<Ellipsoid> ventricles;  // CSF, already scaled by ventricle_scale
  std::vector<Ellipsoid> deep_nuclei;
};

PhantomGeometry phantom_geometry(const PhantomSpec& spec);

// Deterministic phantom: nested head/GM/WM/ventricle/deep-nuclei ellipsoids,
// per-subject smooth warp applied identically to the volume and all maps,
// Gaussian noise on the volume only, output clipped to [0,1].
struct Phantom {
  Volume volume;
  TissueMaps tissue;
};

Phantom generate_phantom(const PhantomSpec& spec, std::uint64_t seed);

// Binary mask of the (dilated) union of the base ventricle ellipsoids.
Volume ventricle_mask(const PhantomSpec& spec, double extra_scale, long dilation_voxels);

// How covariates are drawn when generating a cohort. Each covariate is either
// fixed, uniform in a range, or a balanced choice over a list (counts split as
// evenly as n allows). Labels come from a designated covariate's choice index.
struct CovariateSampler {
  struct Spec {
    enum class Kind { Fixed, Uniform, Choice } kind = Kind::Fixed;
    double fixed = 0.0;
    double lo = 0.0, hi = 0.0;
    std::vector<double> choices;
  };
  std::map<std::string, Spec> covariates;
  std::string label_by;                  // covariate whose choice names the group
  std::vector<std::string> label_names;  // one per choice of label_by; else single label
  std::string default_label = "all";
};

struct CohortGenConfig {
  double test_fraction = 0.2;
  std::string cohort_name = "cohort";
};

io::CohortManifest generate_cohort(const PhantomSpec& base_spec, const CovariateSampler& sampler,
                                   long n, std::uint64_t seed, const std::filesystem::path& out_dir,
                                   const CohortGenConfig& cfg = {});

}  // namespace morphgen::phantom
