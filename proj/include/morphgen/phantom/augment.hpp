#pragma once

#include <cstdint>

#include "morphgen/io/volume.hpp"

namespace morphgen::phantom {

// Training-time augmentation: normalize, crop, small random affine, contrast
// gamma, intensity shift, Gaussian noise, final threshold to [0, 1].
struct AugmentConfig {
  Shape3 crop_shape{32, 48, 32};
  double rotation_range = 0.04;     // radians, per axis
  double translation_range = 2.0;   // voxels, per axis
  double scale_range = 0.05;        // fractional, per axis
  double gamma_lo = 0.99, gamma_hi = 1.01;
  double shift_lo = 0.0, shift_hi = 0.05;
  double noise_std = 0.02;

  static AugmentConfig identity(Shape3 crop) {
    AugmentConfig c;
    c.crop_shape = crop;
    c.rotation_range = 0.0;
    c.translation_range = 0.0;
    c.scale_range = 0.0;
    c.gamma_lo = c.gamma_hi = 1.0;
    c.shift_lo = c.shift_hi = 0.0;
    c.noise_std = 0.0;
    return c;
  }
};

io::Volume augment(const io::Volume& v, const AugmentConfig& cfg, std::uint64_t seed);

}  // namespace morphgen::phantom
