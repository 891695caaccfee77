#include "morphgen/phantom/augment.hpp"

#include <algorithm>
#include <cmath>

#include "morphgen/core/errors.hpp"
#include "morphgen/core/rng.hpp"

namespace morphgen::phantom {

using io::Volume;

namespace {

float sample_trilinear_zero(const Volume& v, double x, double y, double z) {
  const Shape3 s = v.shape;
  const long x0 = static_cast<long>(std::floor(x));
  const long y0 = static_cast<long>(std::floor(y));
  const long z0 = static_cast<long>(std::floor(z));
  const double fx = x - static_cast<double>(x0);
  const double fy = y - static_cast<double>(y0);
  const double fz = z - static_cast<double>(z0);
  double acc = 0.0;
  for (int dx = 0; dx < 2; ++dx)
    for (int dy = 0; dy < 2; ++dy)
      for (int dz = 0; dz < 2; ++dz) {
        const long xi = x0 + dx, yi = y0 + dy, zi = z0 + dz;
        if (xi < 0 || yi < 0 || zi < 0 || xi >= s.x || yi >= s.y || zi >= s.z) continue;
        const double w = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy) * (dz ? fz : 1.0 - fz);
        acc += w * static_cast<double>(v.data[static_cast<std::size_t>(s.index(xi, yi, zi))]);
      }
  return static_cast<float>(acc);
}

}  // namespace

Volume augment(const Volume& v, const AugmentConfig& cfg, std::uint64_t seed) {
  if (!v.all_finite()) throw ValidationError("augment: input intensities must be finite");
  const Shape3 in_s = v.shape;
  const Shape3 crop = cfg.crop_shape;
  if (crop.x > in_s.x || crop.y > in_s.y || crop.z > in_s.z)
    throw ValidationError("augment: crop shape " + crop.str() + " larger than input " + in_s.str());

  // 1. normalize to [0, 1]
  Volume work = v;
  {
    float lo = work.data[0], hi = work.data[0];
    for (float x : work.data) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
    const double range = static_cast<double>(hi) - static_cast<double>(lo);
    if (range > 0.0) {
      for (float& x : work.data)
        x = static_cast<float>((static_cast<double>(x) - static_cast<double>(lo)) / range);
    } else {
      std::fill(work.data.begin(), work.data.end(), 0.0f);
    }
  }

  // 2. center crop
  Volume cropped(crop);
  cropped.spacing_mm = v.spacing_mm;
  const long ox = (in_s.x - crop.x) / 2;
  const long oy = (in_s.y - crop.y) / 2;
  const long oz = (in_s.z - crop.z) / 2;
  for (long i = 0; i < crop.x; ++i)
    for (long j = 0; j < crop.y; ++j)
      for (long k = 0; k < crop.z; ++k)
        cropped.at(i, j, k) = work.at(i + ox, j + oy, k + oz);

  Rng rng(seed);
  double angles[3], trans[3], scales[3];
  for (double& a : angles) a = rng.uniform(-cfg.rotation_range, cfg.rotation_range);
  for (double& t : trans) t = rng.uniform(-cfg.translation_range, cfg.translation_range);
  for (double& sc : scales) sc = rng.uniform(1.0 - cfg.scale_range, 1.0 + cfg.scale_range);
  const double gamma = rng.uniform(cfg.gamma_lo, cfg.gamma_hi);
  const double shift = rng.uniform(cfg.shift_lo, cfg.shift_hi);

  // 3. random affine: out(p) = in(R * S * (p - c) + c + t), trilinear, zero pad.
  // Identity parameters leave the volume untouched exactly.
  Volume affined = cropped;
  const bool is_identity = angles[0] == 0.0 && angles[1] == 0.0 && angles[2] == 0.0 &&
                           trans[0] == 0.0 && trans[1] == 0.0 && trans[2] == 0.0 &&
                           scales[0] == 1.0 && scales[1] == 1.0 && scales[2] == 1.0;
  if (!is_identity) {
    const double cx = (static_cast<double>(crop.x) - 1.0) / 2.0;
    const double cy = (static_cast<double>(crop.y) - 1.0) / 2.0;
    const double cz = (static_cast<double>(crop.z) - 1.0) / 2.0;
    const double ca = std::cos(angles[0]), sa = std::sin(angles[0]);
    const double cb = std::cos(angles[1]), sb = std::sin(angles[1]);
    const double cc = std::cos(angles[2]), sc2 = std::sin(angles[2]);
    // R = Rx(a) * Ry(b) * Rz(c)
    const double R[3][3] = {
        {cb * cc, -cb * sc2, sb},
        {ca * sc2 + sa * sb * cc, ca * cc - sa * sb * sc2, -sa * cb},
        {sa * sc2 - ca * sb * cc, sa * cc + ca * sb * sc2, ca * cb},
    };
    for (long i = 0; i < crop.x; ++i)
      for (long j = 0; j < crop.y; ++j)
        for (long k = 0; k < crop.z; ++k) {
          const double px = (static_cast<double>(i) - cx) * scales[0];
          const double py = (static_cast<double>(j) - cy) * scales[1];
          const double pz = (static_cast<double>(k) - cz) * scales[2];
          const double sx = R[0][0] * px + R[0][1] * py + R[0][2] * pz + cx + trans[0];
          const double sy = R[1][0] * px + R[1][1] * py + R[1][2] * pz + cy + trans[1];
          const double sz = R[2][0] * px + R[2][1] * py + R[2][2] * pz + cz + trans[2];
          affined.at(i, j, k) = sample_trilinear_zero(cropped, sx, sy, sz);
        }
  }

  // 4.-6. gamma, shift, noise; 7. threshold
  const bool unit_gamma = gamma == 1.0;
  for (float& x : affined.data) {
    double val = static_cast<double>(x);
    if (!unit_gamma) val = std::pow(std::max(val, 0.0), gamma);
    val += shift;
    if (cfg.noise_std > 0.0) val += rng.normal(0.0, cfg.noise_std);
    x = static_cast<float>(std::clamp(val, 0.0, 1.0));
  }
  return affined;
}

}  // namespace morphgen::phantom
