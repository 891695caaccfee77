#pragma once

#include <array>
#include <cstdint>
#include <string>

namespace morphgen {

// 3D grid extents, axis order fixed as (x, y, z) with z fastest-varying in
// memory (raster order).
struct Shape3 {
  long x = 0;
  long y = 0;
  long z = 0;

  long cells() const { return x * y * z; }
  long index(long i, long j, long k) const { return (i * y + j) * z + k; }
  bool operator==(const Shape3&) const = default;

  std::array<long, 3> dims() const { return {x, y, z}; }
  long dim(int axis) const { return axis == 0 ? x : (axis == 1 ? y : z); }

  std::string str() const {
    return "(" + std::to_string(x) + "," + std::to_string(y) + "," + std::to_string(z) + ")";
  }
};

}  // namespace morphgen
