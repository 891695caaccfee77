#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "morphgen/core/grid.hpp"

namespace morphgen::io {

// A 3D scalar field with voxel spacing and orientation metadata.
// Data is raster order: index (i*y + j)*z + k, z fastest-varying.
struct Volume {
  Shape3 shape;
  std::vector<float> data;
  std::array<double, 3> spacing_mm = {1.0, 1.0, 1.0};
  std::string orientation = "RAS+";

  Volume() = default;
  Volume(Shape3 s, float fill = 0.0f) : shape(s), data(static_cast<std::size_t>(s.cells()), fill) {}

  float& at(long i, long j, long k) { return data[static_cast<std::size_t>(shape.index(i, j, k))]; }
  float at(long i, long j, long k) const { return data[static_cast<std::size_t>(shape.index(i, j, k))]; }

  bool all_finite() const;
};

// "MVL1" container: 4-byte magic, little-endian u32 header length, a JSON
// header (dtype, shape, spacing, orientation, creator), then the payload as
// little-endian IEEE-754 f32 in raster order.
void write_volume(const Volume& v, const std::filesystem::path& path);
Volume read_volume(const std::filesystem::path& path);

}  // namespace morphgen::io
