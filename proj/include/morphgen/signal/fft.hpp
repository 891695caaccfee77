#pragma once

#include <complex>

#include "morphgen/core/grid.hpp"

namespace morphgen::signal {

// Unnormalized 3D complex DFT (FFTW-backed); raster layout, z fastest.
void dft3d(const std::complex<double>* in, Shape3 shape, std::complex<double>* out,
           bool inverse = false);

}  // namespace morphgen::signal
