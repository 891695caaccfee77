#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "morphgen/core/errors.hpp"
#include "morphgen/core/grid.hpp"
#include "morphgen/core/rng.hpp"

namespace morphgen::vq {

// Codebook with exponential-moving-average statistics. Vectors and EMA state
// are kept in 64-bit precision regardless of the network scalar type.
struct Codebook {
  int K = 2048;
  int n_z = 32;
  double gamma = 0.5;  // EMA decay
  double beta = 0.25;  // commitment weight
  double dead_eps = 1e-6;
  bool restart_dead = false;

  std::vector<double> vectors;     // K * n_z
  std::vector<double> ema_counts;  // K
  std::vector<double> ema_sums;    // K * n_z

  static Codebook init(int K, int n_z, double gamma, double beta, std::uint64_t seed);
  void validate() const;
  const double* code(int k) const { return vectors.data() + static_cast<std::size_t>(k) * n_z; }
};

// Discrete index grid; tokens in [0, K).
struct TokenGrid {
  Shape3 shape;
  std::vector<int> tokens;
};

struct TokenSequence {
  std::vector<int> tokens;
  Shape3 source_grid_shape;
};

// argmin_k ||z - e_k||_2, ties broken by lowest index.
int nearest_code(std::span<const double> z, const Codebook& cb);

// EMA update per assignment counts; codes with N_i <= dead_eps are frozen
// (optionally reseeded from random batch latents when restart_dead is set).
void ema_update(Codebook& cb, const std::vector<std::vector<double>>& batch_latents,
                const std::vector<int>& assignments, Rng* restart_rng = nullptr);

// beta * mean squared difference; zq is treated as constant for gradients.
double commitment_loss(std::span<const double> zg, std::span<const double> zq, double beta);

// Raster flattening, z fastest-varying; unflatten(flatten(g)) == g.
TokenSequence flatten_tokens(const TokenGrid& tg);
TokenGrid unflatten_tokens(const TokenSequence& ts);

// Quantize a latent grid stored cell-major ([cells x n_z]). The quantized
// output equals the selected codebook vector per cell; in the training graph
// the quantized value behaves as encoder output plus a constant, so gradients
// pass through unchanged (straight-through).
template <typename T>
void quantize_grid(const T* latent, long cells, const Codebook& cb, T* quantized, int* tokens) {
  const int nz = cb.n_z;
  const std::size_t total = static_cast<std::size_t>(cells) * static_cast<std::size_t>(nz);
  for (std::size_t i = 0; i < total; ++i)
    if (!std::isfinite(static_cast<double>(latent[i])))
      throw ValidationError("quantize_grid: non-finite latent value");
#pragma omp parallel
  {
    std::vector<double> cell(static_cast<std::size_t>(nz));
#pragma omp for schedule(static)
    for (long c = 0; c < cells; ++c) {
      const T* src = latent + static_cast<std::size_t>(c) * nz;
      for (int d = 0; d < nz; ++d) cell[static_cast<std::size_t>(d)] = static_cast<double>(src[d]);
      const int k = nearest_code(cell, cb);
      tokens[c] = k;
      const double* e = cb.code(k);
      T* dst = quantized + static_cast<std::size_t>(c) * nz;
      for (int d = 0; d < nz; ++d) dst[d] = static_cast<T>(e[d]);
    }
  }
}

}  // namespace morphgen::vq
