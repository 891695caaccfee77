#include "morphgen/vq/codebook.hpp"

#include <cmath>
#include <limits>

namespace morphgen::vq {

Codebook Codebook::init(int K, int n_z, double gamma, double beta, std::uint64_t seed) {
  if (K < 2) throw ValidationError("Codebook: K must be >= 2");
  if (n_z < 1) throw ValidationError("Codebook: n_z must be >= 1");
  if (!(gamma > 0.0 && gamma < 1.0)) throw ValidationError("Codebook: gamma must be in (0, 1)");
  if (!(beta >= 0.0)) throw ValidationError("Codebook: beta must be >= 0");

  Codebook cb;
  cb.K = K;
  cb.n_z = n_z;
  cb.gamma = gamma;
  cb.beta = beta;
  cb.vectors.resize(static_cast<std::size_t>(K) * n_z);
  cb.ema_counts.assign(static_cast<std::size_t>(K), 1.0);
  cb.ema_sums.resize(static_cast<std::size_t>(K) * n_z);

  // uniform(-1/K, 1/K) init; EMA sums start at the vectors so the first
  // update is well-defined.
  Rng rng(seed);
  const double lim = 1.0 / static_cast<double>(K);
  for (auto& v : cb.vectors) v = rng.uniform(-lim, lim);
  cb.ema_sums = cb.vectors;
  return cb;
}

void Codebook::validate() const {
  if (K < 2) throw ValidationError("Codebook: K must be >= 2");
  if (vectors.size() != static_cast<std::size_t>(K) * n_z)
    throw ValidationError("Codebook: vectors size mismatch");
  for (double v : vectors)
    if (!std::isfinite(v)) throw ValidationError("Codebook: non-finite vector entry");
  for (double c : ema_counts)
    if (!(c >= 0.0)) throw ValidationError("Codebook: negative EMA count");
}

int nearest_code(std::span<const double> z, const Codebook& cb) {
  if (z.size() != static_cast<std::size_t>(cb.n_z))
    throw ValidationError("nearest_code: latent dimension mismatch");
  for (double v : z)
    if (!std::isfinite(v)) throw ValidationError("nearest_code: non-finite input");

  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int k = 0; k < cb.K; ++k) {
    const double* e = cb.code(k);
    double d = 0.0;
    for (int i = 0; i < cb.n_z; ++i) {
      const double diff = z[static_cast<std::size_t>(i)] - e[i];
      d += diff * diff;
    }
    if (d < best_d) {  // strict: ties keep the lowest index
      best_d = d;
      best = k;
    }
  }
  return best;
}

void ema_update(Codebook& cb, const std::vector<std::vector<double>>& batch_latents,
                const std::vector<int>& assignments, Rng* restart_rng) {
  if (batch_latents.size() != assignments.size())
    throw ValidationError("ema_update: latents/assignments size mismatch");
  for (int a : assignments)
    if (a < 0 || a >= cb.K)
      throw ValidationError("ema_update: assignment index " + std::to_string(a) + " out of range");

  const int nz = cb.n_z;
  std::vector<double> n_i(static_cast<std::size_t>(cb.K), 0.0);
  std::vector<double> sum_i(static_cast<std::size_t>(cb.K) * nz, 0.0);
  for (std::size_t j = 0; j < batch_latents.size(); ++j) {
    const auto& z = batch_latents[j];
    if (z.size() != static_cast<std::size_t>(nz))
      throw ValidationError("ema_update: latent dimension mismatch");
    const int a = assignments[j];
    n_i[static_cast<std::size_t>(a)] += 1.0;
    double* s = sum_i.data() + static_cast<std::size_t>(a) * nz;
    for (int d = 0; d < nz; ++d) s[d] += z[static_cast<std::size_t>(d)];
  }

  const double g = cb.gamma;
  for (int k = 0; k < cb.K; ++k) {
    cb.ema_counts[static_cast<std::size_t>(k)] =
        cb.ema_counts[static_cast<std::size_t>(k)] * g + n_i[static_cast<std::size_t>(k)] * (1.0 - g);
    double* m = cb.ema_sums.data() + static_cast<std::size_t>(k) * nz;
    const double* s = sum_i.data() + static_cast<std::size_t>(k) * nz;
    for (int d = 0; d < nz; ++d) m[d] = m[d] * g + s[d] * (1.0 - g);

    double* e = cb.vectors.data() + static_cast<std::size_t>(k) * nz;
    const double count = cb.ema_counts[static_cast<std::size_t>(k)];
    if (count > cb.dead_eps) {
      for (int d = 0; d < nz; ++d) e[d] = m[d] / count;
    } else if (cb.restart_dead && restart_rng && !batch_latents.empty()) {
      const auto& z = batch_latents[static_cast<std::size_t>(
          restart_rng->next_below(batch_latents.size()))];
      for (int d = 0; d < nz; ++d) e[d] = z[static_cast<std::size_t>(d)];
    }
    // otherwise the vector is frozen
  }
}

double commitment_loss(std::span<const double> zg, std::span<const double> zq, double beta) {
  if (zg.size() != zq.size()) throw ValidationError("commitment_loss: shape mismatch");
  if (zg.empty()) throw ValidationError("commitment_loss: empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < zg.size(); ++i) {
    const double d = zg[i] - zq[i];
    acc += d * d;
  }
  return beta * acc / static_cast<double>(zg.size());
}

TokenSequence flatten_tokens(const TokenGrid& tg) {
  if (tg.tokens.size() != static_cast<std::size_t>(tg.shape.cells()))
    throw ValidationError("flatten_tokens: token count " + std::to_string(tg.tokens.size()) +
                          " != grid cells " + std::to_string(tg.shape.cells()));
  // grid storage is already raster order (z fastest)
  return TokenSequence{tg.tokens, tg.shape};
}

TokenGrid unflatten_tokens(const TokenSequence& ts) {
  if (ts.tokens.size() != static_cast<std::size_t>(ts.source_grid_shape.cells()))
    throw ValidationError("unflatten_tokens: sequence length " + std::to_string(ts.tokens.size()) +
                          " != grid cells " + std::to_string(ts.source_grid_shape.cells()));
  return TokenGrid{ts.source_grid_shape, ts.tokens};
}

}  // namespace morphgen::vq
