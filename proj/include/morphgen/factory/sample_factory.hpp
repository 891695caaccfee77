#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "morphgen/core/errors.hpp"
#include "morphgen/prior/model.hpp"
#include "morphgen/vqvae/trainer.hpp"

namespace morphgen::factory {

struct ScoredSample {
  io::Volume volume;
  vq::TokenSequence tokens;
  double score = 0.0;  // mean Patch-GAN discriminator output
  // provenance
  std::string prior_id, vqvae_id;
  std::uint64_t seed = 0;
  long index = 0;
};

// Sample tokens -> unflatten -> decode -> score with the frozen
// discriminator. Per-sample seeds derive from (seed, index) so parallel and
// serial generation agree.
template <typename T>
std::vector<ScoredSample> generate_batch(const prior::PriorModel<T>& prior,
                                         vqvae::VqvaeModel<T>& vqvae, long n, double temperature,
                                         std::uint64_t seed, const std::string& prior_id = "prior",
                                         const std::string& vqvae_id = "vqvae") {
  if (n < 1) throw ValidationError("generate_batch: n must be >= 1");
  const Shape3 grid = prior.config().grid;
  const Shape3 vol_shape{grid.x * vqvae.config().downsample_factor(),
                         grid.y * vqvae.config().downsample_factor(),
                         grid.z * vqvae.config().downsample_factor()};
  if (vqvae.config().latent_shape(vol_shape) != grid)
    throw ValidationError("generate_batch: prior grid " + grid.str() +
                          " does not match the VQ-VAE latent shape");
  if (prior.config().vocab != vqvae.config().codebook.K + 1)
    throw ValidationError("generate_batch: prior vocab " + std::to_string(prior.config().vocab) +
                          " != codebook K+1");

  std::vector<ScoredSample> out(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) {
    ScoredSample& s = out[static_cast<std::size_t>(i)];
    s.index = i;
    s.seed = Rng::derive(seed, static_cast<std::uint64_t>(i)).next_u64();
    s.prior_id = prior_id;
    s.vqvae_id = vqvae_id;
    s.tokens = prior::sample_tokens(prior, grid, temperature, s.seed);
    s.volume = vqvae.decode_tokens(s.tokens);
    s.score = vqvae.score_volume(s.volume);
  }
  return out;
}

// Keeps the ceil(fraction * n) best-scoring samples, descending score, ties
// broken by earlier provenance (generation index).
inline std::vector<ScoredSample> select_top_fraction(std::vector<ScoredSample> samples,
                                                     double fraction) {
  if (samples.empty()) throw ValidationError("select_top_fraction: empty input");
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw ValidationError("select_top_fraction: fraction must be in (0, 1]");
  const std::size_t keep = static_cast<std::size_t>(
      std::ceil(fraction * static_cast<double>(samples.size())));
  std::stable_sort(samples.begin(), samples.end(), [](const ScoredSample& a, const ScoredSample& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.index < b.index;
  });
  samples.resize(keep);
  return samples;
}

}  // namespace morphgen::factory
