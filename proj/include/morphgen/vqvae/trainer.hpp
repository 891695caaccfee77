#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "morphgen/io/manifest.hpp"
#include "morphgen/phantom/augment.hpp"
#include "morphgen/vq/codebook.hpp"
#include "morphgen/vqvae/losses.hpp"
#include "morphgen/vqvae/model.hpp"

namespace morphgen::vqvae {

struct StepMetrics {
  double loss_d = 0.0;
  double loss_g_adv = 0.0;
  double l1 = 0.0;
  double frequency = 0.0;
  double perceptual = 0.0;
  double commitment = 0.0;
  double total_g = 0.0;
};

// Encoder + codebook + decoder + Patch-GAN discriminator with their Adam
// optimizers; one logical stream of alternating D/G steps.
template <typename T>
class VqvaeModel {
 public:
  VqvaeModel(const VqvaeConfig& cfg, std::uint64_t seed)
      : cfg_(cfg),
        encoder_(cfg, Rng::derive(seed, 1).next_u64()),
        decoder_(cfg, Rng::derive(seed, 2).next_u64()),
        disc_(cfg, Rng::derive(seed, 3).next_u64()),
        percep_(make_percep_cfg(cfg)),
        codebook_(vq::Codebook::init(cfg.codebook.K, cfg.codebook.n_z, cfg.codebook.gamma,
                                     cfg.codebook.beta, Rng::derive(seed, 4).next_u64())),
        opt_g_(cfg.lr_generator, cfg.lr_decay),
        opt_d_(cfg.lr_discriminator, cfg.lr_decay) {
    cfg.validate();
    codebook_.restart_dead = cfg.codebook.restart_dead_codes;
    std::vector<nn::ParamSlot<T>> gp;
    encoder_.collect(gp);
    decoder_.collect(gp);
    opt_g_.attach(gp);
    std::vector<nn::ParamSlot<T>> dp;
    disc_.collect(dp);
    opt_d_.attach(dp);
  }

  const VqvaeConfig& config() const { return cfg_; }
  vq::Codebook& codebook() { return codebook_; }
  const vq::Codebook& codebook() const { return codebook_; }
  Encoder<T>& encoder() { return encoder_; }
  Decoder<T>& decoder() { return decoder_; }
  Discriminator<T>& discriminator() { return disc_; }
  const nn::FeaturePyramid2d<T>& perceptual_net() const { return percep_; }
  long step_count() const { return step_; }

  std::vector<nn::ParamSlot<T>> all_params() {
    std::vector<nn::ParamSlot<T>> out;
    encoder_.collect(out);
    decoder_.collect(out);
    disc_.collect(out);
    return out;
  }

  // One alternating update: (a) discriminator on loss_D, (b) generator on
  // rec + w_adv * loss_G + commitment, then the codebook EMA update.
  StepMetrics train_step(const std::vector<io::Volume>& batch, std::uint64_t seed) {
    if (batch.empty()) throw ValidationError("train_step: empty batch");
    const long B = static_cast<long>(batch.size());
    const Shape3 in_s = batch[0].shape;
    const Shape3 lat_s = cfg_.latent_shape(in_s);
    const long lat_cells = lat_s.cells();
    const int nz = cfg_.codebook.n_z;
    const std::size_t lat_n = static_cast<std::size_t>(lat_cells) * nz;
    const std::size_t vol_n = static_cast<std::size_t>(in_s.cells());

    encoder_.ensure_slots(B);
    decoder_.ensure_slots(B);
    disc_.ensure_slots(2 * B);
    const Shape3 patch = disc_.patch_shape(in_s);
    const std::size_t patch_n = static_cast<std::size_t>(patch.cells());

    std::vector<std::vector<T>> xs(batch.size());
    std::vector<std::vector<T>> z(batch.size()), zq(batch.size()), xhat(batch.size());
    std::vector<std::vector<int>> tokens(batch.size());
    for (long i = 0; i < B; ++i) {
      const auto& v = batch[static_cast<std::size_t>(i)];
      if (v.shape != in_s) throw ValidationError("train_step: mixed shapes in batch");
      xs[static_cast<std::size_t>(i)].resize(vol_n);
      for (std::size_t j = 0; j < vol_n; ++j)
        xs[static_cast<std::size_t>(i)][j] = static_cast<T>(v.data[j]);
      z[static_cast<std::size_t>(i)].resize(lat_n);
      zq[static_cast<std::size_t>(i)].resize(lat_n);
      tokens[static_cast<std::size_t>(i)].resize(static_cast<std::size_t>(lat_cells));
      xhat[static_cast<std::size_t>(i)].resize(vol_n);
      encoder_.forward(xs[static_cast<std::size_t>(i)].data(), in_s, i,
                       z[static_cast<std::size_t>(i)].data());
      vq::quantize_grid(z[static_cast<std::size_t>(i)].data(), lat_cells, codebook_,
                        zq[static_cast<std::size_t>(i)].data(),
                        tokens[static_cast<std::size_t>(i)].data());
      decoder_.forward(zq[static_cast<std::size_t>(i)].data(), lat_s, i,
                       xhat[static_cast<std::size_t>(i)].data());
    }

    StepMetrics m;

    // (a) discriminator step
    std::vector<T> d_real(static_cast<std::size_t>(B) * patch_n),
        d_fake(static_cast<std::size_t>(B) * patch_n);
    for (long i = 0; i < B; ++i) {
      disc_.forward(xs[static_cast<std::size_t>(i)].data(), in_s, i,
                    d_real.data() + static_cast<std::size_t>(i) * patch_n);
      disc_.forward(xhat[static_cast<std::size_t>(i)].data(), in_s, B + i,
                    d_fake.data() + static_cast<std::size_t>(i) * patch_n);
    }
    const LsganLosses gan = lsgan_losses<T>(d_real, d_fake);
    m.loss_d = gan.loss_d;
    if (cfg_.w_adversarial > 0.0) {
      opt_d_.zero_grad();
      std::vector<T> g_real(d_real.size()), g_fake(d_fake.size());
      lsgan_d_grads<T>(d_real, d_fake, g_real.data(), g_fake.data());
      for (long i = 0; i < B; ++i) {
        disc_.backward(i, g_real.data() + static_cast<std::size_t>(i) * patch_n, nullptr);
        disc_.backward(B + i, g_fake.data() + static_cast<std::size_t>(i) * patch_n, nullptr);
      }
      opt_d_.step();
    }

    // (b) generator step against the updated discriminator
    opt_g_.zero_grad();
    std::vector<std::vector<double>> batch_latents;
    std::vector<int> assignments;
    batch_latents.reserve(static_cast<std::size_t>(B * lat_cells));
    double adv_g_acc = 0.0;
    for (long i = 0; i < B; ++i) {
      const std::size_t ui = static_cast<std::size_t>(i);
      std::vector<T> dxhat(vol_n, T(0));
      const ReconComponents rec = reconstruction_loss(
          xs[ui].data(), xhat[ui].data(), in_s, cfg_, percep_,
          Rng::derive(seed, static_cast<std::uint64_t>(i)).next_u64(), dxhat.data());
      m.l1 += rec.l1 / static_cast<double>(B);
      m.frequency += rec.frequency / static_cast<double>(B);
      m.perceptual += rec.perceptual / static_cast<double>(B);

      if (cfg_.w_adversarial > 0.0) {
        std::vector<T> scores(patch_n);
        disc_.forward(xhat[ui].data(), in_s, B + i, scores.data());
        double g2 = 0.0;
        for (T sc : scores) {
          const double d = static_cast<double>(sc) - 1.0;
          g2 += 0.5 * d * d;
        }
        adv_g_acc += g2 / static_cast<double>(patch_n) / static_cast<double>(B);
        std::vector<T> gscore(patch_n);
        lsgan_g_grad<T>(std::span<const T>(scores), gscore.data());
        // scale: loss_G averaged over batch; discriminator params are frozen here
        for (auto& gsc : gscore)
          gsc = static_cast<T>(static_cast<double>(gsc) * cfg_.w_adversarial /
                               static_cast<double>(B));
        std::vector<T> dx_adv(vol_n);
        disc_.backward(B + i, gscore.data(), dx_adv.data());
        for (std::size_t j = 0; j < vol_n; ++j) dxhat[j] += dx_adv[j];
      }

      // batch-mean scaling for the reconstruction gradient
      for (auto& gv : dxhat) gv = static_cast<T>(static_cast<double>(gv) / B);

      std::vector<T> dzq(lat_n);
      decoder_.backward(i, dxhat.data(), dzq.data());

      // straight-through into the encoder plus the commitment term
      double commit = 0.0;
      const double cscale = 2.0 * cfg_.codebook.beta / (static_cast<double>(lat_n) * B);
      for (std::size_t j = 0; j < lat_n; ++j) {
        const double diff = static_cast<double>(z[ui][j]) - static_cast<double>(zq[ui][j]);
        commit += diff * diff;
        dzq[j] = static_cast<T>(static_cast<double>(dzq[j]) + cscale * diff);
      }
      m.commitment += cfg_.codebook.beta * commit / (static_cast<double>(lat_n) * B);
      encoder_.backward(i, dzq.data(), nullptr);

      for (long cidx = 0; cidx < lat_cells; ++cidx) {
        std::vector<double> cell(static_cast<std::size_t>(nz));
        for (int d = 0; d < nz; ++d)
          cell[static_cast<std::size_t>(d)] =
              static_cast<double>(z[ui][static_cast<std::size_t>(cidx) * nz + d]);
        batch_latents.push_back(std::move(cell));
        assignments.push_back(tokens[ui][static_cast<std::size_t>(cidx)]);
      }
    }
    m.loss_g_adv = adv_g_acc;
    opt_g_.step();

    Rng restart_rng = Rng::derive(seed, 0xDEADULL);
    vq::ema_update(codebook_, batch_latents, assignments,
                   codebook_.restart_dead ? &restart_rng : nullptr);

    m.total_g = m.l1 * cfg_.w_pixel + m.frequency * cfg_.w_frequency +
                m.perceptual * cfg_.w_perceptual + cfg_.w_adversarial * m.loss_g_adv +
                m.commitment;
    ++step_;
    if (!std::isfinite(m.total_g) || !std::isfinite(m.loss_d))
      throw NumericalError("train_step: non-finite loss at step " + std::to_string(step_));
    return m;
  }

  // Reconstruction-only loss on a volume (no gradients); used for validation.
  double eval_rec_loss(const io::Volume& v, std::uint64_t seed) {
    const Shape3 in_s = v.shape;
    const Shape3 lat_s = cfg_.latent_shape(in_s);
    std::vector<T> x(v.data.begin(), v.data.end());
    std::vector<T> z(static_cast<std::size_t>(lat_s.cells()) * cfg_.codebook.n_z);
    std::vector<T> zq(z.size());
    std::vector<int> toks(static_cast<std::size_t>(lat_s.cells()));
    std::vector<T> xhat(x.size());
    encoder_.ensure_slots(1);
    decoder_.ensure_slots(1);
    encoder_.forward(x.data(), in_s, 0, z.data());
    vq::quantize_grid(z.data(), lat_s.cells(), codebook_, zq.data(), toks.data());
    decoder_.forward(zq.data(), lat_s, 0, xhat.data());
    return reconstruction_loss(x.data(), xhat.data(), in_s, cfg_, percep_, seed).total;
  }

  vq::TokenSequence encode_tokens(const io::Volume& v) {
    const Shape3 lat_s = cfg_.latent_shape(v.shape);
    std::vector<T> x(v.data.begin(), v.data.end());
    std::vector<T> z(static_cast<std::size_t>(lat_s.cells()) * cfg_.codebook.n_z);
    std::vector<T> zq(z.size());
    vq::TokenGrid grid;
    grid.shape = lat_s;
    grid.tokens.resize(static_cast<std::size_t>(lat_s.cells()));
    encoder_.ensure_slots(1);
    encoder_.forward(x.data(), v.shape, 0, z.data());
    vq::quantize_grid(z.data(), lat_s.cells(), codebook_, zq.data(), grid.tokens.data());
    return vq::flatten_tokens(grid);
  }

  io::Volume decode_tokens(const vq::TokenSequence& ts) {
    const vq::TokenGrid grid = vq::unflatten_tokens(ts);
    const Shape3 lat_s = grid.shape;
    const int nz = cfg_.codebook.n_z;
    std::vector<T> zq(static_cast<std::size_t>(lat_s.cells()) * nz);
    for (long c = 0; c < lat_s.cells(); ++c) {
      const int k = grid.tokens[static_cast<std::size_t>(c)];
      if (k < 0 || k >= codebook_.K)
        throw ValidationError("decode_tokens: token " + std::to_string(k) + " out of range");
      const double* e = codebook_.code(k);
      for (int d = 0; d < nz; ++d) zq[static_cast<std::size_t>(c) * nz + d] = static_cast<T>(e[d]);
    }
    io::Volume out(decoder_.out_shape(lat_s));
    std::vector<T> buf(out.data.size());
    decoder_.ensure_slots(1);
    decoder_.forward(zq.data(), lat_s, 0, buf.data());
    for (std::size_t i = 0; i < buf.size(); ++i) out.data[i] = static_cast<float>(buf[i]);
    return out;
  }

  // Mean Patch-GAN score of a volume under the current discriminator.
  double score_volume(const io::Volume& v) {
    const Shape3 patch = disc_.patch_shape(v.shape);
    std::vector<T> x(v.data.begin(), v.data.end());
    std::vector<T> scores(static_cast<std::size_t>(patch.cells()));
    disc_.ensure_slots(1);
    disc_.forward(x.data(), v.shape, 0, scores.data());
    double acc = 0.0;
    for (T sc : scores) acc += static_cast<double>(sc);
    return acc / static_cast<double>(scores.size());
  }

  struct State {
    std::vector<std::vector<T>> params;
    vq::Codebook codebook;
  };

  State snapshot() {
    State st;
    for (auto& p : all_params()) st.params.push_back(*p.value);
    st.codebook = codebook_;
    return st;
  }

  void restore(const State& st) {
    auto slots = all_params();
    if (st.params.size() != slots.size())
      throw ValidationError("VqvaeModel::restore: parameter count mismatch");
    for (std::size_t i = 0; i < slots.size(); ++i) {
      if (st.params[i].size() != slots[i].value->size())
        throw ValidationError("VqvaeModel::restore: size mismatch at " + slots[i].name);
      *slots[i].value = st.params[i];
    }
    codebook_ = st.codebook;
  }

 private:
  static nn::FeatureNetConfig make_percep_cfg(const VqvaeConfig& cfg) {
    nn::FeatureNetConfig fc;
    fc.seed = cfg.perceptual_seed;
    return fc;
  }

  VqvaeConfig cfg_;
  Encoder<T> encoder_;
  Decoder<T> decoder_;
  Discriminator<T> disc_;
  nn::FeaturePyramid2d<T> percep_;
  vq::Codebook codebook_;
  nn::Adam<T> opt_g_, opt_d_;
  long step_ = 0;
};

struct FineTuneReport {
  long epochs_run = 0;
  double initial_val_loss = 0.0;
  double best_val_loss = 0.0;
};

// Continues training on a new cohort; early-stops when validation
// reconstruction loss fails to improve for `patience` evaluations (one per
// epoch) and returns the best-validation state.
template <typename T>
FineTuneReport fine_tune(VqvaeModel<T>& model, const io::CohortManifest& cohort,
                         const phantom::AugmentConfig& aug, long max_epochs, long patience,
                         long batch_size, std::uint64_t seed) {
  const auto val_idx = cohort.indices_of_split("test");
  if (val_idx.empty()) throw ValidationError("fine_tune: cohort has no 'test' split");

  auto eval_val = [&]() {
    double acc = 0.0;
    for (std::size_t k = 0; k < val_idx.size(); ++k)
      acc += model.eval_rec_loss(io::load_entry_volume(cohort, val_idx[k]),
                                 Rng::derive(seed, 0xEu + k).next_u64());
    return acc / static_cast<double>(val_idx.size());
  };

  FineTuneReport rep;
  rep.initial_val_loss = eval_val();
  rep.best_val_loss = rep.initial_val_loss;
  auto best_state = model.snapshot();

  io::SplitIterator it(cohort, "train", batch_size, Rng::derive(seed, 0x17u).next_u64());
  long stale = 0;
  for (long epoch = 0; epoch < max_epochs; ++epoch) {
    const long nb = it.batches_per_epoch();
    for (long b = 0; b < nb; ++b) {
      std::vector<io::Volume> vols = it.next_batch();
      for (std::size_t i = 0; i < vols.size(); ++i)
        vols[i] = phantom::augment(
            vols[i], aug,
            Rng::derive(seed, 0xA06'0000ULL + static_cast<std::uint64_t>(epoch * 131071 + b * 31) + i)
                .next_u64());
      model.train_step(vols, Rng::derive(seed, 0x57E9ULL + static_cast<std::uint64_t>(
                                                               epoch * 131071 + b))
                                 .next_u64());
    }
    rep.epochs_run = epoch + 1;
    const double val = eval_val();
    if (val < rep.best_val_loss) {
      rep.best_val_loss = val;
      best_state = model.snapshot();
      stale = 0;
    } else {
      ++stale;
      if (stale > patience) break;
    }
  }
  model.restore(best_state);
  return rep;
}

}  // namespace morphgen::vqvae
