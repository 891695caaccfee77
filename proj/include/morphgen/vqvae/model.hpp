#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "morphgen/core/errors.hpp"
#include "morphgen/core/grid.hpp"
#include "morphgen/nn/ops.hpp"

namespace morphgen::vqvae {

struct CodebookConfig {
  int K = 2048;
  int n_z = 32;
  double gamma = 0.5;
  double beta = 0.25;
  bool restart_dead_codes = false;
};

struct VqvaeConfig {
  int downsample_stages = 4;  // f = 2^stages; desk runs use 2
  int conv_channels = 256;    // desk runs use 32
  int residual_blocks = 3;
  CodebookConfig codebook;

  double w_pixel = 1.0;
  double w_perceptual = 0.001;
  double w_frequency = 1.0;
  double w_adversarial = 1.0;
  double perceptual_slice_fraction = 0.5;
  std::uint64_t perceptual_seed = 0x9e77;

  double lr_generator = 0.000165;
  double lr_discriminator = 0.00005;
  double lr_decay = 0.99999;

  int disc_base_channels = 32;
  int disc_layers = 3;

  long downsample_factor() const { return 1L << downsample_stages; }

  void validate() const {
    if (downsample_stages < 1) throw ValidationError("VqvaeConfig: downsample_stages must be >= 1");
    if (conv_channels < 1) throw ValidationError("VqvaeConfig: conv_channels must be >= 1");
    if (residual_blocks < 1) throw ValidationError("VqvaeConfig: residual_blocks must be >= 1");
    if (w_pixel < 0 || w_perceptual < 0 || w_frequency < 0 || w_adversarial < 0)
      throw ValidationError("VqvaeConfig: loss weights must be >= 0");
    if (!(perceptual_slice_fraction > 0.0 && perceptual_slice_fraction <= 1.0))
      throw ValidationError("VqvaeConfig: perceptual_slice_fraction must be in (0, 1]");
  }

  Shape3 latent_shape(Shape3 input) const {
    const long f = downsample_factor();
    if (input.x % f || input.y % f || input.z % f)
      throw ValidationError("VqvaeConfig: input shape " + input.str() + " not divisible by " +
                            std::to_string(f));
    return {input.x / f, input.y / f, input.z / f};
  }
};

// Strided-conv encoder: `downsample_stages` convs (stride 2, kernel 4), then
// residual blocks (3x3x3 conv, ReLU, 1x1x1 conv, ReLU), then a 1x1x1
// projection to n_z channels.
template <typename T>
class Encoder {
 public:
  Encoder(const VqvaeConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    Rng rng(seed);
    const int C = cfg.conv_channels;
    for (int i = 0; i < cfg.downsample_stages; ++i) {
      downs_.emplace_back(i == 0 ? 1 : C, C, 4, 2, 1);
      downs_.back().init_he(rng);
    }
    for (int i = 0; i < cfg.residual_blocks; ++i) {
      res3_.emplace_back(C, C, 3, 1, 1);
      res3_.back().init_he(rng);
      res1_.emplace_back(C, C, 1, 1, 0);
      res1_.back().init_he(rng);
    }
    to_latent_ = std::make_unique<nn::Conv3d<T>>(C, cfg.codebook.n_z, 1, 1, 0);
    to_latent_->init_he(rng);
  }

  void ensure_slots(long batch) { caches_.resize(static_cast<std::size_t>(batch)); }

  // x: [cells x 1]; latent: [lat_cells x n_z]
  void forward(const T* x, Shape3 in_s, long slot, T* latent) {
    Cache& c = caches_.at(static_cast<std::size_t>(slot));
    c.in_shape = in_s;
    c.down_in.resize(downs_.size());
    c.down_pre.resize(downs_.size());
    Shape3 s = in_s;
    c.down_in[0].assign(x, x + s.cells());
    for (std::size_t i = 0; i < downs_.size(); ++i) {
      const Shape3 os = downs_[i].out_shape(s);
      c.down_pre[i].resize(static_cast<std::size_t>(os.cells()) * cfg_.conv_channels);
      downs_[i].forward(c.down_in[i].data(), s, c.down_pre[i].data());
      if (i + 1 < downs_.size()) {
        c.down_in[i + 1] = c.down_pre[i];
        nn::relu_forward(c.down_in[i + 1].data(), c.down_in[i + 1].size());
      }
      s = os;
    }
    c.lat_shape = s;
    c.res_in.resize(res3_.size());
    c.res_h1pre.resize(res3_.size());
    c.res_h2pre.resize(res3_.size());
    std::vector<T> cur = c.down_pre.back();
    nn::relu_forward(cur.data(), cur.size());
    for (std::size_t i = 0; i < res3_.size(); ++i) {
      c.res_in[i] = cur;
      c.res_h1pre[i].resize(cur.size());
      res3_[i].forward(cur.data(), s, c.res_h1pre[i].data());
      std::vector<T> h = c.res_h1pre[i];
      nn::relu_forward(h.data(), h.size());
      c.res_h1_.resize(res3_.size());
      c.res_h1_[i] = h;
      c.res_h2pre[i].resize(h.size());
      res1_[i].forward(h.data(), s, c.res_h2pre[i].data());
      std::vector<T> h2 = c.res_h2pre[i];
      nn::relu_forward(h2.data(), h2.size());
      for (std::size_t j = 0; j < cur.size(); ++j) cur[j] += h2[j];
    }
    c.proj_in = cur;
    to_latent_->forward(cur.data(), s, latent);
  }

  // dlatent: [lat_cells x n_z]; dx (nullable): [cells x 1]
  void backward(long slot, const T* dlatent, T* dx) {
    Cache& c = caches_.at(static_cast<std::size_t>(slot));
    const Shape3 ls = c.lat_shape;
    std::vector<T> dcur(c.proj_in.size());
    to_latent_->backward(c.proj_in.data(), ls, dlatent, dcur.data());

    for (long i = static_cast<long>(res3_.size()) - 1; i >= 0; --i) {
      const std::size_t ui = static_cast<std::size_t>(i);
      // dcur flows both into the skip and through the block
      std::vector<T> dh2 = dcur;
      nn::relu_backward(c.res_h2pre[ui].data(), dh2.data(), dh2.size());
      std::vector<T> dh1(c.res_h1_[ui].size());
      res1_[ui].backward(c.res_h1_[ui].data(), ls, dh2.data(), dh1.data());
      nn::relu_backward(c.res_h1pre[ui].data(), dh1.data(), dh1.size());
      std::vector<T> dres_in(c.res_in[ui].size());
      res3_[ui].backward(c.res_in[ui].data(), ls, dh1.data(), dres_in.data());
      for (std::size_t j = 0; j < dcur.size(); ++j) dcur[j] += dres_in[j];
    }

    // through the relu between last downsample and the first resblock
    nn::relu_backward(c.down_pre.back().data(), dcur.data(), dcur.size());
    Shape3 shapes_in = c.in_shape;
    std::vector<Shape3> in_shapes(downs_.size());
    {
      Shape3 s = c.in_shape;
      for (std::size_t i = 0; i < downs_.size(); ++i) {
        in_shapes[i] = s;
        s = downs_[i].out_shape(s);
      }
    }
    for (long i = static_cast<long>(downs_.size()) - 1; i >= 0; --i) {
      const std::size_t ui = static_cast<std::size_t>(i);
      const bool want_dx = (i > 0) || (dx != nullptr);
      std::vector<T> dinput;
      if (want_dx) dinput.resize(c.down_in[ui].size());
      downs_[ui].backward(c.down_in[ui].data(), in_shapes[ui], dcur.data(),
                          want_dx ? dinput.data() : nullptr);
      if (i > 0) {
        nn::relu_backward(c.down_pre[ui - 1].data(), dinput.data(), dinput.size());
        dcur = std::move(dinput);
      } else if (dx) {
        for (std::size_t j = 0; j < dinput.size(); ++j) dx[j] = dinput[j];
      }
    }
    (void)shapes_in;
  }

  void collect(std::vector<nn::ParamSlot<T>>& out) {
    for (std::size_t i = 0; i < downs_.size(); ++i)
      downs_[i].collect("enc.down" + std::to_string(i), out);
    for (std::size_t i = 0; i < res3_.size(); ++i) {
      res3_[i].collect("enc.res" + std::to_string(i) + ".c3", out);
      res1_[i].collect("enc.res" + std::to_string(i) + ".c1", out);
    }
    to_latent_->collect("enc.to_latent", out);
  }

 private:
  struct Cache {
    Shape3 in_shape, lat_shape;
    std::vector<std::vector<T>> down_in, down_pre;
    std::vector<std::vector<T>> res_in, res_h1pre, res_h1_, res_h2pre;
    std::vector<T> proj_in;
  };

  VqvaeConfig cfg_;
  std::vector<nn::Conv3d<T>> downs_;
  std::vector<nn::Conv3d<T>> res3_, res1_;
  std::unique_ptr<nn::Conv3d<T>> to_latent_;
  std::vector<Cache> caches_{1};
};

// Mirror decoder: 1x1x1 projection from n_z, residual blocks, then transposed
// convs (stride 2, kernel 4); output clamped to [0, 1].
template <typename T>
class Decoder {
 public:
  Decoder(const VqvaeConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    Rng rng(seed);
    const int C = cfg.conv_channels;
    from_latent_ = std::make_unique<nn::Conv3d<T>>(cfg.codebook.n_z, C, 1, 1, 0);
    from_latent_->init_he(rng);
    for (int i = 0; i < cfg.residual_blocks; ++i) {
      res3_.emplace_back(C, C, 3, 1, 1);
      res3_.back().init_he(rng);
      res1_.emplace_back(C, C, 1, 1, 0);
      res1_.back().init_he(rng);
    }
    for (int i = 0; i < cfg.downsample_stages; ++i) {
      const bool last = i + 1 == cfg.downsample_stages;
      ups_.emplace_back(C, last ? 1 : C, 4, 2, 1);
      ups_.back().init_he(rng);
    }
    // mid-range output before training starts, away from the clamp edges
    std::fill(ups_.back().bias().begin(), ups_.back().bias().end(), T(0.5));
  }

  void ensure_slots(long batch) { caches_.resize(static_cast<std::size_t>(batch)); }

  Shape3 out_shape(Shape3 lat) const {
    const long f = cfg_.downsample_factor();
    return {lat.x * f, lat.y * f, lat.z * f};
  }

  // zq: [lat_cells x n_z]; vol: [cells x 1]
  void forward(const T* zq, Shape3 lat_s, long slot, T* vol) {
    Cache& c = caches_.at(static_cast<std::size_t>(slot));
    c.lat_shape = lat_s;
    c.zq_in.assign(zq, zq + static_cast<std::size_t>(lat_s.cells()) * cfg_.codebook.n_z);
    std::vector<T> cur(static_cast<std::size_t>(lat_s.cells()) * cfg_.conv_channels);
    from_latent_->forward(zq, lat_s, cur.data());

    c.res_in.resize(res3_.size());
    c.res_h1pre.resize(res3_.size());
    c.res_h1.resize(res3_.size());
    c.res_h2pre.resize(res3_.size());
    for (std::size_t i = 0; i < res3_.size(); ++i) {
      c.res_in[i] = cur;
      c.res_h1pre[i].resize(cur.size());
      res3_[i].forward(cur.data(), lat_s, c.res_h1pre[i].data());
      std::vector<T> h = c.res_h1pre[i];
      nn::relu_forward(h.data(), h.size());
      c.res_h1[i] = h;
      c.res_h2pre[i].resize(h.size());
      res1_[i].forward(h.data(), lat_s, c.res_h2pre[i].data());
      std::vector<T> h2 = c.res_h2pre[i];
      nn::relu_forward(h2.data(), h2.size());
      for (std::size_t j = 0; j < cur.size(); ++j) cur[j] += h2[j];
    }

    c.up_in.resize(ups_.size());
    c.up_pre.resize(ups_.size());
    Shape3 s = lat_s;
    for (std::size_t i = 0; i < ups_.size(); ++i) {
      c.up_in[i] = cur;
      const Shape3 os = ups_[i].out_shape(s);
      c.up_pre[i].resize(static_cast<std::size_t>(os.cells()) * ups_[i].out_channels());
      ups_[i].forward(cur.data(), s, c.up_pre[i].data());
      cur = c.up_pre[i];
      if (i + 1 < ups_.size()) nn::relu_forward(cur.data(), cur.size());
      s = os;
    }
    // final activation: clamped linear to [0, 1]
    nn::clamp01_forward(cur.data(), cur.size());
    std::copy(cur.begin(), cur.end(), vol);
  }

  void backward(long slot, const T* dvol, T* dzq) {
    Cache& c = caches_.at(static_cast<std::size_t>(slot));
    std::vector<T> dcur(c.up_pre.back().size());
    std::copy(dvol, dvol + dcur.size(), dcur.begin());
    nn::clamp01_backward(c.up_pre.back().data(), dcur.data(), dcur.size());

    std::vector<Shape3> in_shapes(ups_.size());
    {
      Shape3 s = c.lat_shape;
      for (std::size_t i = 0; i < ups_.size(); ++i) {
        in_shapes[i] = s;
        s = ups_[i].out_shape(s);
      }
    }
    for (long i = static_cast<long>(ups_.size()) - 1; i >= 0; --i) {
      const std::size_t ui = static_cast<std::size_t>(i);
      std::vector<T> dinput(c.up_in[ui].size());
      std::vector<T> up_in_act = c.up_in[ui];  // inputs were cached post-relu already
      ups_[ui].backward(up_in_act.data(), in_shapes[ui], dcur.data(), dinput.data());
      if (i > 0) nn::relu_backward(c.up_pre[ui - 1].data(), dinput.data(), dinput.size());
      dcur = std::move(dinput);
    }

    for (long i = static_cast<long>(res3_.size()) - 1; i >= 0; --i) {
      const std::size_t ui = static_cast<std::size_t>(i);
      std::vector<T> dh2 = dcur;
      nn::relu_backward(c.res_h2pre[ui].data(), dh2.data(), dh2.size());
      std::vector<T> dh1(c.res_h1[ui].size());
      res1_[ui].backward(c.res_h1[ui].data(), c.lat_shape, dh2.data(), dh1.data());
      nn::relu_backward(c.res_h1pre[ui].data(), dh1.data(), dh1.size());
      std::vector<T> dres_in(c.res_in[ui].size());
      res3_[ui].backward(c.res_in[ui].data(), c.lat_shape, dh1.data(), dres_in.data());
      for (std::size_t j = 0; j < dcur.size(); ++j) dcur[j] += dres_in[j];
    }
    from_latent_->backward(c.zq_in.data(), c.lat_shape, dcur.data(), dzq);
  }

  void collect(std::vector<nn::ParamSlot<T>>& out) {
    from_latent_->collect("dec.from_latent", out);
    for (std::size_t i = 0; i < res3_.size(); ++i) {
      res3_[i].collect("dec.res" + std::to_string(i) + ".c3", out);
      res1_[i].collect("dec.res" + std::to_string(i) + ".c1", out);
    }
    for (std::size_t i = 0; i < ups_.size(); ++i) ups_[i].collect("dec.up" + std::to_string(i), out);
  }

 private:
  struct Cache {
    Shape3 lat_shape;
    std::vector<T> zq_in;
    std::vector<std::vector<T>> res_in, res_h1pre, res_h1, res_h2pre;
    std::vector<std::vector<T>> up_in, up_pre;
  };

  VqvaeConfig cfg_;
  std::unique_ptr<nn::Conv3d<T>> from_latent_;
  std::vector<nn::Conv3d<T>> res3_, res1_;
  std::vector<nn::TConv3d<T>> ups_;
  std::vector<Cache> caches_{1};
};

// 3D Patch-GAN: strided convs with LeakyReLU(0.2), channels doubling from the
// base, final 3x3x3 conv to a one-channel patch score grid.
template <typename T>
class Discriminator {
 public:
  Discriminator(const VqvaeConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    Rng rng(seed);
    int in_ch = 1;
    int ch = cfg.disc_base_channels;
    for (int i = 0; i < cfg.disc_layers; ++i) {
      convs_.emplace_back(in_ch, ch, 4, 2, 1);
      convs_.back().init_he(rng);
      in_ch = ch;
      ch *= 2;
    }
    final_ = std::make_unique<nn::Conv3d<T>>(in_ch, 1, 3, 1, 1);
    final_->init_he(rng);
  }

  void ensure_slots(long batch) { caches_.resize(static_cast<std::size_t>(batch)); }

  Shape3 patch_shape(Shape3 in) const {
    Shape3 s = in;
    for (const auto& c : convs_) s = c.out_shape(s);
    return s;
  }

  // x: [cells x 1]; scores: [patch_cells x 1]
  void forward(const T* x, Shape3 in_s, long slot, T* scores) {
    Cache& c = caches_.at(static_cast<std::size_t>(slot));
    c.in_shape = in_s;
    c.conv_in.resize(convs_.size());
    c.conv_pre.resize(convs_.size());
    Shape3 s = in_s;
    c.conv_in[0].assign(x, x + s.cells());
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      const Shape3 os = convs_[i].out_shape(s);
      c.conv_pre[i].resize(static_cast<std::size_t>(os.cells()) * convs_[i].out_channels());
      convs_[i].forward(c.conv_in[i].data(), s, c.conv_pre[i].data());
      if (i + 1 < convs_.size()) {
        c.conv_in[i + 1] = c.conv_pre[i];
        nn::leaky_relu_forward(c.conv_in[i + 1].data(), c.conv_in[i + 1].size(), T(0.2));
      }
      s = os;
    }
    c.final_in = c.conv_pre.back();
    nn::leaky_relu_forward(c.final_in.data(), c.final_in.size(), T(0.2));
    c.patch = s;
    final_->forward(c.final_in.data(), s, scores);
  }

  // dscores -> param grads; dx (nullable) receives input gradient.
  void backward(long slot, const T* dscores, T* dx) {
    Cache& c = caches_.at(static_cast<std::size_t>(slot));
    std::vector<T> dcur(c.final_in.size());
    final_->backward(c.final_in.data(), c.patch, dscores, dcur.data());
    nn::leaky_relu_backward(c.conv_pre.back().data(), dcur.data(), dcur.size(), T(0.2));

    std::vector<Shape3> in_shapes(convs_.size());
    {
      Shape3 s = c.in_shape;
      for (std::size_t i = 0; i < convs_.size(); ++i) {
        in_shapes[i] = s;
        s = convs_[i].out_shape(s);
      }
    }
    for (long i = static_cast<long>(convs_.size()) - 1; i >= 0; --i) {
      const std::size_t ui = static_cast<std::size_t>(i);
      const bool want_dx = (i > 0) || (dx != nullptr);
      std::vector<T> dinput;
      if (want_dx) dinput.resize(c.conv_in[ui].size());
      convs_[ui].backward(c.conv_in[ui].data(), in_shapes[ui], dcur.data(),
                          want_dx ? dinput.data() : nullptr);
      if (i > 0) {
        nn::leaky_relu_backward(c.conv_pre[ui - 1].data(), dinput.data(), dinput.size(), T(0.2));
        dcur = std::move(dinput);
      } else if (dx) {
        std::copy(dinput.begin(), dinput.end(), dx);
      }
    }
  }

  void collect(std::vector<nn::ParamSlot<T>>& out) {
    for (std::size_t i = 0; i < convs_.size(); ++i)
      convs_[i].collect("disc.conv" + std::to_string(i), out);
    final_->collect("disc.final", out);
  }

 private:
  struct Cache {
    Shape3 in_shape, patch;
    std::vector<std::vector<T>> conv_in, conv_pre;
    std::vector<T> final_in;
  };

  VqvaeConfig cfg_;
  std::vector<nn::Conv3d<T>> convs_;
  std::unique_ptr<nn::Conv3d<T>> final_;
  std::vector<Cache> caches_{1};
};

}  // namespace morphgen::vqvae
