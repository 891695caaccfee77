#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "morphgen/core/errors.hpp"
#include "morphgen/core/rng.hpp"
#include "morphgen/nn/ops.hpp"
#include "morphgen/prior/attention.hpp"
#include "morphgen/vq/codebook.hpp"

namespace morphgen::prior {

struct PriorConfig {
  int layers = 24;          // desk runs use 4
  int embed_dim = 256;      // desk 128
  int heads = 16;           // desk 4
  int local_heads = 8;      // desk 2
  long local_window = 420;  // tokens; desk 64
  int vocab = 2049;         // K + 1 (start token = K)
  Shape3 grid{10, 14, 10};  // latent grid; sequence length is grid.cells()
  int feature_count = 64;   // FAVOR+ random features
  int ffn_mult = 4;
  double lr = 0.001;
  double lr_decay = 0.99999;
  std::uint64_t favor_seed = 0xFA40;

  int head_dim() const { return embed_dim / heads; }
  int favor_heads() const { return heads - local_heads; }
  int start_token() const { return vocab - 1; }
  long max_seq_len() const { return grid.cells(); }

  void validate() const {
    if (layers < 1) throw ValidationError("PriorConfig: layers must be >= 1");
    if (embed_dim < 1 || embed_dim % heads != 0)
      throw ValidationError("PriorConfig: embed_dim must be divisible by heads");
    if (local_heads < 0 || local_heads > heads)
      throw ValidationError("PriorConfig: local_heads must be in [0, heads]");
    if (local_window < 1) throw ValidationError("PriorConfig: window must be >= 1");
    if (vocab < 2) throw ValidationError("PriorConfig: vocab must be >= 2");
    if (grid.cells() < 1) throw ValidationError("PriorConfig: grid must be non-empty");
    if (feature_count < 1) throw ValidationError("PriorConfig: feature_count must be >= 1");
    if (ffn_mult < 1) throw ValidationError("PriorConfig: ffn_mult must be >= 1");
  }
};

// Causal token model: embedding + learned positions, L blocks of mixed
// FAVOR+/local multi-head attention and a GELU feedforward, each residual
// branch scaled by a ReZero scalar initialized to zero, then a projection to
// vocab logits.
template <typename T>
class PriorModel {
 public:
  PriorModel(const PriorConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    Rng rng(seed);
    const int d = cfg.embed_dim;
    tok_emb_.assign(static_cast<std::size_t>(cfg.vocab) * d, T(0));
    rng.fill_normal(tok_emb_.data(), tok_emb_.size(), 0.0, 0.02);
    pos_emb_.assign(static_cast<std::size_t>(cfg.max_seq_len() + 1) * d, T(0));  // zero init
    dtok_emb_.assign(tok_emb_.size(), T(0));
    dpos_emb_.assign(pos_emb_.size(), T(0));

    for (int l = 0; l < cfg.layers; ++l) {
      auto blk = std::make_unique<Block>(cfg);
      blk->qkv.init_gaussian(rng, 0.02);
      blk->out.init_gaussian(rng, 0.02);
      blk->ff1.init_gaussian(rng, 0.02);
      blk->ff2.init_gaussian(rng, 0.02);
      for (int h = 0; h < cfg.favor_heads(); ++h)
        blk->projections.push_back(favor_projection(
            cfg.feature_count, cfg.head_dim(),
            Rng::derive(cfg.favor_seed, static_cast<std::uint64_t>(l * 64 + h)).next_u64()));
      blocks_.push_back(std::move(blk));
    }
    head_ = std::make_unique<nn::Dense<T>>(d, cfg.vocab);
    head_->init_gaussian(rng, 0.02);
    opt_ = std::make_unique<nn::Adam<T>>(cfg.lr, cfg.lr_decay);
    opt_->attach(params());
  }

  const PriorConfig& config() const { return cfg_; }

  std::vector<nn::ParamSlot<T>> params() {
    std::vector<nn::ParamSlot<T>> out;
    out.push_back({"prior.tok_emb", &tok_emb_, &dtok_emb_});
    out.push_back({"prior.pos_emb", &pos_emb_, &dpos_emb_});
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      auto& b = *blocks_[l];
      const std::string p = "prior.block" + std::to_string(l);
      b.qkv.collect(p + ".qkv", out);
      b.out.collect(p + ".out", out);
      b.ff1.collect(p + ".ff1", out);
      b.ff2.collect(p + ".ff2", out);
      out.push_back({p + ".alpha_attn", &b.alpha1, &b.dalpha1});
      out.push_back({p + ".alpha_ffn", &b.alpha2, &b.dalpha2});
    }
    head_->collect("prior.head", out);
    return out;
  }

  // Non-trainable FAVOR+ projections, exposed for checkpointing.
  std::vector<std::pair<std::string, std::vector<double>*>> favor_projections() {
    std::vector<std::pair<std::string, std::vector<double>*>> out;
    for (std::size_t l = 0; l < blocks_.size(); ++l)
      for (std::size_t h = 0; h < blocks_[l]->projections.size(); ++h)
        out.push_back({"prior.block" + std::to_string(l) + ".favor_proj" + std::to_string(h),
                       &blocks_[l]->projections[h]});
    return out;
  }

  void ensure_slots(long batch) { caches_.resize(static_cast<std::size_t>(batch)); }

  // Logits for an input id sequence (caller prepends the start token);
  // output is [L x vocab].
  void forward(const std::vector<int>& input_ids, long slot, std::vector<T>& logits) {
    const long L = static_cast<long>(input_ids.size());
    if (L < 1) throw ValidationError("prior: empty input");
    if (L > cfg_.max_seq_len() + 1)
      throw ValidationError("prior: sequence length " + std::to_string(L) + " exceeds maximum");
    for (int t : input_ids)
      if (t < 0 || t >= cfg_.vocab)
        throw ValidationError("prior: token " + std::to_string(t) + " out of vocab range");

    Cache& c = caches_.at(static_cast<std::size_t>(slot));
    const int d = cfg_.embed_dim;
    c.input_ids = input_ids;
    c.x.assign(static_cast<std::size_t>(cfg_.layers + 1) * L * d, T(0));
    c.xa.assign(static_cast<std::size_t>(cfg_.layers) * L * d, T(0));
    c.qkv.assign(static_cast<std::size_t>(cfg_.layers) * L * 3 * d, T(0));
    c.attn_concat.assign(static_cast<std::size_t>(cfg_.layers) * L * d, T(0));
    c.attn_out.assign(static_cast<std::size_t>(cfg_.layers) * L * d, T(0));
    c.ff_pre.assign(static_cast<std::size_t>(cfg_.layers) * L * d * cfg_.ffn_mult, T(0));
    c.ff_act.assign(static_cast<std::size_t>(cfg_.layers) * L * d * cfg_.ffn_mult, T(0));
    c.ff_out.assign(static_cast<std::size_t>(cfg_.layers) * L * d, T(0));
    c.favor.assign(static_cast<std::size_t>(cfg_.layers) * cfg_.favor_heads(), {});
    c.local.assign(static_cast<std::size_t>(cfg_.layers) * cfg_.local_heads, {});
    c.L = L;

    T* x0 = c.x.data();
    for (long i = 0; i < L; ++i) {
      const T* te = tok_emb_.data() + static_cast<std::size_t>(input_ids[static_cast<std::size_t>(i)]) * d;
      const T* pe = pos_emb_.data() + static_cast<std::size_t>(i) * d;
      for (int j = 0; j < d; ++j) x0[i * d + j] = te[j] + pe[j];
    }

    const int dh = cfg_.head_dim();
    std::vector<T> qh(static_cast<std::size_t>(L) * dh), kh(qh.size()), vh(qh.size()), oh(qh.size());
    for (int l = 0; l < cfg_.layers; ++l) {
      Block& blk = *blocks_[static_cast<std::size_t>(l)];
      const T* xin = c.x.data() + static_cast<std::size_t>(l) * L * d;
      T* qkv = c.qkv.data() + static_cast<std::size_t>(l) * L * 3 * d;
      blk.qkv.forward(xin, L, qkv);

      T* concat = c.attn_concat.data() + static_cast<std::size_t>(l) * L * d;
      for (int h = 0; h < cfg_.heads; ++h) {
        for (long i = 0; i < L; ++i)
          for (int j = 0; j < dh; ++j) {
            qh[static_cast<std::size_t>(i * dh + j)] = qkv[i * 3 * d + h * dh + j];
            kh[static_cast<std::size_t>(i * dh + j)] = qkv[i * 3 * d + d + h * dh + j];
            vh[static_cast<std::size_t>(i * dh + j)] = qkv[i * 3 * d + 2 * d + h * dh + j];
          }
        if (h < cfg_.favor_heads()) {
          auto& fc = c.favor[static_cast<std::size_t>(l * cfg_.favor_heads() + h)];
          favor_attention_proj(qh.data(), kh.data(), vh.data(), L, dh,
                               blk.projections[static_cast<std::size_t>(h)], cfg_.feature_count,
                               oh.data(), &fc);
        } else {
          auto& lc = c.local[static_cast<std::size_t>(l * cfg_.local_heads +
                                                      (h - cfg_.favor_heads()))];
          local_attention_cached(qh.data(), kh.data(), vh.data(), L, dh, cfg_.local_window,
                                 oh.data(), lc);
        }
        for (long i = 0; i < L; ++i)
          for (int j = 0; j < dh; ++j)
            concat[i * d + h * dh + j] = oh[static_cast<std::size_t>(i * dh + j)];
      }

      T* ao = c.attn_out.data() + static_cast<std::size_t>(l) * L * d;
      blk.out.forward(concat, L, ao);
      T* xa = c.xa.data() + static_cast<std::size_t>(l) * L * d;
      const T a1 = blk.alpha1[0];
      for (long i = 0; i < L * d; ++i) xa[i] = xin[i] + a1 * ao[i];

      const long hidden = static_cast<long>(d) * cfg_.ffn_mult;
      T* ffpre = c.ff_pre.data() + static_cast<std::size_t>(l) * L * hidden;
      T* ffact = c.ff_act.data() + static_cast<std::size_t>(l) * L * hidden;
      T* ffout = c.ff_out.data() + static_cast<std::size_t>(l) * L * d;
      blk.ff1.forward(xa, L, ffpre);
      nn::gelu_forward(ffpre, ffact, static_cast<std::size_t>(L * hidden));
      blk.ff2.forward(ffact, L, ffout);
      T* xout = c.x.data() + static_cast<std::size_t>(l + 1) * L * d;
      const T a2 = blk.alpha2[0];
      for (long i = 0; i < L * d; ++i) xout[i] = xa[i] + a2 * ffout[i];
    }

    logits.assign(static_cast<std::size_t>(L) * cfg_.vocab, T(0));
    head_->forward(c.x.data() + static_cast<std::size_t>(cfg_.layers) * L * d, L, logits.data());
  }

  // dlogits: [L x vocab]; accumulates parameter gradients.
  void backward(long slot, const T* dlogits) {
    Cache& c = caches_.at(static_cast<std::size_t>(slot));
    const long L = c.L;
    const int d = cfg_.embed_dim;
    const int dh = cfg_.head_dim();

    std::vector<T> dx(static_cast<std::size_t>(L) * d, T(0));
    head_->backward(c.x.data() + static_cast<std::size_t>(cfg_.layers) * L * d, L, dlogits,
                    dx.data());

    std::vector<T> dxa(dx.size()), dconcat(dx.size()), dao(dx.size());
    std::vector<T> qh(static_cast<std::size_t>(L) * dh), kh(qh.size()), vh(qh.size());
    std::vector<T> dqh(qh.size()), dkh(qh.size()), dvh(qh.size());
    for (int l = cfg_.layers - 1; l >= 0; --l) {
      Block& blk = *blocks_[static_cast<std::size_t>(l)];
      const long hidden = static_cast<long>(d) * cfg_.ffn_mult;
      const T* xa = c.xa.data() + static_cast<std::size_t>(l) * L * d;
      const T* ffout = c.ff_out.data() + static_cast<std::size_t>(l) * L * d;
      const T* ffpre = c.ff_pre.data() + static_cast<std::size_t>(l) * L * hidden;
      const T* ffact = c.ff_act.data() + static_cast<std::size_t>(l) * L * hidden;

      // x_out = xa + a2 * ff(xa)
      double da2 = 0.0;
      for (long i = 0; i < L * d; ++i) da2 += static_cast<double>(dx[static_cast<std::size_t>(i)]) * ffout[i];
      blk.dalpha2[0] = static_cast<T>(static_cast<double>(blk.dalpha2[0]) + da2);
      std::vector<T> dffout(static_cast<std::size_t>(L) * d);
      const T a2 = blk.alpha2[0];
      for (long i = 0; i < L * d; ++i) dffout[static_cast<std::size_t>(i)] = a2 * dx[static_cast<std::size_t>(i)];
      std::vector<T> dffact(static_cast<std::size_t>(L) * hidden);
      blk.ff2.backward(ffact, L, dffout.data(), dffact.data());
      std::vector<T> dffpre(dffact.size());
      nn::gelu_backward(ffpre, dffact.data(), dffpre.data(), dffact.size());
      std::fill(dxa.begin(), dxa.end(), T(0));
      blk.ff1.backward(xa, L, dffpre.data(), dxa.data());
      for (long i = 0; i < L * d; ++i) dxa[static_cast<std::size_t>(i)] += dx[static_cast<std::size_t>(i)];

      // xa = x_in + a1 * attn(x_in)
      const T* ao = c.attn_out.data() + static_cast<std::size_t>(l) * L * d;
      double da1 = 0.0;
      for (long i = 0; i < L * d; ++i) da1 += static_cast<double>(dxa[static_cast<std::size_t>(i)]) * ao[i];
      blk.dalpha1[0] = static_cast<T>(static_cast<double>(blk.dalpha1[0]) + da1);
      const T a1 = blk.alpha1[0];
      for (long i = 0; i < L * d; ++i) dao[static_cast<std::size_t>(i)] = a1 * dxa[static_cast<std::size_t>(i)];
      std::fill(dconcat.begin(), dconcat.end(), T(0));
      const T* concat = c.attn_concat.data() + static_cast<std::size_t>(l) * L * d;
      blk.out.backward(concat, L, dao.data(), dconcat.data());

      const T* qkv = c.qkv.data() + static_cast<std::size_t>(l) * L * 3 * d;
      std::vector<T> dqkv(static_cast<std::size_t>(L) * 3 * d, T(0));
      for (int h = 0; h < cfg_.heads; ++h) {
        for (long i = 0; i < L; ++i)
          for (int j = 0; j < dh; ++j) {
            qh[static_cast<std::size_t>(i * dh + j)] = qkv[i * 3 * d + h * dh + j];
            kh[static_cast<std::size_t>(i * dh + j)] = qkv[i * 3 * d + d + h * dh + j];
            vh[static_cast<std::size_t>(i * dh + j)] = qkv[i * 3 * d + 2 * d + h * dh + j];
          }
        std::vector<T> doh(static_cast<std::size_t>(L) * dh);
        for (long i = 0; i < L; ++i)
          for (int j = 0; j < dh; ++j)
            doh[static_cast<std::size_t>(i * dh + j)] = dconcat[static_cast<std::size_t>(i * d + h * dh + j)];
        std::fill(dqh.begin(), dqh.end(), T(0));
        std::fill(dkh.begin(), dkh.end(), T(0));
        std::fill(dvh.begin(), dvh.end(), T(0));
        if (h < cfg_.favor_heads()) {
          auto& fc = c.favor[static_cast<std::size_t>(l * cfg_.favor_heads() + h)];
          favor_attention_backward(vh.data(), blk.projections[static_cast<std::size_t>(h)], fc,
                                   doh.data(), dqh.data(), dkh.data(), dvh.data());
        } else {
          auto& lc = c.local[static_cast<std::size_t>(l * cfg_.local_heads +
                                                      (h - cfg_.favor_heads()))];
          local_attention_backward(qh.data(), kh.data(), vh.data(), lc, doh.data(), dqh.data(),
                                   dkh.data(), dvh.data());
        }
        for (long i = 0; i < L; ++i)
          for (int j = 0; j < dh; ++j) {
            dqkv[static_cast<std::size_t>(i * 3 * d + h * dh + j)] += dqh[static_cast<std::size_t>(i * dh + j)];
            dqkv[static_cast<std::size_t>(i * 3 * d + d + h * dh + j)] += dkh[static_cast<std::size_t>(i * dh + j)];
            dqkv[static_cast<std::size_t>(i * 3 * d + 2 * d + h * dh + j)] += dvh[static_cast<std::size_t>(i * dh + j)];
          }
      }
      const T* xin = c.x.data() + static_cast<std::size_t>(l) * L * d;
      std::fill(dx.begin(), dx.end(), T(0));
      blk.qkv.backward(xin, L, dqkv.data(), dx.data());
      for (long i = 0; i < L * d; ++i) dx[static_cast<std::size_t>(i)] += dxa[static_cast<std::size_t>(i)];
    }

    for (long i = 0; i < L; ++i) {
      const int tok = c.input_ids[static_cast<std::size_t>(i)];
      T* te = dtok_emb_.data() + static_cast<std::size_t>(tok) * d;
      T* pe = dpos_emb_.data() + static_cast<std::size_t>(i) * d;
      for (int j = 0; j < d; ++j) {
        te[j] += dx[static_cast<std::size_t>(i * d + j)];
        pe[j] += dx[static_cast<std::size_t>(i * d + j)];
      }
    }
  }

  // One adaptive-gradient step of next-token cross-entropy over a batch of
  // equal-length token sequences. Returns the mean cross-entropy.
  double train_step(const std::vector<vq::TokenSequence>& batch) {
    if (batch.empty()) throw ValidationError("prior train_step: empty batch");
    const std::size_t n = batch[0].tokens.size();
    for (const auto& ts : batch)
      if (ts.tokens.size() != n)
        throw ValidationError("prior train_step: sequences must have equal length");
    ensure_slots(static_cast<long>(batch.size()));
    opt_->zero_grad();

    double ce_acc = 0.0;
    std::vector<T> logits;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      std::vector<int> input(n + 1);
      input[0] = cfg_.start_token();
      for (std::size_t i = 0; i < n; ++i) {
        if (batch[b].tokens[i] < 0 || batch[b].tokens[i] >= cfg_.vocab - 1)
          throw ValidationError("prior train_step: token out of range");
        input[i + 1] = batch[b].tokens[i];
      }
      forward(input, static_cast<long>(b), logits);
      // logits[i] predicts tokens[i] for i in [0, n)
      std::vector<T> dlogits(logits.size(), T(0));
      const double inv = 1.0 / (static_cast<double>(n) * static_cast<double>(batch.size()));
      for (std::size_t i = 0; i < n; ++i) {
        const T* row = logits.data() + i * static_cast<std::size_t>(cfg_.vocab);
        T* drow = dlogits.data() + i * static_cast<std::size_t>(cfg_.vocab);
        double mx = -1e300;
        for (int v = 0; v < cfg_.vocab; ++v) mx = std::max(mx, static_cast<double>(row[v]));
        double z = 0.0;
        for (int v = 0; v < cfg_.vocab; ++v) z += std::exp(static_cast<double>(row[v]) - mx);
        const int tgt = batch[b].tokens[i];
        ce_acc -= (static_cast<double>(row[tgt]) - mx - std::log(z)) * inv;
        for (int v = 0; v < cfg_.vocab; ++v) {
          const double p = std::exp(static_cast<double>(row[v]) - mx) / z;
          drow[v] = static_cast<T>((p - (v == tgt ? 1.0 : 0.0)) * inv);
        }
      }
      backward(static_cast<long>(b), dlogits.data());
    }
    if (!std::isfinite(ce_acc))
      throw NumericalError("prior train_step: non-finite loss at step " +
                           std::to_string(opt_->step_count() + 1));
    opt_->step();
    return ce_acc;
  }

  // Mean next-token cross-entropy without updating parameters.
  double eval_cross_entropy(const vq::TokenSequence& ts) {
    const std::size_t n = ts.tokens.size();
    std::vector<int> input(n + 1);
    input[0] = cfg_.start_token();
    for (std::size_t i = 0; i < n; ++i) input[i + 1] = ts.tokens[i];
    ensure_slots(1);
    std::vector<T> logits;
    forward(input, 0, logits);
    double ce = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const T* row = logits.data() + i * static_cast<std::size_t>(cfg_.vocab);
      double mx = -1e300;
      for (int v = 0; v < cfg_.vocab; ++v) mx = std::max(mx, static_cast<double>(row[v]));
      double z = 0.0;
      for (int v = 0; v < cfg_.vocab; ++v) z += std::exp(static_cast<double>(row[v]) - mx);
      ce -= (static_cast<double>(row[ts.tokens[i]]) - mx - std::log(z)) / static_cast<double>(n);
    }
    return ce;
  }

  // Incremental decoding state: FAVOR+ prefix sums and local-window ring
  // buffers, all in double.
  struct SamplerState {
    struct LayerState {
      std::vector<std::vector<double>> S;     // per favor head: m x dh
      std::vector<std::vector<double>> zsum;  // per favor head: m
      std::vector<std::vector<double>> ring_k, ring_v;  // per local head: window x dh
      long count = 0;
    };
    std::vector<LayerState> layers;
    long pos = 0;
  };

  SamplerState make_sampler_state() const {
    SamplerState st;
    st.layers.resize(static_cast<std::size_t>(cfg_.layers));
    const int dh = cfg_.head_dim();
    for (auto& ls : st.layers) {
      ls.S.assign(static_cast<std::size_t>(cfg_.favor_heads()),
                  std::vector<double>(static_cast<std::size_t>(cfg_.feature_count) * dh, 0.0));
      ls.zsum.assign(static_cast<std::size_t>(cfg_.favor_heads()),
                     std::vector<double>(static_cast<std::size_t>(cfg_.feature_count), 0.0));
      ls.ring_k.assign(static_cast<std::size_t>(cfg_.local_heads),
                       std::vector<double>(static_cast<std::size_t>(cfg_.local_window) * dh, 0.0));
      ls.ring_v = ls.ring_k;
    }
    return st;
  }

  // Feeds one token and returns the next-token logits row.
  std::vector<double> sample_step(SamplerState& st, int token) const {
    if (token < 0 || token >= cfg_.vocab)
      throw ValidationError("sample_step: token out of vocab range");
    if (st.pos > cfg_.max_seq_len())
      throw ValidationError("sample_step: past configured maximum length");
    const int d = cfg_.embed_dim;
    const int dh = cfg_.head_dim();
    const int m = cfg_.feature_count;
    const double scale = 1.0 / std::pow(static_cast<double>(dh), 0.25);

    std::vector<double> x(static_cast<std::size_t>(d));
    {
      const T* te = tok_emb_.data() + static_cast<std::size_t>(token) * d;
      const T* pe = pos_emb_.data() + static_cast<std::size_t>(st.pos) * d;
      for (int j = 0; j < d; ++j) x[static_cast<std::size_t>(j)] = static_cast<double>(te[j]) + static_cast<double>(pe[j]);
    }

    std::vector<double> qkv(static_cast<std::size_t>(3) * d), concat(static_cast<std::size_t>(d));
    std::vector<double> phi(static_cast<std::size_t>(m)), qrow(static_cast<std::size_t>(dh)),
        krow(static_cast<std::size_t>(dh));
    for (int l = 0; l < cfg_.layers; ++l) {
      const Block& blk = *blocks_[static_cast<std::size_t>(l)];
      auto& ls = st.layers[static_cast<std::size_t>(l)];
      dense_row(blk.qkv, x.data(), qkv.data());

      for (int h = 0; h < cfg_.heads; ++h) {
        const double* q = qkv.data() + h * dh;
        const double* k = qkv.data() + d + h * dh;
        const double* v = qkv.data() + 2 * d + h * dh;
        double* out = concat.data() + h * dh;
        if (h < cfg_.favor_heads()) {
          for (int j = 0; j < dh; ++j) {
            qrow[static_cast<std::size_t>(j)] = q[j] * scale;
            krow[static_cast<std::size_t>(j)] = k[j] * scale;
          }
          const auto& proj = blk.projections[static_cast<std::size_t>(h)];
          favor_features_row(krow.data(), dh, proj.data(), m, false, phi.data());
          auto& S = ls.S[static_cast<std::size_t>(h)];
          auto& z = ls.zsum[static_cast<std::size_t>(h)];
          for (int r = 0; r < m; ++r) {
            double* Sr = S.data() + static_cast<std::size_t>(r) * dh;
            for (int c = 0; c < dh; ++c) Sr[c] += phi[static_cast<std::size_t>(r)] * v[c];
            z[static_cast<std::size_t>(r)] += phi[static_cast<std::size_t>(r)];
          }
          favor_features_row(qrow.data(), dh, proj.data(), m, true, phi.data());
          double den = 1e-30;
          for (int r = 0; r < m; ++r) den += phi[static_cast<std::size_t>(r)] * z[static_cast<std::size_t>(r)];
          for (int c = 0; c < dh; ++c) {
            double acc = 0.0;
            for (int r = 0; r < m; ++r)
              acc += phi[static_cast<std::size_t>(r)] * S[static_cast<std::size_t>(r) * dh + c];
            out[c] = acc / den;
          }
        } else {
          const int lh = h - cfg_.favor_heads();
          auto& rk = ls.ring_k[static_cast<std::size_t>(lh)];
          auto& rv = ls.ring_v[static_cast<std::size_t>(lh)];
          const long slot_idx = st.pos % cfg_.local_window;
          for (int c = 0; c < dh; ++c) {
            rk[static_cast<std::size_t>(slot_idx * dh + c)] = k[c];
            rv[static_cast<std::size_t>(slot_idx * dh + c)] = v[c];
          }
          const long present = std::min<long>(st.pos + 1, cfg_.local_window);
          const double sscale = 1.0 / std::sqrt(static_cast<double>(dh));
          std::vector<double> sc(static_cast<std::size_t>(present));
          double mx = -1e300;
          for (long j = 0; j < present; ++j) {
            const long slotj = (st.pos - j) % cfg_.local_window;
            double s = 0.0;
            for (int c = 0; c < dh; ++c) s += q[c] * rk[static_cast<std::size_t>(slotj * dh + c)];
            sc[static_cast<std::size_t>(j)] = s * sscale;
            mx = std::max(mx, sc[static_cast<std::size_t>(j)]);
          }
          double zz = 0.0;
          for (long j = 0; j < present; ++j) {
            sc[static_cast<std::size_t>(j)] = std::exp(sc[static_cast<std::size_t>(j)] - mx);
            zz += sc[static_cast<std::size_t>(j)];
          }
          for (int c = 0; c < dh; ++c) {
            double acc = 0.0;
            for (long j = 0; j < present; ++j) {
              const long slotj = (st.pos - j) % cfg_.local_window;
              acc += sc[static_cast<std::size_t>(j)] * rv[static_cast<std::size_t>(slotj * dh + c)];
            }
            out[c] = acc / zz;
          }
        }
      }

      std::vector<double> ao(static_cast<std::size_t>(d));
      dense_row(blk.out, concat.data(), ao.data());
      const double a1 = static_cast<double>(blk.alpha1[0]);
      for (int j = 0; j < d; ++j) x[static_cast<std::size_t>(j)] += a1 * ao[static_cast<std::size_t>(j)];

      const long hidden = static_cast<long>(d) * cfg_.ffn_mult;
      std::vector<double> h1(static_cast<std::size_t>(hidden)), h2(static_cast<std::size_t>(d));
      dense_row(blk.ff1, x.data(), h1.data());
      for (auto& vv : h1) {
        const double u = 0.7978845608028654 * (vv + 0.044715 * vv * vv * vv);
        vv = 0.5 * vv * (1.0 + std::tanh(u));
      }
      dense_row(blk.ff2, h1.data(), h2.data());
      const double a2 = static_cast<double>(blk.alpha2[0]);
      for (int j = 0; j < d; ++j) x[static_cast<std::size_t>(j)] += a2 * h2[static_cast<std::size_t>(j)];
    }

    std::vector<double> logits(static_cast<std::size_t>(cfg_.vocab));
    dense_row(*head_, x.data(), logits.data());
    ++st.pos;
    return logits;
  }

  long optimizer_steps() const { return opt_->step_count(); }

 private:
  struct Block {
    nn::Dense<T> qkv, out, ff1, ff2;
    std::vector<T> alpha1{T(0)}, alpha2{T(0)};
    std::vector<T> dalpha1{T(0)}, dalpha2{T(0)};
    std::vector<std::vector<double>> projections;  // per favor head, m x dh

    explicit Block(const PriorConfig& cfg)
        : qkv(cfg.embed_dim, 3 * cfg.embed_dim),
          out(cfg.embed_dim, cfg.embed_dim),
          ff1(cfg.embed_dim, cfg.embed_dim * cfg.ffn_mult),
          ff2(cfg.embed_dim * cfg.ffn_mult, cfg.embed_dim) {}
  };

  struct Cache {
    long L = 0;
    std::vector<int> input_ids;
    std::vector<T> x, xa, qkv, attn_concat, attn_out, ff_pre, ff_act, ff_out;
    std::vector<FavorCache<T>> favor;
    std::vector<LocalCache<T>> local;
  };

  // y = W^T x + b for a single row, in double.
  void dense_row(const nn::Dense<T>& layer, const double* x, double* y) const {
    auto& dl = const_cast<nn::Dense<T>&>(layer);
    const T* w = dl.weight().data();
    const T* b = dl.bias().data();
    const int in = layer.in_dim(), out = layer.out_dim();
    for (int o = 0; o < out; ++o) y[o] = static_cast<double>(b[o]);
    for (int i = 0; i < in; ++i) {
      const double xi = x[i];
      const T* wrow = w + static_cast<std::size_t>(i) * out;
      for (int o = 0; o < out; ++o) y[o] += xi * static_cast<double>(wrow[o]);
    }
  }

  PriorConfig cfg_;
  std::vector<T> tok_emb_, pos_emb_, dtok_emb_, dpos_emb_;
  std::vector<std::unique_ptr<Block>> blocks_;
  std::unique_ptr<nn::Dense<T>> head_;
  std::unique_ptr<nn::Adam<T>> opt_;
  std::vector<Cache> caches_{1};
};

// Draws n_tokens autoregressively; temperature <= 0 selects argmax decoding.
template <typename T>
vq::TokenSequence sample_tokens(const PriorModel<T>& model, Shape3 grid, double temperature,
                                std::uint64_t seed) {
  const PriorConfig& cfg = model.config();
  const long n = grid.cells();
  if (n != cfg.max_seq_len())
    throw ValidationError("sample_tokens: grid " + grid.str() + " has " + std::to_string(n) +
                          " cells but the prior was configured for " +
                          std::to_string(cfg.max_seq_len()));
  Rng rng(seed);
  auto st = model.make_sampler_state();
  vq::TokenSequence ts;
  ts.source_grid_shape = grid;
  ts.tokens.reserve(static_cast<std::size_t>(n));
  int cur = cfg.start_token();
  const int k_vocab = cfg.vocab - 1;  // real tokens only; never emit start
  for (long i = 0; i < n; ++i) {
    const std::vector<double> logits = model.sample_step(st, cur);
    int chosen = 0;
    if (temperature <= 0.0) {
      double best = -1e300;
      for (int v = 0; v < k_vocab; ++v)
        if (logits[static_cast<std::size_t>(v)] > best) {
          best = logits[static_cast<std::size_t>(v)];
          chosen = v;
        }
    } else {
      double mx = -1e300;
      for (int v = 0; v < k_vocab; ++v) mx = std::max(mx, logits[static_cast<std::size_t>(v)]);
      std::vector<double> p(static_cast<std::size_t>(k_vocab));
      double z = 0.0;
      for (int v = 0; v < k_vocab; ++v) {
        p[static_cast<std::size_t>(v)] = std::exp((logits[static_cast<std::size_t>(v)] - mx) / temperature);
        z += p[static_cast<std::size_t>(v)];
      }
      const double u = rng.uniform() * z;
      double acc = 0.0;
      chosen = k_vocab - 1;
      for (int v = 0; v < k_vocab; ++v) {
        acc += p[static_cast<std::size_t>(v)];
        if (u < acc) {
          chosen = v;
          break;
        }
      }
    }
    ts.tokens.push_back(chosen);
    cur = chosen;
  }
  return ts;
}

}  // namespace morphgen::prior
