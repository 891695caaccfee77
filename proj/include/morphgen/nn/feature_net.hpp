#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "morphgen/core/rng.hpp"

namespace morphgen::nn {

// Fixed, seeded random convolutional pyramid over 2D slices. Shared by the
// perceptual reconstruction loss (LPIPS functional form) and the slice-wise
// Frechet features; the two use different seeds. tanh keeps the map smooth
// for finite-difference checks.
struct FeatureNetConfig {
  std::vector<int> channels = {8, 16, 32};
  int kernel = 3;
  int stride = 2;
  std::uint64_t seed = 0x5EED;
};

template <typename T>
class FeaturePyramid2d {
 public:
  explicit FeaturePyramid2d(const FeatureNetConfig& cfg = {}) : cfg_(cfg) {
    Rng rng(cfg.seed);
    int in_ch = 1;
    for (int out_ch : cfg_.channels) {
      Layer l;
      l.in_ch = in_ch;
      l.out_ch = out_ch;
      l.w.resize(static_cast<std::size_t>(cfg_.kernel) * cfg_.kernel * in_ch * out_ch);
      l.b.resize(static_cast<std::size_t>(out_ch));
      const double std = 1.0 / std::sqrt(static_cast<double>(cfg_.kernel) * cfg_.kernel * in_ch);
      rng.fill_normal(l.w.data(), l.w.size(), 0.0, std);
      rng.fill_normal(l.b.data(), l.b.size(), 0.0, 0.1);
      layers_.push_back(std::move(l));
      in_ch = out_ch;
    }
  }

  struct Acts {
    // per layer: post-tanh activations [h*w x out_ch] and their dims
    std::vector<std::vector<T>> feat;
    std::vector<long> hs, ws;
  };

  void forward(const T* slice, long h, long w, Acts& acts) const {
    acts.feat.assign(layers_.size(), {});
    acts.hs.assign(layers_.size(), 0);
    acts.ws.assign(layers_.size(), 0);
    std::vector<T> cur(slice, slice + static_cast<std::size_t>(h) * w);
    long ch = h, cw = w;
    int in_ch = 1;
    for (std::size_t li = 0; li < layers_.size(); ++li) {
      const Layer& l = layers_[li];
      const long oh = out_dim(ch), ow = out_dim(cw);
      std::vector<T> next(static_cast<std::size_t>(oh) * ow * l.out_ch);
      conv_forward(l, cur.data(), ch, cw, next.data(), oh, ow);
      for (T& v : next) v = static_cast<T>(std::tanh(static_cast<double>(v)));
      acts.feat[li] = next;
      acts.hs[li] = oh;
      acts.ws[li] = ow;
      cur = std::move(next);
      ch = oh;
      cw = ow;
      in_ch = l.out_ch;
    }
    (void)in_ch;
  }

  // LPIPS-form distance: per layer, channel-unit-normalized features, squared
  // difference averaged over positions and channels, then averaged over
  // layers. If grad_b is non-null it receives d(dist)/d(b slice).
  double distance(const T* a, const T* b, long h, long w, T* grad_b = nullptr) const {
    Acts aa, ab;
    forward(a, h, w, aa);
    forward(b, h, w, ab);

    double total = 0.0;
    std::vector<std::vector<T>> dfeat(layers_.size());  // d(dist)/d(post-tanh feat of b)
    for (std::size_t li = 0; li < layers_.size(); ++li) {
      const long cells = aa.hs[li] * aa.ws[li];
      const int ch = layers_[li].out_ch;
      const T* fa = aa.feat[li].data();
      const T* fb = ab.feat[li].data();
      if (grad_b) dfeat[li].assign(static_cast<std::size_t>(cells) * ch, T(0));
      double layer_acc = 0.0;
      const double denom = static_cast<double>(cells) * ch * static_cast<double>(layers_.size());
      for (long c = 0; c < cells; ++c) {
        const T* va = fa + c * ch;
        const T* vb = fb + c * ch;
        double na = kEps, nb = kEps;
        for (int d = 0; d < ch; ++d) {
          na += static_cast<double>(va[d]) * va[d];
          nb += static_cast<double>(vb[d]) * vb[d];
        }
        const double sa = 1.0 / std::sqrt(na), sb = 1.0 / std::sqrt(nb);
        double dot_diff_vb = 0.0;
        for (int d = 0; d < ch; ++d) {
          const double diff = static_cast<double>(va[d]) * sa - static_cast<double>(vb[d]) * sb;
          layer_acc += diff * diff;
          if (grad_b) dot_diff_vb += diff * static_cast<double>(vb[d]);
        }
        if (grad_b) {
          // d/dvb of (va_hat - vb/sqrt(|vb|^2+eps))^2 summed over channels
          T* g = dfeat[li].data() + c * ch;
          for (int d = 0; d < ch; ++d) {
            const double diff = static_cast<double>(va[d]) * sa - static_cast<double>(vb[d]) * sb;
            const double grad =
                -2.0 * (diff * sb - dot_diff_vb * sb * sb * sb * static_cast<double>(vb[d]));
            g[d] = static_cast<T>(grad / denom);
          }
        }
      }
      total += layer_acc / (static_cast<double>(cells) * ch);
    }
    total /= static_cast<double>(layers_.size());

    if (grad_b) {
      // back through tanh and convs, deepest layer first
      std::vector<T> dcur;
      for (long li = static_cast<long>(layers_.size()) - 1; li >= 0; --li) {
        const std::size_t uli = static_cast<std::size_t>(li);
        std::vector<T>& dpost = dfeat[uli];
        if (!dcur.empty())
          for (std::size_t i = 0; i < dpost.size(); ++i) dpost[i] += dcur[i];
        // tanh'(x) = 1 - y^2 with y the stored output
        const std::vector<T>& y = ab.feat[uli];
        for (std::size_t i = 0; i < dpost.size(); ++i)
          dpost[i] = static_cast<T>(static_cast<double>(dpost[i]) *
                                    (1.0 - static_cast<double>(y[i]) * y[i]));
        const long ih = li == 0 ? h : ab.hs[uli - 1];
        const long iw = li == 0 ? w : ab.ws[uli - 1];
        dcur.assign(static_cast<std::size_t>(ih) * iw * layers_[uli].in_ch, T(0));
        conv_backward_input(layers_[uli], dpost.data(), ab.hs[uli], ab.ws[uli], dcur.data(), ih, iw);
      }
      for (std::size_t i = 0; i < static_cast<std::size_t>(h) * w; ++i) grad_b[i] = dcur[i];
    }
    return total;
  }

  // Pooled feature vector for distribution metrics: per-layer channel means
  // concatenated.
  std::vector<double> features(const T* slice, long h, long w) const {
    Acts acts;
    forward(slice, h, w, acts);
    std::vector<double> out;
    for (std::size_t li = 0; li < layers_.size(); ++li) {
      const long cells = acts.hs[li] * acts.ws[li];
      const int ch = layers_[li].out_ch;
      for (int d = 0; d < ch; ++d) {
        double acc = 0.0;
        for (long c = 0; c < cells; ++c)
          acc += static_cast<double>(acts.feat[li][static_cast<std::size_t>(c * ch + d)]);
        out.push_back(acc / static_cast<double>(cells));
      }
    }
    return out;
  }

  int feature_dim() const {
    int n = 0;
    for (const auto& l : layers_) n += l.out_ch;
    return n;
  }

 private:
  static constexpr double kEps = 1e-10;

  struct Layer {
    int in_ch, out_ch;
    std::vector<T> w;  // [(ky*kx*in_ch) x out_ch] row-major, tap-major
    std::vector<T> b;
  };

  long out_dim(long d) const { return (d + 2 * (cfg_.kernel / 2) - cfg_.kernel) / cfg_.stride + 1; }

  void conv_forward(const Layer& l, const T* x, long h, long w, T* y, long oh, long ow) const {
    const int k = cfg_.kernel, s = cfg_.stride, p = cfg_.kernel / 2;
    for (long oi = 0; oi < oh; ++oi)
      for (long oj = 0; oj < ow; ++oj) {
        T* dst = y + (oi * ow + oj) * l.out_ch;
        for (int c = 0; c < l.out_ch; ++c) dst[c] = l.b[static_cast<std::size_t>(c)];
        for (int ki = 0; ki < k; ++ki) {
          const long ii = oi * s - p + ki;
          if (ii < 0 || ii >= h) continue;
          for (int kj = 0; kj < k; ++kj) {
            const long jj = oj * s - p + kj;
            if (jj < 0 || jj >= w) continue;
            const T* src = x + (ii * w + jj) * l.in_ch;
            const T* wp = l.w.data() + (static_cast<std::size_t>(ki) * k + kj) * l.in_ch * l.out_ch;
            for (int ci = 0; ci < l.in_ch; ++ci)
              for (int c = 0; c < l.out_ch; ++c) dst[c] += src[ci] * wp[ci * l.out_ch + c];
          }
        }
      }
  }

  void conv_backward_input(const Layer& l, const T* dy, long oh, long ow, T* dx, long h,
                           long w) const {
    const int k = cfg_.kernel, s = cfg_.stride, p = cfg_.kernel / 2;
    for (long ii = 0; ii < h; ++ii)
      for (long jj = 0; jj < w; ++jj) {
        T* dst = dx + (ii * w + jj) * l.in_ch;
        for (int ki = 0; ki < k; ++ki) {
          const long num_i = ii + p - ki;
          if (num_i < 0 || num_i % s) continue;
          const long oi = num_i / s;
          if (oi >= oh) continue;
          for (int kj = 0; kj < k; ++kj) {
            const long num_j = jj + p - kj;
            if (num_j < 0 || num_j % s) continue;
            const long oj = num_j / s;
            if (oj >= ow) continue;
            const T* g = dy + (oi * ow + oj) * l.out_ch;
            const T* wp = l.w.data() + (static_cast<std::size_t>(ki) * k + kj) * l.in_ch * l.out_ch;
            for (int ci = 0; ci < l.in_ch; ++ci) {
              double acc = 0.0;
              for (int c = 0; c < l.out_ch; ++c)
                acc += static_cast<double>(g[c]) * wp[ci * l.out_ch + c];
              dst[ci] += static_cast<T>(acc);
            }
          }
        }
      }
  }

  FeatureNetConfig cfg_;
  std::vector<Layer> layers_;
};

}  // namespace morphgen::nn
