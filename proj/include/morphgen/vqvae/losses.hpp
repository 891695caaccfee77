#pragma once

#include <complex>
#include <cstdint>
#include <span>
#include <vector>

#include "morphgen/core/errors.hpp"
#include "morphgen/core/rng.hpp"
#include "morphgen/nn/feature_net.hpp"
#include "morphgen/signal/fft.hpp"
#include "morphgen/vqvae/model.hpp"

namespace morphgen::vqvae {

struct ReconComponents {
  double l1 = 0.0;
  double frequency = 0.0;
  double perceptual = 0.0;
  double total = 0.0;
};

namespace detail {

// Gathers the 2D slice at `index` along `axis`; returns (rows, cols).
template <typename T>
std::pair<long, long> gather_slice(const T* vol, Shape3 s, int axis, long index,
                                   std::vector<T>& out) {
  long rows = 0, cols = 0;
  if (axis == 0) {
    rows = s.y;
    cols = s.z;
    out.resize(static_cast<std::size_t>(rows * cols));
    for (long j = 0; j < s.y; ++j)
      for (long k = 0; k < s.z; ++k) out[static_cast<std::size_t>(j * cols + k)] = vol[s.index(index, j, k)];
  } else if (axis == 1) {
    rows = s.x;
    cols = s.z;
    out.resize(static_cast<std::size_t>(rows * cols));
    for (long i = 0; i < s.x; ++i)
      for (long k = 0; k < s.z; ++k) out[static_cast<std::size_t>(i * cols + k)] = vol[s.index(i, index, k)];
  } else {
    rows = s.x;
    cols = s.y;
    out.resize(static_cast<std::size_t>(rows * cols));
    for (long i = 0; i < s.x; ++i)
      for (long j = 0; j < s.y; ++j) out[static_cast<std::size_t>(i * cols + j)] = vol[s.index(i, j, index)];
  }
  return {rows, cols};
}

template <typename T>
void scatter_slice_add(T* vol, Shape3 s, int axis, long index, const T* grad, double scale) {
  if (axis == 0) {
    for (long j = 0; j < s.y; ++j)
      for (long k = 0; k < s.z; ++k)
        vol[s.index(index, j, k)] += static_cast<T>(static_cast<double>(grad[j * s.z + k]) * scale);
  } else if (axis == 1) {
    for (long i = 0; i < s.x; ++i)
      for (long k = 0; k < s.z; ++k)
        vol[s.index(i, index, k)] += static_cast<T>(static_cast<double>(grad[i * s.z + k]) * scale);
  } else {
    for (long i = 0; i < s.x; ++i)
      for (long j = 0; j < s.y; ++j)
        vol[s.index(i, j, index)] += static_cast<T>(static_cast<double>(grad[i * s.y + j]) * scale);
  }
}

}  // namespace detail

// L2 norm over unitary-DFT magnitudes:
// sqrt(mean_k ((|FFT(x)|_k - |FFT(xhat)|_k) / sqrt(N))^2). The 1/sqrt(N)
// keeps the Fourier norm on the same scale as the spatial one (Parseval), so
// the term is commensurate with the pixel loss; a constant intensity shift c
// gives exactly c. If grad is non-null, adds d(loss)/d(xhat) into it.
template <typename T>
double frequency_loss(const T* x, const T* xhat, Shape3 s, T* grad) {
  const std::size_t n = static_cast<std::size_t>(s.cells());
  std::vector<std::complex<double>> buf(n), fx(n), fy(n);
  for (std::size_t i = 0; i < n; ++i) buf[i] = {static_cast<double>(x[i]), 0.0};
  signal::dft3d(buf.data(), s, fx.data());
  for (std::size_t i = 0; i < n; ++i) buf[i] = {static_cast<double>(xhat[i]), 0.0};
  signal::dft3d(buf.data(), s, fy.data());

  const double unitary = 1.0 / std::sqrt(static_cast<double>(n));
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = (std::abs(fx[i]) - std::abs(fy[i])) * unitary;
    acc += d * d;
  }
  const double loss = std::sqrt(acc / static_cast<double>(n));

  if (grad && loss > 1e-300) {
    // d(loss)/d(xhat_n) = Re(DFT(c .* conj(u)))_n with
    // c_k = (|Y|_k - |X|_k) / (N^2 * loss)
    std::vector<std::complex<double>> v(n);
    const double scale = 1.0 / (static_cast<double>(n) * static_cast<double>(n) * loss);
    for (std::size_t i = 0; i < n; ++i) {
      const double mag = std::abs(fy[i]);
      const double c = (mag - std::abs(fx[i])) * scale;
      v[i] = mag > 1e-300 ? std::conj(fy[i] / mag) * c : std::complex<double>{0.0, 0.0};
    }
    std::vector<std::complex<double>> g(n);
    signal::dft3d(v.data(), s, g.data());
    for (std::size_t i = 0; i < n; ++i) grad[i] += static_cast<T>(g[i].real());
  }
  return loss;
}

// Seeded selection of ceil(fraction * dim) distinct slice indices per axis.
inline std::vector<long> select_slices(long dim, double fraction, Rng& rng) {
  const long count = std::max<long>(1, static_cast<long>(std::ceil(fraction * static_cast<double>(dim))));
  std::vector<long> idx(static_cast<std::size_t>(dim));
  for (long i = 0; i < dim; ++i) idx[static_cast<std::size_t>(i)] = i;
  rng.shuffle(idx.data(), idx.size());
  idx.resize(static_cast<std::size_t>(std::min(count, dim)));
  return idx;
}

// Eq. 3 composite: w_pixel * L1 + w_frequency * Fourier-magnitude L2 +
// w_perceptual * slice-wise perceptual distance over a seeded 50% subset of
// slices on each axis. If grad_xhat is non-null the weighted gradient is
// accumulated into it.
template <typename T>
ReconComponents reconstruction_loss(const T* x, const T* xhat, Shape3 s, const VqvaeConfig& cfg,
                                    const nn::FeaturePyramid2d<T>& percep, std::uint64_t seed,
                                    T* grad_xhat = nullptr) {
  const std::size_t n = static_cast<std::size_t>(s.cells());
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(static_cast<double>(x[i])) || !std::isfinite(static_cast<double>(xhat[i])))
      throw ValidationError("reconstruction_loss: non-finite input");

  ReconComponents out;

  double l1 = 0.0;
  for (std::size_t i = 0; i < n; ++i) l1 += std::abs(static_cast<double>(xhat[i]) - x[i]);
  out.l1 = l1 / static_cast<double>(n);
  if (grad_xhat) {
    const double scale = cfg.w_pixel / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double d = static_cast<double>(xhat[i]) - x[i];
      grad_xhat[i] += static_cast<T>(d > 0 ? scale : (d < 0 ? -scale : 0.0));
    }
  }

  if (cfg.w_frequency > 0.0) {
    std::vector<T> fgrad;
    if (grad_xhat) fgrad.assign(n, T(0));
    out.frequency = frequency_loss(x, xhat, s, grad_xhat ? fgrad.data() : nullptr);
    if (grad_xhat)
      for (std::size_t i = 0; i < n; ++i)
        grad_xhat[i] += static_cast<T>(cfg.w_frequency * static_cast<double>(fgrad[i]));
  }

  if (cfg.w_perceptual > 0.0) {
    Rng rng(seed);
    double acc = 0.0;
    long n_slices = 0;
    std::vector<T> sa, sb, sgrad;
    struct Sel {
      int axis;
      long index;
    };
    std::vector<Sel> selected;
    for (int axis = 0; axis < 3; ++axis)
      for (long idx : select_slices(s.dim(axis), cfg.perceptual_slice_fraction, rng))
        selected.push_back({axis, idx});
    n_slices = static_cast<long>(selected.size());
    for (const auto& sel : selected) {
      const auto [rows, cols] = detail::gather_slice(x, s, sel.axis, sel.index, sa);
      detail::gather_slice(xhat, s, sel.axis, sel.index, sb);
      if (grad_xhat) {
        sgrad.assign(sa.size(), T(0));
        acc += percep.distance(sa.data(), sb.data(), rows, cols, sgrad.data());
        detail::scatter_slice_add(grad_xhat, s, sel.axis, sel.index, sgrad.data(),
                                  cfg.w_perceptual / static_cast<double>(n_slices));
      } else {
        acc += percep.distance(sa.data(), sb.data(), rows, cols);
      }
    }
    out.perceptual = acc / static_cast<double>(n_slices);
  }

  out.total = cfg.w_pixel * out.l1 + cfg.w_frequency * out.frequency +
              cfg.w_perceptual * out.perceptual;
  return out;
}

struct LsganLosses {
  double loss_d = 0.0;
  double loss_g = 0.0;
};

// Eq. 4: loss_D = 1/2 mean((d_real - 1)^2) + 1/2 mean(d_fake^2),
//        loss_G = 1/2 mean((d_fake - 1)^2).
template <typename T>
LsganLosses lsgan_losses(std::span<const T> d_real, std::span<const T> d_fake) {
  for (T v : d_real)
    if (!std::isfinite(static_cast<double>(v))) throw ValidationError("lsgan: non-finite real score");
  for (T v : d_fake)
    if (!std::isfinite(static_cast<double>(v))) throw ValidationError("lsgan: non-finite fake score");
  LsganLosses out;
  double dr = 0.0, df = 0.0, g = 0.0;
  for (T v : d_real) {
    const double d = static_cast<double>(v) - 1.0;
    dr += d * d;
  }
  for (T v : d_fake) {
    df += static_cast<double>(v) * v;
    const double d = static_cast<double>(v) - 1.0;
    g += d * d;
  }
  out.loss_d = 0.5 * dr / static_cast<double>(d_real.size()) +
               0.5 * df / static_cast<double>(d_fake.size());
  out.loss_g = 0.5 * g / static_cast<double>(d_fake.size());
  return out;
}

// d(loss_D)/d(scores): (d_real - 1)/N and d_fake/N.
template <typename T>
void lsgan_d_grads(std::span<const T> d_real, std::span<const T> d_fake, T* g_real, T* g_fake) {
  const double nr = static_cast<double>(d_real.size());
  const double nf = static_cast<double>(d_fake.size());
  for (std::size_t i = 0; i < d_real.size(); ++i)
    g_real[i] = static_cast<T>((static_cast<double>(d_real[i]) - 1.0) / nr);
  for (std::size_t i = 0; i < d_fake.size(); ++i)
    g_fake[i] = static_cast<T>(static_cast<double>(d_fake[i]) / nf);
}

// d(loss_G)/d(d_fake): (d_fake - 1)/N.
template <typename T>
void lsgan_g_grad(std::span<const T> d_fake, T* g_fake) {
  const double nf = static_cast<double>(d_fake.size());
  for (std::size_t i = 0; i < d_fake.size(); ++i)
    g_fake[i] = static_cast<T>((static_cast<double>(d_fake[i]) - 1.0) / nf);
}

}  // namespace morphgen::vqvae
