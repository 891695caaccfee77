#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "morphgen/core/errors.hpp"
#include "morphgen/core/grid.hpp"
#include "morphgen/core/rng.hpp"

// Hand-rolled layers with explicit forward/backward passes. Activations are
// stored cell-major ([cells x channels], row-major) so the convolution GEMMs
// have tall left operands and parallelize well.

namespace morphgen::nn {

template <typename T>
using MatrixRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<MatrixRM<T>>;
template <typename T>
using CMapM = Eigen::Map<const MatrixRM<T>>;

template <typename T>
struct ParamSlot {
  std::string name;
  std::vector<T>* value;
  std::vector<T>* grad;
};

// ---------------------------------------------------------------------------
// im2col / col2im between a fine grid and the coarse grid of a strided kernel.
// col rows are coarse cells; columns are (kx, ky, kz, channel), channel
// fastest. col2im is written as a gather over fine cells so it is
// deterministic under any thread count.

inline Shape3 conv_out_shape(Shape3 in, int k, int s, int p) {
  auto one = [&](long d) { return (d + 2 * p - k) / s + 1; };
  if ((in.x + 2 * p - k) % s || (in.y + 2 * p - k) % s || (in.z + 2 * p - k) % s)
    throw ValidationError("conv: input shape " + in.str() + " not divisible for kernel " +
                          std::to_string(k) + " stride " + std::to_string(s));
  return {one(in.x), one(in.y), one(in.z)};
}

inline Shape3 tconv_out_shape(Shape3 in, int k, int s, int p) {
  auto one = [&](long d) { return (d - 1) * s - 2 * p + k; };
  return {one(in.x), one(in.y), one(in.z)};
}

template <typename T>
void im2col3d(const T* fine, Shape3 fine_s, int channels, int k, int s, int p, Shape3 coarse_s,
              T* col) {
  const long taps = static_cast<long>(k) * k * k;
  const long row_len = taps * channels;
#pragma omp parallel for schedule(static)
  for (long pc = 0; pc < coarse_s.cells(); ++pc) {
    const long px = pc / (coarse_s.y * coarse_s.z);
    const long py = (pc / coarse_s.z) % coarse_s.y;
    const long pz = pc % coarse_s.z;
    T* row = col + pc * row_len;
    long t = 0;
    for (int kx = 0; kx < k; ++kx) {
      const long fx = px * s - p + kx;
      for (int ky = 0; ky < k; ++ky) {
        const long fy = py * s - p + ky;
        for (int kz = 0; kz < k; ++kz, ++t) {
          const long fz = pz * s - p + kz;
          T* dst = row + t * channels;
          if (fx < 0 || fy < 0 || fz < 0 || fx >= fine_s.x || fy >= fine_s.y || fz >= fine_s.z) {
            for (int c = 0; c < channels; ++c) dst[c] = T(0);
          } else {
            const T* src = fine + static_cast<std::size_t>(fine_s.index(fx, fy, fz)) * channels;
            for (int c = 0; c < channels; ++c) dst[c] = src[c];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im3d(const T* col, Shape3 fine_s, int channels, int k, int s, int p, Shape3 coarse_s,
              T* fine) {
  const long taps = static_cast<long>(k) * k * k;
  const long row_len = taps * channels;
#pragma omp parallel for schedule(static)
  for (long fc = 0; fc < fine_s.cells(); ++fc) {
    const long fx = fc / (fine_s.y * fine_s.z);
    const long fy = (fc / fine_s.z) % fine_s.y;
    const long fz = fc % fine_s.z;
    T* dst = fine + fc * channels;
    for (int c = 0; c < channels; ++c) dst[c] = T(0);
    for (int kx = 0; kx < k; ++kx) {
      const long nx = fx + p - kx;
      if (nx < 0 || nx % s) continue;
      const long px = nx / s;
      if (px >= coarse_s.x) continue;
      for (int ky = 0; ky < k; ++ky) {
        const long ny = fy + p - ky;
        if (ny < 0 || ny % s) continue;
        const long py = ny / s;
        if (py >= coarse_s.y) continue;
        for (int kz = 0; kz < k; ++kz) {
          const long nz = fz + p - kz;
          if (nz < 0 || nz % s) continue;
          const long pz = nz / s;
          if (pz >= coarse_s.z) continue;
          const long tap = (static_cast<long>(kx) * k + ky) * k + kz;
          const T* src = col + coarse_s.index(px, py, pz) * row_len + tap * channels;
          for (int c = 0; c < channels; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------

template <typename T>
class Conv3d {
 public:
  Conv3d(int in_ch, int out_ch, int kernel, int stride, int pad)
      : in_ch_(in_ch), out_ch_(out_ch), k_(kernel), s_(stride), p_(pad) {
    const std::size_t taps = static_cast<std::size_t>(k_) * k_ * k_;
    w_.assign(taps * in_ch_ * out_ch_, T(0));
    b_.assign(static_cast<std::size_t>(out_ch_), T(0));
    dw_.assign(w_.size(), T(0));
    db_.assign(b_.size(), T(0));
  }

  void init_he(Rng& rng) {
    const double fan_in = static_cast<double>(k_) * k_ * k_ * in_ch_;
    rng.fill_normal(w_.data(), w_.size(), 0.0, std::sqrt(2.0 / fan_in));
    // small random biases keep pre-activations off the exact ReLU kink
    rng.fill_normal(b_.data(), b_.size(), 0.0, 0.01);
  }

  Shape3 out_shape(Shape3 in) const { return conv_out_shape(in, k_, s_, p_); }
  int out_channels() const { return out_ch_; }
  int in_channels() const { return in_ch_; }

  void forward(const T* x, Shape3 in_s, T* y) {
    const Shape3 os = out_shape(in_s);
    const long rows = os.cells();
    const long cols = static_cast<long>(k_) * k_ * k_ * in_ch_;
    col_.resize(static_cast<std::size_t>(rows * cols));
    im2col3d(x, in_s, in_ch_, k_, s_, p_, os, col_.data());
    MapM<T> Y(y, rows, out_ch_);
    CMapM<T> C(col_.data(), rows, cols);
    CMapM<T> W(w_.data(), cols, out_ch_);
    Y.noalias() = C * W;
    Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b_.data(), out_ch_);
  }

  // Accumulates dw/db; writes input gradient to dx unless null. Re-runs
  // im2col on x rather than caching activations per sample.
  void backward(const T* x, Shape3 in_s, const T* dy, T* dx) {
    const Shape3 os = out_shape(in_s);
    const long rows = os.cells();
    const long cols = static_cast<long>(k_) * k_ * k_ * in_ch_;
    col_.resize(static_cast<std::size_t>(rows * cols));
    im2col3d(x, in_s, in_ch_, k_, s_, p_, os, col_.data());

    CMapM<T> dY(dy, rows, out_ch_);
    CMapM<T> C(col_.data(), rows, cols);
    MapM<T> dW(dw_.data(), cols, out_ch_);
    dW.noalias() += C.transpose() * dY;
    Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(db_.data(), out_ch_) += dY.colwise().sum();

    if (dx) {
      dcol_.resize(col_.size());
      MapM<T> dC(dcol_.data(), rows, cols);
      CMapM<T> W(w_.data(), cols, out_ch_);
      dC.noalias() = dY * W.transpose();
      col2im3d(dcol_.data(), in_s, in_ch_, k_, s_, p_, os, dx);
    }
  }

  void collect(const std::string& prefix, std::vector<ParamSlot<T>>& out) {
    out.push_back({prefix + ".w", &w_, &dw_});
    out.push_back({prefix + ".b", &b_, &db_});
  }

  std::vector<T>& weight() { return w_; }
  std::vector<T>& bias() { return b_; }

 private:
  int in_ch_, out_ch_, k_, s_, p_;
  std::vector<T> w_, b_, dw_, db_;
  std::vector<T> col_, dcol_;
};

template <typename T>
class TConv3d {
 public:
  TConv3d(int in_ch, int out_ch, int kernel, int stride, int pad)
      : in_ch_(in_ch), out_ch_(out_ch), k_(kernel), s_(stride), p_(pad) {
    const std::size_t taps = static_cast<std::size_t>(k_) * k_ * k_;
    w_.assign(static_cast<std::size_t>(in_ch_) * taps * out_ch_, T(0));
    b_.assign(static_cast<std::size_t>(out_ch_), T(0));
    dw_.assign(w_.size(), T(0));
    db_.assign(b_.size(), T(0));
  }

  void init_he(Rng& rng) {
    // fan_in of the equivalent dense map from one input cell
    const double fan_in = static_cast<double>(in_ch_) * k_ * k_ * k_ / (s_ * s_ * s_);
    rng.fill_normal(w_.data(), w_.size(), 0.0, std::sqrt(2.0 / std::max(fan_in, 1.0)));
    rng.fill_normal(b_.data(), b_.size(), 0.0, 0.01);
  }

  Shape3 out_shape(Shape3 in) const { return tconv_out_shape(in, k_, s_, p_); }
  int out_channels() const { return out_ch_; }

  void forward(const T* x, Shape3 in_s, T* y) {
    const Shape3 os = out_shape(in_s);
    const long rows = in_s.cells();
    const long cols = static_cast<long>(k_) * k_ * k_ * out_ch_;
    col_.resize(static_cast<std::size_t>(rows * cols));
    CMapM<T> X(x, rows, in_ch_);
    CMapM<T> W(w_.data(), in_ch_, cols);
    MapM<T> C(col_.data(), rows, cols);
    C.noalias() = X * W;
    col2im3d(col_.data(), os, out_ch_, k_, s_, p_, in_s, y);
    MapM<T> Y(y, os.cells(), out_ch_);
    Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b_.data(), out_ch_);
  }

  void backward(const T* x, Shape3 in_s, const T* dy, T* dx) {
    const Shape3 os = out_shape(in_s);
    const long rows = in_s.cells();
    const long cols = static_cast<long>(k_) * k_ * k_ * out_ch_;
    col_.resize(static_cast<std::size_t>(rows * cols));
    im2col3d(dy, os, out_ch_, k_, s_, p_, in_s, col_.data());

    CMapM<T> dC(col_.data(), rows, cols);
    CMapM<T> X(x, rows, in_ch_);
    MapM<T> dW(dw_.data(), in_ch_, cols);
    dW.noalias() += X.transpose() * dC;
    CMapM<T> dY(dy, os.cells(), out_ch_);
    Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(db_.data(), out_ch_) += dY.colwise().sum();

    if (dx) {
      MapM<T> dX(dx, rows, in_ch_);
      CMapM<T> W(w_.data(), in_ch_, cols);
      dX.noalias() = dC * W.transpose();
    }
  }

  void collect(const std::string& prefix, std::vector<ParamSlot<T>>& out) {
    out.push_back({prefix + ".w", &w_, &dw_});
    out.push_back({prefix + ".b", &b_, &db_});
  }

  std::vector<T>& weight() { return w_; }
  std::vector<T>& bias() { return b_; }

 private:
  int in_ch_, out_ch_, k_, s_, p_;
  std::vector<T> w_, b_, dw_, db_;
  std::vector<T> col_;
};

template <typename T>
class Dense {
 public:
  Dense(int in_dim, int out_dim) : in_(in_dim), out_(out_dim) {
    w_.assign(static_cast<std::size_t>(in_) * out_, T(0));
    b_.assign(static_cast<std::size_t>(out_), T(0));
    dw_.assign(w_.size(), T(0));
    db_.assign(b_.size(), T(0));
  }

  void init_gaussian(Rng& rng, double std) { rng.fill_normal(w_.data(), w_.size(), 0.0, std); }

  int in_dim() const { return in_; }
  int out_dim() const { return out_; }

  // x: [rows x in], y: [rows x out]
  void forward(const T* x, long rows, T* y) const {
    CMapM<T> X(x, rows, in_);
    CMapM<T> W(w_.data(), in_, out_);
    MapM<T> Y(y, rows, out_);
    Y.noalias() = X * W;
    Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b_.data(), out_);
  }

  void backward(const T* x, long rows, const T* dy, T* dx) {
    CMapM<T> X(x, rows, in_);
    CMapM<T> dY(dy, rows, out_);
    MapM<T> dW(dw_.data(), in_, out_);
    dW.noalias() += X.transpose() * dY;
    Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(db_.data(), out_) += dY.colwise().sum();
    if (dx) {
      MapM<T> dX(dx, rows, in_);
      CMapM<T> W(w_.data(), in_, out_);
      dX.noalias() = dY * W.transpose();
    }
  }

  void collect(const std::string& prefix, std::vector<ParamSlot<T>>& out) {
    out.push_back({prefix + ".w", &w_, &dw_});
    out.push_back({prefix + ".b", &b_, &db_});
  }

  std::vector<T>& weight() { return w_; }
  std::vector<T>& bias() { return b_; }

 private:
  int in_, out_;
  std::vector<T> w_, b_, dw_, db_;
};

// ---------------------------------------------------------------------------
// Activations. Backward variants take the forward *input*.

template <typename T>
void relu_forward(T* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] = x[i] > T(0) ? x[i] : T(0);
}

template <typename T>
void relu_backward(const T* x_in, T* dx, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    if (x_in[i] <= T(0)) dx[i] = T(0);
}

template <typename T>
void leaky_relu_forward(T* x, std::size_t n, T slope) {
  for (std::size_t i = 0; i < n; ++i)
    if (x[i] < T(0)) x[i] *= slope;
}

template <typename T>
void leaky_relu_backward(const T* x_in, T* dx, std::size_t n, T slope) {
  for (std::size_t i = 0; i < n; ++i)
    if (x_in[i] < T(0)) dx[i] *= slope;
}

// tanh-approximated GELU; smooth everywhere, which keeps finite-difference
// gradient checks tight.
template <typename T>
void gelu_forward(const T* x, T* y, std::size_t n) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  for (std::size_t i = 0; i < n; ++i) {
    const double v = static_cast<double>(x[i]);
    y[i] = static_cast<T>(0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v))));
  }
}

template <typename T>
void gelu_backward(const T* x, const T* dy, T* dx, std::size_t n) {
  constexpr double c = 0.7978845608028654;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = static_cast<double>(x[i]);
    const double u = c * (v + 0.044715 * v * v * v);
    const double t = std::tanh(u);
    const double du = c * (1.0 + 3.0 * 0.044715 * v * v);
    const double g = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
    dx[i] = static_cast<T>(static_cast<double>(dy[i]) * g);
  }
}

template <typename T>
void clamp01_forward(T* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] = std::min(T(1), std::max(T(0), x[i]));
}

template <typename T>
void clamp01_backward(const T* x_in, T* dx, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    if (x_in[i] <= T(0) || x_in[i] >= T(1)) dx[i] = T(0);
}

// ---------------------------------------------------------------------------

// Adam with per-step exponential learning-rate decay. Moments are kept in
// double regardless of the parameter scalar type.
template <typename T>
class Adam {
 public:
  Adam(double lr, double decay = 0.99999, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8)
      : lr0_(lr), decay_(decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void attach(std::vector<ParamSlot<T>> slots) {
    slots_ = std::move(slots);
    m_.clear();
    v_.clear();
    for (const auto& s : slots_) {
      m_.emplace_back(s.value->size(), 0.0);
      v_.emplace_back(s.value->size(), 0.0);
    }
  }

  void zero_grad() {
    for (auto& s : slots_) std::fill(s.grad->begin(), s.grad->end(), T(0));
  }

  void step() {
    ++t_;
    const double lr = lr0_ * std::pow(decay_, static_cast<double>(t_ - 1));
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t si = 0; si < slots_.size(); ++si) {
      auto& w = *slots_[si].value;
      auto& g = *slots_[si].grad;
      auto& m = m_[si];
      auto& v = v_[si];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
        const double mh = m[i] / bc1;
        const double vh = v[i] / bc2;
        w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * mh / (std::sqrt(vh) + eps_));
      }
    }
  }

  long step_count() const { return t_; }

 private:
  double lr0_, decay_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<ParamSlot<T>> slots_;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace morphgen::nn
