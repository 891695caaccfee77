#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "morphgen/core/errors.hpp"
#include "morphgen/core/rng.hpp"

// Causal attention kernels over [L x d] row-major per-head sequences, all
// with exp(q.k / sqrt(d)) semantics. FAVOR+ internals run in double so the
// positive feature map stays well-conditioned for float models too.

namespace morphgen::prior {

// Exact softmax attention; row i attends to positions <= i.
template <typename T>
void exact_causal_attention(const T* Q, const T* K, const T* V, long L, int d, T* out) {
  if (L < 1 || d < 1) throw ValidationError("exact_causal_attention: empty input");
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> scores;
  for (long i = 0; i < L; ++i) {
    scores.assign(static_cast<std::size_t>(i) + 1, 0.0);
    double mx = -1e300;
    for (long j = 0; j <= i; ++j) {
      double s = 0.0;
      for (int c = 0; c < d; ++c)
        s += static_cast<double>(Q[i * d + c]) * static_cast<double>(K[j * d + c]);
      s *= scale;
      scores[static_cast<std::size_t>(j)] = s;
      mx = std::max(mx, s);
    }
    double z = 0.0;
    for (long j = 0; j <= i; ++j) {
      scores[static_cast<std::size_t>(j)] = std::exp(scores[static_cast<std::size_t>(j)] - mx);
      z += scores[static_cast<std::size_t>(j)];
    }
    for (int c = 0; c < d; ++c) {
      double acc = 0.0;
      for (long j = 0; j <= i; ++j)
        acc += scores[static_cast<std::size_t>(j)] * static_cast<double>(V[j * d + c]);
      out[i * d + c] = static_cast<T>(acc / z);
    }
  }
}

// Softmax weights of row i (length i+1); used by oracle tests.
template <typename T>
std::vector<double> exact_causal_row_weights(const T* Q, const T* K, long L, int d, long i) {
  if (i < 0 || i >= L) throw ValidationError("exact_causal_row_weights: row out of range");
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> w(static_cast<std::size_t>(i) + 1);
  double mx = -1e300;
  for (long j = 0; j <= i; ++j) {
    double s = 0.0;
    for (int c = 0; c < d; ++c)
      s += static_cast<double>(Q[i * d + c]) * static_cast<double>(K[j * d + c]);
    w[static_cast<std::size_t>(j)] = s * scale;
    mx = std::max(mx, s * scale);
  }
  double z = 0.0;
  for (auto& x : w) {
    x = std::exp(x - mx);
    z += x;
  }
  for (auto& x : w) x /= z;
  return w;
}

// Exact softmax attention over the trailing window [max(0, i-window+1), i].
template <typename T>
void local_causal_attention(const T* Q, const T* K, const T* V, long L, int d, long window,
                            T* out) {
  if (window < 1) throw ValidationError("local_causal_attention: window must be >= 1");
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> scores(static_cast<std::size_t>(window));
  for (long i = 0; i < L; ++i) {
    const long j0 = std::max<long>(0, i - window + 1);
    const long n = i - j0 + 1;
    double mx = -1e300;
    for (long j = j0; j <= i; ++j) {
      double s = 0.0;
      for (int c = 0; c < d; ++c)
        s += static_cast<double>(Q[i * d + c]) * static_cast<double>(K[j * d + c]);
      s *= scale;
      scores[static_cast<std::size_t>(j - j0)] = s;
      mx = std::max(mx, s);
    }
    double z = 0.0;
    for (long j = 0; j < n; ++j) {
      scores[static_cast<std::size_t>(j)] = std::exp(scores[static_cast<std::size_t>(j)] - mx);
      z += scores[static_cast<std::size_t>(j)];
    }
    for (int c = 0; c < d; ++c) {
      double acc = 0.0;
      for (long j = 0; j < n; ++j)
        acc += scores[static_cast<std::size_t>(j)] * static_cast<double>(V[(j0 + j) * d + c]);
      out[i * d + c] = static_cast<T>(acc / z);
    }
  }
}

// Block-orthogonal Gaussian projections, rows rescaled to their original
// Gaussian norms (FAVOR+ orthogonal random features).
inline std::vector<double> favor_projection(int m, int d, std::uint64_t seed) {
  if (m < 1 || d < 1) throw ValidationError("favor_projection: m and d must be >= 1");
  Rng rng(seed);
  std::vector<double> g(static_cast<std::size_t>(m) * d);
  for (auto& x : g) x = rng.normal();
  std::vector<double> norms(static_cast<std::size_t>(m));
  for (int r = 0; r < m; ++r) {
    double acc = 0.0;
    for (int c = 0; c < d; ++c) acc += g[static_cast<std::size_t>(r) * d + c] * g[static_cast<std::size_t>(r) * d + c];
    norms[static_cast<std::size_t>(r)] = std::sqrt(acc);
  }
  // modified Gram-Schmidt within blocks of d rows
  for (int block = 0; block < m; block += d) {
    const int hi = std::min(m, block + d);
    for (int r = block; r < hi; ++r) {
      double* row = g.data() + static_cast<std::size_t>(r) * d;
      for (int p = block; p < r; ++p) {
        const double* prev = g.data() + static_cast<std::size_t>(p) * d;
        double dot = 0.0;
        for (int c = 0; c < d; ++c) dot += row[c] * prev[c];
        for (int c = 0; c < d; ++c) row[c] -= dot * prev[c];
      }
      double nrm = 0.0;
      for (int c = 0; c < d; ++c) nrm += row[c] * row[c];
      nrm = std::sqrt(nrm);
      if (nrm < 1e-12) throw NumericalError("favor_projection: degenerate block");
      for (int c = 0; c < d; ++c) row[c] /= nrm;
    }
  }
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < d; ++c) g[static_cast<std::size_t>(r) * d + c] *= norms[static_cast<std::size_t>(r)];
  return g;
}

// Positive random features of the softmax kernel for one row x (already
// scaled by d^{-1/4}): phi_r = exp(w_r.x - |x|^2/2 - stab) / sqrt(m).
// Queries subtract their per-row max (cancels exactly in the ratio).
inline void favor_features_row(const double* x, int d, const double* proj, int m, bool is_query,
                               double* phi) {
  double sq = 0.0;
  for (int c = 0; c < d; ++c) sq += x[c] * x[c];
  sq *= 0.5;
  double mx = -1e300;
  for (int r = 0; r < m; ++r) {
    double u = 0.0;
    const double* w = proj + static_cast<std::size_t>(r) * d;
    for (int c = 0; c < d; ++c) u += w[c] * x[c];
    phi[r] = u - sq;
    mx = std::max(mx, phi[r]);
  }
  const double stab = is_query ? mx : 0.0;
  const double inv_sqrt_m = 1.0 / std::sqrt(static_cast<double>(m));
  for (int r = 0; r < m; ++r) phi[r] = std::exp(phi[r] - stab) * inv_sqrt_m;
}

template <typename T>
struct FavorCache {
  long L = 0;
  int d = 0, m = 0;
  std::vector<double> qs, ks;    // L x d, scaled by d^{-1/4}
  std::vector<double> phiq, phik;  // L x m
  std::vector<double> num;       // L x d
  std::vector<double> den;       // L
};

// Causal FAVOR+ attention via prefix sums; linear in L and bitwise causal by
// construction. `cache`, when given, keeps what backward needs.
template <typename T>
void favor_attention_proj(const T* Q, const T* K, const T* V, long L, int d,
                          const std::vector<double>& proj, int m, T* out,
                          FavorCache<T>* cache = nullptr) {
  if (L < 1 || d < 1) throw ValidationError("favor_attention: empty input");
  if (m < 1) throw ValidationError("favor_attention: m must be >= 1");
  const double scale = 1.0 / std::pow(static_cast<double>(d), 0.25);

  std::vector<double> qs(static_cast<std::size_t>(L) * d), ks(qs.size());
  for (std::size_t i = 0; i < qs.size(); ++i) {
    qs[i] = static_cast<double>(Q[i]) * scale;
    ks[i] = static_cast<double>(K[i]) * scale;
  }
  std::vector<double> phiq(static_cast<std::size_t>(L) * m), phik(phiq.size());
  for (long i = 0; i < L; ++i) {
    favor_features_row(qs.data() + i * d, d, proj.data(), m, true, phiq.data() + i * m);
    favor_features_row(ks.data() + i * d, d, proj.data(), m, false, phik.data() + i * m);
  }

  std::vector<double> S(static_cast<std::size_t>(m) * d, 0.0), zsum(static_cast<std::size_t>(m), 0.0);
  std::vector<double> num(static_cast<std::size_t>(L) * d), den(static_cast<std::size_t>(L));
  constexpr double kDenEps = 1e-30;
  for (long i = 0; i < L; ++i) {
    const double* pk = phik.data() + i * m;
    const double* vi_src = nullptr;
    std::vector<double> vi(static_cast<std::size_t>(d));
    for (int c = 0; c < d; ++c) vi[static_cast<std::size_t>(c)] = static_cast<double>(V[i * d + c]);
    vi_src = vi.data();
    for (int r = 0; r < m; ++r) {
      double* Sr = S.data() + static_cast<std::size_t>(r) * d;
      const double pkr = pk[r];
      for (int c = 0; c < d; ++c) Sr[c] += pkr * vi_src[c];
      zsum[static_cast<std::size_t>(r)] += pkr;
    }
    const double* pq = phiq.data() + i * m;
    double dn = 0.0;
    for (int r = 0; r < m; ++r) dn += pq[r] * zsum[static_cast<std::size_t>(r)];
    dn += kDenEps;
    den[static_cast<std::size_t>(i)] = dn;
    double* ni = num.data() + i * d;
    for (int c = 0; c < d; ++c) ni[c] = 0.0;
    for (int r = 0; r < m; ++r) {
      const double pqr = pq[r];
      const double* Sr = S.data() + static_cast<std::size_t>(r) * d;
      for (int c = 0; c < d; ++c) ni[c] += pqr * Sr[c];
    }
    for (int c = 0; c < d; ++c) out[i * d + c] = static_cast<T>(ni[c] / dn);
  }

  if (cache) {
    cache->L = L;
    cache->d = d;
    cache->m = m;
    cache->qs = std::move(qs);
    cache->ks = std::move(ks);
    cache->phiq = std::move(phiq);
    cache->phik = std::move(phik);
    cache->num = std::move(num);
    cache->den = std::move(den);
  }
}

// Standalone FAVOR+ with the projection drawn from `seed`.
template <typename T>
void favor_attention(const T* Q, const T* K, const T* V, long L, int d, int m, std::uint64_t seed,
                     T* out) {
  const std::vector<double> proj = favor_projection(m, d, seed);
  favor_attention_proj(Q, K, V, L, d, proj, m, out);
}

// Backward of favor_attention_proj. Gradients are accumulated into dQ/dK/dV.
template <typename T>
void favor_attention_backward(const T* V, const std::vector<double>& proj,
                              const FavorCache<T>& c, const T* dout, T* dQ, T* dK, T* dV) {
  const long L = c.L;
  const int d = c.d, m = c.m;
  const double scale = 1.0 / std::pow(static_cast<double>(d), 0.25);

  std::vector<double> dphiq(static_cast<std::size_t>(L) * m, 0.0);
  std::vector<double> dnum(static_cast<std::size_t>(L) * d);
  std::vector<double> dden(static_cast<std::size_t>(L));
  for (long i = 0; i < L; ++i) {
    const double dn = c.den[static_cast<std::size_t>(i)];
    double acc = 0.0;
    for (int cc = 0; cc < d; ++cc) {
      const double g = static_cast<double>(dout[i * d + cc]);
      dnum[i * d + cc] = g / dn;
      acc += g * c.num[i * d + cc];
    }
    dden[static_cast<std::size_t>(i)] = -acc / (dn * dn);
  }

  // forward-order pass: rebuild prefix sums to get dphiq
  {
    std::vector<double> S(static_cast<std::size_t>(m) * d, 0.0), zsum(static_cast<std::size_t>(m), 0.0);
    for (long i = 0; i < L; ++i) {
      const double* pk = c.phik.data() + i * m;
      for (int r = 0; r < m; ++r) {
        double* Sr = S.data() + static_cast<std::size_t>(r) * d;
        const double pkr = pk[r];
        for (int cc = 0; cc < d; ++cc) Sr[cc] += pkr * static_cast<double>(V[i * d + cc]);
        zsum[static_cast<std::size_t>(r)] += pkr;
      }
      double* dpq = dphiq.data() + i * m;
      const double ddi = dden[static_cast<std::size_t>(i)];
      for (int r = 0; r < m; ++r) {
        const double* Sr = S.data() + static_cast<std::size_t>(r) * d;
        double acc = 0.0;
        for (int cc = 0; cc < d; ++cc) acc += Sr[cc] * dnum[i * d + cc];
        dpq[r] = acc + zsum[static_cast<std::size_t>(r)] * ddi;
      }
    }
  }

  // reverse-order pass: suffix sums give dphik and dV
  std::vector<double> dphik(static_cast<std::size_t>(L) * m, 0.0);
  {
    std::vector<double> Tacc(static_cast<std::size_t>(m) * d, 0.0), tz(static_cast<std::size_t>(m), 0.0);
    for (long i = L - 1; i >= 0; --i) {
      const double* pq = c.phiq.data() + i * m;
      const double ddi = dden[static_cast<std::size_t>(i)];
      for (int r = 0; r < m; ++r) {
        double* Tr = Tacc.data() + static_cast<std::size_t>(r) * d;
        const double pqr = pq[r];
        for (int cc = 0; cc < d; ++cc) Tr[cc] += pqr * dnum[i * d + cc];
        tz[static_cast<std::size_t>(r)] += pqr * ddi;
      }
      const double* pk = c.phik.data() + i * m;
      double* dpk = dphik.data() + i * m;
      for (int r = 0; r < m; ++r) {
        const double* Tr = Tacc.data() + static_cast<std::size_t>(r) * d;
        double acc = tz[static_cast<std::size_t>(r)];
        for (int cc = 0; cc < d; ++cc) acc += Tr[cc] * static_cast<double>(V[i * d + cc]);
        dpk[r] = acc;
      }
      for (int cc = 0; cc < d; ++cc) {
        double acc = 0.0;
        for (int r = 0; r < m; ++r)
          acc += pk[r] * Tacc[static_cast<std::size_t>(r) * d + cc];
        dV[i * d + cc] = static_cast<T>(static_cast<double>(dV[i * d + cc]) + acc);
      }
    }
  }

  // back through the feature maps: da_r = dphi_r * phi_r;
  // dx += sum_r da_r * (w_r - x)   (the stabilizers cancel exactly)
  for (long i = 0; i < L; ++i) {
    const double* pq = c.phiq.data() + i * m;
    const double* dpq = dphiq.data() + i * m;
    const double* x = c.qs.data() + i * d;
    double da_sum = 0.0;
    std::vector<double> dx(static_cast<std::size_t>(d), 0.0);
    for (int r = 0; r < m; ++r) {
      const double da = dpq[r] * pq[r];
      da_sum += da;
      const double* w = proj.data() + static_cast<std::size_t>(r) * d;
      for (int cc = 0; cc < d; ++cc) dx[static_cast<std::size_t>(cc)] += da * w[cc];
    }
    for (int cc = 0; cc < d; ++cc)
      dQ[i * d + cc] = static_cast<T>(static_cast<double>(dQ[i * d + cc]) +
                                      (dx[static_cast<std::size_t>(cc)] - da_sum * x[cc]) * scale);

    const double* pk = c.phik.data() + i * m;
    const double* dpk = dphik.data() + i * m;
    const double* xk = c.ks.data() + i * d;
    double dak_sum = 0.0;
    std::vector<double> dxk(static_cast<std::size_t>(d), 0.0);
    for (int r = 0; r < m; ++r) {
      const double da = dpk[r] * pk[r];
      dak_sum += da;
      const double* w = proj.data() + static_cast<std::size_t>(r) * d;
      for (int cc = 0; cc < d; ++cc) dxk[static_cast<std::size_t>(cc)] += da * w[cc];
    }
    for (int cc = 0; cc < d; ++cc)
      dK[i * d + cc] = static_cast<T>(static_cast<double>(dK[i * d + cc]) +
                                      (dxk[static_cast<std::size_t>(cc)] - dak_sum * xk[cc]) * scale);
  }
}

template <typename T>
struct LocalCache {
  long L = 0;
  int d = 0;
  long window = 0;
  std::vector<double> probs;  // L x window (row-local offsets)
};

template <typename T>
void local_attention_cached(const T* Q, const T* K, const T* V, long L, int d, long window, T* out,
                            LocalCache<T>& cache) {
  cache.L = L;
  cache.d = d;
  cache.window = window;
  cache.probs.assign(static_cast<std::size_t>(L) * window, 0.0);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (long i = 0; i < L; ++i) {
    const long j0 = std::max<long>(0, i - window + 1);
    const long n = i - j0 + 1;
    double* p = cache.probs.data() + i * window;
    double mx = -1e300;
    for (long j = 0; j < n; ++j) {
      double s = 0.0;
      for (int c = 0; c < d; ++c)
        s += static_cast<double>(Q[i * d + c]) * static_cast<double>(K[(j0 + j) * d + c]);
      p[j] = s * scale;
      mx = std::max(mx, p[j]);
    }
    double z = 0.0;
    for (long j = 0; j < n; ++j) {
      p[j] = std::exp(p[j] - mx);
      z += p[j];
    }
    for (long j = 0; j < n; ++j) p[j] /= z;
    for (int c = 0; c < d; ++c) {
      double acc = 0.0;
      for (long j = 0; j < n; ++j) acc += p[j] * static_cast<double>(V[(j0 + j) * d + c]);
      out[i * d + c] = static_cast<T>(acc);
    }
  }
}

template <typename T>
void local_attention_backward(const T* Q, const T* K, const T* V, const LocalCache<T>& c,
                              const T* dout, T* dQ, T* dK, T* dV) {
  const long L = c.L;
  const int d = c.d;
  const long window = c.window;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> dp(static_cast<std::size_t>(window));
  for (long i = 0; i < L; ++i) {
    const long j0 = std::max<long>(0, i - window + 1);
    const long n = i - j0 + 1;
    const double* p = c.probs.data() + i * window;
    double dot = 0.0;
    for (long j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int cc = 0; cc < d; ++cc)
        acc += static_cast<double>(V[(j0 + j) * d + cc]) * static_cast<double>(dout[i * d + cc]);
      dp[static_cast<std::size_t>(j)] = acc;
      dot += acc * p[j];
      for (int cc = 0; cc < d; ++cc)
        dV[(j0 + j) * d + cc] = static_cast<T>(static_cast<double>(dV[(j0 + j) * d + cc]) +
                                               p[j] * static_cast<double>(dout[i * d + cc]));
    }
    for (long j = 0; j < n; ++j) {
      const double ds = p[j] * (dp[static_cast<std::size_t>(j)] - dot) * scale;
      for (int cc = 0; cc < d; ++cc) {
        dQ[i * d + cc] = static_cast<T>(static_cast<double>(dQ[i * d + cc]) +
                                        ds * static_cast<double>(K[(j0 + j) * d + cc]));
        dK[(j0 + j) * d + cc] = static_cast<T>(static_cast<double>(dK[(j0 + j) * d + cc]) +
                                               ds * static_cast<double>(Q[i * d + cc]));
      }
    }
  }
}

}  // namespace morphgen::prior
