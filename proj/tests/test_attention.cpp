#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "morphgen/core/rng.hpp"
#include "morphgen/prior/attention.hpp"

using namespace morphgen;
using namespace morphgen::prior;

namespace {

std::vector<double> randv(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal(0.0, scale);
  return v;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("exact attention: single token returns V[0]") {
  Rng rng(1);
  const int d = 8;
  auto q = randv(rng, d), k = randv(rng, d), v = randv(rng, d);
  std::vector<double> out(d);
  exact_causal_attention(q.data(), k.data(), v.data(), 1, d, out.data());
  for (int c = 0; c < d; ++c) CHECK(out[c] == doctest::Approx(v[c]).epsilon(1e-12));
}

TEST_CASE("exact attention: equal keys average the value prefix") {
  Rng rng(2);
  const long L = 6;
  const int d = 4;
  std::vector<double> q = randv(rng, L * d);
  std::vector<double> k(L * d);
  for (long i = 0; i < L; ++i)
    for (int c = 0; c < d; ++c) k[i * d + c] = 0.37;  // same key everywhere
  std::vector<double> v = randv(rng, L * d);
  std::vector<double> out(L * d);
  exact_causal_attention(q.data(), k.data(), v.data(), L, d, out.data());
  for (long i = 0; i < L; ++i)
    for (int c = 0; c < d; ++c) {
      double mean = 0.0;
      for (long j = 0; j <= i; ++j) mean += v[j * d + c] / static_cast<double>(i + 1);
      REQUIRE(out[i * d + c] == doctest::Approx(mean).epsilon(1e-10));
    }
}

TEST_CASE("exact attention rows sum to 1 (all-ones values probe)") {
  Rng rng(3);
  const long L = 40;
  const int d = 16;
  auto q = randv(rng, L * d), k = randv(rng, L * d);
  std::vector<double> ones(L * d, 1.0), out(L * d);
  exact_causal_attention(q.data(), k.data(), ones.data(), L, d, out.data());
  for (long i = 0; i < L * d; ++i) REQUIRE(out[i] == doctest::Approx(1.0).epsilon(1e-8));
  // direct weight check too
  const auto w = exact_causal_row_weights(q.data(), k.data(), L, d, 17);
  double sum = 0.0;
  for (double x : w) sum += x;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("exact attention: output at i ignores positions > i") {
  Rng rng(4);
  const long L = 10;
  const int d = 4;
  auto q = randv(rng, L * d), k = randv(rng, L * d), v = randv(rng, L * d);
  std::vector<double> out1(L * d), out2(L * d);
  exact_causal_attention(q.data(), k.data(), v.data(), L, d, out1.data());
  auto k2 = k, v2 = v;
  for (int c = 0; c < d; ++c) {
    k2[(L - 1) * d + c] += 10.0;
    v2[(L - 1) * d + c] -= 3.0;
  }
  exact_causal_attention(q.data(), k2.data(), v2.data(), L, d, out2.data());
  for (long i = 0; i < L - 1; ++i)
    for (int c = 0; c < d; ++c) REQUIRE(out1[i * d + c] == out2[i * d + c]);
}

TEST_CASE("favor error vs exact attention decreases with feature count") {
  // median over 10 seeds of relative L2 error, length 64, head dim 16
  const long L = 64;
  const int d = 16;
  auto run = [&](int m, std::uint64_t seed) {
    Rng rng(seed);
    auto q = randv(rng, L * d), k = randv(rng, L * d), v = randv(rng, L * d);
    std::vector<double> exact(L * d), approx(L * d);
    exact_causal_attention(q.data(), k.data(), v.data(), L, d, exact.data());
    favor_attention(q.data(), k.data(), v.data(), L, d, m, seed * 7 + 1, approx.data());
    double num = 0.0, den = 0.0;
    for (long i = 0; i < L * d; ++i) {
      num += (exact[i] - approx[i]) * (exact[i] - approx[i]);
      den += exact[i] * exact[i];
    }
    return std::sqrt(num / den);
  };
  std::vector<double> err16, err256;
  for (std::uint64_t s = 1; s <= 10; ++s) {
    err16.push_back(run(16, s));
    err256.push_back(run(256, s));
  }
  std::sort(err16.begin(), err16.end());
  std::sort(err256.begin(), err256.end());
  const double med16 = 0.5 * (err16[4] + err16[5]);
  const double med256 = 0.5 * (err256[4] + err256[5]);
  CHECK(med256 < med16);
}

TEST_CASE("favor attention is bitwise causal by construction") {
  Rng rng(5);
  const long L = 32;
  const int d = 8, m = 32;
  auto q = randv(rng, L * d), k = randv(rng, L * d), v = randv(rng, L * d);
  std::vector<double> out1(L * d), out2(L * d);
  favor_attention(q.data(), k.data(), v.data(), L, d, m, 99, out1.data());
  auto k2 = k, v2 = v, q2 = q;
  for (long i = 20; i < L; ++i)
    for (int c = 0; c < d; ++c) {
      q2[i * d + c] += 1.0;
      k2[i * d + c] -= 2.0;
      v2[i * d + c] *= 3.0;
    }
  favor_attention(q2.data(), k2.data(), v2.data(), L, d, m, 99, out2.data());
  for (long i = 0; i < 20; ++i)
    for (int c = 0; c < d; ++c) REQUIRE(out1[i * d + c] == out2[i * d + c]);
}

TEST_CASE("favor random features are strictly positive and the denominator is positive") {
  Rng rng(6);
  const int d = 8, m = 64;
  const auto proj = favor_projection(m, d, 4);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = randv(rng, d, 2.0);
    std::vector<double> phi(m);
    favor_features_row(x.data(), d, proj.data(), m, trial % 2 == 0, phi.data());
    for (double p : phi) REQUIRE(p > 0.0);
  }
}

TEST_CASE("favor projection blocks are orthogonal") {
  const int d = 8, m = 16;
  const auto proj = favor_projection(m, d, 11);
  for (int block = 0; block < m; block += d)
    for (int r = block; r < std::min(m, block + d); ++r)
      for (int r2 = block; r2 < r; ++r2) {
        double dot = 0.0;
        for (int c = 0; c < d; ++c) dot += proj[static_cast<std::size_t>(r) * d + c] *
                                           proj[static_cast<std::size_t>(r2) * d + c];
        REQUIRE(std::fabs(dot) < 1e-8);
      }
}

TEST_CASE("favor rejects bad feature counts") {
  std::vector<double> q(8, 0.0);
  CHECK_THROWS_AS(favor_attention(q.data(), q.data(), q.data(), 1, 8, 0, 1, q.data()),
                  ValidationError);
}

TEST_CASE("local attention with window >= length equals exact attention") {
  Rng rng(7);
  const long L = 12;
  const int d = 8;
  auto q = randv(rng, L * d), k = randv(rng, L * d), v = randv(rng, L * d);
  std::vector<double> full(L * d), local(L * d);
  exact_causal_attention(q.data(), k.data(), v.data(), L, d, full.data());
  local_causal_attention(q.data(), k.data(), v.data(), L, d, L + 5, local.data());
  CHECK(max_abs_diff(full, local) < 1e-12);
}

TEST_CASE("local attention with window 1 returns V") {
  Rng rng(8);
  const long L = 9;
  const int d = 4;
  auto q = randv(rng, L * d), k = randv(rng, L * d), v = randv(rng, L * d);
  std::vector<double> out(L * d);
  local_causal_attention(q.data(), k.data(), v.data(), L, d, 1, out.data());
  for (long i = 0; i < L * d; ++i) CHECK(out[i] == doctest::Approx(v[i]).epsilon(1e-12));
}

TEST_CASE("local attention ignores positions before the window") {
  Rng rng(9);
  const long L = 16, w = 4;
  const int d = 4;
  auto q = randv(rng, L * d), k = randv(rng, L * d), v = randv(rng, L * d);
  std::vector<double> out1(L * d), out2(L * d);
  local_causal_attention(q.data(), k.data(), v.data(), L, d, w, out1.data());
  auto k2 = k, v2 = v;
  // perturb positions 0..9; rows >= 13 only see positions >= 10
  for (long i = 0; i < 10; ++i)
    for (int c = 0; c < d; ++c) {
      k2[i * d + c] += 5.0;
      v2[i * d + c] -= 7.0;
    }
  local_causal_attention(q.data(), k2.data(), v2.data(), L, d, w, out2.data());
  for (long i = 13; i < L; ++i)
    for (int c = 0; c < d; ++c) REQUIRE(out1[i * d + c] == out2[i * d + c]);
}

TEST_CASE("favor backward matches finite differences") {
  Rng rng(10);
  const long L = 7;
  const int d = 4, m = 16;
  auto q = randv(rng, L * d), k = randv(rng, L * d), v = randv(rng, L * d);
  const auto proj = favor_projection(m, d, 21);
  auto w = randv(rng, L * d);  // loss = sum w .* out

  auto loss_of = [&](const std::vector<double>& qq, const std::vector<double>& kk,
                     const std::vector<double>& vv) {
    std::vector<double> out(L * d);
    favor_attention_proj(qq.data(), kk.data(), vv.data(), L, d, proj, m, out.data());
    double acc = 0.0;
    for (long i = 0; i < L * d; ++i) acc += w[i] * out[i];
    return acc;
  };

  FavorCache<double> cache;
  std::vector<double> out(L * d);
  favor_attention_proj(q.data(), k.data(), v.data(), L, d, proj, m, out.data(), &cache);
  std::vector<double> dq(L * d, 0.0), dk(L * d, 0.0), dv(L * d, 0.0);
  favor_attention_backward(v.data(), proj, cache, w.data(), dq.data(), dk.data(), dv.data());

  const double h = 1e-6;
  Rng pick(55);
  for (int trial = 0; trial < 12; ++trial) {
    const std::size_t i = pick.next_below(L * d);
    auto fd_of = [&](std::vector<double>& target, const double* analytic) {
      const double keep = target[i];
      target[i] = keep + h;
      const double up = loss_of(q, k, v);
      target[i] = keep - h;
      const double dn = loss_of(q, k, v);
      target[i] = keep;
      const double fd = (up - dn) / (2 * h);
      const double rel = std::fabs(fd - analytic[i]) / std::max(1e-9, std::fabs(fd));
      REQUIRE(rel < 1e-4);
    };
    switch (trial % 3) {
      case 0: fd_of(q, dq.data()); break;
      case 1: fd_of(k, dk.data()); break;
      default: fd_of(v, dv.data()); break;
    }
  }
}

TEST_CASE("local backward matches finite differences") {
  Rng rng(11);
  const long L = 9, w = 3;
  const int d = 4;
  auto q = randv(rng, L * d), k = randv(rng, L * d), v = randv(rng, L * d);
  auto gw = randv(rng, L * d);

  auto loss_of = [&]() {
    std::vector<double> out(L * d);
    local_causal_attention(q.data(), k.data(), v.data(), L, d, w, out.data());
    double acc = 0.0;
    for (long i = 0; i < L * d; ++i) acc += gw[i] * out[i];
    return acc;
  };

  LocalCache<double> cache;
  std::vector<double> out(L * d);
  local_attention_cached(q.data(), k.data(), v.data(), L, d, w, out.data(), cache);
  std::vector<double> dq(L * d, 0.0), dk(L * d, 0.0), dv(L * d, 0.0);
  local_attention_backward(q.data(), k.data(), v.data(), cache, gw.data(), dq.data(), dk.data(),
                           dv.data());

  const double h = 1e-6;
  Rng pick(66);
  for (int trial = 0; trial < 12; ++trial) {
    const std::size_t i = pick.next_below(L * d);
    std::vector<double>* target = trial % 3 == 0 ? &q : (trial % 3 == 1 ? &k : &v);
    const double* analytic = trial % 3 == 0 ? dq.data() : (trial % 3 == 1 ? dk.data() : dv.data());
    const double keep = (*target)[i];
    (*target)[i] = keep + h;
    const double up = loss_of();
    (*target)[i] = keep - h;
    const double dn = loss_of();
    (*target)[i] = keep;
    const double fd = (up - dn) / (2 * h);
    const double rel = std::fabs(fd - analytic[i]) / std::max(1e-9, std::fabs(fd));
    REQUIRE(rel < 1e-4);
  }
}
