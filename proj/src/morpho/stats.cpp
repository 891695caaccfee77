#include "morphgen/morpho/stats.hpp"

#include <algorithm>
#include <cmath>

#include "morphgen/core/errors.hpp"

namespace morphgen::morpho {

namespace {

constexpr double kFwhmToSigma = 2.3548200450309493;  // 2 sqrt(2 ln 2)

void smooth_axis(std::vector<float>& data, Shape3 s, int axis, double sigma) {
  if (sigma <= 0.0) return;
  const int radius = std::max(1, static_cast<int>(std::ceil(4.0 * sigma)));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    sum += kernel[static_cast<std::size_t>(i + radius)];
  }
  for (auto& k : kernel) k /= sum;

  const long dim = s.dim(axis);
  auto reflect = [dim](long i) {
    while (i < 0 || i >= dim) {
      if (i < 0) i = -i - 1;
      if (i >= dim) i = 2 * dim - i - 1;
    }
    return i;
  };
  std::vector<float> out(data.size());
#pragma omp parallel for schedule(static)
  for (long x = 0; x < s.x; ++x)
    for (long y = 0; y < s.y; ++y)
      for (long z = 0; z < s.z; ++z) {
        double acc = 0.0;
        for (int t = -radius; t <= radius; ++t) {
          long xi = x, yi = y, zi = z;
          if (axis == 0)
            xi = reflect(x + t);
          else if (axis == 1)
            yi = reflect(y + t);
          else
            zi = reflect(z + t);
          acc += kernel[static_cast<std::size_t>(t + radius)] *
                 static_cast<double>(data[static_cast<std::size_t>(s.index(xi, yi, zi))]);
        }
        out[static_cast<std::size_t>(s.index(x, y, z))] = static_cast<float>(acc);
      }
  data = std::move(out);
}

double log_gamma(double x) { return std::lgamma(x); }

// regularized incomplete beta by continued fraction (Lentz)
double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 3e-16;
  constexpr double kFpMin = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kFpMin) d = kFpMin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < kEps) break;
  }
  return h;
}

double incbeta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double bt =
      std::exp(log_gamma(a + b) - log_gamma(a) - log_gamma(b) + a * std::log(x) + b * std::log1p(-x));
  if (x < (a + 1.0) / (a + b + 2.0)) return bt * betacf(a, b, x) / a;
  return 1.0 - bt * betacf(b, a, 1.0 - x) / b;
}

double sample_variance(std::span<const double> v, double mean) {
  if (v.size() < 2) return 0.0;
  double acc = 0.0;
  for (double x : v) acc += (x - mean) * (x - mean);
  return acc / static_cast<double>(v.size() - 1);
}

}  // namespace

io::Volume gaussian_smooth(const io::Volume& map, const std::array<double, 3>& fwhm_voxels) {
  for (double f : fwhm_voxels)
    if (!(f >= 0.0)) throw ValidationError("gaussian_smooth: fwhm must be >= 0");
  io::Volume out = map;
  for (int axis = 0; axis < 3; ++axis) {
    const double sigma = fwhm_voxels[static_cast<std::size_t>(axis)] / kFwhmToSigma;
    smooth_axis(out.data, out.shape, axis, sigma);
  }
  return out;
}

TMap welch_tmap(const std::vector<io::Volume>& group_a, const std::vector<io::Volume>& group_b,
                const std::array<double, 3>& fwhm_voxels, double variance_floor_fraction) {
  if (group_a.size() < 2 || group_b.size() < 2)
    throw ValidationError("welch_tmap: each group needs >= 2 subjects");
  const Shape3 s = group_a[0].shape;
  for (const auto& v : group_a)
    if (v.shape != s) throw ValidationError("welch_tmap: shape mismatch in group a");
  for (const auto& v : group_b)
    if (v.shape != s) throw ValidationError("welch_tmap: shape mismatch in group b");

  std::vector<io::Volume> sa, sb;
  for (const auto& v : group_a) sa.push_back(gaussian_smooth(v, fwhm_voxels));
  for (const auto& v : group_b) sb.push_back(gaussian_smooth(v, fwhm_voxels));

  const double na = static_cast<double>(sa.size());
  const double nb = static_cast<double>(sb.size());
  const std::size_t cells = static_cast<std::size_t>(s.cells());

  std::vector<double> ma(cells, 0.0), mb(cells, 0.0), va(cells, 0.0), vb(cells, 0.0);
  for (const auto& v : sa)
    for (std::size_t i = 0; i < cells; ++i) ma[i] += v.data[i] / na;
  for (const auto& v : sb)
    for (std::size_t i = 0; i < cells; ++i) mb[i] += v.data[i] / nb;
  for (const auto& v : sa)
    for (std::size_t i = 0; i < cells; ++i) va[i] += (v.data[i] - ma[i]) * (v.data[i] - ma[i]) / (na - 1.0);
  for (const auto& v : sb)
    for (std::size_t i = 0; i < cells; ++i) vb[i] += (v.data[i] - mb[i]) * (v.data[i] - mb[i]) / (nb - 1.0);

  // low-variance correction: floor from the maximum combined-sample variance
  double max_comb = 0.0;
  if (variance_floor_fraction > 0.0) {
    const double n_all = na + nb;
    for (std::size_t i = 0; i < cells; ++i) {
      const double mean_all = (na * ma[i] + nb * mb[i]) / n_all;
      double ss = (na - 1.0) * va[i] + na * (ma[i] - mean_all) * (ma[i] - mean_all) +
                  (nb - 1.0) * vb[i] + nb * (mb[i] - mean_all) * (mb[i] - mean_all);
      max_comb = std::max(max_comb, ss / (n_all - 1.0));
    }
  }
  const double eps = variance_floor_fraction * max_comb;

  TMap out;
  out.t = io::Volume(s);
  out.dof = io::Volume(s);
  out.n_a = static_cast<long>(sa.size());
  out.n_b = static_cast<long>(sb.size());
  out.fwhm = fwhm_voxels;
  for (std::size_t i = 0; i < cells; ++i) {
    const double vaf = va[i] + eps;
    const double vbf = vb[i] + eps;
    const double se2 = vaf / na + vbf / nb;
    if (se2 <= 0.0) {
      out.t.data[i] = 0.0f;
      out.dof.data[i] = 1.0f;
      continue;
    }
    out.t.data[i] = static_cast<float>((ma[i] - mb[i]) / std::sqrt(se2));
    const double num = se2 * se2;
    const double den = (vaf / na) * (vaf / na) / (na - 1.0) + (vbf / nb) * (vbf / nb) / (nb - 1.0);
    out.dof.data[i] = static_cast<float>(den > 0.0 ? num / den : 1.0);
  }
  return out;
}

std::map<std::string, double> region_volumes(const phantom::TissueMaps& maps,
                                             const std::array<double, 3>& voxel_spacing_mm) {
  const double voxel_vol = voxel_spacing_mm[0] * voxel_spacing_mm[1] * voxel_spacing_mm[2];
  std::map<std::string, double> out;
  for (phantom::Tissue t : phantom::kAllTissues) {
    const io::Volume& m = maps.of(t);
    double acc = 0.0;
    for (float p : m.data) {
      if (!(p >= -1e-6f && p <= 1.0f + 1e-6f))
        throw ValidationError(std::string("region_volumes: probability out of range in ") +
                              phantom::tissue_name(t));
      acc += static_cast<double>(p);
    }
    out[phantom::tissue_name(t)] = acc * voxel_vol;
  }
  return out;
}

double student_t_two_sided_p(double t, double dof) {
  if (!(dof > 0.0)) throw ValidationError("student_t_two_sided_p: dof must be > 0");
  if (!std::isfinite(t)) return 0.0;
  const double x = dof / (dof + t * t);
  return incbeta(dof / 2.0, 0.5, x);
}

WelchResult welch_ttest(std::span<const double> a, std::span<const double> b,
                        double variance_floor) {
  if (a.size() < 2 || b.size() < 2)
    throw ValidationError("welch_ttest: each side needs >= 2 samples");
  WelchResult r;
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  double ma = 0.0, mb = 0.0;
  for (double x : a) ma += x / na;
  for (double x : b) mb += x / nb;
  const double va = sample_variance(a, ma) + variance_floor;
  const double vb = sample_variance(b, mb) + variance_floor;
  const double se2 = va / na + vb / nb;
  if (se2 <= 0.0) {
    r.degenerate = true;
    r.t = 0.0;
    r.dof = na + nb - 2.0;
    r.p = 1.0;
    return r;
  }
  r.t = (ma - mb) / std::sqrt(se2);
  const double den = (va / na) * (va / na) / (na - 1.0) + (vb / nb) * (vb / nb) / (nb - 1.0);
  r.dof = den > 0.0 ? se2 * se2 / den : na + nb - 2.0;
  r.p = student_t_two_sided_p(r.t, r.dof);
  return r;
}

VolumeTTestTable volume_ttests(const VolumeSamples& real, const VolumeSamples& synthetic,
                               double target_p, double variance_floor) {
  if (!(target_p > 0.0 && target_p <= 1.0))
    throw ValidationError("volume_ttests: target_p must be in (0, 1]");
  VolumeTTestTable table;
  table.target_p = target_p;
  for (const auto& [cohort, tissues] : real) {
    auto sit = synthetic.find(cohort);
    if (sit == synthetic.end()) continue;
    for (const auto& [tissue, rvals] : tissues) {
      auto tit = sit->second.find(tissue);
      if (tit == sit->second.end()) continue;
      const auto& svals = tit->second;
      if (rvals.size() < 2 || svals.size() < 2)
        throw ValidationError("volume_ttests: cell (" + cohort + ", " + tissue +
                              ") needs >= 2 samples per side");
      VolumeTTestRow row;
      row.cohort = cohort;
      row.tissue = tissue;
      double rm = 0.0, sm = 0.0;
      for (double v : rvals) rm += v / static_cast<double>(rvals.size());
      for (double v : svals) sm += v / static_cast<double>(svals.size());
      row.real_mean = rm;
      row.synth_mean = sm;
      row.real_std = std::sqrt(sample_variance(rvals, rm));
      row.synth_std = std::sqrt(sample_variance(svals, sm));
      const WelchResult w = welch_ttest(rvals, svals, variance_floor);
      row.t = w.t;
      row.p = w.p;
      row.dof = w.dof;
      row.degenerate = w.degenerate;
      row.significant = !w.degenerate && w.p < target_p;
      table.rows.push_back(std::move(row));
    }
  }
  return table;
}

phantom::TissueMaps segment_tissues(const io::Volume& v,
                                    const phantom::TissueIntensities& intensities, double sigma) {
  if (!(sigma > 0.0)) throw ValidationError("segment_tissues: sigma must be > 0");
  phantom::TissueMaps maps;
  maps.gm = io::Volume(v.shape);
  maps.wm = io::Volume(v.shape);
  maps.csf = io::Volume(v.shape);
  maps.deep_gm = io::Volume(v.shape);
  maps.shell = io::Volume(v.shape);

  const double mus[6] = {0.0,           intensities.csf,    intensities.gm,
                         intensities.deep_gm, intensities.wm, intensities.shell};
  // CSF mixes toward WM across the thin ventricle wall, so its class gets a
  // doubled width; everything else uses sigma.
  double inv2s2[6];
  for (int c = 0; c < 6; ++c) inv2s2[c] = 1.0 / (2.0 * sigma * sigma);
  inv2s2[1] = 1.0 / (2.0 * (2.0 * sigma) * (2.0 * sigma));
  // voxels darker than half the CSF intensity are pure background
  const double background_cut = 0.5 * intensities.csf;
  const Shape3 s = v.shape;
  const std::size_t n = v.data.size();

  // spatial prior standing in for the atlas priors of a full segmentation
  // pipeline: deep classes (CSF, WM, DeepGM) exist only well inside the head.
  // Partial-volume voxels at the head surface sweep every intensity and would
  // otherwise leave tissue-colored rings.
  std::vector<char> interior(n);
  for (std::size_t i = 0; i < n; ++i) interior[i] = v.data[i] > background_cut ? 1 : 0;
  constexpr int kErosion = 4;  // 6-neighborhood, so 2.3-4 voxels in euclidean terms
  std::vector<char> next(n);
  for (int it = 0; it < kErosion; ++it) {
    for (long x = 0; x < s.x; ++x)
      for (long y = 0; y < s.y; ++y)
        for (long z = 0; z < s.z; ++z) {
          const std::size_t idx = static_cast<std::size_t>(s.index(x, y, z));
          char keep = interior[idx];
          if (keep) {
            const long nb[6][3] = {{x - 1, y, z}, {x + 1, y, z}, {x, y - 1, z},
                                   {x, y + 1, z}, {x, y, z - 1}, {x, y, z + 1}};
            for (const auto& p : nb) {
              if (p[0] < 0 || p[1] < 0 || p[2] < 0 || p[0] >= s.x || p[1] >= s.y || p[2] >= s.z ||
                  !interior[static_cast<std::size_t>(s.index(p[0], p[1], p[2]))]) {
                keep = 0;
                break;
              }
            }
          }
          next[idx] = keep;
        }
    interior.swap(next);
  }

  for (std::size_t i = 0; i < n; ++i) {
    const double x = static_cast<double>(v.data[i]);
    if (x <= background_cut) continue;
    double w[6], tot = 0.0;
    for (int c = 0; c < 6; ++c) {
      const double d = x - mus[c];
      w[c] = std::exp(-d * d * inv2s2[c]);
      tot += w[c];
    }
    if (tot <= 0.0) tot = 1.0;
    if (interior[i]) {
      maps.csf.data[i] = static_cast<float>(w[1] / tot);
      maps.deep_gm.data[i] = static_cast<float>(w[3] / tot);
      maps.wm.data[i] = static_cast<float>(w[4] / tot);
    }
    maps.gm.data[i] = static_cast<float>(w[2] / tot);
    maps.shell.data[i] = static_cast<float>(w[5] / tot);
  }
  return maps;
}

}  // namespace morphgen::morpho
