#include "morphgen/fidelity/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "morphgen/core/errors.hpp"
#include "morphgen/core/rng.hpp"

namespace morphgen::fidelity {

namespace {

std::vector<double> gather_middle_slice(const io::Volume& v, int axis, long& rows, long& cols) {
  const Shape3 s = v.shape;
  const long mid = s.dim(axis) / 2;
  std::vector<double> out;
  if (axis == 0) {
    rows = s.y;
    cols = s.z;
    out.resize(static_cast<std::size_t>(rows * cols));
    for (long j = 0; j < s.y; ++j)
      for (long k = 0; k < s.z; ++k) out[static_cast<std::size_t>(j * cols + k)] = v.at(mid, j, k);
  } else if (axis == 1) {
    rows = s.x;
    cols = s.z;
    out.resize(static_cast<std::size_t>(rows * cols));
    for (long i = 0; i < s.x; ++i)
      for (long k = 0; k < s.z; ++k) out[static_cast<std::size_t>(i * cols + k)] = v.at(i, mid, k);
  } else {
    rows = s.x;
    cols = s.y;
    out.resize(static_cast<std::size_t>(rows * cols));
    for (long i = 0; i < s.x; ++i)
      for (long j = 0; j < s.y; ++j) out[static_cast<std::size_t>(i * cols + j)] = v.at(i, j, mid);
  }
  return out;
}

// separable Gaussian filter, fixed radius, reflect boundary
void gaussian_filter_axis(const std::vector<double>& in, Shape3 s, int axis, double sigma,
                          int radius, std::vector<double>& out) {
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    sum += kernel[static_cast<std::size_t>(i + radius)];
  }
  for (auto& k : kernel) k /= sum;

  out.assign(in.size(), 0.0);
  const long dim = s.dim(axis);
  auto reflect = [dim](long i) {
    while (i < 0 || i >= dim) {
      if (i < 0) i = -i - 1;
      if (i >= dim) i = 2 * dim - i - 1;
    }
    return i;
  };
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
                 in[static_cast<std::size_t>(s.index(xi, yi, zi))];
        }
        out[static_cast<std::size_t>(s.index(x, y, z))] = acc;
      }
}

void gaussian_filter(const std::vector<double>& in, Shape3 s, double sigma, int radius,
                     std::vector<double>& out) {
  std::vector<double> tmp;
  gaussian_filter_axis(in, s, 0, sigma, radius, out);
  gaussian_filter_axis(out, s, 1, sigma, radius, tmp);
  gaussian_filter_axis(tmp, s, 2, sigma, radius, out);
}

struct SsimLevel {
  double mean_cs = 0.0;
  double mean_ssim = 0.0;
};

SsimLevel ssim_level(const std::vector<double>& x, const std::vector<double>& y, Shape3 s) {
  constexpr double kC1 = 0.01 * 0.01;  // (K1 * L)^2, L = 1
  constexpr double kC2 = 0.03 * 0.03;
  constexpr double kSigma = 1.5;
  constexpr int kRadius = 5;  // window size 11

  const std::size_t n = x.size();
  std::vector<double> xx(n), yy(n), xy(n);
  for (std::size_t i = 0; i < n; ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  std::vector<double> mx, my, mxx, myy, mxy;
  gaussian_filter(x, s, kSigma, kRadius, mx);
  gaussian_filter(y, s, kSigma, kRadius, my);
  gaussian_filter(xx, s, kSigma, kRadius, mxx);
  gaussian_filter(yy, s, kSigma, kRadius, myy);
  gaussian_filter(xy, s, kSigma, kRadius, mxy);

  SsimLevel out;
  for (std::size_t i = 0; i < n; ++i) {
    const double vx = mxx[i] - mx[i] * mx[i];
    const double vy = myy[i] - my[i] * my[i];
    const double cxy = mxy[i] - mx[i] * my[i];
    const double cs = (2.0 * cxy + kC2) / (vx + vy + kC2);
    const double lum = (2.0 * mx[i] * my[i] + kC1) / (mx[i] * mx[i] + my[i] * my[i] + kC1);
    out.mean_cs += cs;
    out.mean_ssim += lum * cs;
  }
  out.mean_cs /= static_cast<double>(n);
  out.mean_ssim /= static_cast<double>(n);
  return out;
}

void downsample2(std::vector<double>& data, Shape3& s) {
  const Shape3 ns{s.x / 2, s.y / 2, s.z / 2};
  std::vector<double> out(static_cast<std::size_t>(ns.cells()));
  for (long i = 0; i < ns.x; ++i)
    for (long j = 0; j < ns.y; ++j)
      for (long k = 0; k < ns.z; ++k) {
        double acc = 0.0;
        for (int di = 0; di < 2; ++di)
          for (int dj = 0; dj < 2; ++dj)
            for (int dk = 0; dk < 2; ++dk)
              acc += data[static_cast<std::size_t>(s.index(2 * i + di, 2 * j + dj, 2 * k + dk))];
        out[static_cast<std::size_t>(ns.index(i, j, k))] = acc / 8.0;
      }
  data = std::move(out);
  s = ns;
}

}  // namespace

FeatureSet extract_middle_slice_features(const std::vector<io::Volume>& volumes, int axis,
                                         const nn::FeaturePyramid2d<double>& extractor) {
  if (volumes.size() < 2)
    throw ValidationError("extract_middle_slice_features: need at least 2 volumes");
  if (axis < 0 || axis > 2) throw ValidationError("extract_middle_slice_features: bad axis");
  const Shape3 shape = volumes[0].shape;
  for (const auto& v : volumes)
    if (v.shape != shape)
      throw ValidationError("extract_middle_slice_features: volumes must share a shape");

  FeatureSet out;
  out.extractor_id = "random-conv-pyramid";
  const int f = extractor.feature_dim();
  out.features.resize(static_cast<Eigen::Index>(volumes.size()), f);
  for (std::size_t i = 0; i < volumes.size(); ++i) {
    long rows = 0, cols = 0;
    const std::vector<double> slice = gather_middle_slice(volumes[i], axis, rows, cols);
    const std::vector<double> feat = extractor.features(slice.data(), rows, cols);
    for (int j = 0; j < f; ++j) out.features(static_cast<Eigen::Index>(i), j) = feat[static_cast<std::size_t>(j)];
  }
  return out;
}

double frechet_distance(const FeatureSet& a, const FeatureSet& b, double eps) {
  if (a.features.cols() != b.features.cols())
    throw ValidationError("frechet_distance: feature dimension mismatch");
  if (a.features.rows() < 2 || b.features.rows() < 2)
    throw ValidationError("frechet_distance: need at least 2 samples per set");

  const auto mean_cov = [eps](const Eigen::MatrixXd& X) {
    const Eigen::VectorXd mu = X.colwise().mean();
    Eigen::MatrixXd centered = X.rowwise() - mu.transpose();
    Eigen::MatrixXd cov =
        centered.transpose() * centered / static_cast<double>(X.rows() - 1);
    cov += eps * Eigen::MatrixXd::Identity(X.cols(), X.cols());
    return std::make_pair(mu, cov);
  };

  const auto [mu_a, cov_a] = mean_cov(a.features);
  const auto [mu_b, cov_b] = mean_cov(b.features);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_a(cov_a);
  if (es_a.info() != Eigen::Success)
    throw NumericalError("frechet_distance: eigendecomposition of the first covariance failed");
  Eigen::VectorXd ev = es_a.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Eigen::MatrixXd sqrt_a =
      es_a.eigenvectors() * ev.asDiagonal() * es_a.eigenvectors().transpose();

  const Eigen::MatrixXd inner = sqrt_a * cov_b * sqrt_a;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_m(inner);
  if (es_m.info() != Eigen::Success)
    throw NumericalError("frechet_distance: matrix square root failed after regularization "
                         "(condition of Sa*Sb product)");
  const double tr_sqrt = es_m.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

  const double mean_term = (mu_a - mu_b).squaredNorm();
  return mean_term + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
}

double mmd2_dot(const std::vector<io::Volume>& a, const std::vector<io::Volume>& b) {
  if (a.empty() || b.empty()) throw ValidationError("mmd2_dot: empty batch");
  const std::size_t n = a[0].data.size();
  for (const auto& v : a)
    if (v.data.size() != n) throw ValidationError("mmd2_dot: voxel count mismatch");
  for (const auto& v : b)
    if (v.data.size() != n) throw ValidationError("mmd2_dot: voxel count mismatch");

  // biased dot-kernel estimator == squared distance of batch means
  std::vector<double> diff(n, 0.0);
  for (const auto& v : a)
    for (std::size_t i = 0; i < n; ++i) diff[i] += static_cast<double>(v.data[i]) / static_cast<double>(a.size());
  for (const auto& v : b)
    for (std::size_t i = 0; i < n; ++i) diff[i] -= static_cast<double>(v.data[i]) / static_cast<double>(b.size());
  double acc = 0.0;
  for (double d : diff) acc += d * d;
  return acc;
}

MeanStd mmd2_batchwise(const std::vector<io::Volume>& a, const std::vector<io::Volume>& b,
                       long batch_size, long draws, std::uint64_t seed) {
  if (batch_size < 1 || draws < 1) throw ValidationError("mmd2_batchwise: bad batch/draws");
  Rng rng(seed);
  std::vector<double> vals;
  for (long d = 0; d < draws; ++d) {
    std::vector<io::Volume> ba, bb;
    for (long i = 0; i < batch_size; ++i) {
      ba.push_back(a[static_cast<std::size_t>(rng.next_below(a.size()))]);
      bb.push_back(b[static_cast<std::size_t>(rng.next_below(b.size()))]);
    }
    vals.push_back(mmd2_dot(ba, bb));
  }
  MeanStd out;
  for (double v : vals) out.mean += v;
  out.mean /= static_cast<double>(vals.size());
  for (double v : vals) out.std += (v - out.mean) * (v - out.mean);
  out.std = vals.size() > 1 ? std::sqrt(out.std / static_cast<double>(vals.size() - 1)) : 0.0;
  return out;
}

int msssim_supported_levels(Shape3 s, int max_levels) {
  int lvl = 0;
  long mn = std::min({s.x, s.y, s.z});
  while (lvl < max_levels && mn >= 11) {
    ++lvl;
    mn /= 2;
  }
  return lvl;
}

std::vector<double> msssim_weights(int levels) {
  static const double kStd[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
  if (levels < 1 || levels > 5) throw ValidationError("msssim_weights: levels must be in [1, 5]");
  std::vector<double> w(kStd, kStd + levels);
  double sum = 0.0;
  for (double x : w) sum += x;
  for (double& x : w) x /= sum;
  return w;
}

double msssim3d(const io::Volume& x, const io::Volume& y, int levels,
                std::span<const double> weights) {
  if (x.shape != y.shape) throw ValidationError("msssim3d: shape mismatch");
  if (levels < 1) throw ValidationError("msssim3d: levels must be >= 1");
  if (static_cast<int>(weights.size()) != levels)
    throw ValidationError("msssim3d: weights size must equal levels");
  if (msssim_supported_levels(x.shape, levels) < levels)
    throw ValidationError("msssim3d: volume " + x.shape.str() + " too small for " +
                          std::to_string(levels) + " levels");

  std::vector<double> dx(x.data.begin(), x.data.end());
  std::vector<double> dy(y.data.begin(), y.data.end());
  Shape3 s = x.shape;

  double result = 1.0;
  for (int l = 0; l < levels; ++l) {
    const SsimLevel lv = ssim_level(dx, dy, s);
    const double term = l + 1 == levels ? lv.mean_ssim : lv.mean_cs;
    result *= std::pow(std::max(term, 0.0), weights[static_cast<std::size_t>(l)]);
    if (l + 1 < levels) {
      Shape3 sx = s;
      downsample2(dx, sx);
      downsample2(dy, s);  // both halve; s ends equal to sx
    }
  }
  return result;
}

double msssim3d_auto(const io::Volume& x, const io::Volume& y) {
  const int lvl = msssim_supported_levels(x.shape);
  if (lvl < 1) throw ValidationError("msssim3d_auto: volume too small for any level");
  const std::vector<double> w = msssim_weights(lvl);
  return msssim3d(x, y, lvl, w);
}

MeanStd pairwise_msssim(const std::vector<io::Volume>& samples) {
  if (samples.size() < 2) throw ValidationError("pairwise_msssim: need at least 2 samples");
  std::vector<double> vals;
  for (std::size_t i = 0; i < samples.size(); ++i)
    for (std::size_t j = i + 1; j < samples.size(); ++j)
      vals.push_back(msssim3d_auto(samples[i], samples[j]));
  MeanStd out;
  for (double v : vals) out.mean += v;
  out.mean /= static_cast<double>(vals.size());
  for (double v : vals) out.std += (v - out.mean) * (v - out.mean);
  out.std = std::sqrt(out.std / static_cast<double>(vals.size()));
  return out;
}

}  // namespace morphgen::fidelity
