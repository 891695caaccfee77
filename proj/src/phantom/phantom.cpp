#include "morphgen/phantom/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "morphgen/core/errors.hpp"
#include "morphgen/core/rng.hpp"

namespace morphgen::phantom {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Partial-volume membership of a voxel in an ellipsoid: the covered fraction
// estimated with a 3x3x3 midpoint rule. Boundary voxels get fractional
// probabilities, which keeps voxel sums close to the analytic volumes even
// for small structures.
double membership(const Ellipsoid& e, double x, double y, double z) {
  const double u = (x - e.cx) / e.ax;
  const double v = (y - e.cy) / e.ay;
  const double w = (z - e.cz) / e.az;
  const double r2 = u * u + v * v + w * w;
  // fast paths: voxel centers farther than the voxel half-diagonal from the
  // shell are fully inside or outside
  const double r = std::sqrt(r2);
  if (r > 0.0) {
    const double gx = u / e.ax, gy = v / e.ay, gz = w / e.az;
    const double grad = std::sqrt(gx * gx + gy * gy + gz * gz) / r;
    const double dist = (r - 1.0) / std::max(grad, 1e-12);
    if (dist < -0.95) return 1.0;
    if (dist > 0.95) return 0.0;
  } else if (e.ax > 1.0 && e.ay > 1.0 && e.az > 1.0) {
    return 1.0;
  }
  int inside = 0;
  for (int i = -1; i <= 1; ++i)
    for (int j = -1; j <= 1; ++j)
      for (int k = -1; k <= 1; ++k) {
        const double su = (x + i / 3.0 - e.cx) / e.ax;
        const double sv = (y + j / 3.0 - e.cy) / e.ay;
        const double sw = (z + k / 3.0 - e.cz) / e.az;
        if (su * su + sv * sv + sw * sw <= 1.0) ++inside;
      }
  return static_cast<double>(inside) / 27.0;
}

struct Fields {
  std::vector<float> csf, dgm, wm, gm, shell;
};

// Trilinear sample with zero padding outside the grid.
float sample_trilinear(const float* data, Shape3 s, double x, double y, double z) {
  const long x0 = static_cast<long>(std::floor(x));
  const long y0 = static_cast<long>(std::floor(y));
  const long z0 = static_cast<long>(std::floor(z));
  const double fx = x - static_cast<double>(x0);
  const double fy = y - static_cast<double>(y0);
  const double fz = z - static_cast<double>(z0);
  double acc = 0.0;
  for (int dx = 0; dx < 2; ++dx)
    for (int dy = 0; dy < 2; ++dy)
      for (int dz = 0; dz < 2; ++dz) {
        const long xi = x0 + dx, yi = y0 + dy, zi = z0 + dz;
        if (xi < 0 || yi < 0 || zi < 0 || xi >= s.x || yi >= s.y || zi >= s.z) continue;
        const double wgt = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy) * (dz ? fz : 1.0 - fz);
        acc += wgt * static_cast<double>(data[s.index(xi, yi, zi)]);
      }
  return static_cast<float>(acc);
}

// Smooth random displacement field: a coarse grid of Gaussian offsets,
// trilinearly upsampled. One field per subject, shared by all maps.
struct WarpField {
  Shape3 grid;
  Shape3 coarse{5, 5, 5};
  std::vector<double> offsets;  // coarse.cells() * 3

  WarpField(Shape3 g, double amplitude, Rng& rng) : grid(g) {
    offsets.resize(static_cast<std::size_t>(coarse.cells()) * 3);
    for (auto& o : offsets) o = rng.normal(0.0, amplitude);
  }

  void displacement(double x, double y, double z, double out[3]) const {
    // map voxel coords onto the coarse lattice
    const double cx = x / static_cast<double>(grid.x - 1) * static_cast<double>(coarse.x - 1);
    const double cy = y / static_cast<double>(grid.y - 1) * static_cast<double>(coarse.y - 1);
    const double cz = z / static_cast<double>(grid.z - 1) * static_cast<double>(coarse.z - 1);
    const long x0 = std::min(static_cast<long>(cx), coarse.x - 2);
    const long y0 = std::min(static_cast<long>(cy), coarse.y - 2);
    const long z0 = std::min(static_cast<long>(cz), coarse.z - 2);
    const double fx = cx - static_cast<double>(x0);
    const double fy = cy - static_cast<double>(y0);
    const double fz = cz - static_cast<double>(z0);
    for (int a = 0; a < 3; ++a) out[a] = 0.0;
    for (int dx = 0; dx < 2; ++dx)
      for (int dy = 0; dy < 2; ++dy)
        for (int dz = 0; dz < 2; ++dz) {
          const double w = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy) * (dz ? fz : 1.0 - fz);
          const std::size_t base =
              static_cast<std::size_t>(coarse.index(x0 + dx, y0 + dy, z0 + dz)) * 3;
          for (int a = 0; a < 3; ++a) out[a] += w * offsets[base + static_cast<std::size_t>(a)];
        }
  }
};

Volume warp(const Volume& in, const WarpField& field) {
  Volume out(in.shape);
  out.spacing_mm = in.spacing_mm;
  const Shape3 s = in.shape;
#pragma omp parallel for schedule(static)
  for (long i = 0; i < s.x; ++i)
    for (long j = 0; j < s.y; ++j)
      for (long k = 0; k < s.z; ++k) {
        double u[3];
        field.displacement(static_cast<double>(i), static_cast<double>(j), static_cast<double>(k), u);
        out.data[static_cast<std::size_t>(s.index(i, j, k))] = sample_trilinear(
            in.data.data(), s, static_cast<double>(i) + u[0], static_cast<double>(j) + u[1],
            static_cast<double>(k) + u[2]);
      }
  return out;
}

}  // namespace

double Ellipsoid::volume() const { return 4.0 / 3.0 * kPi * ax * ay * az; }

bool Ellipsoid::contains(double x, double y, double z) const {
  const double u = (x - cx) / ax, v = (y - cy) / ay, w = (z - cz) / az;
  return u * u + v * v + w * w <= 1.0;
}

void PhantomSpec::validate() const {
  std::ostringstream bad;
  if (grid_shape.x < 8 || grid_shape.y < 8 || grid_shape.z < 8)
    bad << "grid_shape: dims must be >= 8; ";
  if (downsample_divisor > 0 &&
      (grid_shape.x % downsample_divisor || grid_shape.y % downsample_divisor ||
       grid_shape.z % downsample_divisor))
    bad << "grid_shape: dims must divide by " << downsample_divisor << "; ";
  if (!(ventricle_scale >= 0.5 && ventricle_scale <= 1.5))
    bad << "ventricle_scale: must be in [0.5, 1.5]; ";
  if (!(atrophy >= 0.0 && atrophy <= 0.3)) bad << "atrophy: must be in [0, 0.3]; ";
  if (!(deformation_amplitude >= 0.0)) bad << "deformation_amplitude: must be >= 0; ";
  if (!(noise_sigma >= 0.0)) bad << "noise_sigma: must be >= 0; ";
  const double ints[5] = {intensities.gm, intensities.wm, intensities.csf, intensities.deep_gm,
                          intensities.shell};
  for (double t : ints)
    if (!(t >= 0.0 && t <= 1.0)) {
      bad << "tissue_intensities: values must be in [0, 1]; ";
      break;
    }
  const std::string msg = bad.str();
  if (!msg.empty()) throw ValidationError("PhantomSpec: " + msg);
}

PhantomGeometry phantom_geometry(const PhantomSpec& spec) {
  const double hx = static_cast<double>(spec.grid_shape.x) / 2.0;
  const double hy = static_cast<double>(spec.grid_shape.y) / 2.0;
  const double hz = static_cast<double>(spec.grid_shape.z) / 2.0;
  const double cx = (static_cast<double>(spec.grid_shape.x) - 1.0) / 2.0;
  const double cy = (static_cast<double>(spec.grid_shape.y) - 1.0) / 2.0;
  const double cz = (static_cast<double>(spec.grid_shape.z) - 1.0) / 2.0;

  PhantomGeometry g;
  g.head = {cx, cy, cz, 0.92 * hx, 0.94 * hy, 0.92 * hz};
  g.brain = {cx, cy, cz, 0.80 * hx, 0.84 * hy, 0.80 * hz};
  const double wf = 0.76 + 0.4 * spec.atrophy;  // atrophy thins the GM shell
  g.wm_boundary = {cx, cy, cz, wf * g.brain.ax, wf * g.brain.ay, wf * g.brain.az};

  const double vs = spec.ventricle_scale;
  for (double side : {-1.0, 1.0}) {
    g.ventricles.push_back({cx + side * 0.20 * hx, cy - 0.05 * hy, cz, 0.13 * hx * vs,
                            0.26 * hy * vs, 0.13 * hz * vs});
    g.deep_nuclei.push_back({cx + side * 0.46 * hx, cy + 0.04 * hy, cz + 0.30 * hz, 0.09 * hx,
                             0.11 * hy, 0.09 * hz});
  }
  return g;
}

Phantom generate_phantom(const PhantomSpec& spec, std::uint64_t seed) {
  spec.validate();
  const Shape3 s = spec.grid_shape;
  const std::size_t n = static_cast<std::size_t>(s.cells());
  const PhantomGeometry geo = phantom_geometry(spec);

  TissueMaps maps;
  maps.gm = Volume(s);
  maps.wm = Volume(s);
  maps.csf = Volume(s);
  maps.deep_gm = Volume(s);
  maps.shell = Volume(s);

  // Layered membership stack; each voxel's probabilities sum to <= 1.
#pragma omp parallel for schedule(static)
  for (long i = 0; i < s.x; ++i)
    for (long j = 0; j < s.y; ++j)
      for (long k = 0; k < s.z; ++k) {
        const double x = static_cast<double>(i), y = static_cast<double>(j),
                     z = static_cast<double>(k);
        double csf = 0.0;
        for (const auto& e : geo.ventricles) csf = std::max(csf, membership(e, x, y, z));
        double dgm = 0.0;
        for (const auto& e : geo.deep_nuclei) dgm = std::max(dgm, membership(e, x, y, z));
        const double wm_m = membership(geo.wm_boundary, x, y, z);
        const double brain_m = membership(geo.brain, x, y, z);
        const double head_m = membership(geo.head, x, y, z);

        double rem = 1.0;
        const double p_csf = csf * rem;
        rem -= p_csf;
        const double p_dgm = dgm * rem;
        rem -= p_dgm;
        const double p_wm = wm_m * rem;
        rem -= p_wm;
        const double p_gm = brain_m * rem;
        rem -= p_gm;
        const double p_shell = head_m * rem;

        const std::size_t idx = static_cast<std::size_t>(s.index(i, j, k));
        maps.csf.data[idx] = static_cast<float>(p_csf);
        maps.deep_gm.data[idx] = static_cast<float>(p_dgm);
        maps.wm.data[idx] = static_cast<float>(p_wm);
        maps.gm.data[idx] = static_cast<float>(p_gm);
        maps.shell.data[idx] = static_cast<float>(p_shell);
      }

  Rng deform_rng = Rng::derive(seed, 0);
  Rng noise_rng = Rng::derive(seed, 1);

  if (spec.deformation_amplitude > 0.0) {
    const WarpField field(s, spec.deformation_amplitude, deform_rng);
    maps.csf = warp(maps.csf, field);
    maps.deep_gm = warp(maps.deep_gm, field);
    maps.wm = warp(maps.wm, field);
    maps.gm = warp(maps.gm, field);
    maps.shell = warp(maps.shell, field);
  }

  // Compose the volume from the (already warped) maps so the deformation is
  // applied identically to both by construction.
  Phantom out;
  out.volume = Volume(s);
  const TissueIntensities& ti = spec.intensities;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = static_cast<double>(maps.gm.data[i]) * ti.gm +
                     static_cast<double>(maps.wm.data[i]) * ti.wm +
                     static_cast<double>(maps.csf.data[i]) * ti.csf +
                     static_cast<double>(maps.deep_gm.data[i]) * ti.deep_gm +
                     static_cast<double>(maps.shell.data[i]) * ti.shell;
    out.volume.data[i] = static_cast<float>(v);
  }

  if (spec.noise_sigma > 0.0) {
    for (std::size_t i = 0; i < n; ++i) {
      const double v =
          static_cast<double>(out.volume.data[i]) + noise_rng.normal(0.0, spec.noise_sigma);
      out.volume.data[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }

  out.tissue = std::move(maps);
  return out;
}

Volume ventricle_mask(const PhantomSpec& spec, double extra_scale, long dilation_voxels) {
  PhantomSpec scaled = spec;
  scaled.ventricle_scale = std::clamp(spec.ventricle_scale * extra_scale, 0.5, 1.5);
  const PhantomGeometry geo = phantom_geometry(scaled);
  const Shape3 s = spec.grid_shape;
  Volume mask(s);
  for (long i = 0; i < s.x; ++i)
    for (long j = 0; j < s.y; ++j)
      for (long k = 0; k < s.z; ++k) {
        bool inside = false;
        for (const auto& e : geo.ventricles)
          inside = inside || e.contains(static_cast<double>(i), static_cast<double>(j),
                                        static_cast<double>(k));
        mask.at(i, j, k) = inside ? 1.0f : 0.0f;
      }
  // chebyshev-ball dilation
  for (long r = 0; r < dilation_voxels; ++r) {
    Volume next = mask;
    for (long i = 0; i < s.x; ++i)
      for (long j = 0; j < s.y; ++j)
        for (long k = 0; k < s.z; ++k) {
          if (mask.at(i, j, k) > 0.5f) continue;
          bool hit = false;
          for (long di = -1; di <= 1 && !hit; ++di)
            for (long dj = -1; dj <= 1 && !hit; ++dj)
              for (long dk = -1; dk <= 1 && !hit; ++dk) {
                const long ii = i + di, jj = j + dj, kk = k + dk;
                if (ii < 0 || jj < 0 || kk < 0 || ii >= s.x || jj >= s.y || kk >= s.z) continue;
                hit = mask.at(ii, jj, kk) > 0.5f;
              }
          if (hit) next.at(i, j, k) = 1.0f;
        }
    mask = std::move(next);
  }
  return mask;
}

io::CohortManifest generate_cohort(const PhantomSpec& base_spec, const CovariateSampler& sampler,
                                   long n, std::uint64_t seed, const std::filesystem::path& out_dir,
                                   const CohortGenConfig& cfg) {
  if (n < 2) throw ValidationError("generate_cohort: n must be >= 2");
  base_spec.validate();

  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "vols");
  fs::create_directories(out_dir / "maps");

  // Per-covariate draws. Choice covariates get balanced assignments so group
  // counts split as evenly as n allows.
  std::map<std::string, std::vector<double>> values;
  std::map<std::string, std::vector<int>> choice_index;
  {
    Rng assign_rng = Rng::derive(seed, 0xC0FAULL);
    for (const auto& [name, cov] : sampler.covariates) {
      std::vector<double> vals(static_cast<std::size_t>(n));
      std::vector<int> idxs(static_cast<std::size_t>(n), 0);
      using Kind = CovariateSampler::Spec::Kind;
      switch (cov.kind) {
        case Kind::Fixed:
          std::fill(vals.begin(), vals.end(), cov.fixed);
          break;
        case Kind::Uniform:
          for (long i = 0; i < n; ++i) {
            Rng r = Rng::derive(seed, 0x10000ULL + static_cast<std::uint64_t>(i));
            // burn one draw per preceding uniform covariate so streams differ
            for (const auto& [prev_name, prev] : sampler.covariates) {
              if (prev_name == name) break;
              if (prev.kind == Kind::Uniform) r.uniform();
            }
            vals[static_cast<std::size_t>(i)] = r.uniform(cov.lo, cov.hi);
          }
          break;
        case Kind::Choice: {
          if (cov.choices.empty())
            throw ValidationError("generate_cohort: choice covariate '" + name + "' is empty");
          for (long i = 0; i < n; ++i)
            idxs[static_cast<std::size_t>(i)] =
                static_cast<int>(i % static_cast<long>(cov.choices.size()));
          assign_rng.shuffle(idxs.data(), idxs.size());
          for (long i = 0; i < n; ++i)
            vals[static_cast<std::size_t>(i)] =
                cov.choices[static_cast<std::size_t>(idxs[static_cast<std::size_t>(i)])];
          break;
        }
      }
      values[name] = std::move(vals);
      choice_index[name] = std::move(idxs);
    }
  }

  io::CohortManifest manifest;
  manifest.seed = seed;
  manifest.name = cfg.cohort_name;
  manifest.grid = base_spec.grid_shape;
  manifest.root = out_dir;
  manifest.entries.resize(static_cast<std::size_t>(n));

  std::vector<PhantomSpec> specs(static_cast<std::size_t>(n), base_spec);
  for (long i = 0; i < n; ++i) {
    auto& sp = specs[static_cast<std::size_t>(i)];
    for (const auto& [name, vals] : values) {
      const double v = vals[static_cast<std::size_t>(i)];
      if (name == "ventricle_scale")
        sp.ventricle_scale = v;
      else if (name == "atrophy")
        sp.atrophy = v;
      else if (name == "deformation_amplitude")
        sp.deformation_amplitude = v;
      else if (name == "noise_sigma")
        sp.noise_sigma = v;
      else
        throw ValidationError("generate_cohort: unknown covariate '" + name + "'");
    }
    sp.validate();
  }

  std::exception_ptr failure = nullptr;
#pragma omp parallel for schedule(static)
  for (long i = 0; i < n; ++i) {
    try {
    const std::uint64_t subj_seed = seed ^ (0x5851f42d4c957f2dULL * (static_cast<std::uint64_t>(i) + 1));
    Phantom ph = generate_phantom(specs[static_cast<std::size_t>(i)], subj_seed);

    char tag[32];
    std::snprintf(tag, sizeof(tag), "subj_%04ld", i);
    io::CohortEntry entry;
    entry.volume_path = std::string("vols/") + tag + ".mvl";
    io::write_volume(ph.volume, out_dir / entry.volume_path);
    const std::pair<const char*, const Volume*> tissues[] = {
        {"GM", &ph.tissue.gm},         {"WM", &ph.tissue.wm},     {"CSF", &ph.tissue.csf},
        {"DeepGM", &ph.tissue.deep_gm}, {"Shell", &ph.tissue.shell}};
    for (const auto& [tname, map] : tissues) {
      const std::string rel = std::string("maps/") + tag + "_" + tname + ".mvl";
      io::write_volume(*map, out_dir / rel);
      entry.tissue_map_paths[tname] = rel;
    }
    for (const auto& [name, vals] : values)
      entry.covariates[name] = vals[static_cast<std::size_t>(i)];
    entry.covariates["seed"] = static_cast<double>(subj_seed & 0xFFFFFFFFULL);

    if (!sampler.label_by.empty()) {
      auto it = choice_index.find(sampler.label_by);
      if (it == choice_index.end())
        throw ValidationError("generate_cohort: label_by covariate '" + sampler.label_by +
                              "' not sampled");
      const int ci = it->second[static_cast<std::size_t>(i)];
      entry.label = static_cast<std::size_t>(ci) < sampler.label_names.size()
                        ? sampler.label_names[static_cast<std::size_t>(ci)]
                        : "group" + std::to_string(ci);
    } else {
      entry.label = sampler.default_label;
    }
    manifest.entries[static_cast<std::size_t>(i)] = std::move(entry);
    } catch (...) {
#pragma omp critical
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);

  // stratified train/test split, seeded
  {
    Rng split_rng = Rng::derive(seed, 0x5917ULL);
    std::map<std::string, std::vector<std::size_t>> by_label;
    for (std::size_t i = 0; i < manifest.entries.size(); ++i)
      by_label[manifest.entries[i].label].push_back(i);
    for (auto& [label, idxs] : by_label) {
      split_rng.shuffle(idxs.data(), idxs.size());
      const std::size_t n_test =
          static_cast<std::size_t>(std::lround(cfg.test_fraction * static_cast<double>(idxs.size())));
      for (std::size_t j = 0; j < idxs.size(); ++j)
        manifest.entries[idxs[j]].split = j < n_test ? "test" : "train";
    }
  }

  io::write_manifest(manifest, out_dir / "manifest.json");
  return manifest;
}

}  // namespace morphgen::phantom
