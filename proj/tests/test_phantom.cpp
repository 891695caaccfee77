#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <map>

#include "morphgen/core/errors.hpp"
#include "morphgen/morpho/stats.hpp"
#include "morphgen/phantom/augment.hpp"
#include "morphgen/phantom/phantom.hpp"

using namespace morphgen;
namespace fs = std::filesystem;

namespace {

phantom::PhantomSpec desk_spec() {
  phantom::PhantomSpec s;
  s.grid_shape = {32, 48, 32};
  s.downsample_divisor = 4;
  return s;
}

double map_sum(const io::Volume& v) {
  double acc = 0.0;
  for (float x : v.data) acc += x;
  return acc;
}

}  // namespace

TEST_CASE("same (spec, seed) twice gives bitwise-identical outputs") {
  phantom::PhantomSpec s = desk_spec();
  s.deformation_amplitude = 1.5;
  s.noise_sigma = 0.02;
  const auto a = phantom::generate_phantom(s, 99);
  const auto b = phantom::generate_phantom(s, 99);
  CHECK(a.volume.data == b.volume.data);
  CHECK(a.tissue.csf.data == b.tissue.csf.data);
  CHECK(a.tissue.gm.data == b.tissue.gm.data);
}

TEST_CASE("CSF voxel sum scales like ventricle_scale cubed") {
  phantom::PhantomSpec s = desk_spec();
  s.deformation_amplitude = 0.0;
  s.noise_sigma = 0.0;
  s.ventricle_scale = 1.3;
  const auto big = phantom::generate_phantom(s, 7);
  s.ventricle_scale = 0.7;
  const auto small = phantom::generate_phantom(s, 7);
  const double ratio = map_sum(big.tissue.csf) / map_sum(small.tissue.csf);
  const double expected = std::pow(1.3 / 0.7, 3.0);  // 6.41
  CHECK(ratio == doctest::Approx(expected).epsilon(0.10));
}

TEST_CASE("zero noise and zero deformation: volume equals intensity-weighted maps") {
  phantom::PhantomSpec s = desk_spec();
  s.deformation_amplitude = 0.0;
  s.noise_sigma = 0.0;
  const auto ph = phantom::generate_phantom(s, 3);
  const auto& ti = s.intensities;
  for (std::size_t i = 0; i < ph.volume.data.size(); ++i) {
    const double composed = static_cast<double>(ph.tissue.gm.data[i]) * ti.gm +
                            static_cast<double>(ph.tissue.wm.data[i]) * ti.wm +
                            static_cast<double>(ph.tissue.csf.data[i]) * ti.csf +
                            static_cast<double>(ph.tissue.deep_gm.data[i]) * ti.deep_gm +
                            static_cast<double>(ph.tissue.shell.data[i]) * ti.shell;
    REQUIRE(ph.volume.data[i] == static_cast<float>(composed));
  }
}

TEST_CASE("tissue probabilities stay in [0,1] and sum to <= 1 per voxel") {
  phantom::PhantomSpec s = desk_spec();
  s.deformation_amplitude = 1.0;
  const auto ph = phantom::generate_phantom(s, 11);
  for (std::size_t i = 0; i < ph.volume.data.size(); ++i) {
    double sum = 0.0;
    for (phantom::Tissue t : phantom::kAllTissues) {
      const float p = ph.tissue.of(t).data[i];
      REQUIRE(p >= 0.0f);
      REQUIRE(p <= 1.0f);
      sum += p;
    }
    REQUIRE(sum <= 1.0 + 1e-5);
  }
}

TEST_CASE("invalid spec ranges name the offending field") {
  phantom::PhantomSpec s = desk_spec();
  s.ventricle_scale = 2.0;
  CHECK_THROWS_WITH_AS(phantom::generate_phantom(s, 1), doctest::Contains("ventricle_scale"),
                       ValidationError);
  s = desk_spec();
  s.atrophy = 0.9;
  CHECK_THROWS_WITH_AS(phantom::generate_phantom(s, 1), doctest::Contains("atrophy"),
                       ValidationError);
}

TEST_CASE("region volumes of an undeformed phantom match analytic ellipsoids within 10%") {
  phantom::PhantomSpec s = desk_spec();
  s.deformation_amplitude = 0.0;
  s.noise_sigma = 0.0;
  const auto ph = phantom::generate_phantom(s, 5);
  const auto geo = phantom::phantom_geometry(s);
  const auto vols = morpho::region_volumes(ph.tissue, {1.0, 1.0, 1.0});

  double vent = 0.0;
  for (const auto& e : geo.ventricles) vent += e.volume();
  double nuclei = 0.0;
  for (const auto& e : geo.deep_nuclei) nuclei += e.volume();
  const double gm = geo.brain.volume() - geo.wm_boundary.volume();
  const double wm = geo.wm_boundary.volume() - vent - nuclei;

  CHECK(vols.at("CSF") == doctest::Approx(vent).epsilon(0.10));
  CHECK(vols.at("DeepGM") == doctest::Approx(nuclei).epsilon(0.10));
  CHECK(vols.at("GM") == doctest::Approx(gm).epsilon(0.10));
  CHECK(vols.at("WM") == doctest::Approx(wm).epsilon(0.10));
}

TEST_CASE("mean CSF volume is strictly increasing in ventricle_scale") {
  phantom::PhantomSpec s = desk_spec();
  s.deformation_amplitude = 1.0;
  s.noise_sigma = 0.01;
  double prev = -1.0;
  for (double scale : {0.7, 1.0, 1.3}) {
    s.ventricle_scale = scale;
    double mean = 0.0;
    for (std::uint64_t seed = 0; seed < 4; ++seed)
      mean += map_sum(phantom::generate_phantom(s, seed).tissue.csf) / 4.0;
    CHECK(mean > prev);
    prev = mean;
  }
}

TEST_CASE("generate_cohort: two-group sampler splits labels 5/5 for n=10") {
  const fs::path dir = fs::temp_directory_path() / "morphgen_test_cohort";
  fs::remove_all(dir);
  phantom::PhantomSpec base = desk_spec();
  base.grid_shape = {16, 16, 16};
  base.noise_sigma = 0.005;
  base.deformation_amplitude = 0.5;
  phantom::CovariateSampler sampler;
  sampler.covariates["ventricle_scale"] = {phantom::CovariateSampler::Spec::Kind::Choice, 0, 0, 0,
                                           {0.7, 1.3}};
  sampler.label_by = "ventricle_scale";
  sampler.label_names = {"small", "big"};
  const auto manifest = phantom::generate_cohort(base, sampler, 10, 42, dir);

  REQUIRE(manifest.entries.size() == 10);
  std::map<std::string, int> counts;
  for (const auto& e : manifest.entries) counts[e.label]++;
  CHECK(counts["small"] == 5);
  CHECK(counts["big"] == 5);

  SUBCASE("all paths exist and volumes load") {
    for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
      const io::Volume v = io::load_entry_volume(manifest, i);
      CHECK(v.shape == base.grid_shape);
    }
  }

  SUBCASE("disjoint per-subject deformations: no two volumes bitwise equal") {
    std::vector<io::Volume> vols;
    for (std::size_t i = 0; i < manifest.entries.size(); ++i)
      vols.push_back(io::load_entry_volume(manifest, i));
    int equal_pairs = 0;
    for (std::size_t i = 0; i < vols.size(); ++i)
      for (std::size_t j = i + 1; j < vols.size(); ++j)
        if (vols[i].data == vols[j].data) ++equal_pairs;
    CHECK(equal_pairs == 0);
  }

  SUBCASE("split tags partition the cohort") {
    int train = 0, test = 0;
    for (const auto& e : manifest.entries) {
      if (e.split == "train") ++train;
      else if (e.split == "test") ++test;
    }
    CHECK(train + test == 10);
    CHECK(test == 2);  // 0.2 of 10
  }

  SUBCASE("manifest file reloads identically") {
    const auto r = io::read_manifest(dir / "manifest.json");
    CHECK(r.entries.size() == manifest.entries.size());
  }
}

TEST_CASE("generate_cohort rejects n < 2") {
  const fs::path dir = fs::temp_directory_path() / "morphgen_test_cohort0";
  phantom::CovariateSampler sampler;
  CHECK_THROWS_AS(phantom::generate_cohort(desk_spec(), sampler, 0, 1, dir), ValidationError);
}

TEST_CASE("augment with zero-width ranges equals normalized cropped input") {
  phantom::PhantomSpec s = desk_spec();
  const auto ph = phantom::generate_phantom(s, 21);
  io::Volume scaled = ph.volume;
  for (auto& x : scaled.data) x = 0.2f + 0.5f * x;  // force min-max normalization to act

  auto cfg = phantom::AugmentConfig::identity(Shape3{32, 48, 32});
  const io::Volume out = phantom::augment(scaled, cfg, 1);

  float lo = scaled.data[0], hi = scaled.data[0];
  for (float x : scaled.data) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  REQUIRE(out.shape == scaled.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    const float expected = static_cast<float>((static_cast<double>(scaled.data[i]) - lo) /
                                              (static_cast<double>(hi) - lo));
    REQUIRE(out.data[i] == expected);
  }
}

TEST_CASE("augment output is always within [0, 1] and keeps the crop shape") {
  phantom::PhantomSpec s = desk_spec();
  const auto ph = phantom::generate_phantom(s, 2);
  phantom::AugmentConfig cfg;
  cfg.crop_shape = {28, 44, 28};
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const io::Volume out = phantom::augment(ph.volume, cfg, seed);
    REQUIRE(out.shape == cfg.crop_shape);
    for (float x : out.data) {
      REQUIRE(x >= 0.0f);
      REQUIRE(x <= 1.0f);
    }
  }
}

TEST_CASE("augment is deterministic given (v, cfg, seed)") {
  phantom::PhantomSpec s = desk_spec();
  const auto ph = phantom::generate_phantom(s, 4);
  phantom::AugmentConfig cfg;
  const io::Volume a = phantom::augment(ph.volume, cfg, 333);
  const io::Volume b = phantom::augment(ph.volume, cfg, 333);
  CHECK(a.data == b.data);
  const io::Volume c = phantom::augment(ph.volume, cfg, 334);
  CHECK(a.data != c.data);
}

TEST_CASE("augment rejects crops larger than the input") {
  phantom::PhantomSpec s = desk_spec();
  const auto ph = phantom::generate_phantom(s, 4);
  phantom::AugmentConfig cfg;
  cfg.crop_shape = {64, 48, 32};
  CHECK_THROWS_AS(phantom::augment(ph.volume, cfg, 1), ValidationError);
}

TEST_CASE("ventricle mask covers the CSF map and dilation grows it") {
  phantom::PhantomSpec s = desk_spec();
  s.deformation_amplitude = 0.0;
  s.noise_sigma = 0.0;
  const auto ph = phantom::generate_phantom(s, 8);
  const io::Volume m0 = phantom::ventricle_mask(s, 1.0, 0);
  const io::Volume m3 = phantom::ventricle_mask(s, 1.0, 3);
  double inside = 0.0, total = 0.0;
  for (std::size_t i = 0; i < m0.data.size(); ++i) {
    if (ph.tissue.csf.data[i] > 0.9f) {
      total += 1.0;
      if (m0.data[i] > 0.5f) inside += 1.0;
    }
  }
  CHECK(inside / total > 0.95);
  CHECK(map_sum(m3) > map_sum(m0));
}
