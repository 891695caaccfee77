#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "morphgen/core/errors.hpp"
#include "morphgen/core/rng.hpp"
#include "morphgen/io/manifest.hpp"
#include "morphgen/io/volume.hpp"

using namespace morphgen;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  const fs::path dir = fs::temp_directory_path() / ("morphgen_test_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

io::Volume random_volume(Rng& rng, Shape3 s) {
  io::Volume v(s);
  for (auto& x : v.data) x = static_cast<float>(rng.uniform(-3.0, 3.0));
  v.spacing_mm = {rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0)};
  return v;
}

}  // namespace

TEST_CASE("write/read roundtrip is bitwise identical (property, 100 cases)") {
  const fs::path dir = temp_dir("roundtrip");
  Rng rng(1234);
  for (int c = 0; c < 100; ++c) {
    const Shape3 s{static_cast<long>(1 + rng.next_below(6)),
                   static_cast<long>(1 + rng.next_below(6)),
                   static_cast<long>(1 + rng.next_below(6))};
    const io::Volume v = random_volume(rng, s);
    const fs::path p = dir / ("v" + std::to_string(c) + ".mvl");
    io::write_volume(v, p);
    const io::Volume r = io::read_volume(p);
    REQUIRE(r.shape == v.shape);
    REQUIRE(r.data == v.data);  // bitwise: same float vectors
    REQUIRE(r.spacing_mm == v.spacing_mm);
    REQUIRE(r.orientation == v.orientation);
  }
}

TEST_CASE("truncated payload raises a distinct parse error") {
  const fs::path dir = temp_dir("trunc");
  io::Volume v(Shape3{2, 2, 2}, 1.0f);
  const fs::path p = dir / "t.mvl";
  io::write_volume(v, p);
  // keep only 7 of the 8 payload floats
  const auto full = fs::file_size(p);
  fs::resize_file(p, full - 4);
  CHECK_THROWS_WITH_AS(io::read_volume(p), doctest::Contains("truncated payload"), ParseError);
}

TEST_CASE("magic mismatch raises a distinct parse error") {
  const fs::path dir = temp_dir("magic");
  const fs::path p = dir / "x.mvl";
  std::ofstream os(p, std::ios::binary);
  os << "XXXXsomething";
  os.close();
  CHECK_THROWS_WITH_AS(io::read_volume(p), doctest::Contains("magic"), ParseError);
}

TEST_CASE("payload longer than the header shape is rejected") {
  const fs::path dir = temp_dir("long");
  io::Volume v(Shape3{2, 2, 2}, 0.5f);
  const fs::path p = dir / "t.mvl";
  io::write_volume(v, p);
  std::ofstream os(p, std::ios::binary | std::ios::app);
  const float extra = 0.0f;
  os.write(reinterpret_cast<const char*>(&extra), 4);
  os.close();
  CHECK_THROWS_AS(io::read_volume(p), ParseError);
}

namespace {

io::CohortManifest tiny_manifest(const fs::path& dir, int n) {
  io::CohortManifest m;
  m.name = "tiny";
  m.seed = 9;
  m.grid = {2, 2, 2};
  m.root = dir;
  for (int i = 0; i < n; ++i) {
    io::Volume v(Shape3{2, 2, 2}, static_cast<float>(i));
    const std::string rel = "vols/e" + std::to_string(i) + ".mvl";
    fs::create_directories(dir / "vols");
    io::write_volume(v, dir / rel);
    io::CohortEntry e;
    e.volume_path = rel;
    e.label = "all";
    e.split = i < n - 2 ? "train" : "test";
    m.entries.push_back(e);
  }
  return m;
}

}  // namespace

TEST_CASE("iterate_split yields batch sizes [4,4,2] for 10 entries and covers each epoch") {
  const fs::path dir = temp_dir("iter");
  io::CohortManifest m = tiny_manifest(dir, 12);  // 10 train + 2 test
  io::SplitIterator it(m, "train", 4, 77);
  REQUIRE(it.batches_per_epoch() == 3);

  std::multiset<std::size_t> seen;
  auto b1 = it.next_indices();
  auto b2 = it.next_indices();
  auto b3 = it.next_indices();
  CHECK(b1.size() == 4);
  CHECK(b2.size() == 4);
  CHECK(b3.size() == 2);
  for (auto v : b1) seen.insert(v);
  for (auto v : b2) seen.insert(v);
  for (auto v : b3) seen.insert(v);
  // epoch coverage: exactly the train split, each entry once
  std::multiset<std::size_t> expected;
  for (std::size_t i : m.indices_of_split("train")) expected.insert(i);
  CHECK(seen == expected);
}

TEST_CASE("iterate_split is deterministic given the seed") {
  const fs::path dir = temp_dir("iter_det");
  io::CohortManifest m = tiny_manifest(dir, 8);
  io::SplitIterator a(m, "train", 3, 5);
  io::SplitIterator b(m, "train", 3, 5);
  for (int i = 0; i < 4; ++i) CHECK(a.next_indices() == b.next_indices());
  io::SplitIterator c(m, "train", 3, 6);
  bool all_equal = true;
  io::SplitIterator d(m, "train", 3, 5);
  for (int i = 0; i < 2; ++i) all_equal = all_equal && (c.next_indices() == d.next_indices());
  CHECK_FALSE(all_equal);
}

TEST_CASE("unknown split tag is a validation error") {
  const fs::path dir = temp_dir("iter_bad");
  io::CohortManifest m = tiny_manifest(dir, 4);
  CHECK_THROWS_AS(io::SplitIterator(m, "validation", 2, 1), ValidationError);
}

TEST_CASE("missing file is reported with the manifest entry") {
  const fs::path dir = temp_dir("iter_missing");
  io::CohortManifest m = tiny_manifest(dir, 4);
  fs::remove(dir / m.entries[1].volume_path);
  CHECK_THROWS_WITH_AS(io::load_entry_volume(m, 1), doctest::Contains("entry 1"), IoError);
}

TEST_CASE("manifest roundtrips through json") {
  const fs::path dir = temp_dir("manifest_rt");
  io::CohortManifest m = tiny_manifest(dir, 4);
  m.entries[0].covariates["ventricle_scale"] = 1.3;
  m.entries[0].tissue_map_paths["GM"] = "maps/x.mvl";
  io::write_manifest(m, dir / "manifest.json");
  const io::CohortManifest r = io::read_manifest(dir / "manifest.json");
  REQUIRE(r.entries.size() == m.entries.size());
  CHECK(r.name == m.name);
  CHECK(r.seed == m.seed);
  CHECK(r.entries[0].covariates.at("ventricle_scale") == 1.3);
  CHECK(r.entries[0].tissue_map_paths.at("GM") == "maps/x.mvl");
  CHECK(r.entries[3].split == "test");
}
