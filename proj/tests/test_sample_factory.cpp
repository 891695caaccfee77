#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "morphgen/core/errors.hpp"
#include "morphgen/factory/sample_factory.hpp"

using namespace morphgen;
using factory::ScoredSample;

namespace {

struct Rig {
  vqvae::VqvaeConfig vc;
  prior::PriorConfig pc;

  Rig() {
    vc.downsample_stages = 2;
    vc.conv_channels = 6;
    vc.residual_blocks = 1;
    vc.codebook.K = 12;
    vc.codebook.n_z = 4;
    vc.disc_base_channels = 4;
    vc.disc_layers = 2;

    pc.layers = 1;
    pc.embed_dim = 16;
    pc.heads = 2;
    pc.local_heads = 1;
    pc.local_window = 8;
    pc.vocab = 13;  // K + 1
    pc.grid = {4, 4, 4};
    pc.feature_count = 8;
    pc.ffn_mult = 2;
  }
};

std::vector<ScoredSample> fake_samples(const std::vector<double>& scores) {
  std::vector<ScoredSample> out(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out[i].score = scores[i];
    out[i].index = static_cast<long>(i);
    out[i].seed = 1000 + i;
  }
  return out;
}

}  // namespace

TEST_CASE("generate_batch: n samples, volumes in [0,1], deterministic per seed") {
  Rig rig;
  vqvae::VqvaeModel<float> vq(rig.vc, 3);
  prior::PriorModel<float> prior(rig.pc, 4);

  auto batch = factory::generate_batch(prior, vq, 4, 1.0, 42);
  REQUIRE(batch.size() == 4);
  for (const auto& s : batch) {
    CHECK(s.volume.shape == Shape3{16, 16, 16});
    CHECK(std::isfinite(s.score));
    for (float x : s.volume.data) {
      REQUIRE(x >= 0.0f);
      REQUIRE(x <= 1.0f);
    }
  }

  SUBCASE("bitwise pipeline determinism") {
    auto again = factory::generate_batch(prior, vq, 4, 1.0, 42);
    for (std::size_t i = 0; i < 4; ++i) {
      REQUIRE(again[i].volume.data == batch[i].volume.data);
      REQUIRE(again[i].tokens.tokens == batch[i].tokens.tokens);
      REQUIRE(again[i].score == batch[i].score);
    }
  }

  SUBCASE("decode of the stored tokens reproduces the volume bitwise") {
    for (const auto& s : batch) {
      const io::Volume redo = vq.decode_tokens(s.tokens);
      REQUIRE(redo.data == s.volume.data);
    }
  }
}

TEST_CASE("generate_batch rejects a prior whose grid mismatches the codebook vocab") {
  Rig rig;
  rig.pc.vocab = 20;  // != K + 1
  vqvae::VqvaeModel<float> vq(rig.vc, 3);
  prior::PriorModel<float> prior(rig.pc, 4);
  CHECK_THROWS_AS(factory::generate_batch(prior, vq, 1, 1.0, 1), ValidationError);
}

TEST_CASE("select_top_fraction keeps ceil(fraction*n) best scores in order") {
  auto samples = fake_samples({0.1, 0.9, 0.5, 0.7, 0.3});
  auto top = factory::select_top_fraction(samples, 0.4);  // ceil(2.0) = 2
  REQUIRE(top.size() == 2);
  CHECK(top[0].score == 0.9);
  CHECK(top[1].score == 0.7);

  SUBCASE("n=200 at fraction 0.01 keeps exactly 2") {
    std::vector<double> scores(200);
    for (std::size_t i = 0; i < 200; ++i) scores[i] = static_cast<double>(i % 37);
    CHECK(factory::select_top_fraction(fake_samples(scores), 0.01).size() == 2);
  }

  SUBCASE("fraction 1.0 returns everything, sorted descending") {
    auto all = factory::select_top_fraction(fake_samples({0.1, 0.9, 0.5}), 1.0);
    REQUIRE(all.size() == 3);
    CHECK(all[0].score == 0.9);
    CHECK(all[1].score == 0.5);
    CHECK(all[2].score == 0.1);
  }

  SUBCASE("ties break by provenance order") {
    auto tied = factory::select_top_fraction(fake_samples({0.5, 0.5, 0.5, 0.5}), 0.5);
    REQUIRE(tied.size() == 2);
    CHECK(tied[0].index == 0);
    CHECK(tied[1].index == 1);
  }

  SUBCASE("selected scores dominate every rejected score") {
    auto samples2 = fake_samples({0.3, 0.8, 0.2, 0.9, 0.5, 0.1});
    auto kept = factory::select_top_fraction(samples2, 0.34);
    double min_kept = 1e9;
    for (const auto& s : kept) min_kept = std::min(min_kept, s.score);
    int better = 0;
    for (const auto& s : samples2)
      if (s.score > min_kept) ++better;
    CHECK(better <= static_cast<int>(kept.size()));
  }

  SUBCASE("empty input and bad fractions are rejected") {
    CHECK_THROWS_AS(factory::select_top_fraction({}, 0.5), ValidationError);
    CHECK_THROWS_AS(factory::select_top_fraction(fake_samples({0.1}), 0.0), ValidationError);
  }
}
