#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <complex>

#include "morphgen/core/rng.hpp"
#include "morphgen/phantom/phantom.hpp"
#include "morphgen/vqvae/losses.hpp"
#include "morphgen/vqvae/trainer.hpp"

using namespace morphgen;
using vqvae::VqvaeConfig;
using vqvae::VqvaeModel;

namespace {

VqvaeConfig tiny_config() {
  VqvaeConfig c;
  c.downsample_stages = 2;
  c.conv_channels = 6;
  c.residual_blocks = 1;
  c.codebook.K = 12;
  c.codebook.n_z = 4;
  c.disc_base_channels = 4;
  c.disc_layers = 2;
  return c;
}

io::Volume random_volume(Rng& rng, Shape3 s) {
  io::Volume v(s);
  for (auto& x : v.data) x = static_cast<float>(rng.uniform(0.0, 1.0));
  return v;
}

// O(N^2) brute-force 3D DFT magnitude, the oracle for the frequency term
std::vector<double> brute_force_dft_mag(const std::vector<double>& x, Shape3 s) {
  const double two_pi = 2.0 * 3.14159265358979323846;
  std::vector<double> mag(x.size());
  for (long kx = 0; kx < s.x; ++kx)
    for (long ky = 0; ky < s.y; ++ky)
      for (long kz = 0; kz < s.z; ++kz) {
        std::complex<double> acc = 0.0;
        for (long nx = 0; nx < s.x; ++nx)
          for (long ny = 0; ny < s.y; ++ny)
            for (long nz = 0; nz < s.z; ++nz) {
              const double phase = two_pi * (static_cast<double>(kx * nx) / s.x +
                                             static_cast<double>(ky * ny) / s.y +
                                             static_cast<double>(kz * nz) / s.z);
              acc += x[static_cast<std::size_t>(s.index(nx, ny, nz))] *
                     std::complex<double>(std::cos(phase), -std::sin(phase));
            }
        mag[static_cast<std::size_t>(s.index(kx, ky, kz))] = std::abs(acc);
      }
  return mag;
}

}  // namespace

TEST_CASE("latent shape: paper config maps (160,224,160) to a 1400-token grid") {
  VqvaeConfig paper;  // defaults are the paper values: 4 stages
  const Shape3 lat = paper.latent_shape({160, 224, 160});
  CHECK(lat == Shape3{10, 14, 10});
  CHECK(lat.cells() == 1400);
  CHECK_THROWS_AS(paper.latent_shape({150, 224, 160}), ValidationError);
}

TEST_CASE("encoder/decoder shape contracts on the desk config") {
  VqvaeConfig cfg = tiny_config();
  const Shape3 in{32, 48, 32};
  CHECK(cfg.latent_shape(in) == Shape3{8, 12, 8});

  VqvaeModel<float> model(cfg, 1);
  Rng rng(2);
  io::Volume v = random_volume(rng, in);
  const vq::TokenSequence ts = model.encode_tokens(v);
  CHECK(ts.source_grid_shape == Shape3{8, 12, 8});
  CHECK(ts.tokens.size() == 8 * 12 * 8);
  const io::Volume out = model.decode_tokens(ts);
  CHECK(out.shape == in);
  for (float x : out.data) {
    REQUIRE(x >= 0.0f);
    REQUIRE(x <= 1.0f);
    REQUIRE(std::isfinite(x));
  }
}

TEST_CASE("encode/decode shape contract holds over random valid shapes (property)") {
  Rng rng(3);
  for (int trial = 0; trial < 4; ++trial) {
    VqvaeConfig cfg = tiny_config();
    cfg.downsample_stages = 1 + static_cast<int>(rng.next_below(2));
    const long f = cfg.downsample_factor();
    const Shape3 in{f * static_cast<long>(2 + rng.next_below(3)),
                    f * static_cast<long>(2 + rng.next_below(3)),
                    f * static_cast<long>(2 + rng.next_below(3))};
    VqvaeModel<float> model(cfg, 10 + trial);
    io::Volume v = random_volume(rng, in);
    const vq::TokenSequence ts = model.encode_tokens(v);
    REQUIRE(ts.source_grid_shape == Shape3{in.x / f, in.y / f, in.z / f});
    REQUIRE(model.decode_tokens(ts).shape == in);
  }
}

TEST_CASE("decoding a zero-token grid yields a finite volume") {
  VqvaeConfig cfg = tiny_config();
  VqvaeModel<float> model(cfg, 4);
  vq::TokenSequence ts;
  ts.source_grid_shape = {4, 4, 4};
  ts.tokens.assign(64, 0);
  const io::Volume out = model.decode_tokens(ts);
  for (float x : out.data) REQUIRE(std::isfinite(x));
}

TEST_CASE("reconstruction loss components vanish on identical inputs") {
  VqvaeConfig cfg = tiny_config();
  nn::FeaturePyramid2d<double> percep;
  Rng rng(5);
  const Shape3 s{8, 8, 8};
  std::vector<double> x(static_cast<std::size_t>(s.cells()));
  for (auto& v : x) v = rng.uniform(0, 1);
  const auto rec = vqvae::reconstruction_loss(x.data(), x.data(), s, cfg, percep, 42);
  CHECK(rec.l1 == 0.0);
  CHECK(rec.frequency == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(rec.perceptual == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(rec.total == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("frequency term: constant shift changes only the DC bin (vs brute-force DFT)") {
  Rng rng(6);
  const Shape3 s{4, 4, 4};
  const double c = 0.125;
  std::vector<double> x(64), y(64);
  for (std::size_t i = 0; i < 64; ++i) {
    x[i] = rng.uniform(0, 0.5);
    y[i] = x[i] + c;
  }
  const auto mx = brute_force_dft_mag(x, s);
  const auto my = brute_force_dft_mag(y, s);
  // only the zero-frequency magnitude differs, by c * #voxels
  CHECK(my[0] - mx[0] == doctest::Approx(c * 64).epsilon(1e-9));
  double max_other = 0.0;
  for (std::size_t i = 1; i < 64; ++i) max_other = std::max(max_other, std::fabs(my[i] - mx[i]));
  CHECK(max_other < 1e-9);

  // and the implemented loss equals the oracle reduction over unitary
  // magnitudes: a constant shift comes out as exactly c
  double acc = 0.0;
  for (std::size_t i = 0; i < 64; ++i) acc += (mx[i] - my[i]) * (mx[i] - my[i]);
  const double expected = std::sqrt(acc / 64.0 / 64.0);
  const double loss = vqvae::frequency_loss<double>(x.data(), y.data(), s, nullptr);
  CHECK(loss == doctest::Approx(expected).epsilon(1e-9));
  CHECK(loss == doctest::Approx(c).epsilon(1e-9));
}

TEST_CASE("doubling w_frequency doubles its contribution to the total exactly") {
  VqvaeConfig cfg = tiny_config();
  cfg.w_perceptual = 0.0;
  nn::FeaturePyramid2d<double> percep;
  Rng rng(7);
  const Shape3 s{8, 8, 8};
  std::vector<double> x(512), y(512);
  for (std::size_t i = 0; i < 512; ++i) {
    x[i] = rng.uniform(0, 1);
    y[i] = rng.uniform(0, 1);
  }
  const auto r1 = vqvae::reconstruction_loss(x.data(), y.data(), s, cfg, percep, 1);
  cfg.w_frequency = 2.0;
  const auto r2 = vqvae::reconstruction_loss(x.data(), y.data(), s, cfg, percep, 1);
  CHECK(r2.total - r1.total == doctest::Approx(r1.frequency).epsilon(1e-9));
}

TEST_CASE("LS-GAN optima and hand-computed constants") {
  std::vector<double> ones(10, 1.0), zeros(10, 0.0);
  const auto opt = vqvae::lsgan_losses<double>(ones, zeros);
  CHECK(opt.loss_d == 0.0);
  const auto gopt = vqvae::lsgan_losses<double>(ones, ones);
  CHECK(gopt.loss_g == 0.0);
  const auto flipped = vqvae::lsgan_losses<double>(zeros, ones);
  CHECK(flipped.loss_d == doctest::Approx(1.0).epsilon(1e-12));  // 1/2 + 1/2
}

TEST_CASE("generator-loss gradients match finite differences (64-bit, frozen discriminator)") {
  // Quantization is bypassed (zq := z) so every parameter has a true
  // two-sided derivative; the straight-through convention itself is covered
  // by the quantizer suite.
  VqvaeConfig cfg = tiny_config();
  cfg.downsample_stages = 1;
  cfg.conv_channels = 4;
  cfg.disc_layers = 1;
  cfg.w_adversarial = 0.7;
  VqvaeModel<double> model(cfg, 8);
  Rng rng(9);
  const Shape3 in{8, 8, 8};
  const Shape3 lat = cfg.latent_shape(in);
  const long lat_n = lat.cells() * cfg.codebook.n_z;
  std::vector<double> x(static_cast<std::size_t>(in.cells()));
  for (auto& v : x) v = rng.uniform(0.05, 0.95);

  const Shape3 patch = model.discriminator().patch_shape(in);

  auto loss_of = [&]() {
    model.encoder().ensure_slots(1);
    model.decoder().ensure_slots(1);
    model.discriminator().ensure_slots(1);
    std::vector<double> z(static_cast<std::size_t>(lat_n));
    model.encoder().forward(x.data(), in, 0, z.data());
    std::vector<double> xhat(x.size());
    model.decoder().forward(z.data(), lat, 0, xhat.data());
    const auto rec = vqvae::reconstruction_loss(x.data(), xhat.data(), in, cfg,
                                                model.perceptual_net(), 77);
    std::vector<double> scores(static_cast<std::size_t>(patch.cells()));
    model.discriminator().forward(xhat.data(), in, 0, scores.data());
    double g = 0.0;
    for (double sc : scores) g += 0.5 * (sc - 1.0) * (sc - 1.0) / static_cast<double>(scores.size());
    return rec.total + cfg.w_adversarial * g;
  };

  // analytic gradient pass
  auto params = model.all_params();
  for (auto& p : params) std::fill(p.grad->begin(), p.grad->end(), 0.0);
  {
    model.encoder().ensure_slots(1);
    model.decoder().ensure_slots(1);
    model.discriminator().ensure_slots(1);
    std::vector<double> z(static_cast<std::size_t>(lat_n));
    model.encoder().forward(x.data(), in, 0, z.data());
    std::vector<double> xhat(x.size());
    model.decoder().forward(z.data(), lat, 0, xhat.data());
    std::vector<double> dxhat(x.size(), 0.0);
    vqvae::reconstruction_loss(x.data(), xhat.data(), in, cfg, model.perceptual_net(), 77,
                               dxhat.data());
    std::vector<double> scores(static_cast<std::size_t>(patch.cells()));
    model.discriminator().forward(xhat.data(), in, 0, scores.data());
    std::vector<double> gscore(scores.size());
    vqvae::lsgan_g_grad<double>(scores, gscore.data());
    for (auto& g : gscore) g *= cfg.w_adversarial;
    std::vector<double> dx_adv(x.size());
    model.discriminator().backward(0, gscore.data(), dx_adv.data());
    for (std::size_t i = 0; i < dxhat.size(); ++i) dxhat[i] += dx_adv[i];
    std::vector<double> dz(static_cast<std::size_t>(lat_n));
    model.decoder().backward(0, dxhat.data(), dz.data());
    model.encoder().backward(0, dz.data(), nullptr);
  }

  const double h = 1e-5;
  Rng pick(10);
  int checked = 0;
  for (auto& p : params) {
    if (p.name.rfind("disc.", 0) == 0) continue;  // frozen discriminator
    const std::size_t i = pick.next_below(p.value->size());
    const double analytic = (*p.grad)[i];
    const double keep = (*p.value)[i];
    (*p.value)[i] = keep + h;
    const double up = loss_of();
    (*p.value)[i] = keep - h;
    const double dn = loss_of();
    (*p.value)[i] = keep;
    const double fd = (up - dn) / (2 * h);
    const double tol = 1e-8 + 1e-4 * std::max(std::fabs(fd), std::fabs(analytic));
    INFO(p.name << "[" << i << "] fd=" << fd << " analytic=" << analytic);
    REQUIRE(std::fabs(fd - analytic) <= tol);
    ++checked;
  }
  CHECK(checked >= 8);
}

TEST_CASE("discriminator emits a patch grid strictly smaller than the input") {
  VqvaeConfig cfg = tiny_config();
  VqvaeModel<float> model(cfg, 11);
  const Shape3 patch = model.discriminator().patch_shape({32, 48, 32});
  CHECK(patch.x > 1);
  CHECK(patch.y > 1);
  CHECK(patch.z > 1);
  CHECK(patch.x < 32);

  VqvaeConfig paper;  // 3 strided layers at paper scale
  CHECK(vqvae::Discriminator<float>(paper, 1).patch_shape({160, 224, 160}) == Shape3{20, 28, 20});
}

TEST_CASE("train_step metrics are finite and the step is deterministic") {
  VqvaeConfig cfg = tiny_config();
  cfg.w_perceptual = 0.001;
  const Shape3 in{16, 16, 16};
  Rng rng(12);
  std::vector<io::Volume> batch = {random_volume(rng, in), random_volume(rng, in)};

  VqvaeModel<float> a(cfg, 13), b(cfg, 13);
  for (int step = 0; step < 3; ++step) {
    const auto ma = a.train_step(batch, 100 + step);
    const auto mb = b.train_step(batch, 100 + step);
    REQUIRE(std::isfinite(ma.total_g));
    REQUIRE(ma.l1 >= 0.0);
    REQUIRE(ma.loss_d >= 0.0);
    REQUIRE(ma.l1 == mb.l1);
    REQUIRE(ma.loss_d == mb.loss_d);
    REQUIRE(ma.total_g == mb.total_g);
  }
}

TEST_CASE("overfit-one-phantom: l1 decreases monotonically over 20-step windows") {
  VqvaeConfig cfg = tiny_config();
  cfg.w_adversarial = 0.0;
  cfg.w_perceptual = 0.0;
  cfg.conv_channels = 8;
  phantom::PhantomSpec spec;
  spec.grid_shape = {16, 16, 16};
  spec.downsample_divisor = 4;
  spec.noise_sigma = 0.0;
  const auto ph = phantom::generate_phantom(spec, 44);
  std::vector<io::Volume> batch = {ph.volume};

  VqvaeModel<float> model(cfg, 14);
  std::vector<double> window_means;
  double acc = 0.0;
  for (int step = 0; step < 200; ++step) {
    acc += model.train_step(batch, 7000 + step).l1;
    if ((step + 1) % 20 == 0) {
      window_means.push_back(acc / 20.0);
      acc = 0.0;
    }
  }
  for (std::size_t i = 1; i < window_means.size(); ++i)
    CHECK(window_means[i] < window_means[i - 1]);
}

TEST_CASE("fine_tune returns the best-validation state") {
  phantom::PhantomSpec spec;
  spec.grid_shape = {16, 16, 16};
  spec.downsample_divisor = 4;
  spec.noise_sigma = 0.01;
  spec.deformation_amplitude = 0.5;

  const auto dir = std::filesystem::temp_directory_path() / "morphgen_test_ft";
  std::filesystem::remove_all(dir);
  phantom::CovariateSampler sampler;
  sampler.covariates["ventricle_scale"] = {phantom::CovariateSampler::Spec::Kind::Fixed, 1.2};
  phantom::CohortGenConfig gc;
  gc.test_fraction = 0.34;
  const auto cohort = phantom::generate_cohort(spec, sampler, 6, 5, dir, gc);

  VqvaeConfig cfg = tiny_config();
  cfg.w_adversarial = 0.0;
  cfg.w_perceptual = 0.0;
  VqvaeModel<float> model(cfg, 15);
  auto aug = phantom::AugmentConfig::identity(spec.grid_shape);
  const auto rep = vqvae::fine_tune(model, cohort, aug, 4, 1, 2, 99);
  CHECK(rep.best_val_loss <= rep.initial_val_loss);
  CHECK(rep.epochs_run >= 1);
  CHECK(rep.epochs_run <= 4);
  // the restored state reproduces the best validation loss
  double val = 0.0;
  const auto idx = cohort.indices_of_split("test");
  for (std::size_t k = 0; k < idx.size(); ++k)
    val += model.eval_rec_loss(io::load_entry_volume(cohort, idx[k]),
                               Rng::derive(99, 0xEu + k).next_u64()) /
           static_cast<double>(idx.size());
  CHECK(val == doctest::Approx(rep.best_val_loss).epsilon(1e-9));
}
