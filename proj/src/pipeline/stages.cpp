#include "morphgen/pipeline/stages.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include "morphgen/core/errors.hpp"
#include "morphgen/factory/sample_factory.hpp"
#include "morphgen/fidelity/metrics.hpp"
#include "morphgen/morpho/stats.hpp"
#include "morphgen/pipeline/checkpoint.hpp"

namespace morphgen::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

double now_s() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

// entries of a population: cohort entries, optionally filtered by label
std::vector<std::size_t> population_entries(const io::CohortManifest& m, const std::string& label) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < m.entries.size(); ++i)
    if (label.empty() || m.entries[i].label == label) out.push_back(i);
  return out;
}

struct TrainItem {
  const io::CohortManifest* manifest;
  std::size_t entry;
};

std::vector<io::Volume> load_batch(const std::vector<TrainItem>& items,
                                   const std::vector<std::size_t>& idxs) {
  std::vector<io::Volume> out;
  for (std::size_t i : idxs)
    out.push_back(io::load_entry_volume(*items[i].manifest, items[i].entry));
  return out;
}

}  // namespace

Pipeline::Pipeline(ExperimentConfig cfg, StageOptions opt) : cfg_(std::move(cfg)), opt_(opt) {
  fs::create_directories(cfg_.out_dir);
  fs::create_directories(cfg_.out_dir / "checkpoints");
  fs::create_directories(cfg_.out_dir / "codes");
  fs::create_directories(cfg_.out_dir / "samples");
  fs::create_directories(reports_dir());
}

void Pipeline::log(const std::string& msg) {
  std::ostream& os = opt_.log ? *opt_.log : std::cout;
  os << "[morphgen] " << msg << "\n" << std::flush;
}

void Pipeline::ledger_append(const std::string& stage, const std::string& hash,
                             const json& metrics, double wall_s,
                             const std::vector<std::string>& artifacts) {
  std::ofstream os(cfg_.out_dir / "ledger.jsonl", std::ios::app);
  json line = {{"stage", stage},
               {"config_hash", hash},
               {"metrics", metrics},
               {"wall_s", wall_s},
               {"artifacts", artifacts}};
  os << line.dump() << "\n";
}

bool Pipeline::stamp_matches(const fs::path& stamp, const std::string& hash) const {
  std::ifstream is(stamp);
  if (!is) return false;
  std::string s;
  std::getline(is, s);
  return s == hash;
}

void Pipeline::write_stamp(const fs::path& stamp, const std::string& hash) const {
  std::ofstream os(stamp);
  os << hash << "\n";
}

// ---------------------------------------------------------------------------
// hashes & paths

std::string Pipeline::phantom_hash() const {
  return config_hash(json{{"seed", cfg_.seed}, {"phantom", cfg_.raw.value("phantom", json{})}});
}

std::string Pipeline::vqvae_hash(bool finetuned) const {
  return config_hash(json{{"seed", cfg_.seed},
                          {"phantom", cfg_.raw.value("phantom", json{})},
                          {"augment", cfg_.raw.value("augment", json{})},
                          {"vqvae", cfg_.raw.value("vqvae", json{})},
                          {"stage", finetuned ? "finetune" : "pretrain"}});
}

std::string Pipeline::codes_hash(const std::string& pop) const {
  return config_hash(json{{"vqvae", active_vqvae_hash()}, {"population", pop}});
}

std::string Pipeline::prior_hash(const std::string& pop) const {
  return config_hash(
      json{{"codes", codes_hash(pop)}, {"prior", cfg_.raw.value("prior", json{})}});
}

std::string Pipeline::samples_hash(const std::string& pop) const {
  return config_hash(
      json{{"prior", prior_hash(pop)}, {"sampling", cfg_.raw.value("sampling", json{})}});
}

fs::path Pipeline::cohort_dir(const std::string& name) const {
  return cfg_.out_dir / "cohorts" / name;
}
fs::path Pipeline::vqvae_checkpoint_path(bool finetuned) const {
  return cfg_.out_dir / "checkpoints" /
         (std::string(finetuned ? "vqvae_ft_" : "vqvae_pre_") + vqvae_hash(finetuned) + ".ckpt");
}
fs::path Pipeline::prior_checkpoint_path(const std::string& pop) const {
  return cfg_.out_dir / "checkpoints" / ("prior_" + pop + "_" + prior_hash(pop) + ".ckpt");
}
fs::path Pipeline::codes_path(const std::string& pop) const {
  return cfg_.out_dir / "codes" / (pop + "_" + codes_hash(pop) + ".json");
}
fs::path Pipeline::samples_dir(const std::string& pop) const {
  return cfg_.out_dir / "samples" / pop;
}
fs::path Pipeline::reports_dir() const { return cfg_.out_dir / "reports"; }

// ---------------------------------------------------------------------------

void Pipeline::phantom_gen() {
  const std::string hash = phantom_hash();
  for (const auto& cc : cfg_.cohorts) {
    const fs::path dir = cohort_dir(cc.name);
    const fs::path stamp = dir / ".stamp";
    if (!opt_.force && stamp_matches(stamp, hash) && fs::exists(dir / "manifest.json")) {
      log("phantom-gen: cohort '" + cc.name + "' up to date, skipping");
      continue;
    }
    const double t0 = now_s();
    fs::create_directories(dir);
    phantom::CohortGenConfig gc;
    gc.test_fraction = cc.test_fraction;
    gc.cohort_name = cc.name;
    const std::uint64_t cohort_seed =
        Rng::derive(cfg_.seed, std::hash<std::string>{}(cc.name)).next_u64();
    auto manifest = phantom::generate_cohort(cfg_.phantom_base, cc.sampler, cc.n, cohort_seed, dir, gc);
    write_stamp(stamp, hash);
    log("phantom-gen: wrote cohort '" + cc.name + "' (" + std::to_string(manifest.entries.size()) +
        " subjects)");
    ledger_append("phantom-gen", hash, {{"cohort", cc.name}, {"n", manifest.entries.size()}},
                  now_s() - t0, {(dir / "manifest.json").string()});
  }
}

void Pipeline::train_vqvae() {
  const std::string hash = vqvae_hash(false);
  const fs::path ckpt = vqvae_checkpoint_path(false);
  if (!opt_.force && fs::exists(ckpt)) {
    log("train-vqvae: checkpoint exists, skipping");
    return;
  }
  if (cfg_.pretrain_cohorts.empty())
    throw ValidationError("train-vqvae: no pretrain cohorts configured");

  std::vector<io::CohortManifest> manifests;
  for (const auto& name : cfg_.pretrain_cohorts) {
    const fs::path mp = cohort_dir(name) / "manifest.json";
    if (!fs::exists(mp))
      throw IoError("train-vqvae: missing cohort '" + name + "'; run phantom-gen first");
    manifests.push_back(io::read_manifest(mp));
  }
  std::vector<TrainItem> items;
  for (const auto& m : manifests)
    for (std::size_t idx : m.indices_of_split("train")) items.push_back({&m, idx});
  if (items.empty()) throw ValidationError("train-vqvae: no training entries");

  const double t0 = now_s();
  vqvae::VqvaeModel<float> model(cfg_.vqvae, Rng::derive(cfg_.seed, 0xF00DULL).next_u64());

  std::vector<std::size_t> order(items.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  long epoch = -1;
  std::size_t cursor = order.size();
  vqvae::StepMetrics last{};
  for (long step = 0; step < cfg_.vqvae_steps; ++step) {
    std::vector<std::size_t> batch_idx;
    for (long b = 0; b < cfg_.vqvae_batch; ++b) {
      if (cursor >= order.size()) {
        ++epoch;
        Rng r = Rng::derive(cfg_.seed, 0xE70C'0000ULL + static_cast<std::uint64_t>(epoch));
        r.shuffle(order.data(), order.size());
        cursor = 0;
      }
      batch_idx.push_back(order[cursor++]);
    }
    std::vector<io::Volume> vols = load_batch(items, batch_idx);
    for (std::size_t i = 0; i < vols.size(); ++i)
      vols[i] = phantom::augment(vols[i], cfg_.augment,
                                 Rng::derive(cfg_.seed, 0xA000'0000ULL +
                                                            static_cast<std::uint64_t>(step) * 64 + i)
                                     .next_u64());
    last = model.train_step(vols, Rng::derive(cfg_.seed, 0x57E9'0000ULL +
                                                             static_cast<std::uint64_t>(step))
                                      .next_u64());
    if (step % 50 == 0 || step + 1 == cfg_.vqvae_steps)
      log("train-vqvae: step " + std::to_string(step) + " l1=" + fmt(last.l1) +
          " freq=" + fmt(last.frequency) + " commit=" + fmt(last.commitment) +
          " D=" + fmt(last.loss_d) + " Gadv=" + fmt(last.loss_g_adv));
  }

  save_vqvae_checkpoint(model, cfg_.raw, hash, ckpt);
  json metrics = {{"l1", last.l1},     {"frequency", last.frequency}, {"loss_d", last.loss_d},
                  {"loss_g_adv", last.loss_g_adv}, {"commitment", last.commitment},
                  {"steps", cfg_.vqvae_steps}};
  ledger_append("train-vqvae", hash, metrics, now_s() - t0, {ckpt.string()});
  log("train-vqvae: saved " + ckpt.string());
}

void Pipeline::fine_tune() {
  if (!finetune_enabled()) {
    log("fine-tune: no finetune cohorts configured, skipping");
    return;
  }
  const std::string hash = vqvae_hash(true);
  const fs::path ckpt = vqvae_checkpoint_path(true);
  if (!opt_.force && fs::exists(ckpt)) {
    log("fine-tune: checkpoint exists, skipping");
    return;
  }
  const fs::path pre = vqvae_checkpoint_path(false);
  if (!fs::exists(pre))
    throw IoError("fine-tune: missing pretrain checkpoint; run train-vqvae first");
  if (cfg_.finetune_cohorts.size() != 1)
    throw ValidationError("fine-tune: exactly one finetune cohort is supported");
  const fs::path mp = cohort_dir(cfg_.finetune_cohorts[0]) / "manifest.json";
  if (!fs::exists(mp))
    throw IoError("fine-tune: missing cohort '" + cfg_.finetune_cohorts[0] +
                  "'; run phantom-gen first");

  const double t0 = now_s();
  vqvae::VqvaeModel<float> model(cfg_.vqvae, Rng::derive(cfg_.seed, 0xF00DULL).next_u64());
  load_vqvae_checkpoint(model, pre, vqvae_hash(false));
  const io::CohortManifest cohort = io::read_manifest(mp);
  const vqvae::FineTuneReport rep =
      vqvae::fine_tune(model, cohort, cfg_.augment, cfg_.finetune_max_epochs,
                       cfg_.finetune_patience, cfg_.vqvae_batch,
                       Rng::derive(cfg_.seed, 0xF17EULL).next_u64());
  save_vqvae_checkpoint(model, cfg_.raw, hash, ckpt);
  json metrics = {{"epochs", rep.epochs_run},
                  {"initial_val", rep.initial_val_loss},
                  {"best_val", rep.best_val_loss}};
  ledger_append("fine-tune", hash, metrics, now_s() - t0, {ckpt.string()});
  log("fine-tune: best validation loss " + fmt(rep.best_val_loss) + " (from " +
      fmt(rep.initial_val_loss) + ")");
}

void Pipeline::extract_codes() {
  const fs::path ckpt = vqvae_checkpoint_path(finetune_enabled());
  if (!fs::exists(ckpt))
    throw IoError("extract-codes: missing VQ-VAE checkpoint; run train-vqvae" +
                  std::string(finetune_enabled() ? " and fine-tune" : "") + " first");
  vqvae::VqvaeModel<float> model(cfg_.vqvae, Rng::derive(cfg_.seed, 0xF00DULL).next_u64());
  load_vqvae_checkpoint(model, ckpt, active_vqvae_hash());

  for (const auto& pop : cfg_.populations) {
    const fs::path out = codes_path(pop.name);
    if (!opt_.force && fs::exists(out)) {
      log("extract-codes: '" + pop.name + "' up to date, skipping");
      continue;
    }
    const fs::path mp = cohort_dir(pop.cohort) / "manifest.json";
    if (!fs::exists(mp))
      throw IoError("extract-codes: missing cohort '" + pop.cohort + "'; run phantom-gen first");
    const double t0 = now_s();
    const io::CohortManifest manifest = io::read_manifest(mp);
    const auto entries = population_entries(manifest, pop.label);
    if (entries.empty())
      throw ValidationError("extract-codes: population '" + pop.name + "' matched no entries");

    json sequences = json::array();
    Shape3 grid{0, 0, 0};
    phantom::AugmentConfig ident = phantom::AugmentConfig::identity(cfg_.augment.crop_shape);
    for (std::size_t k = 0; k < entries.size(); ++k) {
      const std::size_t idx = entries[k];
      if (manifest.entries[idx].split != "train") continue;
      const io::Volume vol = io::load_entry_volume(manifest, idx);
      for (long a = 0; a < std::max<long>(1, cfg_.prior_augmentations_per_sample); ++a) {
        const io::Volume prepared =
            a == 0 ? phantom::augment(vol, ident, 0)
                   : phantom::augment(vol, cfg_.augment,
                                      Rng::derive(cfg_.seed, 0xC0DE'0000ULL + k * 1024 +
                                                                 static_cast<std::uint64_t>(a))
                                          .next_u64());
        const vq::TokenSequence ts = model.encode_tokens(prepared);
        grid = ts.source_grid_shape;
        sequences.push_back(ts.tokens);
      }
    }
    if (sequences.empty())
      throw ValidationError("extract-codes: population '" + pop.name + "' has no train entries");

    json doc = {{"population", pop.name},
                {"cohort", pop.cohort},
                {"grid", {grid.x, grid.y, grid.z}},
                {"K", cfg_.vqvae.codebook.K},
                {"vqvae_hash", active_vqvae_hash()},
                {"sequences", sequences}};
    std::ofstream os(out);
    os << doc.dump() << "\n";
    ledger_append("extract-codes", codes_hash(pop.name),
                  {{"population", pop.name}, {"sequences", sequences.size()}}, now_s() - t0,
                  {out.string()});
    log("extract-codes: '" + pop.name + "' -> " + std::to_string(sequences.size()) + " sequences");
  }
}

namespace {

struct CodesDoc {
  Shape3 grid;
  int K = 0;
  std::vector<vq::TokenSequence> sequences;
};

CodesDoc read_codes(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("read_codes: cannot open " + path.string());
  json j;
  is >> j;
  CodesDoc doc;
  const auto& g = j.at("grid");
  doc.grid = {g.at(0).get<long>(), g.at(1).get<long>(), g.at(2).get<long>()};
  doc.K = j.at("K").get<int>();
  for (const auto& sj : j.at("sequences")) {
    vq::TokenSequence ts;
    ts.source_grid_shape = doc.grid;
    ts.tokens = sj.get<std::vector<int>>();
    doc.sequences.push_back(std::move(ts));
  }
  return doc;
}

}  // namespace

void Pipeline::train_prior() {
  for (const auto& pop : cfg_.populations) {
    const fs::path ckpt = prior_checkpoint_path(pop.name);
    if (!opt_.force && fs::exists(ckpt)) {
      log("train-prior: '" + pop.name + "' checkpoint exists, skipping");
      continue;
    }
    const fs::path cp = codes_path(pop.name);
    if (!fs::exists(cp))
      throw IoError("train-prior: missing codes for '" + pop.name + "'; run extract-codes first");
    const double t0 = now_s();
    const CodesDoc codes = read_codes(cp);

    prior::PriorConfig pc;
    pc.layers = cfg_.prior_layers;
    pc.embed_dim = cfg_.prior_embed_dim;
    pc.heads = cfg_.prior_heads;
    pc.local_heads = cfg_.prior_local_heads;
    pc.local_window = cfg_.prior_local_window;
    pc.vocab = codes.K + 1;
    pc.grid = codes.grid;
    pc.feature_count = cfg_.prior_feature_count;
    pc.ffn_mult = cfg_.prior_ffn_mult;
    pc.lr = cfg_.prior_lr;
    pc.lr_decay = cfg_.prior_lr_decay;
    pc.favor_seed = Rng::derive(cfg_.seed, 0xFA40ULL).next_u64();
    prior::PriorModel<float> model(
        pc, Rng::derive(cfg_.seed, std::hash<std::string>{}(pop.name)).next_u64());

    std::vector<std::size_t> order(codes.sequences.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    long epoch = -1;
    std::size_t cursor = order.size();
    double ce = 0.0;
    for (long step = 0; step < cfg_.prior_steps; ++step) {
      std::vector<vq::TokenSequence> batch;
      for (long b = 0; b < cfg_.prior_batch; ++b) {
        if (cursor >= order.size()) {
          ++epoch;
          Rng r = Rng::derive(cfg_.seed, 0x9107'0000ULL + static_cast<std::uint64_t>(epoch) +
                                             std::hash<std::string>{}(pop.name));
          r.shuffle(order.data(), order.size());
          cursor = 0;
        }
        batch.push_back(codes.sequences[order[cursor++]]);
      }
      ce = model.train_step(batch);
      if (step % 25 == 0 || step + 1 == cfg_.prior_steps)
        log("train-prior[" + pop.name + "]: step " + std::to_string(step) + " ce=" + fmt(ce));
    }

    save_prior_checkpoint(model, cfg_.raw, prior_hash(pop.name), ckpt);
    ledger_append("train-prior", prior_hash(pop.name),
                  {{"population", pop.name}, {"final_ce", ce}, {"steps", cfg_.prior_steps}},
                  now_s() - t0, {ckpt.string()});
    log("train-prior: saved " + ckpt.string());
  }
}

void Pipeline::sample() {
  const fs::path vq_ckpt = vqvae_checkpoint_path(finetune_enabled());
  if (!fs::exists(vq_ckpt)) throw IoError("sample: missing VQ-VAE checkpoint");
  vqvae::VqvaeModel<float> vq_model(cfg_.vqvae, Rng::derive(cfg_.seed, 0xF00DULL).next_u64());
  load_vqvae_checkpoint(vq_model, vq_ckpt, active_vqvae_hash());

  for (const auto& pop : cfg_.populations) {
    const fs::path dir = samples_dir(pop.name);
    const fs::path stamp = dir / ".stamp";
    const std::string hash = samples_hash(pop.name);
    if (!opt_.force && stamp_matches(stamp, hash) && fs::exists(dir / "manifest.json")) {
      log("sample: '" + pop.name + "' up to date, skipping");
      continue;
    }
    const fs::path pr_ckpt = prior_checkpoint_path(pop.name);
    if (!fs::exists(pr_ckpt))
      throw IoError("sample: missing prior checkpoint for '" + pop.name +
                    "'; run train-prior first");
    const double t0 = now_s();

    const json meta = checkpoint_meta(pr_ckpt);
    const json& pj = meta.at("prior");
    prior::PriorConfig pc;
    pc.layers = pj.at("layers").get<int>();
    pc.embed_dim = pj.at("embed_dim").get<int>();
    pc.heads = pj.at("heads").get<int>();
    pc.local_heads = pj.at("local_heads").get<int>();
    pc.local_window = pj.at("local_window").get<long>();
    pc.vocab = pj.at("vocab").get<int>();
    pc.grid = {pj.at("grid").at(0).get<long>(), pj.at("grid").at(1).get<long>(),
               pj.at("grid").at(2).get<long>()};
    pc.feature_count = pj.at("feature_count").get<int>();
    pc.ffn_mult = pj.at("ffn_mult").get<int>();
    prior::PriorModel<float> prior_model(pc, 0);
    load_prior_checkpoint(prior_model, pr_ckpt, prior_hash(pop.name));

    const long n_generate = static_cast<long>(
        std::ceil(static_cast<double>(cfg_.sampling_per_population) / cfg_.sampling_keep_fraction));
    const std::uint64_t gen_seed =
        Rng::derive(cfg_.seed, 0x5A3FULL + std::hash<std::string>{}(pop.name)).next_u64();
    auto samples = factory::generate_batch(prior_model, vq_model, n_generate,
                                           cfg_.sampling_temperature, gen_seed, pop.name,
                                           active_vqvae_hash());
    auto kept = factory::select_top_fraction(std::move(samples), cfg_.sampling_keep_fraction);
    if (static_cast<long>(kept.size()) > cfg_.sampling_per_population)
      kept.resize(static_cast<std::size_t>(cfg_.sampling_per_population));

    fs::create_directories(dir / "vols");
    json entries = json::array();
    for (std::size_t i = 0; i < kept.size(); ++i) {
      char name[48];
      std::snprintf(name, sizeof(name), "vols/sample_%04zu.mvl", i);
      io::write_volume(kept[i].volume, dir / name);
      entries.push_back({{"volume", name},
                         {"score", kept[i].score},
                         {"seed", kept[i].seed},
                         {"index", kept[i].index},
                         {"prior", kept[i].prior_id},
                         {"vqvae", kept[i].vqvae_id}});
    }
    json doc = {{"population", pop.name},
                {"generated", n_generate},
                {"kept", kept.size()},
                {"keep_fraction", cfg_.sampling_keep_fraction},
                {"temperature", cfg_.sampling_temperature},
                {"entries", entries}};
    std::ofstream os(dir / "manifest.json");
    os << doc.dump(2) << "\n";
    write_stamp(stamp, hash);
    ledger_append("sample", hash,
                  {{"population", pop.name}, {"generated", n_generate}, {"kept", kept.size()}},
                  now_s() - t0, {(dir / "manifest.json").string()});
    log("sample: '" + pop.name + "' kept " + std::to_string(kept.size()) + " of " +
        std::to_string(n_generate));
  }
}

namespace {

std::vector<io::Volume> load_sample_volumes(const fs::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw IoError("load_sample_volumes: missing " + (dir / "manifest.json").string());
  json j;
  is >> j;
  std::vector<io::Volume> out;
  for (const auto& e : j.at("entries"))
    out.push_back(io::read_volume(dir / e.at("volume").get<std::string>()));
  return out;
}

std::vector<io::Volume> load_population_volumes(const io::CohortManifest& m,
                                                const std::string& label) {
  std::vector<io::Volume> out;
  for (std::size_t i : population_entries(m, label)) out.push_back(io::load_entry_volume(m, i));
  return out;
}

}  // namespace

void Pipeline::evaluate() {
  const fs::path out_path = reports_dir() / "fidelity.tsv";
  const double t0 = now_s();
  nn::FeatureNetConfig fc;
  fc.seed = cfg_.eval_extractor_seed;
  const nn::FeaturePyramid2d<double> extractor(fc);

  std::ofstream os(out_path);
  os << "# feature extractor: seeded random convolutional pyramid (seed "
     << cfg_.eval_extractor_seed << "); FID values comparable only within this repository\n";
  os << "model\tpopulation\tfid_ax\tfid_cor\tfid_sag\tmmd2_mean\tmmd2_std\tmsssim_mean\t"
        "msssim_std\n";

  constexpr long kMsssimCap = 24;  // pairwise MS-SSIM cost grows quadratically
  for (const auto& pop : cfg_.populations) {
    const fs::path mp = cohort_dir(pop.cohort) / "manifest.json";
    if (!fs::exists(mp)) throw IoError("evaluate: missing cohort '" + pop.cohort + "'");
    const io::CohortManifest manifest = io::read_manifest(mp);
    std::vector<io::Volume> real = load_population_volumes(manifest, pop.label);
    if (real.size() < 4) throw ValidationError("evaluate: population '" + pop.name + "' too small");
    std::vector<io::Volume> synth;
    if (fs::exists(samples_dir(pop.name) / "manifest.json"))
      synth = load_sample_volumes(samples_dir(pop.name));

    // real baseline: metrics between two seeded halves
    Rng half_rng = Rng::derive(cfg_.seed, 0x4A1F'0000ULL + std::hash<std::string>{}(pop.name));
    std::vector<std::size_t> perm(real.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    half_rng.shuffle(perm.data(), perm.size());
    std::vector<io::Volume> half_a, half_b;
    for (std::size_t i = 0; i < perm.size(); ++i)
      (i % 2 == 0 ? half_a : half_b).push_back(real[perm[i]]);

    auto fid3 = [&](const std::vector<io::Volume>& a, const std::vector<io::Volume>& b,
                    double out3[3]) {
      for (int axis = 0; axis < 3; ++axis) {
        const auto fa = fidelity::extract_middle_slice_features(a, axis, extractor);
        const auto fb = fidelity::extract_middle_slice_features(b, axis, extractor);
        out3[axis] = fidelity::frechet_distance(fa, fb);
      }
    };

    double fid_rr[3];
    fid3(half_a, half_b, fid_rr);
    const auto mmd_rr = fidelity::mmd2_batchwise(
        half_a, half_b, cfg_.eval_mmd_batch, cfg_.eval_mmd_draws,
        Rng::derive(cfg_.seed, 0x33D0ULL + std::hash<std::string>{}(pop.name)).next_u64());
    std::vector<io::Volume> real_subset = real;
    if (static_cast<long>(real_subset.size()) > kMsssimCap) real_subset.resize(kMsssimCap);
    const auto ms_rr = fidelity::pairwise_msssim(real_subset);
    // axes: 0=sagittal (x), 1=coronal (y), 2=axial (z)
    os << "real\t" << pop.name << "\t" << fmt(fid_rr[2]) << "\t" << fmt(fid_rr[1]) << "\t"
       << fmt(fid_rr[0]) << "\t" << fmt(mmd_rr.mean) << "\t" << fmt(mmd_rr.std) << "\t"
       << fmt(ms_rr.mean) << "\t" << fmt(ms_rr.std) << "\n";

    if (!synth.empty()) {
      double fid_rs[3];
      fid3(real, synth, fid_rs);
      const auto mmd_rs = fidelity::mmd2_batchwise(
          real, synth, cfg_.eval_mmd_batch, cfg_.eval_mmd_draws,
          Rng::derive(cfg_.seed, 0x33D1ULL + std::hash<std::string>{}(pop.name)).next_u64());
      std::vector<io::Volume> synth_subset = synth;
      if (static_cast<long>(synth_subset.size()) > kMsssimCap) synth_subset.resize(kMsssimCap);
      const auto ms_ss = fidelity::pairwise_msssim(synth_subset);
      os << "vqvae\t" << pop.name << "\t" << fmt(fid_rs[2]) << "\t" << fmt(fid_rs[1]) << "\t"
         << fmt(fid_rs[0]) << "\t" << fmt(mmd_rs.mean) << "\t" << fmt(mmd_rs.std) << "\t"
         << fmt(ms_ss.mean) << "\t" << fmt(ms_ss.std) << "\n";
    }
  }
  os.close();
  ledger_append("evaluate", active_vqvae_hash(), {}, now_s() - t0, {out_path.string()});
  log("evaluate: wrote " + out_path.string());
}

void Pipeline::morphometry() {
  const double t0 = now_s();
  const fs::path vols_path = reports_dir() / "volumes.tsv";
  const fs::path summary_path = reports_dir() / "tmap_summary.json";

  morpho::VolumeSamples real_samples, synth_samples;
  std::map<std::string, std::vector<io::Volume>> real_csf, synth_csf;

  for (const auto& pop : cfg_.populations) {
    const fs::path mp = cohort_dir(pop.cohort) / "manifest.json";
    if (!fs::exists(mp)) throw IoError("morphometry: missing cohort '" + pop.cohort + "'");
    const io::CohortManifest manifest = io::read_manifest(mp);
    const std::vector<io::Volume> real = load_population_volumes(manifest, pop.label);
    std::vector<io::Volume> synth;
    if (fs::exists(samples_dir(pop.name) / "manifest.json"))
      synth = load_sample_volumes(samples_dir(pop.name));

    auto tmap_map = [&](const phantom::TissueMaps& maps) -> const io::Volume& {
      for (phantom::Tissue t : phantom::kAllTissues)
        if (cfg_.morpho_tmap_tissue == phantom::tissue_name(t)) return maps.of(t);
      throw ValidationError("morphometry: unknown tmap tissue '" + cfg_.morpho_tmap_tissue + "'");
    };
    // both sides go through the same intensity-based segmentation
    for (const auto& v : real) {
      const phantom::TissueMaps maps =
          morpho::segment_tissues(v, cfg_.phantom_base.intensities, cfg_.morpho_seg_sigma);
      const auto vols = morpho::region_volumes(maps, v.spacing_mm);
      for (const auto& [tissue, vol] : vols) real_samples[pop.name][tissue].push_back(vol);
      real_csf[pop.name].push_back(tmap_map(maps));
    }
    for (const auto& v : synth) {
      const phantom::TissueMaps maps =
          morpho::segment_tissues(v, cfg_.phantom_base.intensities, cfg_.morpho_seg_sigma);
      const auto vols = morpho::region_volumes(maps, v.spacing_mm);
      for (const auto& [tissue, vol] : vols) synth_samples[pop.name][tissue].push_back(vol);
      synth_csf[pop.name].push_back(tmap_map(maps));
    }
  }

  // Table-2-shaped real-vs-synthetic volume t-tests
  morpho::VolumeSamples synth_nonempty;
  for (const auto& [pop, tissues] : synth_samples)
    if (!tissues.empty()) synth_nonempty[pop] = tissues;
  json table_json = json::array();
  if (!synth_nonempty.empty()) {
    const morpho::VolumeTTestTable table =
        morpho::volume_ttests(real_samples, synth_nonempty, cfg_.morpho_target_p);
    std::ofstream os(vols_path);
    os << "# Bonferroni target p = " << fmt(table.target_p)
       << "; flag 1 = no significant real-vs-synthetic difference\n";
    os << "population\ttissue\treal_mean\treal_std\tsynth_mean\tsynth_std\tt\tp\t"
          "not_significant\n";
    for (const auto& row : table.rows) {
      os << row.cohort << "\t" << row.tissue << "\t" << fmt(row.real_mean) << "\t"
         << fmt(row.real_std) << "\t" << fmt(row.synth_mean) << "\t" << fmt(row.synth_std) << "\t"
         << fmt(row.t) << "\t" << fmt(row.p) << "\t" << (row.significant ? 0 : 1) << "\n";
      table_json.push_back({{"population", row.cohort},
                            {"tissue", row.tissue},
                            {"t", row.t},
                            {"p", row.p},
                            {"significant", row.significant}});
    }
    log("morphometry: wrote " + vols_path.string());
  }

  // t-maps for the configured contrast
  json summary;
  summary["target_p"] = cfg_.morpho_target_p;
  summary["tmap_tissue"] = cfg_.morpho_tmap_tissue;
  summary["volume_ttests"] = table_json;
  if (!cfg_.morpho_contrast_a.empty()) {
    const std::string& pa = cfg_.morpho_contrast_a;
    const std::string& pb = cfg_.morpho_contrast_b;
    if (real_csf.count(pa) && real_csf.count(pb)) {
      const morpho::TMap real_t = morpho::welch_tmap(real_csf[pa], real_csf[pb], cfg_.morpho_fwhm,
                                                     cfg_.morpho_variance_floor_fraction);
      io::write_volume(real_t.t, reports_dir() / ("tmap_real_" + cfg_.morpho_tmap_tissue + ".mvl"));

      // dilated ground-truth ventricle mask at the larger covariate scale
      double max_scale = 1.0;
      for (const auto& name : {pa, pb}) {
        for (const auto& popc : cfg_.populations)
          if (popc.name == name)
            if (const CohortConfig* cc = cfg_.find_cohort(popc.cohort)) {
              auto it = cc->sampler.covariates.find("ventricle_scale");
              if (it != cc->sampler.covariates.end() &&
                  it->second.kind == phantom::CovariateSampler::Spec::Kind::Fixed)
                max_scale = std::max(max_scale, it->second.fixed);
            }
      }
      phantom::PhantomSpec mask_spec = cfg_.phantom_base;
      mask_spec.ventricle_scale = std::min(1.5, max_scale * cfg_.morpho_mask_extra_scale);
      const io::Volume mask =
          phantom::ventricle_mask(mask_spec, 1.0, cfg_.morpho_mask_dilation);

      auto top_frac_in_mask = [&](const morpho::TMap& tm) {
        std::vector<std::pair<double, std::size_t>> mag;
        for (std::size_t i = 0; i < tm.t.data.size(); ++i)
          mag.push_back({std::fabs(static_cast<double>(tm.t.data[i])), i});
        const std::size_t top = std::max<std::size_t>(1, mag.size() / 100);
        std::partial_sort(mag.begin(), mag.begin() + static_cast<std::ptrdiff_t>(top), mag.end(),
                          [](const auto& a, const auto& b) { return a.first > b.first; });
        std::size_t inside = 0;
        for (std::size_t i = 0; i < top; ++i)
          if (mask.data[mag[i].second] > 0.5f) ++inside;
        return static_cast<double>(inside) / static_cast<double>(top);
      };

      summary["real_tmap_top1pct_in_mask"] = top_frac_in_mask(real_t);
      const auto& ra = real_samples[pa].count("CSF") ? real_samples[pa]["CSF"] : std::vector<double>{};
      const auto& rb = real_samples[pb].count("CSF") ? real_samples[pb]["CSF"] : std::vector<double>{};
      if (ra.size() >= 2 && rb.size() >= 2) {
        const morpho::WelchResult w = morpho::welch_ttest(ra, rb);
        summary["real_between_groups_csf"] = {{"t", w.t}, {"p", w.p}, {"dof", w.dof}};
      }

      if (synth_csf.count(pa) && synth_csf.count(pb) && synth_csf[pa].size() >= 2 &&
          synth_csf[pb].size() >= 2) {
        const morpho::TMap synth_t = morpho::welch_tmap(
            synth_csf[pa], synth_csf[pb], cfg_.morpho_fwhm, cfg_.morpho_variance_floor_fraction);
        io::write_volume(synth_t.t,
                         reports_dir() / ("tmap_synth_" + cfg_.morpho_tmap_tissue + ".mvl"));
        summary["synth_tmap_top1pct_in_mask"] = top_frac_in_mask(synth_t);
        const auto& sa = synth_samples[pa]["CSF"];
        const auto& sb = synth_samples[pb]["CSF"];
        if (sa.size() >= 2 && sb.size() >= 2) {
          const morpho::WelchResult w = morpho::welch_ttest(sa, sb);
          summary["synth_between_groups_csf"] = {{"t", w.t}, {"p", w.p}, {"dof", w.dof}};
        }
      }
    }
  }
  {
    std::ofstream os(summary_path);
    os << summary.dump(2) << "\n";
  }
  ledger_append("morphometry", active_vqvae_hash(), summary, now_s() - t0,
                {vols_path.string(), summary_path.string()});
  log("morphometry: wrote " + summary_path.string());
}

void Pipeline::report() {
  const double t0 = now_s();
  const fs::path out_path = reports_dir() / "report.txt";
  std::ofstream os(out_path);
  os << "== fidelity (Table-1-shaped) ==\n";
  {
    std::ifstream is(reports_dir() / "fidelity.tsv");
    if (!is) throw IoError("report: missing fidelity.tsv; run evaluate first");
    os << is.rdbuf();
  }
  os << "\n== tissue volumes (Table-2-shaped) ==\n";
  {
    std::ifstream is(reports_dir() / "volumes.tsv");
    if (is) os << is.rdbuf();
    else os << "(no synthetic samples evaluated)\n";
  }
  os << "\n== morphometry summary ==\n";
  {
    std::ifstream is(reports_dir() / "tmap_summary.json");
    if (is) os << is.rdbuf();
  }
  os.close();
  ledger_append("report", active_vqvae_hash(), {}, now_s() - t0, {out_path.string()});
  log("report: wrote " + out_path.string());
  std::ifstream is(out_path);
  std::ostream& console = opt_.log ? *opt_.log : std::cout;
  console << is.rdbuf();
}

void Pipeline::all() {
  phantom_gen();
  train_vqvae();
  fine_tune();
  extract_codes();
  train_prior();
  sample();
  evaluate();
  morphometry();
  report();
}

void Pipeline::run_stage(const std::string& name) {
  if (name == "phantom-gen") phantom_gen();
  else if (name == "train-vqvae") train_vqvae();
  else if (name == "fine-tune") fine_tune();
  else if (name == "extract-codes") extract_codes();
  else if (name == "train-prior") train_prior();
  else if (name == "sample") sample();
  else if (name == "evaluate") evaluate();
  else if (name == "morphometry") morphometry();
  else if (name == "report") report();
  else if (name == "all") all();
  else
    throw ValidationError("unknown subcommand '" + name +
                          "'; valid: phantom-gen train-vqvae fine-tune extract-codes train-prior "
                          "sample evaluate morphometry report all");
}

}  // namespace morphgen::pipeline
