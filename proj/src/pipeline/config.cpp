#include "morphgen/pipeline/config.hpp"

#include <fstream>
#include <sstream>

#include "morphgen/core/errors.hpp"

namespace morphgen::pipeline {

using nlohmann::json;

const CohortConfig* ExperimentConfig::find_cohort(const std::string& name) const {
  for (const auto& c : cohorts)
    if (c.name == name) return &c;
  return nullptr;
}

std::string config_hash(const json& j) {
  // nlohmann::json objects are key-sorted, so dump() is canonical
  const std::string s = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

json default_config_json() {
  return json{
      {"seed", 7},
      {"out_dir", "out"},
      {"phantom",
       {{"grid", {32, 48, 32}},
        {"noise_sigma", 0.01},
        {"deformation_amplitude", 1.0},
        {"tissue_intensities",
         {{"GM", 0.45}, {"WM", 0.80}, {"CSF", 0.12}, {"DeepGM", 0.60}, {"Shell", 1.0}}},
        {"cohorts",
         {{{"name", "vent_small"},
           {"n", 24},
           {"test_fraction", 0.2},
           {"covariates",
            {{"ventricle_scale", {{"fixed", 0.7}}}, {"atrophy", {{"uniform", {0.0, 0.2}}}}}}},
          {{"name", "vent_big"},
           {"n", 24},
           {"test_fraction", 0.2},
           {"covariates",
            {{"ventricle_scale", {{"fixed", 1.3}}}, {"atrophy", {{"uniform", {0.0, 0.2}}}}}}}}}}},
      {"augment",
       {{"crop", {32, 48, 32}},
        {"rotation_range", 0.04},
        {"translation_range", 2.0},
        {"scale_range", 0.05},
        {"gamma_range", {0.99, 1.01}},
        {"shift_range", {0.0, 0.05}},
        {"noise_std", 0.02},
        {"prior_augmentations_per_sample", 1},
        {"interpolation", "trilinear"},
        {"padding", "zeros"}}},
      {"vqvae",
       {{"downsample_stages", 2},
        {"conv_channels", 32},
        {"residual_blocks", 3},
        {"codebook",
         {{"K", 256}, {"n_z", 32}, {"gamma", 0.5}, {"beta", 0.25}, {"restart_dead_codes", false}}},
        {"w_pixel", 1.0},
        {"w_perceptual", 0.001},
        {"w_frequency", 1.0},
        {"w_adversarial", 1.0},
        {"perceptual_slice_fraction", 0.5},
        {"lr_generator", 0.000165},
        {"lr_discriminator", 0.00005},
        {"lr_decay", 0.99999},
        {"batch", 4},
        {"steps", 600},
        {"pretrain_cohorts", {"vent_small", "vent_big"}},
        {"finetune_cohorts", json::array()},
        {"finetune_max_epochs", 20},
        {"finetune_patience", 5}}},
      {"prior",
       {{"layers", 4},
        {"embed_dim", 128},
        {"heads", 4},
        {"local_heads", 2},
        {"local_window", 64},
        {"feature_count", 64},
        {"ffn_mult", 2},
        {"lr", 0.001},
        {"lr_decay", 0.99999},
        {"batch", 8},
        {"steps", 800},
        {"populations",
         {{{"name", "vent_small"}, {"cohort", "vent_small"}},
          {{"name", "vent_big"}, {"cohort", "vent_big"}}}}}},
      {"sampling", {{"per_population", 16}, {"keep_fraction", 0.1}, {"temperature", 1.0}}},
      {"eval", {{"extractor_seed", 4558}, {"mmd_batch", 8}, {"mmd_draws", 16}}},
      {"morpho",
       {{"fwhm", {4.0, 4.0, 4.0}},
        {"variance_floor_fraction", 0.01},
        {"target_p", 2.083e-05},
        {"seg_sigma", 0.03},
        {"ventricle_mask_extra_scale", 1.0},
        {"ventricle_mask_dilation", 3},
        {"tmap_tissue", "CSF"},
        {"contrast", {"vent_small", "vent_big"}}}},
  };
}

namespace {

void apply_override(json& j, const std::string& expr, std::vector<std::string>& errors) {
  const auto eq = expr.find('=');
  if (eq == std::string::npos) {
    errors.push_back("override '" + expr + "' is not of the form key.path=value");
    return;
  }
  const std::string path = expr.substr(0, eq);
  const std::string value = expr.substr(eq + 1);
  json* cur = &j;
  std::stringstream ss(path);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) cur = &((*cur)[parts[i]]);
  json parsed = json::parse(value, nullptr, false);
  if (parsed.is_discarded()) parsed = value;  // treat as a bare string
  (*cur)[parts.back()] = parsed;
}

phantom::CovariateSampler::Spec parse_cov(const json& j, const std::string& name,
                                          std::vector<std::string>& errors) {
  phantom::CovariateSampler::Spec spec;
  using Kind = phantom::CovariateSampler::Spec::Kind;
  if (j.contains("fixed")) {
    spec.kind = Kind::Fixed;
    spec.fixed = j.at("fixed").get<double>();
  } else if (j.contains("uniform")) {
    spec.kind = Kind::Uniform;
    spec.lo = j.at("uniform").at(0).get<double>();
    spec.hi = j.at("uniform").at(1).get<double>();
    if (spec.hi < spec.lo) errors.push_back("covariate " + name + ": uniform range reversed");
  } else if (j.contains("choice")) {
    spec.kind = Kind::Choice;
    spec.choices = j.at("choice").get<std::vector<double>>();
    if (spec.choices.empty()) errors.push_back("covariate " + name + ": empty choice list");
  } else {
    errors.push_back("covariate " + name + ": need one of fixed/uniform/choice");
  }
  return spec;
}

}  // namespace

ExperimentConfig config_from_json(json j) {
  std::vector<std::string> errors;
  ExperimentConfig cfg;
  cfg.raw = j;

  auto get = [&](const json& obj, const char* key, auto fallback) {
    using V = decltype(fallback);
    try {
      return obj.value(key, fallback);
    } catch (const json::exception& e) {
      errors.push_back(std::string("bad value for '") + key + "': " + e.what());
      return V(fallback);
    }
  };

  try {
    cfg.seed = get(j, "seed", std::uint64_t{7});
    cfg.out_dir = std::string(get(j, "out_dir", std::string("out")));

    if (j.contains("phantom")) {
      const json& p = j["phantom"];
      if (p.contains("grid")) {
        const auto& g = p["grid"];
        cfg.phantom_base.grid_shape = {g.at(0).get<long>(), g.at(1).get<long>(),
                                       g.at(2).get<long>()};
      }
      cfg.phantom_base.noise_sigma = get(p, "noise_sigma", 0.01);
      cfg.phantom_base.deformation_amplitude = get(p, "deformation_amplitude", 1.0);
      if (p.contains("tissue_intensities")) {
        const json& ti = p["tissue_intensities"];
        cfg.phantom_base.intensities.gm = get(ti, "GM", 0.45);
        cfg.phantom_base.intensities.wm = get(ti, "WM", 0.80);
        cfg.phantom_base.intensities.csf = get(ti, "CSF", 0.12);
        cfg.phantom_base.intensities.deep_gm = get(ti, "DeepGM", 0.60);
        cfg.phantom_base.intensities.shell = get(ti, "Shell", 1.0);
      }
      for (const auto& cj : p.value("cohorts", json::array())) {
        CohortConfig cc;
        cc.name = cj.value("name", "");
        if (cc.name.empty()) errors.push_back("cohort without a name");
        cc.n = cj.value("n", 16L);
        cc.test_fraction = cj.value("test_fraction", 0.2);
        if (!(cc.test_fraction >= 0.0 && cc.test_fraction < 1.0))
          errors.push_back("cohort " + cc.name + ": test_fraction must be in [0, 1)");
        const json covs = cj.value("covariates", json::object());
        for (const auto& [cname, cj2] : covs.items())
          cc.sampler.covariates[cname] = parse_cov(cj2, cname, errors);
        cc.sampler.label_by = cj.value("label_by", "");
        cc.sampler.label_names = cj.value("label_names", std::vector<std::string>{});
        cc.sampler.default_label = cc.name;
        cfg.cohorts.push_back(std::move(cc));
      }
    }

    if (j.contains("augment")) {
      const json& a = j["augment"];
      if (a.contains("crop")) {
        const auto& c = a["crop"];
        cfg.augment.crop_shape = {c.at(0).get<long>(), c.at(1).get<long>(), c.at(2).get<long>()};
      } else {
        cfg.augment.crop_shape = cfg.phantom_base.grid_shape;
      }
      cfg.augment.rotation_range = get(a, "rotation_range", 0.04);
      cfg.augment.translation_range = get(a, "translation_range", 2.0);
      cfg.augment.scale_range = get(a, "scale_range", 0.05);
      if (a.contains("gamma_range")) {
        cfg.augment.gamma_lo = a["gamma_range"].at(0).get<double>();
        cfg.augment.gamma_hi = a["gamma_range"].at(1).get<double>();
      }
      if (a.contains("shift_range")) {
        cfg.augment.shift_lo = a["shift_range"].at(0).get<double>();
        cfg.augment.shift_hi = a["shift_range"].at(1).get<double>();
      }
      cfg.augment.noise_std = get(a, "noise_std", 0.02);
      cfg.prior_augmentations_per_sample = get(a, "prior_augmentations_per_sample", 1L);
    } else {
      cfg.augment.crop_shape = cfg.phantom_base.grid_shape;
    }

    if (j.contains("vqvae")) {
      const json& v = j["vqvae"];
      cfg.vqvae.downsample_stages = get(v, "downsample_stages", 2);
      cfg.vqvae.conv_channels = get(v, "conv_channels", 32);
      cfg.vqvae.residual_blocks = get(v, "residual_blocks", 3);
      if (v.contains("codebook")) {
        const json& cb = v["codebook"];
        cfg.vqvae.codebook.K = get(cb, "K", 256);
        cfg.vqvae.codebook.n_z = get(cb, "n_z", 32);
        cfg.vqvae.codebook.gamma = get(cb, "gamma", 0.5);
        cfg.vqvae.codebook.beta = get(cb, "beta", 0.25);
        cfg.vqvae.codebook.restart_dead_codes = get(cb, "restart_dead_codes", false);
      }
      cfg.vqvae.w_pixel = get(v, "w_pixel", 1.0);
      cfg.vqvae.w_perceptual = get(v, "w_perceptual", 0.001);
      cfg.vqvae.w_frequency = get(v, "w_frequency", 1.0);
      cfg.vqvae.w_adversarial = get(v, "w_adversarial", 1.0);
      cfg.vqvae.perceptual_slice_fraction = get(v, "perceptual_slice_fraction", 0.5);
      cfg.vqvae.lr_generator = get(v, "lr_generator", 0.000165);
      cfg.vqvae.lr_discriminator = get(v, "lr_discriminator", 0.00005);
      cfg.vqvae.lr_decay = get(v, "lr_decay", 0.99999);
      cfg.vqvae_batch = get(v, "batch", 4L);
      cfg.vqvae_steps = get(v, "steps", 600L);
      cfg.pretrain_cohorts = v.value("pretrain_cohorts", std::vector<std::string>{});
      cfg.finetune_cohorts = v.value("finetune_cohorts", std::vector<std::string>{});
      cfg.finetune_max_epochs = get(v, "finetune_max_epochs", 20L);
      cfg.finetune_patience = get(v, "finetune_patience", 5L);
    }

    if (j.contains("prior")) {
      const json& p = j["prior"];
      cfg.prior_layers = get(p, "layers", 4);
      cfg.prior_embed_dim = get(p, "embed_dim", 128);
      cfg.prior_heads = get(p, "heads", 4);
      cfg.prior_local_heads = get(p, "local_heads", 2);
      cfg.prior_local_window = get(p, "local_window", 64L);
      cfg.prior_feature_count = get(p, "feature_count", 64);
      cfg.prior_ffn_mult = get(p, "ffn_mult", 2);
      cfg.prior_lr = get(p, "lr", 0.001);
      cfg.prior_lr_decay = get(p, "lr_decay", 0.99999);
      cfg.prior_batch = get(p, "batch", 8L);
      cfg.prior_steps = get(p, "steps", 800L);
      for (const auto& pj : p.value("populations", json::array())) {
        PopulationConfig pc;
        pc.name = pj.value("name", "");
        pc.cohort = pj.value("cohort", "");
        pc.label = pj.value("label", "");
        if (pc.name.empty() || pc.cohort.empty())
          errors.push_back("population entries need both name and cohort");
        cfg.populations.push_back(std::move(pc));
      }
    }

    if (j.contains("sampling")) {
      const json& s = j["sampling"];
      cfg.sampling_per_population = get(s, "per_population", 16L);
      cfg.sampling_keep_fraction = get(s, "keep_fraction", 0.1);
      cfg.sampling_temperature = get(s, "temperature", 1.0);
    }

    if (j.contains("eval")) {
      const json& e = j["eval"];
      cfg.eval_extractor_seed = get(e, "extractor_seed", std::uint64_t{0x11CE});
      cfg.eval_mmd_batch = get(e, "mmd_batch", 8L);
      cfg.eval_mmd_draws = get(e, "mmd_draws", 16L);
    }

    if (j.contains("morpho")) {
      const json& m = j["morpho"];
      if (m.contains("fwhm")) {
        cfg.morpho_fwhm = {m["fwhm"].at(0).get<double>(), m["fwhm"].at(1).get<double>(),
                           m["fwhm"].at(2).get<double>()};
      }
      cfg.morpho_variance_floor_fraction = get(m, "variance_floor_fraction", 0.01);
      cfg.morpho_target_p = get(m, "target_p", 2.083e-05);
      cfg.morpho_seg_sigma = get(m, "seg_sigma", 0.03);
      cfg.morpho_mask_extra_scale = get(m, "ventricle_mask_extra_scale", 1.0);
      cfg.morpho_mask_dilation = get(m, "ventricle_mask_dilation", 3L);
      cfg.morpho_tmap_tissue = get(m, "tmap_tissue", std::string("CSF"));
      if (m.contains("contrast")) {
        cfg.morpho_contrast_a = m["contrast"].at(0).get<std::string>();
        cfg.morpho_contrast_b = m["contrast"].at(1).get<std::string>();
      }
    }
  } catch (const json::exception& e) {
    errors.push_back(std::string("config parse error: ") + e.what());
  }

  // cross-section consistency
  const long factor = 1L << cfg.vqvae.downsample_stages;
  cfg.phantom_base.downsample_divisor = factor;
  const Shape3 crop = cfg.augment.crop_shape;
  if (crop.x % factor || crop.y % factor || crop.z % factor)
    errors.push_back("augment.crop " + crop.str() + " not divisible by VQ-VAE factor " +
                     std::to_string(factor));
  const Shape3 grid = cfg.phantom_base.grid_shape;
  if (crop.x > grid.x || crop.y > grid.y || crop.z > grid.z)
    errors.push_back("augment.crop " + crop.str() + " larger than phantom grid " + grid.str());
  if (cfg.vqvae_batch < 1) errors.push_back("vqvae.batch must be >= 1");
  if (cfg.vqvae_steps < 1) errors.push_back("vqvae.steps must be >= 1");
  if (cfg.prior_batch < 1) errors.push_back("prior.batch must be >= 1");
  if (cfg.prior_steps < 1) errors.push_back("prior.steps must be >= 1");
  if (cfg.prior_embed_dim % std::max(cfg.prior_heads, 1))
    errors.push_back("prior.embed_dim must divide by prior.heads");
  if (cfg.prior_local_heads < 0 || cfg.prior_local_heads > cfg.prior_heads)
    errors.push_back("prior.local_heads must be in [0, heads]");
  if (!(cfg.sampling_keep_fraction > 0.0 && cfg.sampling_keep_fraction <= 1.0))
    errors.push_back("sampling.keep_fraction must be in (0, 1]");
  if (cfg.sampling_per_population < 1) errors.push_back("sampling.per_population must be >= 1");
  if (!(cfg.morpho_target_p > 0.0 && cfg.morpho_target_p <= 1.0))
    errors.push_back("morpho.target_p must be in (0, 1]");
  for (const auto& name : cfg.pretrain_cohorts)
    if (!cfg.find_cohort(name)) errors.push_back("pretrain cohort '" + name + "' is not defined");
  for (const auto& name : cfg.finetune_cohorts)
    if (!cfg.find_cohort(name)) errors.push_back("finetune cohort '" + name + "' is not defined");
  for (const auto& p : cfg.populations)
    if (!cfg.find_cohort(p.cohort))
      errors.push_back("population '" + p.name + "' references unknown cohort '" + p.cohort + "'");
  if (!cfg.morpho_contrast_a.empty()) {
    auto has_pop = [&](const std::string& n) {
      for (const auto& p : cfg.populations)
        if (p.name == n) return true;
      return false;
    };
    if (!has_pop(cfg.morpho_contrast_a) || !has_pop(cfg.morpho_contrast_b))
      errors.push_back("morpho.contrast must name two configured populations");
  }
  try {
    cfg.vqvae.validate();
  } catch (const std::exception& e) {
    errors.push_back(e.what());
  }
  try {
    cfg.phantom_base.validate();
  } catch (const std::exception& e) {
    errors.push_back(e.what());
  }

  if (!errors.empty()) {
    std::string msg = "config validation failed:\n";
    for (const auto& e : errors) msg += "  - " + e + "\n";
    throw ValidationError(msg);
  }
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path,
                             const std::vector<std::string>& overrides) {
  std::ifstream is(path);
  if (!is) throw IoError("load_config: cannot open " + path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ParseError("load_config: bad json in " + path.string() + ": " + e.what());
  }
  std::vector<std::string> errors;
  for (const auto& o : overrides) apply_override(j, o, errors);
  if (!errors.empty()) {
    std::string msg = "config overrides failed:\n";
    for (const auto& e : errors) msg += "  - " + e + "\n";
    throw ValidationError(msg);
  }
  return config_from_json(std::move(j));
}

}  // namespace morphgen::pipeline
