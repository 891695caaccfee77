#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "morphgen/phantom/augment.hpp"
#include "morphgen/phantom/phantom.hpp"
#include "morphgen/prior/model.hpp"
#include "morphgen/vqvae/model.hpp"

namespace morphgen::pipeline {

struct CohortConfig {
  std::string name;
  long n = 16;
  double test_fraction = 0.2;
  phantom::CovariateSampler sampler;
};

struct PopulationConfig {
  std::string name;
  std::string cohort;
  std::string label;  // optional filter on cohort labels; empty = all
};

struct ExperimentConfig {
  std::uint64_t seed = 7;
  std::filesystem::path out_dir = "out";

  phantom::PhantomSpec phantom_base;
  std::vector<CohortConfig> cohorts;

  phantom::AugmentConfig augment;
  long prior_augmentations_per_sample = 1;

  vqvae::VqvaeConfig vqvae;
  long vqvae_batch = 4;
  long vqvae_steps = 600;
  std::vector<std::string> pretrain_cohorts;
  std::vector<std::string> finetune_cohorts;
  long finetune_max_epochs = 20;
  long finetune_patience = 5;

  // prior topology; vocab and grid are derived from the VQ-VAE at stage time
  int prior_layers = 4;
  int prior_embed_dim = 128;
  int prior_heads = 4;
  int prior_local_heads = 2;
  long prior_local_window = 64;
  int prior_feature_count = 64;
  int prior_ffn_mult = 2;
  double prior_lr = 0.001;
  double prior_lr_decay = 0.99999;
  long prior_batch = 8;
  long prior_steps = 800;
  std::vector<PopulationConfig> populations;

  long sampling_per_population = 16;
  double sampling_keep_fraction = 0.1;  // paper-scale default is 0.01
  double sampling_temperature = 1.0;

  std::uint64_t eval_extractor_seed = 0x11CE;
  long eval_mmd_batch = 8;
  long eval_mmd_draws = 16;

  std::array<double, 3> morpho_fwhm{4.0, 4.0, 4.0};
  double morpho_variance_floor_fraction = 0.01;
  double morpho_target_p = 2.083e-05;
  double morpho_seg_sigma = 0.05;
  double morpho_mask_extra_scale = 1.0;
  long morpho_mask_dilation = 3;
  std::string morpho_tmap_tissue = "CSF";
  std::string morpho_contrast_a, morpho_contrast_b;  // populations for the t-map

  nlohmann::json raw;  // parsed source, kept for hashing and snapshots

  const CohortConfig* find_cohort(const std::string& name) const;
};

// Parses a config JSON file, applies dotted-path overrides
// (e.g. "vqvae.steps=100"), validates everything, and reports all violations
// in a single aggregated error.
ExperimentConfig load_config(const std::filesystem::path& path,
                             const std::vector<std::string>& overrides = {});
ExperimentConfig config_from_json(nlohmann::json j);

// Canonical-form FNV-1a hash; stable under key reordering.
std::string config_hash(const nlohmann::json& j);

// Default desk-scale config (also written by `morphgen init-config`).
nlohmann::json default_config_json();

}  // namespace morphgen::pipeline
