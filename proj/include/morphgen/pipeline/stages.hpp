#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "morphgen/pipeline/config.hpp"

namespace morphgen::pipeline {

struct StageOptions {
  bool force = false;
  std::ostream* log = nullptr;  // defaults to std::cout
};

// Stage orchestration. Artifacts are content-addressed by the hash of the
// config sections they depend on; re-invoking a completed stage is a no-op
// unless forced. Every run appends to out_dir/ledger.jsonl.
class Pipeline {
 public:
  Pipeline(ExperimentConfig cfg, StageOptions opt = {});

  void phantom_gen();
  void train_vqvae();
  void fine_tune();
  void extract_codes();
  void train_prior();
  void sample();
  void evaluate();
  void morphometry();
  void report();
  void all();

  // dependency-aware dispatch by subcommand name
  void run_stage(const std::string& name);

  const ExperimentConfig& config() const { return cfg_; }

  // artifact paths (exposed for tests)
  std::filesystem::path cohort_dir(const std::string& name) const;
  std::filesystem::path vqvae_checkpoint_path(bool finetuned) const;
  std::filesystem::path prior_checkpoint_path(const std::string& pop) const;
  std::filesystem::path codes_path(const std::string& pop) const;
  std::filesystem::path samples_dir(const std::string& pop) const;
  std::filesystem::path reports_dir() const;
  bool finetune_enabled() const { return !cfg_.finetune_cohorts.empty(); }

  std::string phantom_hash() const;
  std::string vqvae_hash(bool finetuned) const;
  std::string active_vqvae_hash() const { return vqvae_hash(finetune_enabled()); }
  std::string codes_hash(const std::string& pop) const;
  std::string prior_hash(const std::string& pop) const;
  std::string samples_hash(const std::string& pop) const;

 private:
  void log(const std::string& msg);
  void ledger_append(const std::string& stage, const std::string& hash,
                     const nlohmann::json& metrics, double wall_s,
                     const std::vector<std::string>& artifacts);
  bool stamp_matches(const std::filesystem::path& stamp, const std::string& hash) const;
  void write_stamp(const std::filesystem::path& stamp, const std::string& hash) const;

  ExperimentConfig cfg_;
  StageOptions opt_;
};

}  // namespace morphgen::pipeline
