// Command-line front end for the phantom → VQ-VAE → prior → evaluation
// pipeline. Subcommands map one-to-one onto pipeline stages; `all` runs the
// full chain.

#include <CLI11.hpp>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include "morphgen/pipeline/config.hpp"
#include "morphgen/pipeline/stages.hpp"

int main(int argc, char** argv) {
  CLI::App app{"morphgen: morphology-preserving volumetric generative modeling sandbox"};
  app.require_subcommand(1);

  std::string config_path = "morphgen.json";
  std::vector<std::string> overrides;
  bool force = false;

  app.add_option("-c,--config", config_path, "Experiment config (JSON)");
  app.add_option("--set", overrides,
                 "Override a config key by dotted path, e.g. --set vqvae.steps=100");
  app.add_flag("--force", force, "Re-run stages even when artifacts are up to date");

  const std::vector<std::string> stages = {"phantom-gen", "train-vqvae", "fine-tune",
                                           "extract-codes", "train-prior", "sample",
                                           "evaluate", "morphometry", "report", "all"};
  std::vector<CLI::App*> subs;
  for (const auto& s : stages) subs.push_back(app.add_subcommand(s));

  CLI::App* init = app.add_subcommand("init-config", "Write the default desk-scale config");
  std::string init_path = "morphgen.json";
  init->add_option("path", init_path, "Destination file");

  CLI11_PARSE(app, argc, argv);

  try {
    if (init->parsed()) {
      std::ofstream os(init_path);
      os << morphgen::pipeline::default_config_json().dump(2) << "\n";
      std::cout << "wrote " << init_path << "\n";
      return 0;
    }

    auto cfg = morphgen::pipeline::load_config(config_path, overrides);
    // MORPHGEN_OUT overrides the output root only
    if (const char* env_out = std::getenv("MORPHGEN_OUT")) cfg.out_dir = env_out;

    morphgen::pipeline::StageOptions opt;
    opt.force = force;
    morphgen::pipeline::Pipeline pipe(std::move(cfg), opt);
    for (std::size_t i = 0; i < stages.size(); ++i)
      if (subs[i]->parsed()) pipe.run_stage(stages[i]);
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
