#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "morphgen/prior/model.hpp"
#include "morphgen/vq/codebook.hpp"
#include "morphgen/vqvae/trainer.hpp"

namespace morphgen::pipeline {

// "MTC1" tensor container: magic, little-endian u32 header length, JSON
// header (config snapshot, config hash, tensor index with name/dtype/shape/
// offset), then the raw little-endian payload. Network parameters are f32;
// codebook state is f64.
struct TensorEntry {
  std::string name;
  std::string dtype;  // "f32" | "f64"
  std::vector<long> shape;
  std::vector<unsigned char> bytes;
};

void write_container(const std::filesystem::path& path, const nlohmann::json& meta,
                     const std::vector<TensorEntry>& tensors);

struct Container {
  nlohmann::json meta;
  std::map<std::string, TensorEntry> tensors;
};

Container read_container(const std::filesystem::path& path);
nlohmann::json checkpoint_meta(const std::filesystem::path& path);

void save_vqvae_checkpoint(vqvae::VqvaeModel<float>& model, const nlohmann::json& config_snapshot,
                           const std::string& config_hash, const std::filesystem::path& path);
void load_vqvae_checkpoint(vqvae::VqvaeModel<float>& model, const std::filesystem::path& path,
                           const std::string& expected_hash = "", bool allow_hash_mismatch = false);

void save_prior_checkpoint(prior::PriorModel<float>& model, const nlohmann::json& config_snapshot,
                           const std::string& config_hash, const std::filesystem::path& path);
void load_prior_checkpoint(prior::PriorModel<float>& model, const std::filesystem::path& path,
                           const std::string& expected_hash = "", bool allow_hash_mismatch = false);

// Standalone codebook container: flat little-endian f64 arrays plus a text
// header carrying K, n_z, gamma, beta.
void save_codebook(const vq::Codebook& cb, const std::filesystem::path& path);
vq::Codebook load_codebook(const std::filesystem::path& path);

}  // namespace morphgen::pipeline
