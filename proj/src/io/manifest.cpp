#include "morphgen/io/manifest.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include <json.hpp>

#include "morphgen/core/errors.hpp"
#include "morphgen/core/rng.hpp"

namespace morphgen::io {

using nlohmann::json;

std::vector<std::size_t> CohortManifest::indices_of_split(const std::string& split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (entries[i].split == split) out.push_back(i);
  return out;
}

std::vector<std::string> CohortManifest::split_tags() const {
  std::set<std::string> tags;
  for (const auto& e : entries) tags.insert(e.split);
  return {tags.begin(), tags.end()};
}

void write_manifest(const CohortManifest& m, const std::filesystem::path& path) {
  json j;
  j["seed"] = m.seed;
  j["name"] = m.name;
  j["grid"] = {m.grid.x, m.grid.y, m.grid.z};
  json entries = json::array();
  for (const auto& e : m.entries) {
    json je;
    je["volume"] = e.volume_path;
    je["tissue_maps"] = e.tissue_map_paths;
    je["covariates"] = e.covariates;
    je["label"] = e.label;
    je["split"] = e.split;
    entries.push_back(je);
  }
  j["entries"] = entries;

  std::ofstream os(path);
  if (!os) throw IoError("write_manifest: cannot open " + path.string());
  os << j.dump(2) << "\n";
  if (!os) throw IoError("write_manifest: write failed for " + path.string());
}

CohortManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("read_manifest: cannot open " + path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ParseError("read_manifest: bad json in " + path.string() + ": " + e.what());
  }

  CohortManifest m;
  m.seed = j.value("seed", std::uint64_t{0});
  m.name = j.value("name", "");
  if (j.contains("grid")) {
    const auto& g = j.at("grid");
    m.grid = {g.at(0).get<long>(), g.at(1).get<long>(), g.at(2).get<long>()};
  }
  for (const auto& je : j.at("entries")) {
    CohortEntry e;
    e.volume_path = je.at("volume").get<std::string>();
    if (je.contains("tissue_maps"))
      e.tissue_map_paths = je.at("tissue_maps").get<std::map<std::string, std::string>>();
    if (je.contains("covariates"))
      e.covariates = je.at("covariates").get<std::map<std::string, double>>();
    e.label = je.value("label", "");
    e.split = je.value("split", "train");
    m.entries.push_back(std::move(e));
  }
  m.root = path.parent_path();
  return m;
}

Volume load_entry_volume(const CohortManifest& m, std::size_t entry_index) {
  const auto& e = m.entries.at(entry_index);
  try {
    return read_volume(m.root / e.volume_path);
  } catch (const std::exception& ex) {
    throw IoError("manifest entry " + std::to_string(entry_index) + " (" + e.volume_path +
                  "): " + ex.what());
  }
}

Volume load_entry_tissue(const CohortManifest& m, std::size_t entry_index, const std::string& tissue) {
  const auto& e = m.entries.at(entry_index);
  auto it = e.tissue_map_paths.find(tissue);
  if (it == e.tissue_map_paths.end())
    throw ValidationError("manifest entry " + std::to_string(entry_index) + " has no tissue map '" +
                          tissue + "'");
  try {
    return read_volume(m.root / it->second);
  } catch (const std::exception& ex) {
    throw IoError("manifest entry " + std::to_string(entry_index) + " (" + it->second +
                  "): " + ex.what());
  }
}

SplitIterator::SplitIterator(const CohortManifest& manifest, const std::string& split,
                             long batch_size, std::uint64_t seed)
    : manifest_(manifest), batch_size_(batch_size), seed_(seed) {
  if (batch_size <= 0) throw ValidationError("SplitIterator: batch_size must be positive");
  split_indices_ = manifest.indices_of_split(split);
  if (split_indices_.empty())
    throw ValidationError("SplitIterator: split tag '" + split + "' not present in manifest '" +
                          manifest.name + "'");
  reshuffle();
}

void SplitIterator::reshuffle() {
  order_ = split_indices_;
  Rng rng = Rng::derive(seed_, static_cast<std::uint64_t>(epoch_));
  rng.shuffle(order_.data(), order_.size());
  cursor_ = 0;
}

long SplitIterator::batches_per_epoch() const {
  return static_cast<long>((split_indices_.size() + batch_size_ - 1) /
                           static_cast<std::size_t>(batch_size_));
}

std::vector<std::size_t> SplitIterator::next_indices() {
  if (cursor_ >= order_.size()) {
    ++epoch_;
    reshuffle();
  }
  const std::size_t end = std::min(order_.size(), cursor_ + static_cast<std::size_t>(batch_size_));
  std::vector<std::size_t> batch(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(end));
  cursor_ = end;
  return batch;
}

std::vector<Volume> SplitIterator::next_batch() {
  std::vector<Volume> out;
  for (std::size_t idx : next_indices()) out.push_back(load_entry_volume(manifest_, idx));
  return out;
}

}  // namespace morphgen::io
