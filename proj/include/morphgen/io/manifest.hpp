#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "morphgen/io/volume.hpp"

namespace morphgen::io {

// One generated subject: volume path, tissue-map paths, covariates, cohort
// label and train/test split tag. Paths are relative to the manifest's
// directory.
struct CohortEntry {
  std::string volume_path;
  std::map<std::string, std::string> tissue_map_paths;  // tissue name -> path
  std::map<std::string, double> covariates;
  std::string label;
  std::string split;  // "train" or "test"
};

struct CohortManifest {
  std::uint64_t seed = 0;
  std::string name;
  Shape3 grid;
  std::vector<CohortEntry> entries;
  std::filesystem::path root;  // directory the relative paths resolve against

  std::vector<std::size_t> indices_of_split(const std::string& split) const;
  std::vector<std::string> split_tags() const;
};

void write_manifest(const CohortManifest& m, const std::filesystem::path& path);
CohortManifest read_manifest(const std::filesystem::path& path);

// Seeded epoch iteration over one split of a manifest. Every entry appears
// exactly once per epoch; the last batch may be short.
class SplitIterator {
 public:
  SplitIterator(const CohortManifest& manifest, const std::string& split, long batch_size,
                std::uint64_t seed);

  // Entry indices (into manifest.entries) of the next batch.
  std::vector<std::size_t> next_indices();
  // Loads the volumes of the next batch.
  std::vector<Volume> next_batch();

  long batches_per_epoch() const;
  long epoch() const { return epoch_; }

 private:
  void reshuffle();

  const CohortManifest& manifest_;
  std::vector<std::size_t> split_indices_;
  std::vector<std::size_t> order_;
  long batch_size_;
  std::uint64_t seed_;
  long epoch_ = 0;
  std::size_t cursor_ = 0;
};

// Loads one entry's volume, with path context on failure.
Volume load_entry_volume(const CohortManifest& m, std::size_t entry_index);
Volume load_entry_tissue(const CohortManifest& m, std::size_t entry_index, const std::string& tissue);

}  // namespace morphgen::io
