#pragma once

#include <map>
#include <string>
#include <vector>

#include "metaseld/meta.hpp"

namespace metaseld::pipeline {

/// Line-oriented `key = value` configuration with [section] headers and `#`
/// comments. Keys are addressed as "section.key". Every key has a default;
/// unknown keys are configuration errors. Defaults follow the experimental
/// setup baked into MetaConfig / PretrainConfig.
class RunConfig {
 public:
  RunConfig();

  void load_file(const std::string& path);
  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;

  std::string str(const std::string& key) const;
  int64_t integer(const std::string& key) const;
  double real(const std::string& key) const;
  bool boolean(const std::string& key) const;

  /// Full resolved configuration, suitable for reloading.
  std::string serialize() const;

  meta::MetaConfig meta_config() const;
  meta::PretrainConfig pretrain_config() const;
  scene::DatasetConfig dataset_config() const;

  /// Applies run.threads / run.serial to the process worker pool.
  void apply_parallelism() const;

 private:
  std::map<std::string, std::string> kv_;
};

/// FNV-64 of a file's bytes.
uint64_t hash_file(const std::string& path);

/// Hash over manifest, annotations and audio of a dataset directory.
std::string dataset_hash(const std::string& dataset_dir);

// ---------------------------------------------------------------------------
// commands (the CLI and C API call exactly these)

/// Builds the synthetic dataset into dataset.out.
void cmd_synth_data(const RunConfig& cfg);

struct ExtractStats {
  int64_t written = 0;
  int64_t skipped = 0;
};

/// Extracts one feature cache file per 5 s segment; skips files whose source
/// WAV content hash is unchanged (idempotent).
ExtractStats cmd_extract_features(const RunConfig& cfg);

/// Runs one training condition (run.condition = pretrain | finetune | meta)
/// into run.out. pretrain also evaluates the unadapted model on the test
/// rooms (the Pre-train column); finetune needs run.pretrain_dir.
void cmd_run(const RunConfig& cfg);

/// Scores a prediction tree against a reference tree.
void cmd_evaluate(const RunConfig& cfg, const std::string& refs_dir, const std::string& preds_dir,
                  const std::string& manifest_csv, const std::string& out_csv);

/// Merges run directories into a per-room x per-condition table plus
/// training-curve plots. Refuses to merge runs with different dataset hashes.
void cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_dir);

// ---------------------------------------------------------------------------
// shared helpers (exposed for tests)

struct DataIndex {
  std::vector<meta::RoomSegments> train_rooms;
  std::vector<meta::RoomSegments> test_rooms;
  std::map<std::string, scene::Annotation> annotations;  // by clip_id
};

/// Loads manifest + annotations + feature cache index into room-grouped
/// segment lists (clips sorted by filename, then segment index).
DataIndex load_data_index(const std::string& dataset_dir, const std::string& cache_dir,
                          const model::CrnnConfig& model_cfg);

/// Simple polyline plot written as an SVG file.
void write_line_plot_svg(const std::string& path, const std::string& title,
                         const std::vector<std::pair<std::string, std::vector<double>>>& series);

}  // namespace metaseld::pipeline
