#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "metaseld/scene.hpp"

namespace metaseld::metrics {

constexpr double kSpatialThresholdDeg = 20.0;

/// Great-circle angle between two direction vectors, in degrees. Inputs are
/// normalized defensively; a zero vector is an error.
double angular_distance(const std::array<double, 3>& u, const std::array<double, 3>& v);

/// Minimum-cost assignment. cost is rectangular [n][m]; every instance on the
/// smaller side gets matched. Returns total cost; row_to_col[i] = matched
/// column of row i or -1.
double hungarian(const std::vector<std::vector<double>>& cost, std::vector<int>& row_to_col);

/// Events active in one 100 ms frame, grouped by class.
struct FrameEvents {
  std::vector<std::vector<std::array<double, 3>>> by_class;  // unit DOAs

  explicit FrameEvents(int classes = scene::kNumClasses)
      : by_class(static_cast<size_t>(classes)) {}
  void add(int class_id, const std::array<double, 3>& doa) {
    by_class.at(static_cast<size_t>(class_id)).push_back(doa);
  }
  bool empty() const {
    for (const auto& v : by_class)
      if (!v.empty()) return false;
    return true;
  }
};

struct ClassCounts {
  int64_t loc_tp = 0;   // matched pairs within 20 degrees
  int64_t fp = 0;       // unmatched predictions + matched pairs beyond 20
  int64_t fn = 0;       // unmatched references + matched pairs beyond 20
  int64_t n_ref = 0;    // reference instances
  int64_t matched = 0;  // class-matched pairs (any angle)
  double err_sum = 0;   // angular error summed over matched pairs
};

/// Mergeable metric accumulator: per-class counts plus frame-level S/D/I/N
/// sums for the micro error rate.
struct Accumulator {
  std::vector<ClassCounts> per_class;
  int64_t sum_s = 0, sum_d = 0, sum_i = 0, sum_n = 0;

  explicit Accumulator(int classes = scene::kNumClasses)
      : per_class(static_cast<size_t>(classes)) {}
  void merge(const Accumulator& o);
};

/// Per-frame, per-class Hungarian matching on angular cost. A matched pair is
/// a location-dependent TP iff its distance <= 20 degrees, otherwise it counts
/// as both FP and FN while still contributing its error to LE and its class
/// match to LR. Unmatched references are FNs, unmatched predictions FPs.
void match_frame(const FrameEvents& ref, const FrameEvents& pred, Accumulator& acc);

struct MetricsReport {
  double er20 = 0;
  double f20 = 0;
  double le_cd = 0;  // degrees
  double lr_cd = 0;
  double e_seld = 0;
  std::vector<ClassCounts> per_class;
};

/// ER micro over frames; F/LR/LE macro over classes with >= 1 reference
/// instance; classes with no matched pair contribute 180 degrees to LE.
/// Errors out when the accumulator holds no reference events.
MetricsReport finalize(const Accumulator& acc);

/// (er + (1 - f) + le/180 + (1 - lr)) / 4.
double e_seld(double er, double f, double le_deg, double lr);

/// Frame streams keyed by (clip_id, frame index).
using FrameStream = std::map<std::pair<std::string, int>, FrameEvents>;

FrameStream annotation_to_stream(const std::string& clip_id, const scene::Annotation& ann,
                                 int classes = scene::kNumClasses);

/// Accumulates all frames present in either stream.
void accumulate(const FrameStream& refs, const FrameStream& preds, Accumulator& acc);

/// Directory-tree evaluation: refs_dir and preds_dir hold <clip_id>.csv
/// annotation files; every clip with a predictions file is scored against its
/// reference. Returns per-room reports plus an "Overall" row obtained by
/// merging the room accumulators (count-weighted pooling).
std::vector<std::pair<std::string, MetricsReport>> evaluate_dirs(
    const std::string& refs_dir, const std::string& preds_dir,
    const std::vector<scene::ManifestRow>& manifest);

/// Writes rows `room,er20,f20,le_cd,lr_cd,e_seld` with a header line.
void save_metrics_csv(const std::vector<std::pair<std::string, MetricsReport>>& rows,
                      const std::string& path);
std::vector<std::pair<std::string, MetricsReport>> load_metrics_csv(const std::string& path);

}  // namespace metaseld::metrics
