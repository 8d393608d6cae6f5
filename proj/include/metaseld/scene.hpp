#pragma once

#include <string>
#include <vector>

#include "metaseld/dsp.hpp"
#include "metaseld/rng.hpp"

namespace metaseld::scene {

constexpr int kNumClasses = 13;
constexpr int kPolyphonyCap = 3;
constexpr double kFrameSec = 0.1;  // annotation grid

/// Parametric stand-in for a recording room. Rooms differ in reverberation
/// time, noise floor and diffuse-to-direct ratio; that difference is what
/// makes rooms distinct tasks.
struct RoomPreset {
  std::string room_id;
  double t60 = 0.3;           // seconds, [0, 1.2]
  double snr_db = 20.0;       // [6, 30]
  double diffuse_gain = 0.2;  // linear, [0, 0.5]
  uint64_t rng_seed = 0;
};

struct EventSpec {
  int class_id = 0;          // [0, 12]
  double onset = 0.0;        // seconds
  double duration = 1.0;     // seconds
  double azimuth = 0.0;      // degrees, (-180, 180]
  double elevation = 0.0;    // degrees, [-90, 90]
  double level_db = -12.0;   // relative to unit RMS
};

struct AnnRow {
  int frame = 0;  // 100 ms grid index
  int class_id = 0;
  int track = 0;
  double azimuth = 0.0;
  double elevation = 0.0;
};

struct Annotation {
  std::vector<AnnRow> rows;
};

/// ACN/SN3D panning gains: W = 1, Y = cos(el)sin(az), Z = sin(el),
/// X = cos(el)cos(az). Returns [4][n].
std::vector<std::vector<float>> foa_encode(const std::vector<float>& mono, double azimuth_deg,
                                           double elevation_deg);

/// Deterministic parametric event waveform; each class id draws from a
/// distinct template family so classes are spectrally separable.
std::vector<float> synth_event(int class_id, double duration, Rng& rng);

/// Renders events into a FOA clip: direct-path encoding plus an isotropic
/// exponentially decaying diffuse tail (rate from t60) plus background noise
/// at snr_db. Annotation marks every 100 ms frame with >= 50% event overlap.
/// Throws if the polyphony cap is violated, listing the offending frames.
std::pair<dsp::FoaClip, Annotation> render_scene(const RoomPreset& room,
                                                 const std::vector<EventSpec>& events,
                                                 double clip_seconds, Rng& rng);

struct DatasetConfig {
  std::vector<RoomPreset> rooms_train;
  std::vector<RoomPreset> rooms_test;
  int clips_per_room = 20;
  double clip_seconds = 60.0;
  int events_min = 3;
  int events_max = 8;
  uint64_t seed = 1;
};

/// Default 9 train + 7 test rooms spanning the t60/snr/diffuse ranges.
DatasetConfig default_rooms(DatasetConfig base);

/// Writes wav/<clip>.wav, ann/<clip>.csv and manifest.csv under out_dir.
/// Fully reproducible from cfg.seed; per-clip RNG substreams make parallel
/// rendering order-independent.
void build_dataset(const DatasetConfig& cfg, const std::string& out_dir);

// Annotation CSV: header-less `frame,class,track,azimuth,elevation` rows
// (azimuth/elevation rounded to integer degrees).
void save_annotation(const Annotation& ann, const std::string& path);
Annotation load_annotation(const std::string& path);

struct ManifestRow {
  std::string clip_id;
  std::string room_id;
  std::string split;  // "train" | "test"
};
void save_manifest(const std::vector<ManifestRow>& rows, const std::string& path);
std::vector<ManifestRow> load_manifest(const std::string& path);

}  // namespace metaseld::scene
