#include "metaseld/scene.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "metaseld/common.hpp"
#include "metaseld/parallel.hpp"
#include "metaseld/wav.hpp"

namespace fs = std::filesystem;

namespace metaseld::scene {

namespace {
constexpr double kDeg = M_PI / 180.0;
constexpr int kFs = dsp::kSampleRate;
}  // namespace

std::vector<std::vector<float>> foa_encode(const std::vector<float>& mono, double azimuth_deg,
                                           double elevation_deg) {
  if (std::abs(elevation_deg) > 90.0 + 1e-9)
    fail_config("foa_encode: |elevation| > 90");
  const double az = azimuth_deg * kDeg, el = elevation_deg * kDeg;
  const float gw = 1.0f;
  const float gy = static_cast<float>(std::cos(el) * std::sin(az));
  const float gz = static_cast<float>(std::sin(el));
  const float gx = static_cast<float>(std::cos(el) * std::cos(az));
  std::vector<std::vector<float>> out(4, std::vector<float>(mono.size()));
  const float gains[4] = {gw, gy, gz, gx};
  for (int c = 0; c < 4; ++c)
    for (size_t i = 0; i < mono.size(); ++i) out[static_cast<size_t>(c)][i] = gains[c] * mono[i];
  return out;
}

namespace {

void apply_ramps(std::vector<float>& x) {
  const size_t ramp = std::min<size_t>(x.size() / 2, static_cast<size_t>(0.01 * kFs));
  for (size_t i = 0; i < ramp; ++i) {
    float g = 0.5f * (1.0f - std::cos(M_PI * static_cast<double>(i) / static_cast<double>(ramp)));
    x[i] *= g;
    x[x.size() - 1 - i] *= g;
  }
}

void normalize_rms(std::vector<float>& x, double target = 0.1) {
  double p = 0;
  for (float v : x) p += static_cast<double>(v) * v;
  p = std::sqrt(p / std::max<size_t>(1, x.size()));
  if (p < 1e-12) return;
  const float g = static_cast<float>(target / p);
  for (float& v : x) v *= g;
}

}  // namespace

std::vector<float> synth_event(int class_id, double duration, Rng& rng) {
  if (class_id < 0 || class_id >= kNumClasses)
    fail_config("synth_event: unknown class " + std::to_string(class_id));
  const int64_t n = static_cast<int64_t>(std::lround(duration * kFs));
  std::vector<float> x(static_cast<size_t>(n));
  const double dt = 1.0 / kFs;
  auto fill_tone = [&](double f0, double vib_hz, double vib_depth) {
    double phase = rng.uniform(0, 2 * M_PI);
    for (int64_t i = 0; i < n; ++i) {
      double f = f0 * (1.0 + vib_depth * std::sin(2 * M_PI * vib_hz * i * dt));
      phase += 2 * M_PI * f * dt;
      x[static_cast<size_t>(i)] = static_cast<float>(std::sin(phase));
    }
  };
  switch (class_id) {
    case 0:  // steady tone with slight vibrato
      fill_tone(rng.uniform(220, 420), rng.uniform(4, 7), 0.01);
      break;
    case 1: {  // harmonic stack, low f0
      double f0 = rng.uniform(100, 190);
      double phase[6];
      for (auto& p : phase) p = rng.uniform(0, 2 * M_PI);
      for (int64_t i = 0; i < n; ++i) {
        double s = 0;
        for (int h = 0; h < 6; ++h)
          s += std::sin(2 * M_PI * f0 * (h + 1) * i * dt + phase[h]) / (h + 1);
        x[static_cast<size_t>(i)] = static_cast<float>(s);
      }
      break;
    }
    case 2: {  // odd harmonics (square-ish)
      double f0 = rng.uniform(320, 520);
      for (int64_t i = 0; i < n; ++i) {
        double s = 0;
        for (int h = 1; h <= 9; h += 2) s += std::sin(2 * M_PI * f0 * h * i * dt) / h;
        x[static_cast<size_t>(i)] = static_cast<float>(s);
      }
      break;
    }
    case 3: {  // up-chirp
      double f0 = rng.uniform(300, 500), f1 = rng.uniform(2500, 3500);
      double phase = 0;
      for (int64_t i = 0; i < n; ++i) {
        double f = f0 + (f1 - f0) * i / static_cast<double>(n);
        phase += 2 * M_PI * f * dt;
        x[static_cast<size_t>(i)] = static_cast<float>(std::sin(phase));
      }
      break;
    }
    case 4: {  // down-chirp
      double f0 = rng.uniform(2500, 3500), f1 = rng.uniform(200, 400);
      double phase = 0;
      for (int64_t i = 0; i < n; ++i) {
        double f = f0 + (f1 - f0) * i / static_cast<double>(n);
        phase += 2 * M_PI * f * dt;
        x[static_cast<size_t>(i)] = static_cast<float>(std::sin(phase));
      }
      break;
    }
    case 5: {  // amplitude-modulated noise
      double fm = rng.uniform(4, 8);
      for (int64_t i = 0; i < n; ++i)
        x[static_cast<size_t>(i)] = static_cast<float>(
            rng.normal() * (0.55 + 0.45 * std::sin(2 * M_PI * fm * i * dt)));
      break;
    }
    case 6: {  // narrowband noise (noise-modulated carrier)
      double fc = rng.uniform(1500, 3000);
      double env = 0;
      for (int64_t i = 0; i < n; ++i) {
        env = 0.995 * env + 0.05 * rng.normal();
        x[static_cast<size_t>(i)] = static_cast<float>(env * std::sin(2 * M_PI * fc * i * dt));
      }
      break;
    }
    case 7: {  // click train
      double rate = rng.uniform(8, 14);
      int64_t period = static_cast<int64_t>(kFs / rate);
      for (int64_t i = 0; i < n; ++i) {
        int64_t k = i % period;
        x[static_cast<size_t>(i)] =
            k < 64 ? static_cast<float>(std::exp(-k / 12.0) * (k % 2 ? -1 : 1)) : 0.0f;
      }
      break;
    }
    case 8: {  // gated tone bursts
      double f0 = rng.uniform(600, 1000), gate = rng.uniform(2.5, 4.5);
      for (int64_t i = 0; i < n; ++i) {
        bool on = std::sin(2 * M_PI * gate * i * dt) > 0;
        x[static_cast<size_t>(i)] =
            on ? static_cast<float>(std::sin(2 * M_PI * f0 * i * dt)) : 0.0f;
      }
      break;
    }
    case 9: {  // siren (sinusoidal frequency sweep)
      double f0 = rng.uniform(700, 900), depth = rng.uniform(0.3, 0.5), rate = rng.uniform(1, 3);
      double phase = 0;
      for (int64_t i = 0; i < n; ++i) {
        double f = f0 * (1.0 + depth * std::sin(2 * M_PI * rate * i * dt));
        phase += 2 * M_PI * f * dt;
        x[static_cast<size_t>(i)] = static_cast<float>(std::sin(phase));
      }
      break;
    }
    case 10: {  // low rumble (leaky-integrated noise)
      double s = 0;
      for (int64_t i = 0; i < n; ++i) {
        s = 0.99 * s + rng.normal();
        x[static_cast<size_t>(i)] = static_cast<float>(s);
      }
      break;
    }
    case 11: {  // bell: inharmonic decaying partials
      double f0 = rng.uniform(400, 650);
      const double ratios[4] = {1.0, 2.76, 5.40, 8.93};
      for (int64_t i = 0; i < n; ++i) {
        double tsec = i * dt, s = 0;
        for (int pidx = 0; pidx < 4; ++pidx)
          s += std::exp(-tsec * (1.5 + pidx)) * std::sin(2 * M_PI * f0 * ratios[pidx] * tsec);
        x[static_cast<size_t>(i)] = static_cast<float>(s);
      }
      break;
    }
    case 12: {  // repeating short up-sweeps
      double rate = rng.uniform(4, 6);
      int64_t period = static_cast<int64_t>(kFs / rate);
      double phase = 0;
      for (int64_t i = 0; i < n; ++i) {
        double frac = static_cast<double>(i % period) / static_cast<double>(period);
        double f = 800 + 2200 * frac;
        phase += 2 * M_PI * f * dt;
        x[static_cast<size_t>(i)] = static_cast<float>(std::sin(phase) * (frac < 0.7 ? 1.0 : 0.0));
      }
      break;
    }
    default:
      fail_config("synth_event: unknown class " + std::to_string(class_id));
  }
  normalize_rms(x);
  apply_ramps(x);
  return x;
}

namespace {

// FFT convolution of x with kernel h (both mono), output length n_out.
std::vector<float> fft_convolve(const std::vector<float>& x, const std::vector<double>& h,
                                size_t n_out) {
  size_t need = x.size() + h.size();
  size_t nfft = 1;
  while (nfft < need) nfft <<= 1;
  std::vector<std::complex<double>> X(nfft), H(nfft);
  for (size_t i = 0; i < x.size(); ++i) X[i] = x[i];
  for (size_t i = 0; i < h.size(); ++i) H[i] = h[i];
  dsp::fft(X);
  dsp::fft(H);
  for (size_t i = 0; i < nfft; ++i) X[i] *= H[i];
  dsp::fft(X, true);
  std::vector<float> out(n_out, 0.0f);
  for (size_t i = 0; i < std::min(n_out, nfft); ++i) out[i] = static_cast<float>(X[i].real());
  return out;
}

int frames_in(double clip_seconds) {
  return static_cast<int>(std::floor(clip_seconds / kFrameSec + 1e-9));
}

// Active annotation frames for an event: >= 50% overlap with the 100 ms cell.
std::vector<int> active_frames(const EventSpec& ev, double clip_seconds) {
  std::vector<int> out;
  const int nf = frames_in(clip_seconds);
  for (int f = 0; f < nf; ++f) {
    double lo = f * kFrameSec, hi = lo + kFrameSec;
    double ov = std::min(hi, ev.onset + ev.duration) - std::max(lo, ev.onset);
    if (ov >= 0.5 * kFrameSec - 1e-12) out.push_back(f);
  }
  return out;
}

}  // namespace

std::pair<dsp::FoaClip, Annotation> render_scene(const RoomPreset& room,
                                                 const std::vector<EventSpec>& events,
                                                 double clip_seconds, Rng& rng) {
  const int64_t n = static_cast<int64_t>(std::lround(clip_seconds * kFs));
  const int nf = frames_in(clip_seconds);

  // polyphony check first
  std::vector<int> occupancy(static_cast<size_t>(nf), 0);
  for (const auto& ev : events) {
    if (ev.class_id < 0 || ev.class_id >= kNumClasses)
      fail_config("render_scene: unknown class " + std::to_string(ev.class_id));
    if (ev.onset + ev.duration > clip_seconds + 1e-9)
      fail_config("render_scene: event exceeds clip length");
    for (int f : active_frames(ev, clip_seconds)) occupancy[static_cast<size_t>(f)] += 1;
  }
  std::string bad;
  for (int f = 0; f < nf; ++f)
    if (occupancy[static_cast<size_t>(f)] > kPolyphonyCap) bad += (bad.empty() ? "" : ",") + std::to_string(f);
  if (!bad.empty()) fail_data("render_scene: polyphony cap exceeded at frames " + bad);

  dsp::FoaClip clip;
  clip.sample_rate = kFs;
  clip.room_id = room.room_id;
  clip.channels.assign(4, std::vector<float>(static_cast<size_t>(n), 0.0f));

  const int64_t tail_len =
      room.t60 > 1e-6 ? static_cast<int64_t>(std::lround(room.t60 * kFs)) : 0;
  const double decay = tail_len > 0 ? 6.907755278982137 / static_cast<double>(tail_len) : 0.0;
  // diffuse field: W full gain, dipole channels 1/sqrt(3)
  const double diffuse_ch_gain[4] = {1.0, 1.0 / std::sqrt(3.0), 1.0 / std::sqrt(3.0),
                                     1.0 / std::sqrt(3.0)};

  for (const auto& ev : events) {
    std::vector<float> mono = synth_event(ev.class_id, ev.duration, rng);
    const float lvl = static_cast<float>(std::pow(10.0, ev.level_db / 20.0));
    for (float& v : mono) v *= lvl;
    const int64_t at = static_cast<int64_t>(std::lround(ev.onset * kFs));
    auto enc = foa_encode(mono, ev.azimuth, ev.elevation);
    for (int c = 0; c < 4; ++c) {
      auto& dst = clip.channels[static_cast<size_t>(c)];
      const auto& src = enc[static_cast<size_t>(c)];
      for (size_t i = 0; i < src.size() && at + static_cast<int64_t>(i) < n; ++i)
        dst[static_cast<size_t>(at + static_cast<int64_t>(i))] += src[i];
    }
    if (tail_len > 0 && room.diffuse_gain > 1e-9) {
      for (int c = 0; c < 4; ++c) {
        std::vector<double> h(static_cast<size_t>(tail_len));
        double energy = 0;
        for (int64_t k = 0; k < tail_len; ++k) {
          h[static_cast<size_t>(k)] = rng.normal() * std::exp(-decay * static_cast<double>(k));
          energy += h[static_cast<size_t>(k)] * h[static_cast<size_t>(k)];
        }
        const double norm = room.diffuse_gain * diffuse_ch_gain[c] / std::sqrt(std::max(energy, 1e-12));
        for (auto& v : h) v *= norm;
        size_t span = std::min<size_t>(mono.size() + h.size(), static_cast<size_t>(n - at));
        auto tail = fft_convolve(mono, h, span);
        auto& dst = clip.channels[static_cast<size_t>(c)];
        for (size_t i = 0; i < tail.size(); ++i)
          dst[static_cast<size_t>(at) + i] += tail[i];
      }
    }
  }

  // background noise at snr_db relative to the rendered signal power
  double sig_power = 0;
  for (float v : clip.channels[0]) sig_power += static_cast<double>(v) * v;
  sig_power /= static_cast<double>(n);
  double noise_rms = events.empty() ? 0.01 : std::sqrt(sig_power * std::pow(10.0, -room.snr_db / 10.0));
  for (int c = 0; c < 4; ++c) {
    auto& ch = clip.channels[static_cast<size_t>(c)];
    const double g = noise_rms * diffuse_ch_gain[c];
    for (auto& v : ch) v += static_cast<float>(g * rng.normal());
  }

  // peak guard: keep samples within [-1, 1] without changing directions
  float peak = 0;
  for (const auto& ch : clip.channels)
    for (float v : ch) peak = std::max(peak, std::abs(v));
  if (peak > 0.99f) {
    const float g = 0.99f / peak;
    for (auto& ch : clip.channels)
      for (auto& v : ch) v *= g;
  }

  // annotation: per class, tracks ordered by onset
  Annotation ann;
  std::map<int, int> next_track;
  std::vector<const EventSpec*> sorted;
  for (const auto& ev : events) sorted.push_back(&ev);
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const EventSpec* a, const EventSpec* b) { return a->onset < b->onset; });
  for (const EventSpec* ev : sorted) {
    int track = next_track[ev->class_id]++;
    for (int f : active_frames(*ev, clip_seconds))
      ann.rows.push_back({f, ev->class_id, track, ev->azimuth, ev->elevation});
  }
  std::sort(ann.rows.begin(), ann.rows.end(), [](const AnnRow& a, const AnnRow& b) {
    return std::tie(a.frame, a.class_id, a.track) < std::tie(b.frame, b.class_id, b.track);
  });
  return {std::move(clip), std::move(ann)};
}

DatasetConfig default_rooms(DatasetConfig base) {
  // spread t60 / snr / diffuse so rooms are acoustically distinct
  struct P {
    double t60, snr, dif;
  };
  const P train[9] = {{0.05, 28, 0.05}, {0.20, 24, 0.15}, {0.35, 20, 0.25},
                      {0.50, 16, 0.35}, {0.65, 12, 0.45}, {0.80, 26, 0.10},
                      {0.95, 22, 0.20}, {1.10, 18, 0.30}, {0.40, 8, 0.40}};
  const P test[7] = {{0.10, 27, 0.08}, {0.30, 21, 0.22}, {0.55, 14, 0.38},
                     {0.75, 25, 0.12}, {0.90, 19, 0.28}, {1.05, 10, 0.42}, {0.25, 9, 0.18}};
  base.rooms_train.clear();
  base.rooms_test.clear();
  for (int i = 0; i < 9; ++i)
    base.rooms_train.push_back({"train_room" + std::to_string(i + 1), train[i].t60, train[i].snr,
                                train[i].dif, splitmix64(base.seed ^ (0x100 + i))});
  for (int i = 0; i < 7; ++i)
    base.rooms_test.push_back({"test_room" + std::to_string(i + 1), test[i].t60, test[i].snr,
                               test[i].dif, splitmix64(base.seed ^ (0x200 + i))});
  return base;
}

namespace {

std::vector<EventSpec> sample_events(const DatasetConfig& cfg, Rng& rng) {
  const int n_events = static_cast<int>(rng.uniform_int(cfg.events_min, cfg.events_max));
  const int nf = frames_in(cfg.clip_seconds);
  std::vector<int> occupancy(static_cast<size_t>(nf), 0);
  std::vector<EventSpec> events;
  for (int e = 0; e < n_events; ++e) {
    for (int attempt = 0; attempt < 40; ++attempt) {
      EventSpec ev;
      ev.class_id = static_cast<int>(rng.uniform_int(0, kNumClasses - 1));
      ev.duration = rng.uniform(0.8, std::min(4.0, cfg.clip_seconds));
      ev.onset = rng.uniform(0.0, cfg.clip_seconds - ev.duration);
      ev.azimuth = static_cast<double>(rng.uniform_int(-179, 180));
      ev.elevation = static_cast<double>(rng.uniform_int(-60, 60));
      ev.level_db = rng.uniform(-18.0, -6.0);
      auto frames = active_frames(ev, cfg.clip_seconds);
      bool ok = true;
      for (int f : frames)
        if (occupancy[static_cast<size_t>(f)] + 1 > kPolyphonyCap) {
          ok = false;
          break;
        }
      if (!ok) continue;
      for (int f : frames) occupancy[static_cast<size_t>(f)] += 1;
      events.push_back(ev);
      break;
    }
  }
  return events;
}

}  // namespace

void build_dataset(const DatasetConfig& cfg, const std::string& out_dir) {
  if (cfg.clips_per_room < 1) fail_config("build_dataset: clips_per_room < 1");
  fs::path root(out_dir);
  std::error_code ec;
  fs::create_directories(root / "wav", ec);
  if (ec) fail_data("cannot create dataset directory: " + (root / "wav").string());
  fs::create_directories(root / "ann", ec);
  if (ec) fail_data("cannot create dataset directory: " + (root / "ann").string());

  struct Job {
    const RoomPreset* room;
    std::string split;
    int clip_index;
    std::string clip_id;
  };
  std::vector<Job> jobs;
  std::vector<ManifestRow> manifest;
  auto add_room = [&](const RoomPreset& room, const std::string& split) {
    for (int k = 0; k < cfg.clips_per_room; ++k) {
      char buf[16];
      std::snprintf(buf, sizeof(buf), "%03d", k);
      std::string clip_id = room.room_id + "_clip" + buf;
      jobs.push_back({&room, split, k, clip_id});
      manifest.push_back({clip_id, room.room_id, split});
    }
  };
  for (const auto& r : cfg.rooms_train) add_room(r, "train");
  for (const auto& r : cfg.rooms_test) add_room(r, "test");

  parallel_for(static_cast<int64_t>(jobs.size()), [&](int64_t i) {
    const Job& job = jobs[static_cast<size_t>(i)];
    Rng rng = Rng::substream(cfg.seed ^ job.room->rng_seed, job.room->room_id,
                             static_cast<uint64_t>(job.clip_index));
    auto events = sample_events(cfg, rng);
    auto [clip, ann] = render_scene(*job.room, events, cfg.clip_seconds, rng);
    clip.clip_id = job.clip_id;
    dsp::write_wav(clip, (root / "wav" / (job.clip_id + ".wav")).string());
    save_annotation(ann, (root / "ann" / (job.clip_id + ".csv")).string());
  });

  save_manifest(manifest, (root / "manifest.csv").string());
}

void save_annotation(const Annotation& ann, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) fail_data("cannot open annotation for writing: " + path);
  for (const auto& r : ann.rows)
    os << r.frame << ',' << r.class_id << ',' << r.track << ',' << std::lround(r.azimuth) << ','
       << std::lround(r.elevation) << '\n';
  if (!os) fail_data("write failed for annotation: " + path);
}

Annotation load_annotation(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail_data("cannot open annotation: " + path);
  Annotation ann;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    AnnRow r;
    char c;
    std::istringstream ss(line);
    if (!(ss >> r.frame >> c >> r.class_id >> c >> r.track >> c >> r.azimuth >> c >> r.elevation))
      fail_data("bad annotation row at " + path + ":" + std::to_string(lineno));
    ann.rows.push_back(r);
  }
  return ann;
}

void save_manifest(const std::vector<ManifestRow>& rows, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) fail_data("cannot open manifest for writing: " + path);
  os << "clip_id,room_id,split\n";
  for (const auto& r : rows) os << r.clip_id << ',' << r.room_id << ',' << r.split << '\n';
  if (!os) fail_data("write failed for manifest: " + path);
}

std::vector<ManifestRow> load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail_data("cannot open manifest: " + path);
  std::vector<ManifestRow> rows;
  std::string line;
  bool first = true;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (first) {
      first = false;
      if (line == "clip_id,room_id,split") continue;
    }
    auto c1 = line.find(',');
    auto c2 = line.find(',', c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos)
      fail_data("bad manifest row in " + path + ": " + line);
    rows.push_back({line.substr(0, c1), line.substr(c1 + 1, c2 - c1 - 1), line.substr(c2 + 1)});
  }
  return rows;
}

}  // namespace metaseld::scene
