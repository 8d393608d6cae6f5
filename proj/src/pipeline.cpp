#include "metaseld/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;

namespace metaseld::pipeline {

namespace {

const std::map<std::string, std::string>& default_kv() {
  static const std::map<std::string, std::string> defaults = {
      {"dataset.out", "dataset"},
      {"dataset.rooms_train", "9"},
      {"dataset.rooms_test", "7"},
      {"dataset.clips_per_room", "20"},
      {"dataset.clip_seconds", "60"},
      {"dataset.events_min", "3"},
      {"dataset.events_max", "8"},
      {"features.cache", ""},  // empty: <dataset.out>/cache
      {"model.act_threshold", "0.5"},
      {"meta.rooms_per_batch", "4"},
      {"meta.samples_per_room", "64"},
      {"meta.k_support", "30"},
      {"meta.q_query", "34"},
      {"meta.inner_lr", "0.01"},
      {"meta.inner_steps", "5"},
      {"meta.meta_lr", "0.001"},
      {"meta.epochs", "150"},
      {"meta.meta_lr_flat_epochs", "100"},
      {"meta.meta_lr_decay_every", "20"},
      {"meta.meta_lr_decay", "0.9"},
      {"meta.second_order", "false"},
      {"meta.steps_per_epoch", "0"},
      {"meta.k_support_test", "30"},
      {"pretrain.lr1", "0.0003"},
      {"pretrain.epochs1", "70"},
      {"pretrain.lr2", "0.00003"},
      {"pretrain.epochs2", "20"},
      {"pretrain.batch_size", "4"},
      {"run.seed", "1"},
      {"run.condition", "pretrain"},
      {"run.out", "runs/run"},
      {"run.serial", "false"},
      {"run.threads", "0"},
      {"run.checkpoint_every", "10"},
      {"run.pretrain_dir", ""},
  };
  return defaults;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

RunConfig::RunConfig() : kv_(default_kv()) {}

void RunConfig::load_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail_config("cannot open config file: " + path);
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[' && line.back() == ']') {
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos)
      fail_config(path + ":" + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (section.empty()) fail_config(path + ":" + std::to_string(lineno) + ": key outside section");
    set(section + "." + key, value);
  }
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (!kv_.count(key)) fail_config("unknown config key: " + key);
  kv_[key] = value;
}

bool RunConfig::has(const std::string& key) const { return kv_.count(key) > 0; }

std::string RunConfig::str(const std::string& key) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) fail_config("unknown config key: " + key);
  return it->second;
}

int64_t RunConfig::integer(const std::string& key) const {
  const std::string v = str(key);
  try {
    size_t pos = 0;
    int64_t r = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    fail_config("config key " + key + " is not an integer: '" + v + "'");
  }
}

double RunConfig::real(const std::string& key) const {
  const std::string v = str(key);
  try {
    size_t pos = 0;
    double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    fail_config("config key " + key + " is not a number: '" + v + "'");
  }
}

bool RunConfig::boolean(const std::string& key) const {
  const std::string v = str(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  fail_config("config key " + key + " is not a boolean: '" + v + "'");
}

std::string RunConfig::serialize() const {
  std::ostringstream os;
  std::string section;
  for (const auto& [key, value] : kv_) {
    auto dot = key.find('.');
    std::string sec = key.substr(0, dot);
    if (sec != section) {
      if (!section.empty()) os << '\n';
      os << '[' << sec << "]\n";
      section = sec;
    }
    os << key.substr(dot + 1) << " = " << value << '\n';
  }
  return os.str();
}

meta::MetaConfig RunConfig::meta_config() const {
  meta::MetaConfig m;
  m.rooms_per_batch = static_cast<int>(integer("meta.rooms_per_batch"));
  m.samples_per_room = static_cast<int>(integer("meta.samples_per_room"));
  m.k_support = static_cast<int>(integer("meta.k_support"));
  m.q_query = static_cast<int>(integer("meta.q_query"));
  m.inner_lr = real("meta.inner_lr");
  m.inner_steps = static_cast<int>(integer("meta.inner_steps"));
  m.meta_lr = real("meta.meta_lr");
  m.epochs = static_cast<int>(integer("meta.epochs"));
  m.meta_lr_flat_epochs = static_cast<int>(integer("meta.meta_lr_flat_epochs"));
  m.meta_lr_decay_every = static_cast<int>(integer("meta.meta_lr_decay_every"));
  m.meta_lr_decay = real("meta.meta_lr_decay");
  m.second_order = boolean("meta.second_order");
  m.steps_per_epoch = static_cast<int>(integer("meta.steps_per_epoch"));
  m.k_support_test = static_cast<int>(integer("meta.k_support_test"));
  m.validate();
  return m;
}

meta::PretrainConfig RunConfig::pretrain_config() const {
  meta::PretrainConfig p;
  p.lr1 = real("pretrain.lr1");
  p.epochs1 = static_cast<int>(integer("pretrain.epochs1"));
  p.lr2 = real("pretrain.lr2");
  p.epochs2 = static_cast<int>(integer("pretrain.epochs2"));
  p.batch_size = static_cast<int>(integer("pretrain.batch_size"));
  if (p.batch_size < 1 || p.epochs1 < 0 || p.epochs2 < 0 || p.lr1 <= 0 || p.lr2 <= 0)
    fail_config("invalid pretrain config");
  return p;
}

scene::DatasetConfig RunConfig::dataset_config() const {
  scene::DatasetConfig d;
  d.clips_per_room = static_cast<int>(integer("dataset.clips_per_room"));
  d.clip_seconds = real("dataset.clip_seconds");
  d.events_min = static_cast<int>(integer("dataset.events_min"));
  d.events_max = static_cast<int>(integer("dataset.events_max"));
  d.seed = static_cast<uint64_t>(integer("run.seed"));
  if (d.clip_seconds < 5.0) fail_config("dataset.clip_seconds must be >= 5");
  if (d.events_min < 0 || d.events_max < d.events_min) fail_config("invalid event count range");

  const int n_train = static_cast<int>(integer("dataset.rooms_train"));
  const int n_test = static_cast<int>(integer("dataset.rooms_test"));
  if (n_train < 1 || n_test < 0) fail_config("invalid room counts");
  if (n_train == 9 && n_test == 7) {
    d = scene::default_rooms(d);
  } else {
    auto make_room = [&](const std::string& id, int i, int n, uint64_t salt) {
      double frac = n > 1 ? static_cast<double>(i) / (n - 1) : 0.5;
      Rng rng = Rng::substream(d.seed ^ salt, id);
      scene::RoomPreset r;
      r.room_id = id;
      r.t60 = 0.05 + 1.05 * frac + rng.uniform(-0.03, 0.03);
      r.t60 = std::clamp(r.t60, 0.0, 1.2);
      r.snr_db = 28.0 - 20.0 * ((i * 5) % n) / std::max(1, n - 1);
      r.snr_db = std::clamp(r.snr_db, 6.0, 30.0);
      r.diffuse_gain = 0.05 + 0.4 * ((i * 3) % n) / std::max(1, n - 1);
      r.diffuse_gain = std::clamp(r.diffuse_gain, 0.0, 0.5);
      r.rng_seed = splitmix64(d.seed ^ salt ^ static_cast<uint64_t>(i));
      return r;
    };
    for (int i = 0; i < n_train; ++i)
      d.rooms_train.push_back(make_room("train_room" + std::to_string(i + 1), i, n_train, 0x11));
    for (int i = 0; i < n_test; ++i)
      d.rooms_test.push_back(make_room("test_room" + std::to_string(i + 1), i, n_test, 0x22));
  }
  return d;
}

void RunConfig::apply_parallelism() const {
  if (boolean("run.serial")) {
    worker_threads() = 1;
    return;
  }
  int threads = static_cast<int>(integer("run.threads"));
  if (threads <= 0) threads = static_cast<int>(std::thread::hardware_concurrency());
  worker_threads() = std::max(1, threads);
}

uint64_t hash_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail_data("cannot open file for hashing: " + path);
  uint64_t h = 0xcbf29ce484222325ULL;
  char buf[65536];
  while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
    std::streamsize n = is.gcount();
    for (std::streamsize i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
    if (!is) break;
  }
  return h;
}

std::string dataset_hash(const std::string& dataset_dir) {
  fs::path root(dataset_dir);
  if (!fs::exists(root / "manifest.csv")) fail_data("not a dataset directory: " + dataset_dir);
  uint64_t h = hash_file((root / "manifest.csv").string());
  auto manifest = scene::load_manifest((root / "manifest.csv").string());
  for (const auto& row : manifest) {
    h = splitmix64(h ^ hash_file((root / "ann" / (row.clip_id + ".csv")).string()));
    h = splitmix64(h ^ hash_file((root / "wav" / (row.clip_id + ".wav")).string()));
  }
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void cmd_synth_data(const RunConfig& cfg) {
  cfg.apply_parallelism();
  scene::build_dataset(cfg.dataset_config(), cfg.str("dataset.out"));
}

namespace {

std::string cache_dir_of(const RunConfig& cfg) {
  std::string c = cfg.str("features.cache");
  if (!c.empty()) return c;
  return (fs::path(cfg.str("dataset.out")) / "cache").string();
}

std::string seg_file_name(const std::string& clip_id, int seg) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%03d", seg);
  return clip_id + ".seg" + buf + ".msld";
}

}  // namespace

ExtractStats cmd_extract_features(const RunConfig& cfg) {
  cfg.apply_parallelism();
  const fs::path dataset(cfg.str("dataset.out"));
  const fs::path cache(cache_dir_of(cfg));
  if (!fs::exists(dataset / "manifest.csv"))
    fail_data("not a dataset directory (missing manifest.csv): " + dataset.string());
  std::error_code ec;
  fs::create_directories(cache, ec);
  if (ec) fail_data("cannot create cache directory: " + cache.string());

  auto manifest = scene::load_manifest((dataset / "manifest.csv").string());

  // idempotency index: clip_id,wav_hash
  const fs::path index_path = cache / "index.csv";
  std::map<std::string, std::string> old_index;
  if (fs::exists(index_path)) {
    std::ifstream is(index_path);
    std::string line;
    while (std::getline(is, line)) {
      auto c = line.find(',');
      if (c != std::string::npos) old_index[line.substr(0, c)] = line.substr(c + 1);
    }
  }

  std::vector<ExtractStats> per_clip(manifest.size());
  std::vector<std::string> hashes(manifest.size());
  parallel_for(static_cast<int64_t>(manifest.size()), [&](int64_t i) {
    const auto& row = manifest[static_cast<size_t>(i)];
    const std::string wav_path = (dataset / "wav" / (row.clip_id + ".wav")).string();
    char hbuf[20];
    std::snprintf(hbuf, sizeof(hbuf), "%016llx",
                  static_cast<unsigned long long>(hash_file(wav_path)));
    hashes[static_cast<size_t>(i)] = hbuf;

    dsp::FoaClip clip = dsp::read_wav(wav_path);
    if (clip.sample_rate != dsp::kSampleRate)
      fail_data("unexpected sample rate in " + wav_path);
    const int n_segments = static_cast<int>(clip.n_samples() / dsp::kSegmentSamples);
    auto it = old_index.find(row.clip_id);
    bool fresh = it != old_index.end() && it->second == hashes[static_cast<size_t>(i)];
    if (fresh) {
      for (int s = 0; s < n_segments; ++s)
        if (!fs::exists(cache / seg_file_name(row.clip_id, s))) {
          fresh = false;
          break;
        }
    }
    if (fresh) {
      per_clip[static_cast<size_t>(i)].skipped = n_segments;
      return;
    }
    for (int s = 0; s < n_segments; ++s) {
      dsp::FoaClip seg;
      seg.sample_rate = clip.sample_rate;
      seg.room_id = row.room_id;
      seg.clip_id = row.clip_id;
      seg.channels.resize(4);
      for (int c = 0; c < 4; ++c)
        seg.channels[static_cast<size_t>(c)].assign(
            clip.channels[static_cast<size_t>(c)].begin() + static_cast<int64_t>(s) * dsp::kSegmentSamples,
            clip.channels[static_cast<size_t>(c)].begin() +
                static_cast<int64_t>(s + 1) * dsp::kSegmentSamples);
      dsp::FeatureTensor feat = dsp::extract_features(seg);
      dsp::save_features(feat, (cache / seg_file_name(row.clip_id, s)).string());
      per_clip[static_cast<size_t>(i)].written += 1;
    }
  });

  std::ofstream os(index_path, std::ios::trunc);
  if (!os) fail_data("cannot write cache index: " + index_path.string());
  for (size_t i = 0; i < manifest.size(); ++i) os << manifest[i].clip_id << ',' << hashes[i] << '\n';

  ExtractStats total;
  for (const auto& s : per_clip) {
    total.written += s.written;
    total.skipped += s.skipped;
  }
  return total;
}

DataIndex load_data_index(const std::string& dataset_dir, const std::string& cache_dir,
                          const model::CrnnConfig& model_cfg) {
  const fs::path dataset(dataset_dir);
  const fs::path cache(cache_dir);
  auto manifest = scene::load_manifest((dataset / "manifest.csv").string());
  std::sort(manifest.begin(), manifest.end(),
            [](const scene::ManifestRow& a, const scene::ManifestRow& b) {
              return a.clip_id < b.clip_id;  // clips sorted by filename
            });
  DataIndex index;
  std::map<std::string, meta::RoomSegments*> rooms;
  auto room_of = [&](const std::string& room_id, bool is_test) {
    auto it = rooms.find(room_id);
    if (it != rooms.end()) return it->second;
    auto& list = is_test ? index.test_rooms : index.train_rooms;
    list.push_back({room_id, {}});
    rooms[room_id] = &list.back();
    return &list.back();
  };
  // two passes so pointers into the vectors stay valid
  std::vector<std::string> train_ids, test_ids;
  for (const auto& row : manifest) {
    auto& ids = row.split == "test" ? test_ids : train_ids;
    if (std::find(ids.begin(), ids.end(), row.room_id) == ids.end()) ids.push_back(row.room_id);
  }
  index.train_rooms.reserve(train_ids.size());
  index.test_rooms.reserve(test_ids.size());

  for (const auto& row : manifest) {
    const bool is_test = row.split == "test";
    meta::RoomSegments* room = room_of(row.room_id, is_test);
    scene::Annotation ann = scene::load_annotation((dataset / "ann" / (row.clip_id + ".csv")).string());
    int seg = 0;
    while (true) {
      fs::path feat = cache / seg_file_name(row.clip_id, seg);
      if (!fs::exists(feat)) break;
      meta::SegmentRef ref;
      ref.clip_id = row.clip_id;
      ref.seg_index = seg;
      ref.seg_start_frame = seg * model::kLabelFrames;
      ref.feat_path = feat.string();
      ref.target = model::make_targets(ann, ref.seg_start_frame, model_cfg.classes,
                                       model_cfg.out_frames());
      room->segments.push_back(std::move(ref));
      ++seg;
    }
    if (seg == 0) fail_data("no cached features for clip " + row.clip_id + "; run extract-features");
    index.annotations[row.clip_id] = std::move(ann);
  }
  return index;
}

namespace {

void write_text_file(const fs::path& path, const std::string& content) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) fail_data("cannot write " + path.string());
  os << content;
  if (!os) fail_data("write failed for " + path.string());
}

std::string read_text_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) fail_data("cannot read " + path.string());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

struct RunDirs {
  fs::path root, checkpoints, preds;
};

RunDirs prepare_run_dir(const RunConfig& cfg) {
  RunDirs d;
  d.root = cfg.str("run.out");
  d.checkpoints = d.root / "checkpoints";
  d.preds = d.root / "preds";
  std::error_code ec;
  fs::create_directories(d.checkpoints, ec);
  if (ec) fail_data("cannot create run directory: " + d.root.string());
  fs::create_directories(d.preds, ec);
  if (ec) fail_data("cannot create run directory: " + d.preds.string());
  // config snapshot before any compute
  write_text_file(d.root / "config.snapshot", cfg.serialize());
  write_text_file(d.root / "dataset.hash", dataset_hash(cfg.str("dataset.out")) + "\n");
  return d;
}

void write_predictions(const fs::path& preds_dir,
                       const std::map<std::string, scene::Annotation>& preds) {
  for (const auto& [clip_id, ann] : preds)
    scene::save_annotation(ann, (preds_dir / (clip_id + ".csv")).string());
}

/// Evaluates theta on every test room with the given adaptation step count,
/// writing metrics.csv (per room + Overall) and prediction CSVs.
void evaluate_conditions(const nn::ParamSet<float>& theta, const DataIndex& data,
                         const model::CrnnConfig& model_cfg, meta::MetaConfig mcfg,
                         double act_threshold, const RunDirs& dirs, std::ostream* log) {
  std::vector<std::pair<std::string, metrics::MetricsReport>> rows;
  metrics::Accumulator overall(model_cfg.classes);
  for (const auto& room : data.test_rooms) {
    meta::MetaTestResult res =
        meta::meta_test(theta, room, data.annotations, model_cfg, mcfg, act_threshold);
    rows.emplace_back(room.room_id, res.report);
    overall.merge(res.acc);
    write_predictions(dirs.preds, res.predictions);
    if (log)
      *log << room.room_id << ',' << res.support_loss_before << ',' << res.support_loss_after << ','
           << res.query_loss_before << ',' << res.query_loss_after << '\n';
  }
  std::sort(rows.begin(), rows.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  rows.emplace_back("Overall", metrics::finalize(overall));
  metrics::save_metrics_csv(rows, (dirs.root / "metrics.csv").string());
}

void run_pretrain(const RunConfig& cfg, const DataIndex& data, const model::CrnnConfig& model_cfg,
                  const RunDirs& dirs) {
  auto pcfg = cfg.pretrain_config();
  const uint64_t seed = static_cast<uint64_t>(cfg.integer("run.seed"));
  Rng init_rng = Rng::substream(seed, "init");
  Rng shuffle_rng = Rng::substream(seed, "pretrain-shuffle");
  nn::ParamSet<float> params = model::init_params<float>(model_cfg, init_rng);
  auto loss_fn = meta::crnn_loss_fn(model_cfg);
  std::vector<meta::RoomSamples<float>> rooms;
  for (const auto& r : data.train_rooms) rooms.push_back(meta::room_samples(r));

  std::ofstream log(dirs.root / "log.csv", std::ios::trunc);
  log << "epoch,train_loss\n";
  const int ckpt_every = static_cast<int>(cfg.integer("run.checkpoint_every"));
  params = meta::pretrain<float>(
      loss_fn, std::move(params), rooms, pcfg, shuffle_rng,
      [&](int epoch, const nn::ParamSet<float>& p, double loss) {
        log << epoch << ',' << loss << '\n';
        log.flush();
        if (ckpt_every > 0 && (epoch + 1) % ckpt_every == 0) {
          char buf[32];
          std::snprintf(buf, sizeof(buf), "epoch_%04d.msps", epoch + 1);
          nn::save_checkpoint(p, (dirs.checkpoints / buf).string());
        }
      });
  nn::save_checkpoint(params, (dirs.checkpoints / "final.msps").string());

  // the Pre-train condition: evaluation with zero adaptation steps
  meta::MetaConfig mcfg = cfg.meta_config();
  mcfg.inner_steps = 0;
  evaluate_conditions(params, data, model_cfg, mcfg, cfg.real("model.act_threshold"), dirs,
                      nullptr);
}

void run_finetune(const RunConfig& cfg, const DataIndex& data, const model::CrnnConfig& model_cfg,
                  const RunDirs& dirs) {
  const std::string pre_dir = cfg.str("run.pretrain_dir");
  if (pre_dir.empty()) fail_config("finetune requires run.pretrain_dir");
  nn::ParamSet<float> theta =
      nn::load_checkpoint((fs::path(pre_dir) / "checkpoints" / "final.msps").string());
  // refuse to fine-tune against a different dataset
  const std::string pre_hash = read_text_file(fs::path(pre_dir) / "dataset.hash");
  const std::string own_hash = read_text_file(dirs.root / "dataset.hash");
  if (pre_hash != own_hash)
    fail_data("dataset hash mismatch between pretrain run and current dataset");

  std::ofstream log(dirs.root / "log.csv", std::ios::trunc);
  log << "room,support_loss_before,support_loss_after,query_loss_before,query_loss_after\n";
  evaluate_conditions(theta, data, model_cfg, cfg.meta_config(),
                      cfg.real("model.act_threshold"), dirs, &log);
}

void run_meta(const RunConfig& cfg, const DataIndex& data, const model::CrnnConfig& model_cfg,
              const RunDirs& dirs) {
  meta::MetaConfig mcfg = cfg.meta_config();
  const uint64_t seed = static_cast<uint64_t>(cfg.integer("run.seed"));
  Rng init_rng = Rng::substream(seed, "init");
  Rng task_rng = Rng::substream(seed, "task-sampling");
  nn::ParamSet<float> theta = model::init_params<float>(model_cfg, init_rng);
  auto loss_fn = meta::crnn_loss_fn(model_cfg);
  std::vector<meta::RoomSamples<float>> rooms;
  int64_t total_segments = 0;
  for (const auto& r : data.train_rooms) {
    rooms.push_back(meta::room_samples(r));
    total_segments += static_cast<int64_t>(r.segments.size());
  }
  int steps_per_epoch = mcfg.steps_per_epoch;
  if (steps_per_epoch <= 0)
    steps_per_epoch = std::max<int>(
        1, static_cast<int>(total_segments /
                            (static_cast<int64_t>(mcfg.rooms_per_batch) * mcfg.samples_per_room)));

  std::ofstream log(dirs.root / "log.csv", std::ios::trunc);
  log << "epoch,step,meta_lr,meta_loss";
  for (int t = 0; t < mcfg.rooms_per_batch; ++t) log << ",task" << (t + 1) << "_loss";
  log << '\n';

  nn::AdamWState<float> opt_state;
  const int ckpt_every = static_cast<int>(cfg.integer("run.checkpoint_every"));
  for (int epoch = 0; epoch < mcfg.epochs; ++epoch) {
    const double lr = mcfg.meta_lr_at(epoch);
    for (int step = 0; step < steps_per_epoch; ++step) {
      auto tasks = meta::sample_task_batch(rooms, mcfg, task_rng);
      meta::MetaStepLogs logs;
      theta = meta::meta_step(loss_fn, theta, tasks, mcfg, lr, opt_state, &logs);
      log << epoch << ',' << step << ',' << lr << ',' << logs.meta_loss;
      for (double l : logs.task_losses) log << ',' << l;
      log << '\n';
      log.flush();
    }
    if (ckpt_every > 0 && (epoch + 1) % ckpt_every == 0) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "epoch_%04d.msps", epoch + 1);
      nn::save_checkpoint(theta, (dirs.checkpoints / buf).string());
    }
  }
  nn::save_checkpoint(theta, (dirs.checkpoints / "final.msps").string());
  evaluate_conditions(theta, data, model_cfg, mcfg, cfg.real("model.act_threshold"), dirs,
                      nullptr);
}

}  // namespace

void cmd_run(const RunConfig& cfg) {
  cfg.apply_parallelism();
  const std::string condition = cfg.str("run.condition");
  if (condition != "pretrain" && condition != "finetune" && condition != "meta")
    fail_config("run.condition must be pretrain, finetune or meta; got '" + condition + "'");
  const double thr = cfg.real("model.act_threshold");
  if (thr <= 0.0 || thr >= 1.0) fail_config("model.act_threshold must be in (0,1)");

  model::CrnnConfig model_cfg;
  DataIndex data = load_data_index(cfg.str("dataset.out"), cache_dir_of(cfg), model_cfg);
  if (data.test_rooms.empty()) fail_data("dataset has no test rooms");
  RunDirs dirs = prepare_run_dir(cfg);
  if (condition == "pretrain")
    run_pretrain(cfg, data, model_cfg, dirs);
  else if (condition == "finetune")
    run_finetune(cfg, data, model_cfg, dirs);
  else
    run_meta(cfg, data, model_cfg, dirs);
}

void cmd_evaluate(const RunConfig& cfg, const std::string& refs_dir, const std::string& preds_dir,
                  const std::string& manifest_csv, const std::string& out_csv) {
  cfg.apply_parallelism();
  auto manifest = scene::load_manifest(manifest_csv);
  auto rows = metrics::evaluate_dirs(refs_dir, preds_dir, manifest);
  metrics::save_metrics_csv(rows, out_csv);
}

void write_line_plot_svg(const std::string& path, const std::string& title,
                         const std::vector<std::pair<std::string, std::vector<double>>>& series) {
  const int W = 720, H = 360, ml = 60, mr = 20, mt = 40, mb = 40;
  double lo = 0, hi = 1;
  size_t max_n = 1;
  bool first = true;
  for (const auto& [name, ys] : series)
    for (double y : ys) {
      if (first) {
        lo = hi = y;
        first = false;
      }
      lo = std::min(lo, y);
      hi = std::max(hi, y);
    }
  for (const auto& [name, ys] : series) max_n = std::max(max_n, ys.size());
  if (hi - lo < 1e-12) hi = lo + 1;
  const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

  std::ostringstream os;
  os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
  os << "<rect width='100%' height='100%' fill='white'/>\n";
  os << "<text x='" << W / 2 << "' y='20' text-anchor='middle' font-family='sans-serif' "
        "font-size='14'>"
     << title << "</text>\n";
  os << "<line x1='" << ml << "' y1='" << H - mb << "' x2='" << W - mr << "' y2='" << H - mb
     << "' stroke='black'/>\n";
  os << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << H - mb
     << "' stroke='black'/>\n";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4g", hi);
  os << "<text x='" << ml - 6 << "' y='" << mt + 4
     << "' text-anchor='end' font-family='sans-serif' font-size='11'>" << buf << "</text>\n";
  std::snprintf(buf, sizeof(buf), "%.4g", lo);
  os << "<text x='" << ml - 6 << "' y='" << H - mb
     << "' text-anchor='end' font-family='sans-serif' font-size='11'>" << buf << "</text>\n";
  int si = 0;
  for (const auto& [name, ys] : series) {
    if (ys.empty()) continue;
    os << "<polyline fill='none' stroke='" << colors[si % 6] << "' stroke-width='1.5' points='";
    for (size_t i = 0; i < ys.size(); ++i) {
      double x = ml + (W - ml - mr) * (max_n > 1 ? static_cast<double>(i) / (max_n - 1) : 0.5);
      double y = H - mb - (H - mt - mb) * (ys[i] - lo) / (hi - lo);
      os << x << ',' << y << ' ';
    }
    os << "'/>\n";
    os << "<text x='" << W - mr - 5 << "' y='" << mt + 14 * (si + 1)
       << "' text-anchor='end' font-family='sans-serif' font-size='11' fill='" << colors[si % 6]
       << "'>" << name << "</text>\n";
    ++si;
  }
  os << "</svg>\n";
  write_text_file(path, os.str());
}

void cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_dir) {
  if (run_dirs.empty()) fail_config("report: no run directories given");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) fail_data("cannot create report directory: " + out_dir);

  struct RunInfo {
    std::string condition;
    std::string hash;
    std::vector<std::pair<std::string, metrics::MetricsReport>> metrics;
    std::vector<double> curve;
  };
  std::vector<RunInfo> runs;
  for (const auto& dir : run_dirs) {
    RunInfo info;
    RunConfig snap;
    snap.load_file((fs::path(dir) / "config.snapshot").string());
    info.condition = snap.str("run.condition");
    info.hash = read_text_file(fs::path(dir) / "dataset.hash");
    info.metrics = metrics::load_metrics_csv((fs::path(dir) / "metrics.csv").string());
    // training curve: last numeric column of log.csv (loss)
    std::ifstream log(fs::path(dir) / "log.csv");
    std::string line;
    bool first = true;
    int loss_col = -1;
    while (std::getline(log, line)) {
      if (line.empty()) continue;
      std::vector<std::string> cells;
      std::istringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) cells.push_back(cell);
      if (first) {
        first = false;
        for (size_t i = 0; i < cells.size(); ++i)
          if (cells[i] == "train_loss" || cells[i] == "meta_loss") loss_col = static_cast<int>(i);
        continue;
      }
      if (loss_col >= 0 && loss_col < static_cast<int>(cells.size()))
        info.curve.push_back(std::stod(cells[static_cast<size_t>(loss_col)]));
    }
    runs.push_back(std::move(info));
  }
  for (const auto& r : runs)
    if (r.hash != runs[0].hash)
      fail_data("report: refusing to merge runs with different dataset hashes");

  // wide table: per metric, one column per condition, Table-2 style
  std::vector<std::string> rooms;
  for (const auto& [room, rep] : runs[0].metrics)
    if (room != "Overall") rooms.push_back(room);
  std::sort(rooms.begin(), rooms.end());
  rooms.push_back("Overall");

  const char* metric_names[5] = {"er20", "f20", "le_cd", "lr_cd", "e_seld"};
  std::ofstream os(fs::path(out_dir) / "report.csv", std::ios::trunc);
  if (!os) fail_data("cannot write report.csv");
  os << "room";
  for (const char* m : metric_names)
    for (const auto& r : runs) os << ',' << m << '_' << r.condition;
  os << '\n';
  os.setf(std::ios::fixed);
  os.precision(6);
  for (const auto& room : rooms) {
    os << room;
    for (int m = 0; m < 5; ++m)
      for (const auto& r : runs) {
        const metrics::MetricsReport* rep = nullptr;
        for (const auto& [rm, mr] : r.metrics)
          if (rm == room) rep = &mr;
        if (!rep) {
          os << ",";
          continue;
        }
        const double vals[5] = {rep->er20, rep->f20, rep->le_cd, rep->lr_cd, rep->e_seld};
        os << ',' << vals[m];
      }
    os << '\n';
  }

  std::vector<std::pair<std::string, std::vector<double>>> series;
  for (const auto& r : runs)
    if (!r.curve.empty()) series.emplace_back(r.condition, r.curve);
  if (!series.empty())
    write_line_plot_svg((fs::path(out_dir) / "training_curves.svg").string(), "training loss",
                        series);
}

}  // namespace metaseld::pipeline
