#include "metaseld/metaseld_c.h"

#include <cstring>
#include <string>

#include "metaseld/pipeline.hpp"

using metaseld::Error;
using metaseld::ErrCode;

struct mseld_config {
  metaseld::pipeline::RunConfig cfg;
};

namespace {

thread_local std::string g_last_error;

int run_guarded(const std::function<void()>& fn) {
  try {
    fn();
    g_last_error.clear();
    return MSELD_OK;
  } catch (const Error& e) {
    g_last_error = e.what();
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return MSELD_ERR_DATA;
  }
}

}  // namespace

extern "C" {

mseld_config* mseld_config_create(void) { return new mseld_config(); }

void mseld_config_destroy(mseld_config* cfg) { delete cfg; }

int mseld_config_load(mseld_config* cfg, const char* path) {
  if (!cfg || !path) {
    g_last_error = "null argument";
    return MSELD_ERR_CONFIG;
  }
  return run_guarded([&] { cfg->cfg.load_file(path); });
}

int mseld_config_set(mseld_config* cfg, const char* key, const char* value) {
  if (!cfg || !key || !value) {
    g_last_error = "null argument";
    return MSELD_ERR_CONFIG;
  }
  return run_guarded([&] { cfg->cfg.set(key, value); });
}

int mseld_config_get(const mseld_config* cfg, const char* key, char* buf, size_t buflen) {
  if (!cfg || !key || !buf || buflen == 0) {
    g_last_error = "null argument";
    return MSELD_ERR_CONFIG;
  }
  return run_guarded([&] {
    std::string v = cfg->cfg.str(key);
    std::strncpy(buf, v.c_str(), buflen - 1);
    buf[buflen - 1] = '\0';
  });
}

int mseld_synth_data(const mseld_config* cfg) {
  if (!cfg) {
    g_last_error = "null config";
    return MSELD_ERR_CONFIG;
  }
  return run_guarded([&] { metaseld::pipeline::cmd_synth_data(cfg->cfg); });
}

int mseld_extract_features(const mseld_config* cfg, long* written, long* skipped) {
  if (!cfg) {
    g_last_error = "null config";
    return MSELD_ERR_CONFIG;
  }
  return run_guarded([&] {
    auto stats = metaseld::pipeline::cmd_extract_features(cfg->cfg);
    if (written) *written = static_cast<long>(stats.written);
    if (skipped) *skipped = static_cast<long>(stats.skipped);
  });
}

int mseld_run(const mseld_config* cfg) {
  if (!cfg) {
    g_last_error = "null config";
    return MSELD_ERR_CONFIG;
  }
  return run_guarded([&] { metaseld::pipeline::cmd_run(cfg->cfg); });
}

int mseld_evaluate(const mseld_config* cfg, const char* refs_dir, const char* preds_dir,
                   const char* manifest_csv, const char* out_csv) {
  if (!cfg || !refs_dir || !preds_dir || !manifest_csv || !out_csv) {
    g_last_error = "null argument";
    return MSELD_ERR_CONFIG;
  }
  return run_guarded(
      [&] { metaseld::pipeline::cmd_evaluate(cfg->cfg, refs_dir, preds_dir, manifest_csv, out_csv); });
}

int mseld_report(const char* const* run_dirs, size_t n_runs, const char* out_dir) {
  if (!run_dirs || !out_dir) {
    g_last_error = "null argument";
    return MSELD_ERR_CONFIG;
  }
  return run_guarded([&] {
    std::vector<std::string> dirs;
    for (size_t i = 0; i < n_runs; ++i) dirs.emplace_back(run_dirs[i]);
    metaseld::pipeline::cmd_report(dirs, out_dir);
  });
}

const char* mseld_last_error(void) { return g_last_error.c_str(); }

const char* mseld_version(void) { return "0.1.0"; }

}  // extern "C"
