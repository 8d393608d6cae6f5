// metaseld command-line front end. All heavy lifting happens behind the C API
// of the shared library; this binary only parses arguments.

#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "metaseld/metaseld_c.h"

namespace {

struct ConfigHandle {
  mseld_config* cfg = mseld_config_create();
  ~ConfigHandle() { mseld_config_destroy(cfg); }
};

int fail(int code) {
  std::fprintf(stderr, "error: %s\n", mseld_last_error());
  return code;
}

int apply_common(mseld_config* cfg, const std::string& config_path, const std::string& seed,
                 const std::string& out, bool serial, int threads, const std::string& condition) {
  int rc;
  if (!config_path.empty() && (rc = mseld_config_load(cfg, config_path.c_str())) != MSELD_OK)
    return rc;
  if (!seed.empty() && (rc = mseld_config_set(cfg, "run.seed", seed.c_str())) != MSELD_OK)
    return rc;
  if (!out.empty() && (rc = mseld_config_set(cfg, "run.out", out.c_str())) != MSELD_OK) return rc;
  if (serial && (rc = mseld_config_set(cfg, "run.serial", "true")) != MSELD_OK) return rc;
  if (threads > 0 &&
      (rc = mseld_config_set(cfg, "run.threads", std::to_string(threads).c_str())) != MSELD_OK)
    return rc;
  if (!condition.empty() &&
      (rc = mseld_config_set(cfg, "run.condition", condition.c_str())) != MSELD_OK)
    return rc;
  return MSELD_OK;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-learning lab for sound event localization and detection"};
  app.require_subcommand(1);

  std::string config_path, seed, out, condition;
  bool serial = false;
  int threads = 0;
  app.add_option("--config", config_path, "config file (key = value sections)");
  app.add_option("--seed", seed, "root random seed");
  app.add_option("--out", out, "output directory (run.out)");
  app.add_flag("--serial", serial, "single-threaded deterministic mode");
  app.add_option("--threads", threads, "worker thread count (0 = hardware)");

  auto* synth = app.add_subcommand("synth-data", "generate the synthetic room dataset");
  auto* extract = app.add_subcommand("extract-features", "compute per-segment feature caches");
  auto* run = app.add_subcommand("run", "train/evaluate one condition into a run directory");
  run->add_option("--condition", condition, "pretrain | finetune | meta");

  std::string refs_dir, preds_dir, manifest_csv, eval_out;
  auto* evaluate = app.add_subcommand("evaluate", "score a prediction tree against references");
  evaluate->add_option("--refs", refs_dir, "reference annotation directory")->required();
  evaluate->add_option("--preds", preds_dir, "prediction annotation directory")->required();
  evaluate->add_option("--manifest", manifest_csv, "dataset manifest.csv")->required();
  evaluate->add_option("--metrics-out", eval_out, "output metrics CSV")->required();

  std::vector<std::string> run_dirs;
  std::string report_out = "report";
  auto* report = app.add_subcommand("report", "merge run directories into a results table");
  report->add_option("runs", run_dirs, "run directories")->required();
  report->add_option("--report-out", report_out, "report output directory");

  CLI11_PARSE(app, argc, argv);

  ConfigHandle handle;
  int rc = apply_common(handle.cfg, config_path, seed, out, serial, threads, condition);
  if (rc != MSELD_OK) return fail(rc);

  if (synth->parsed()) {
    if ((rc = mseld_synth_data(handle.cfg)) != MSELD_OK) return fail(rc);
    char dir[512];
    mseld_config_get(handle.cfg, "dataset.out", dir, sizeof(dir));
    std::printf("dataset written to %s\n", dir);
  } else if (extract->parsed()) {
    long written = 0, skipped = 0;
    if ((rc = mseld_extract_features(handle.cfg, &written, &skipped)) != MSELD_OK) return fail(rc);
    std::printf("features: %ld segment files written, %ld up to date\n", written, skipped);
  } else if (run->parsed()) {
    if ((rc = mseld_run(handle.cfg)) != MSELD_OK) return fail(rc);
    char dir[512];
    mseld_config_get(handle.cfg, "run.out", dir, sizeof(dir));
    std::printf("run complete: %s\n", dir);
  } else if (evaluate->parsed()) {
    if ((rc = mseld_evaluate(handle.cfg, refs_dir.c_str(), preds_dir.c_str(),
                             manifest_csv.c_str(), eval_out.c_str())) != MSELD_OK)
      return fail(rc);
    std::printf("metrics written to %s\n", eval_out.c_str());
  } else if (report->parsed()) {
    std::vector<const char*> dirs;
    for (const auto& d : run_dirs) dirs.push_back(d.c_str());
    if ((rc = mseld_report(dirs.data(), dirs.size(), report_out.c_str())) != MSELD_OK)
      return fail(rc);
    std::printf("report written to %s\n", report_out.c_str());
  }
  return 0;
}
