#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "metaseld/crnn.hpp"
#include "metaseld/metrics.hpp"
#include "metaseld/parallel.hpp"

namespace metaseld::meta {

/// Meta-training hyperparameters. Defaults follow the experimental setup the
/// model family is normally trained with; the desk-scale study overrides the
/// budget-related fields through the run config.
struct MetaConfig {
  int rooms_per_batch = 4;
  int samples_per_room = 64;
  int k_support = 30;
  int q_query = 34;
  double inner_lr = 0.01;   // alpha
  int inner_steps = 5;      // N
  double meta_lr = 0.001;   // beta
  int epochs = 150;
  int meta_lr_flat_epochs = 100;
  int meta_lr_decay_every = 20;
  double meta_lr_decay = 0.9;
  bool second_order = false;
  int steps_per_epoch = 0;  // 0: derived from the training set size
  int k_support_test = 30;
  double adamw_beta1 = 0.9;
  double adamw_beta2 = 0.999;
  double adamw_eps = 1e-8;
  double adamw_weight_decay = 0.01;

  void validate() const {
    if (k_support + q_query != samples_per_room)
      fail_config("meta config: k_support + q_query must equal samples_per_room");
    if (inner_lr <= 0 || meta_lr <= 0) fail_config("meta config: learning rates must be > 0");
    if (rooms_per_batch < 1 || samples_per_room < 1 || k_support < 1)
      fail_config("meta config: batch sizes must be >= 1");
    if (inner_steps < 0) fail_config("meta config: inner_steps < 0");
  }

  double meta_lr_at(int epoch) const {
    if (epoch < meta_lr_flat_epochs) return meta_lr;
    int periods = (epoch - meta_lr_flat_epochs) / meta_lr_decay_every + 1;
    double lr = meta_lr;
    for (int i = 0; i < periods; ++i) lr *= meta_lr_decay;
    return lr;
  }
};

/// Supervised pre-training schedule (the fine-tune baseline's stage one).
struct PretrainConfig {
  double lr1 = 0.0003;
  int epochs1 = 70;
  double lr2 = 0.00003;
  int epochs2 = 20;
  int batch_size = 4;
  double adamw_weight_decay = 0.01;

  int total_epochs() const { return epochs1 + epochs2; }
  double lr_at(int epoch) const { return epoch < epochs1 ? lr1 : lr2; }
};

template <class S>
struct Sample {
  nn::Tensor<S> input;
  nn::Tensor<S> target;
};

/// Scalar training loss for one sample under the given parameters. Built from
/// recorded ops so both gradient orders work.
template <class S>
using LossFn = std::function<nn::Var<S>(const nn::ParamSet<S>&, const Sample<S>&)>;

/// A room's samples behind an index (features can live on disk).
template <class S>
struct RoomSamples {
  std::string room_id;
  int count = 0;
  std::function<Sample<S>(int)> get;
};

template <class S>
struct Task {
  std::string room_id;
  std::vector<Sample<S>> support;
  std::vector<Sample<S>> query;
};

/// Mean loss over samples, values only.
template <class S>
double batch_loss(const LossFn<S>& loss_fn, const nn::ParamSet<S>& params,
                  const std::vector<Sample<S>>& samples);

/// Mean loss and mean gradients over samples. Work is split into static
/// per-worker chunks merged in fixed order, so the result is deterministic
/// for a given worker count.
template <class S>
std::pair<double, std::vector<nn::Tensor<S>>> batch_loss_grads(
    const LossFn<S>& loss_fn, const nn::ParamSet<S>& params,
    const std::vector<Sample<S>>& samples);

/// N full-batch SGD steps on the support loss, starting from theta.
/// Functional: theta is untouched. With second_order=true the updates are
/// recorded ops, so gradients of downstream losses flow back into theta.
template <class S>
nn::ParamSet<S> inner_adapt(const LossFn<S>& loss_fn, const nn::ParamSet<S>& theta,
                            const std::vector<Sample<S>>& support, double alpha, int steps,
                            bool second_order = false);

/// Samples rooms_per_batch distinct rooms, then samples_per_room distinct
/// sample indices per room; the first k_support become the support set.
template <class S>
std::vector<Task<S>> sample_task_batch(const std::vector<RoomSamples<S>>& train_rooms,
                                       const MetaConfig& cfg, Rng& rng);

struct MetaStepLogs {
  double meta_loss = 0;  // sum of per-task query losses
  std::vector<double> task_losses;
  std::vector<std::string> task_rooms;
};

/// One outer update: per task inner_adapt then query loss; meta-gradient is
/// the gradient of the summed query losses (exact when second_order, else the
/// first-order approximation evaluated at the adapted parameters); one AdamW
/// step on theta.
template <class S>
nn::ParamSet<S> meta_step(const LossFn<S>& loss_fn, const nn::ParamSet<S>& theta,
                          const std::vector<Task<S>>& tasks, const MetaConfig& cfg, double lr,
                          nn::AdamWState<S>& opt_state, MetaStepLogs* logs = nullptr);

/// Supervised training with AdamW over all samples (the pre-train baseline).
/// epoch_hook, when set, runs after each epoch with (epoch, params, loss).
template <class S>
nn::ParamSet<S> pretrain(
    const LossFn<S>& loss_fn, nn::ParamSet<S> params, const std::vector<RoomSamples<S>>& rooms,
    const PretrainConfig& cfg, Rng& rng,
    const std::function<void(int, const nn::ParamSet<S>&, double)>& epoch_hook = nullptr);

/// Fine-tuning mirrors inner adaptation exactly (shared code path).
template <class S>
nn::ParamSet<S> finetune(const LossFn<S>& loss_fn, const nn::ParamSet<S>& theta_pre,
                         const std::vector<Sample<S>>& support, double alpha = 0.01,
                         int steps = 5) {
  return inner_adapt(loss_fn, theta_pre, support, alpha, steps, false);
}

// ---------------------------------------------------------------------------
// CRNN instantiation

/// One 5 s segment of a dataset clip.
struct SegmentRef {
  std::string clip_id;
  int seg_index = 0;        // within the clip
  int seg_start_frame = 0;  // absolute 100 ms frame of segment start
  std::string feat_path;    // feature cache file
  nn::Tensor<float> target; // [46, classes, 3]
};

struct RoomSegments {
  std::string room_id;
  std::vector<SegmentRef> segments;  // sorted by (clip filename, segment index)
};

/// Per-sample CRNN loss (MSE between forward pass and the ACCDOA target).
LossFn<float> crnn_loss_fn(const model::CrnnConfig& cfg);

/// Adapter from disk-backed segments to the generic engine.
RoomSamples<float> room_samples(const RoomSegments& room);

struct MetaTestResult {
  metrics::MetricsReport report;
  metrics::Accumulator acc;  // mergeable across rooms for the Overall row
  nn::ParamSet<float> adapted;
  // decoded predictions per query clip, keyed by clip_id
  std::map<std::string, scene::Annotation> predictions;
  double support_loss_before = 0;
  double support_loss_after = 0;
  double query_loss_before = 0;
  double query_loss_after = 0;
};

/// Meta-test protocol for one held-out room: the first k_support_test
/// segments (clips sorted by filename) form the support set, the remainder
/// the query set; N SGD steps at inner_lr from theta; decode and score the
/// query set. refs holds the full ground-truth annotation per clip.
MetaTestResult meta_test(const nn::ParamSet<float>& theta, const RoomSegments& room,
                         const std::map<std::string, scene::Annotation>& refs,
                         const model::CrnnConfig& model_cfg, const MetaConfig& cfg,
                         double act_threshold = model::kActThreshold);

// ---------------------------------------------------------------------------
// template implementations

template <class S>
double batch_loss(const LossFn<S>& loss_fn, const nn::ParamSet<S>& params,
                  const std::vector<Sample<S>>& samples) {
  if (samples.empty()) fail_config("batch_loss: empty batch");
  const int workers = std::max(1, std::min<int>(worker_threads(), static_cast<int>(samples.size())));
  std::vector<double> partial(static_cast<size_t>(workers), 0.0);
  const int64_t n = static_cast<int64_t>(samples.size());
  parallel_for(workers, [&](int64_t w) {
    nn::NoGradGuard guard;
    const int64_t lo = w * n / workers, hi = (w + 1) * n / workers;
    double s = 0;
    for (int64_t i = lo; i < hi; ++i)
      s += static_cast<double>(loss_fn(params, samples[static_cast<size_t>(i)]).value()[0]);
    partial[static_cast<size_t>(w)] = s;
  });
  double total = 0;
  for (double p : partial) total += p;
  return total / static_cast<double>(n);
}

template <class S>
std::pair<double, std::vector<nn::Tensor<S>>> batch_loss_grads(
    const LossFn<S>& loss_fn, const nn::ParamSet<S>& params,
    const std::vector<Sample<S>>& samples) {
  if (samples.empty()) fail_config("batch_loss_grads: empty batch");
  const int64_t n = static_cast<int64_t>(samples.size());
  const int workers = std::max(1, std::min<int>(worker_threads(), static_cast<int>(n)));
  auto wrt = params.vars();
  std::vector<double> partial_loss(static_cast<size_t>(workers), 0.0);
  std::vector<std::vector<nn::Tensor<S>>> partial_grads(
      static_cast<size_t>(workers));
  parallel_for(workers, [&](int64_t w) {
    auto& acc = partial_grads[static_cast<size_t>(w)];
    acc.reserve(wrt.size());
    for (const auto& v : wrt) acc.emplace_back(v.value().shape());
    const int64_t lo = w * n / workers, hi = (w + 1) * n / workers;
    double s = 0;
    for (int64_t i = lo; i < hi; ++i) {
      nn::Var<S> loss = loss_fn(params, samples[static_cast<size_t>(i)]);
      s += static_cast<double>(loss.value()[0]);
      auto grads = nn::grad(loss, wrt, false);
      for (size_t k = 0; k < wrt.size(); ++k) {
        const auto& g = grads[k].value();
        for (int64_t j = 0; j < g.numel(); ++j) acc[k][j] += g[j];
      }
    }
    partial_loss[static_cast<size_t>(w)] = s;
  });
  double total = 0;
  std::vector<nn::Tensor<S>> grads;
  grads.reserve(wrt.size());
  for (size_t k = 0; k < wrt.size(); ++k) grads.emplace_back(wrt[k].value().shape());
  for (int w = 0; w < workers; ++w) {
    total += partial_loss[static_cast<size_t>(w)];
    for (size_t k = 0; k < wrt.size(); ++k) {
      const auto& src = partial_grads[static_cast<size_t>(w)][k];
      for (int64_t j = 0; j < src.numel(); ++j) grads[k][j] += src[j];
    }
  }
  const S inv = S(1) / static_cast<S>(n);
  for (auto& g : grads)
    for (int64_t j = 0; j < g.numel(); ++j) g[j] *= inv;
  return {total / static_cast<double>(n), std::move(grads)};
}

template <class S>
nn::ParamSet<S> inner_adapt(const LossFn<S>& loss_fn, const nn::ParamSet<S>& theta,
                            const std::vector<Sample<S>>& support, double alpha, int steps,
                            bool second_order) {
  if (steps < 0) fail_config("inner_adapt: negative step count");
  if (!second_order) {
    nn::ParamSet<S> cur = theta.clone_detached(true);
    for (int step = 0; step < steps; ++step) {
      auto [loss, grads] = batch_loss_grads(loss_fn, cur, support);
      if (!std::isfinite(loss))
        fail_numeric("inner_adapt: non-finite support loss at step " + std::to_string(step));
      std::vector<nn::Var<S>> gvars;
      gvars.reserve(grads.size());
      for (auto& g : grads) gvars.push_back(nn::constant(std::move(g)));
      cur = nn::sgd_step(cur, gvars, static_cast<S>(alpha));
    }
    return cur;
  }
  // graph mode: updates are recorded so d(adapted)/d(theta) exists
  nn::ParamSet<S> cur;
  for (const auto& e : theta.entries()) cur.add_var(e.name, e.var);
  for (int step = 0; step < steps; ++step) {
    nn::Var<S> loss;
    for (size_t i = 0; i < support.size(); ++i) {
      nn::Var<S> l = loss_fn(cur, support[i]);
      loss = i == 0 ? l : nn::add(loss, l);
    }
    loss = nn::scale(loss, S(1) / static_cast<S>(support.size()));
    if (!std::isfinite(static_cast<double>(loss.value()[0])))
      fail_numeric("inner_adapt: non-finite support loss at step " + std::to_string(step));
    auto grads = nn::grad(loss, cur.vars(), true);
    cur = nn::sgd_step_graph(cur, grads, static_cast<S>(alpha));
  }
  return cur;
}

template <class S>
std::vector<Task<S>> sample_task_batch(const std::vector<RoomSamples<S>>& train_rooms,
                                       const MetaConfig& cfg, Rng& rng) {
  cfg.validate();
  if (static_cast<int>(train_rooms.size()) < cfg.rooms_per_batch)
    fail_config("sample_task_batch: need at least " + std::to_string(cfg.rooms_per_batch) +
                " rooms, have " + std::to_string(train_rooms.size()));
  for (const auto& r : train_rooms)
    if (r.count < cfg.samples_per_room)
      fail_data("sample_task_batch: room " + r.room_id + " has " + std::to_string(r.count) +
                " samples, needs " + std::to_string(cfg.samples_per_room));

  // rooms without replacement
  std::vector<int> room_idx(train_rooms.size());
  for (size_t i = 0; i < room_idx.size(); ++i) room_idx[i] = static_cast<int>(i);
  for (int i = 0; i < cfg.rooms_per_batch; ++i) {
    int j = static_cast<int>(rng.uniform_int(i, static_cast<int64_t>(room_idx.size()) - 1));
    std::swap(room_idx[static_cast<size_t>(i)], room_idx[static_cast<size_t>(j)]);
  }

  std::vector<Task<S>> tasks;
  for (int t = 0; t < cfg.rooms_per_batch; ++t) {
    const auto& room = train_rooms[static_cast<size_t>(room_idx[static_cast<size_t>(t)])];
    std::vector<int> idx(static_cast<size_t>(room.count));
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    for (int i = 0; i < cfg.samples_per_room; ++i) {
      int j = static_cast<int>(rng.uniform_int(i, static_cast<int64_t>(idx.size()) - 1));
      std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    }
    Task<S> task;
    task.room_id = room.room_id;
    for (int i = 0; i < cfg.k_support; ++i)
      task.support.push_back(room.get(idx[static_cast<size_t>(i)]));
    for (int i = cfg.k_support; i < cfg.samples_per_room; ++i)
      task.query.push_back(room.get(idx[static_cast<size_t>(i)]));
    tasks.push_back(std::move(task));
  }
  return tasks;
}

template <class S>
nn::ParamSet<S> meta_step(const LossFn<S>& loss_fn, const nn::ParamSet<S>& theta,
                          const std::vector<Task<S>>& tasks, const MetaConfig& cfg, double lr,
                          nn::AdamWState<S>& opt_state, MetaStepLogs* logs) {
  if (tasks.empty()) fail_config("meta_step: no tasks");
  auto theta_vars = theta.vars();
  std::vector<nn::Tensor<S>> grad_sum;
  grad_sum.reserve(theta_vars.size());
  for (const auto& v : theta_vars) grad_sum.emplace_back(v.value().shape());
  double meta_loss = 0;
  if (logs) {
    logs->task_losses.clear();
    logs->task_rooms.clear();
  }

  for (const auto& task : tasks) {  // fixed task order keeps runs reproducible
    double qloss = 0;
    if (cfg.second_order) {
      nn::ParamSet<S> adapted =
          inner_adapt(loss_fn, theta, task.support, cfg.inner_lr, cfg.inner_steps, true);
      nn::Var<S> loss;
      for (size_t i = 0; i < task.query.size(); ++i) {
        nn::Var<S> l = loss_fn(adapted, task.query[i]);
        loss = i == 0 ? l : nn::add(loss, l);
      }
      loss = nn::scale(loss, S(1) / static_cast<S>(task.query.size()));
      qloss = static_cast<double>(loss.value()[0]);
      auto grads = nn::grad(loss, theta_vars, false);
      for (size_t k = 0; k < grad_sum.size(); ++k) {
        const auto& g = grads[k].value();
        for (int64_t j = 0; j < g.numel(); ++j) grad_sum[k][j] += g[j];
      }
    } else {
      nn::ParamSet<S> adapted =
          inner_adapt(loss_fn, theta, task.support, cfg.inner_lr, cfg.inner_steps, false);
      auto [ql, grads] = batch_loss_grads(loss_fn, adapted, task.query);
      qloss = ql;
      for (size_t k = 0; k < grad_sum.size(); ++k)
        for (int64_t j = 0; j < grads[k].numel(); ++j) grad_sum[k][j] += grads[k][j];
    }
    if (!std::isfinite(qloss)) fail_numeric("meta_step: non-finite query loss in room " + task.room_id);
    meta_loss += qloss;
    if (logs) {
      logs->task_losses.push_back(qloss);
      logs->task_rooms.push_back(task.room_id);
    }
  }
  if (logs) logs->meta_loss = meta_loss;

  std::vector<nn::Var<S>> gvars;
  gvars.reserve(grad_sum.size());
  for (auto& g : grad_sum) gvars.push_back(nn::constant(std::move(g)));
  nn::AdamWConfig ocfg;
  ocfg.lr = lr;
  ocfg.beta1 = cfg.adamw_beta1;
  ocfg.beta2 = cfg.adamw_beta2;
  ocfg.eps = cfg.adamw_eps;
  ocfg.weight_decay = cfg.adamw_weight_decay;
  return nn::adamw_step(opt_state, theta, gvars, ocfg);
}

template <class S>
nn::ParamSet<S> pretrain(const LossFn<S>& loss_fn, nn::ParamSet<S> params,
                         const std::vector<RoomSamples<S>>& rooms, const PretrainConfig& cfg,
                         Rng& rng,
                         const std::function<void(int, const nn::ParamSet<S>&, double)>& epoch_hook) {
  struct Ref {
    const RoomSamples<S>* room;
    int index;
  };
  std::vector<Ref> all;
  for (const auto& r : rooms)
    for (int i = 0; i < r.count; ++i) all.push_back({&r, i});
  if (all.empty()) fail_data("pretrain: no training samples");

  nn::AdamWState<S> state;
  for (int epoch = 0; epoch < cfg.total_epochs(); ++epoch) {
    // shuffle
    for (size_t i = 0; i + 1 < all.size(); ++i) {
      size_t j = static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(i),
                                                     static_cast<int64_t>(all.size()) - 1));
      std::swap(all[i], all[j]);
    }
    double epoch_loss = 0;
    int64_t batches = 0;
    for (size_t at = 0; at < all.size(); at += static_cast<size_t>(cfg.batch_size)) {
      std::vector<Sample<S>> batch;
      for (size_t i = at; i < std::min(all.size(), at + static_cast<size_t>(cfg.batch_size)); ++i)
        batch.push_back(all[i].room->get(all[i].index));
      auto [loss, grads] = batch_loss_grads(loss_fn, params, batch);
      if (!std::isfinite(loss))
        fail_numeric("pretrain: non-finite loss in epoch " + std::to_string(epoch));
      std::vector<nn::Var<S>> gvars;
      gvars.reserve(grads.size());
      for (auto& g : grads) gvars.push_back(nn::constant(std::move(g)));
      nn::AdamWConfig ocfg;
      ocfg.lr = cfg.lr_at(epoch);
      ocfg.weight_decay = cfg.adamw_weight_decay;
      params = nn::adamw_step(state, params, gvars, ocfg);
      epoch_loss += loss;
      ++batches;
    }
    if (epoch_hook) epoch_hook(epoch, params, epoch_loss / static_cast<double>(batches));
  }
  return params;
}

}  // namespace metaseld::meta
