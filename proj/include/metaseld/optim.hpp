#pragma once

#include <cmath>

#include "metaseld/params.hpp"

namespace metaseld::nn {

/// Functional SGD: returns a new ParamSet of detached leaves; the input set
/// is left untouched so inner loops can never corrupt meta-parameters.
template <class S>
ParamSet<S> sgd_step(const ParamSet<S>& params, const std::vector<Var<S>>& grads, S lr) {
  if (grads.size() != params.size()) fail_config("sgd_step: gradient count mismatch");
  ParamSet<S> out;
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& e = params.entry(i);
    const auto& g = grads[i].value();
    if (!e.var.value().same_shape(g)) fail_config("sgd_step: shape mismatch at " + e.name);
    Tensor<S> t = e.var.value();
    const S* gp = g.data();
    for (int64_t k = 0; k < t.numel(); ++k) t[k] -= lr * gp[k];
    out.add_var(e.name, Var<S>(std::move(t), true));
  }
  return out;
}

/// Graph-mode SGD: the update is built from recorded ops, so the result stays
/// differentiable w.r.t. the inputs (used by exact second-order MAML).
template <class S>
ParamSet<S> sgd_step_graph(const ParamSet<S>& params, const std::vector<Var<S>>& grads, S lr) {
  if (grads.size() != params.size()) fail_config("sgd_step_graph: gradient count mismatch");
  ParamSet<S> out;
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& e = params.entry(i);
    out.add_var(e.name, sub(e.var, scale(grads[i], lr)));
  }
  return out;
}

/// AdamW state: first/second moments plus step count.
template <class S>
struct AdamWState {
  std::vector<Tensor<S>> m, v;
  int64_t step = 0;
};

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Decoupled-weight-decay Adam. Functional like sgd_step.
template <class S>
ParamSet<S> adamw_step(AdamWState<S>& state, const ParamSet<S>& params,
                       const std::vector<Var<S>>& grads, const AdamWConfig& cfg) {
  if (grads.size() != params.size()) fail_config("adamw_step: gradient count mismatch");
  if (state.m.empty()) {
    for (size_t i = 0; i < params.size(); ++i) {
      state.m.emplace_back(params.entry(i).var.value().shape());
      state.v.emplace_back(params.entry(i).var.value().shape());
    }
  }
  if (state.m.size() != params.size()) fail_config("adamw_step: state size mismatch");
  state.step += 1;
  const S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
  const S bc1 = static_cast<S>(1.0 - std::pow(cfg.beta1, static_cast<double>(state.step)));
  const S bc2 = static_cast<S>(1.0 - std::pow(cfg.beta2, static_cast<double>(state.step)));
  ParamSet<S> out;
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& e = params.entry(i);
    const auto& g = grads[i].value();
    if (!e.var.value().same_shape(g)) fail_config("adamw_step: shape mismatch at " + e.name);
    Tensor<S> t = e.var.value();
    Tensor<S>& m = state.m[i];
    Tensor<S>& v = state.v[i];
    const S* gp = g.data();
    for (int64_t k = 0; k < t.numel(); ++k) {
      m[k] = b1 * m[k] + (S(1) - b1) * gp[k];
      v[k] = b2 * v[k] + (S(1) - b2) * gp[k] * gp[k];
      S mhat = m[k] / bc1;
      S vhat = v[k] / bc2;
      t[k] -= static_cast<S>(cfg.lr) * (mhat / (std::sqrt(vhat) + static_cast<S>(cfg.eps)) +
                                        static_cast<S>(cfg.weight_decay) * t[k]);
    }
    out.add_var(e.name, Var<S>(std::move(t), true));
  }
  return out;
}

}  // namespace metaseld::nn
