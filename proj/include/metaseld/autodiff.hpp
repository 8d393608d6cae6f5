#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "metaseld/blas.hpp"
#include "metaseld/common.hpp"
#include "metaseld/tensor.hpp"

namespace metaseld::nn {

/// When true (debug), every op output is checked for NaN/Inf.
inline bool& debug_nan_checks() {
  static bool flag = false;
  return flag;
}

namespace detail {
inline thread_local bool grad_recording = true;
}

/// Disables tape recording for the enclosing scope. Ops executed under the
/// guard produce constant leaves, which is how first-order (no create_graph)
/// backward passes avoid growing the graph.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_recording) { detail::grad_recording = false; }
  ~NoGradGuard() { detail::grad_recording = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class EnableGradGuard {
 public:
  EnableGradGuard() : prev_(detail::grad_recording) { detail::grad_recording = true; }
  ~EnableGradGuard() { detail::grad_recording = prev_; }

 private:
  bool prev_;
};

template <class S>
class Var;

template <class S>
struct Node {
  Tensor<S> value;
  bool requires_grad = false;
  std::string op;
  std::vector<Var<S>> parents;
  // Given dL/d(out), returns dL/d(parent_i) aligned with `parents`; an
  // entry may be an empty Var for non-differentiable parents.
  std::function<std::vector<Var<S>>(const Var<S>& g, const std::vector<Var<S>>& parents)> vjp;
};

/// Handle to a node in the dynamically built computation graph.
template <class S>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<S> value, bool requires_grad = false)
      : node_(std::make_shared<Node<S>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
    node_->op = "leaf";
  }

  bool defined() const { return node_ != nullptr; }
  const Tensor<S>& value() const { return node_->value; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::string& op() const { return node_->op; }
  Node<S>* node() const { return node_.get(); }
  std::shared_ptr<Node<S>> node_ptr() const { return node_; }

  /// Leaf copy of the value, cut off from the graph.
  Var detach(bool requires_grad = false) const { return Var(node_->value, requires_grad); }

 private:
  explicit Var(std::shared_ptr<Node<S>> n) : node_(std::move(n)) {}
  std::shared_ptr<Node<S>> node_;

  template <class T>
  friend Var<T> make_node(std::string op, Tensor<T> value, std::vector<Var<T>> parents,
                          std::function<std::vector<Var<T>>(const Var<T>&, const std::vector<Var<T>>&)> vjp);
};

template <class S>
Var<S> constant(Tensor<S> t) {
  return Var<S>(std::move(t), false);
}

template <class S>
Var<S> make_node(std::string op, Tensor<S> value, std::vector<Var<S>> parents,
                 std::function<std::vector<Var<S>>(const Var<S>&, const std::vector<Var<S>>&)> vjp) {
  if (debug_nan_checks() && !value.all_finite()) fail_numeric("non-finite values in output of op " + op);
  bool need = false;
  if (detail::grad_recording)
    for (const auto& p : parents) need = need || p.requires_grad();
  if (!need) return Var<S>(std::move(value), false);
  auto n = std::make_shared<Node<S>>();
  n->value = std::move(value);
  n->requires_grad = true;
  n->op = std::move(op);
  n->parents = std::move(parents);
  n->vjp = std::move(vjp);
  return Var<S>(std::move(n));
}

template <class S>
[[noreturn]] void shape_error(const std::string& op, const Tensor<S>& a, const Tensor<S>& b) {
  fail_config("shape mismatch in op " + op + ": " + Tensor<S>::shape_str(a.shape()) + " vs " +
              Tensor<S>::shape_str(b.shape()));
}

// ---------------------------------------------------------------------------
// elementwise

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  if (!a.value().same_shape(b.value())) shape_error("add", a.value(), b.value());
  Tensor<S> out = a.value();
  const S* bp = b.value().data();
  S* op_ = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) op_[i] += bp[i];
  return make_node<S>("add", std::move(out), {a, b},
                      [](const Var<S>& g, const std::vector<Var<S>>&) {
                        return std::vector<Var<S>>{g, g};
                      });
}

template <class S>
Var<S> sub(const Var<S>& a, const Var<S>& b);

template <class S>
Var<S> scale(const Var<S>& a, S c) {
  Tensor<S> out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= c;
  return make_node<S>("scale", std::move(out), {a},
                      [c](const Var<S>& g, const std::vector<Var<S>>&) {
                        return std::vector<Var<S>>{scale(g, c)};
                      });
}

template <class S>
Var<S> neg(const Var<S>& a) {
  return scale(a, S(-1));
}

template <class S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  if (!a.value().same_shape(b.value())) shape_error("sub", a.value(), b.value());
  Tensor<S> out = a.value();
  const S* bp = b.value().data();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] -= bp[i];
  return make_node<S>("sub", std::move(out), {a, b},
                      [](const Var<S>& g, const std::vector<Var<S>>&) {
                        return std::vector<Var<S>>{g, neg(g)};
                      });
}

template <class S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  if (!a.value().same_shape(b.value())) shape_error("mul", a.value(), b.value());
  Tensor<S> out = a.value();
  const S* bp = b.value().data();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= bp[i];
  return make_node<S>("mul", std::move(out), {a, b},
                      [](const Var<S>& g, const std::vector<Var<S>>& ps) {
                        return std::vector<Var<S>>{mul(g, ps[1]), mul(g, ps[0])};
                      });
}

template <class S>
Var<S> one_minus(const Var<S>& a) {
  Tensor<S> out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = S(1) - out[i];
  return make_node<S>("one_minus", std::move(out), {a},
                      [](const Var<S>& g, const std::vector<Var<S>>&) {
                        return std::vector<Var<S>>{neg(g)};
                      });
}

template <class S>
Var<S> relu(const Var<S>& a) {
  Tensor<S> out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = out[i] > S(0) ? out[i] : S(0);
  return make_node<S>("relu", std::move(out), {a},
                      [](const Var<S>& g, const std::vector<Var<S>>& ps) {
                        // mask is treated as locally constant
                        Tensor<S> m = ps[0].value();
                        for (int64_t i = 0; i < m.numel(); ++i) m[i] = m[i] > S(0) ? S(1) : S(0);
                        return std::vector<Var<S>>{mul(g, constant(std::move(m)))};
                      });
}

template <class S>
Var<S> tanh(const Var<S>& a) {
  Tensor<S> out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(out[i]);
  return make_node<S>("tanh", std::move(out), {a},
                      [](const Var<S>& g, const std::vector<Var<S>>& ps) {
                        Var<S> y = tanh(ps[0]);
                        return std::vector<Var<S>>{mul(g, one_minus(mul(y, y)))};
                      });
}

template <class S>
Var<S> sigmoid(const Var<S>& a) {
  Tensor<S> out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = S(1) / (S(1) + std::exp(-out[i]));
  return make_node<S>("sigmoid", std::move(out), {a},
                      [](const Var<S>& g, const std::vector<Var<S>>& ps) {
                        Var<S> y = sigmoid(ps[0]);
                        return std::vector<Var<S>>{mul(g, mul(y, one_minus(y)))};
                      });
}

template <class S>
Var<S> rsqrt_eps(const Var<S>& a, S eps) {
  Tensor<S> out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = S(1) / std::sqrt(out[i] + eps);
  return make_node<S>("rsqrt_eps", std::move(out), {a},
                      [eps](const Var<S>& g, const std::vector<Var<S>>& ps) {
                        Var<S> y = rsqrt_eps(ps[0], eps);
                        return std::vector<Var<S>>{scale(mul(g, mul(y, mul(y, y))), S(-0.5))};
                      });
}

// ---------------------------------------------------------------------------
// matrix ops (2-D), backed by BLAS gemm

template <class S>
Var<S> matmul(const Var<S>& a, const Var<S>& b);
template <class S>
Var<S> matmul_nt(const Var<S>& a, const Var<S>& b);
template <class S>
Var<S> matmul_tn(const Var<S>& a, const Var<S>& b);

template <class S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) shape_error("matmul", A, B);
  int64_t M = A.dim(0), K = A.dim(1), N = B.dim(1);
  Tensor<S> out({M, N});
  blas::gemm(false, false, M, N, K, A.data(), B.data(), out.data());
  return make_node<S>("matmul", std::move(out), {a, b},
                      [](const Var<S>& g, const std::vector<Var<S>>& ps) {
                        return std::vector<Var<S>>{matmul_nt(g, ps[1]), matmul_tn(ps[0], g)};
                      });
}

template <class S>
Var<S> matmul_nt(const Var<S>& a, const Var<S>& b) {
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(1)) shape_error("matmul_nt", A, B);
  int64_t M = A.dim(0), K = A.dim(1), N = B.dim(0);
  Tensor<S> out({M, N});
  blas::gemm(false, true, M, N, K, A.data(), B.data(), out.data());
  return make_node<S>("matmul_nt", std::move(out), {a, b},
                      [](const Var<S>& g, const std::vector<Var<S>>& ps) {
                        return std::vector<Var<S>>{matmul(g, ps[1]), matmul_tn(g, ps[0])};
                      });
}

template <class S>
Var<S> matmul_tn(const Var<S>& a, const Var<S>& b) {
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(0) != B.dim(0)) shape_error("matmul_tn", A, B);
  int64_t M = A.dim(1), K = A.dim(0), N = B.dim(1);
  Tensor<S> out({M, N});
  blas::gemm(true, false, M, N, K, A.data(), B.data(), out.data());
  return make_node<S>("matmul_tn", std::move(out), {a, b},
                      [](const Var<S>& g, const std::vector<Var<S>>& ps) {
                        return std::vector<Var<S>>{matmul_nt(ps[1], g), matmul(ps[0], g)};
                      });
}

template <class S>
Var<S> col_sum(const Var<S>& x);
template <class S>
Var<S> broadcast_rows(const Var<S>& v, int64_t rows);

template <class S>
Var<S> col_sum(const Var<S>& x) {
  const auto& X = x.value();
  if (X.rank() != 2) fail_config("col_sum: rank != 2");
  int64_t M = X.dim(0), N = X.dim(1);
  Tensor<S> out({N});
  for (int64_t i = 0; i < M; ++i)
    for (int64_t j = 0; j < N; ++j) out[j] += X.at(i, j);
  return make_node<S>("col_sum", std::move(out), {x},
                      [M](const Var<S>& g, const std::vector<Var<S>>&) {
                        return std::vector<Var<S>>{broadcast_rows(g, M)};
                      });
}

template <class S>
Var<S> broadcast_rows(const Var<S>& v, int64_t rows) {
  const auto& V = v.value();
  if (V.rank() != 1) fail_config("broadcast_rows: rank != 1");
  int64_t N = V.dim(0);
  Tensor<S> out({rows, N});
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < N; ++j) out.at(i, j) = V[j];
  return make_node<S>("broadcast_rows", std::move(out), {v},
                      [](const Var<S>& g, const std::vector<Var<S>>&) {
                        return std::vector<Var<S>>{col_sum(g)};
                      });
}

template <class S>
Var<S> broadcast_cols(const Var<S>& v, int64_t cols);

template <class S>
Var<S> row_sum(const Var<S>& x) {
  const auto& X = x.value();
  if (X.rank() != 2) fail_config("row_sum: rank != 2");
  int64_t M = X.dim(0), N = X.dim(1);
  Tensor<S> out({M});
  for (int64_t i = 0; i < M; ++i) {
    S s = 0;
    for (int64_t j = 0; j < N; ++j) s += X.at(i, j);
    out[i] = s;
  }
  return make_node<S>("row_sum", std::move(out), {x},
                      [N](const Var<S>& g, const std::vector<Var<S>>&) {
                        return std::vector<Var<S>>{broadcast_cols(g, N)};
                      });
}

/// [M] -> [M,N], repeating the vector across columns.
template <class S>
Var<S> broadcast_cols(const Var<S>& v, int64_t cols) {
  const auto& V = v.value();
  if (V.rank() != 1) fail_config("broadcast_cols: rank != 1");
  int64_t M = V.dim(0);
  Tensor<S> out({M, cols});
  for (int64_t i = 0; i < M; ++i)
    for (int64_t j = 0; j < cols; ++j) out.at(i, j) = V[i];
  return make_node<S>("broadcast_cols", std::move(out), {v},
                      [](const Var<S>& g, const std::vector<Var<S>>&) {
                        return std::vector<Var<S>>{row_sum(g)};
                      });
}

template <class S>
Var<S> add_row_vector(const Var<S>& x, const Var<S>& b) {
  const auto& X = x.value();
  const auto& B = b.value();
  if (X.rank() != 2 || B.rank() != 1 || X.dim(1) != B.dim(0)) shape_error("add_row_vector", X, B);
  Tensor<S> out = X;
  int64_t M = X.dim(0), N = X.dim(1);
  for (int64_t i = 0; i < M; ++i)
    for (int64_t j = 0; j < N; ++j) out.at(i, j) += B[j];
  return make_node<S>("add_row_vector", std::move(out), {x, b},
                      [](const Var<S>& g, const std::vector<Var<S>>&) {
                        return std::vector<Var<S>>{g, col_sum(g)};
                      });
}

template <class S>
Var<S> transpose(const Var<S>& x) {
  const auto& X = x.value();
  if (X.rank() != 2) fail_config("transpose: rank != 2");
  int64_t M = X.dim(0), N = X.dim(1);
  Tensor<S> out({N, M});
  for (int64_t i = 0; i < M; ++i)
    for (int64_t j = 0; j < N; ++j) out.at(j, i) = X.at(i, j);
  return make_node<S>("transpose", std::move(out), {x},
                      [](const Var<S>& g, const std::vector<Var<S>>&) {
                        return std::vector<Var<S>>{transpose(g)};
                      });
}

// ---------------------------------------------------------------------------
// reductions / broadcast

template <class S>
Var<S> broadcast_full(const Var<S>& v, std::vector<int64_t> shape);

template <class S>
Var<S> sum_all(const Var<S>& x) {
  const auto& X = x.value();
  S s = 0;
  for (int64_t i = 0; i < X.numel(); ++i) s += X[i];
  auto shape = X.shape();
  return make_node<S>("sum_all", Tensor<S>::scalar(s), {x},
                      [shape](const Var<S>& g, const std::vector<Var<S>>&) {
                        return std::vector<Var<S>>{broadcast_full(g, shape)};
                      });
}

template <class S>
Var<S> broadcast_full(const Var<S>& v, std::vector<int64_t> shape) {
  if (v.value().numel() != 1) fail_config("broadcast_full: source not scalar");
  Tensor<S> out = Tensor<S>::full(shape, v.value()[0]);
  return make_node<S>("broadcast_full", std::move(out), {v},
                      [](const Var<S>& g, const std::vector<Var<S>>&) {
                        return std::vector<Var<S>>{sum_all(g)};
                      });
}

template <class S>
Var<S> mean_all(const Var<S>& x) {
  return scale(sum_all(x), S(1) / static_cast<S>(x.value().numel()));
}

// ---------------------------------------------------------------------------
// per-channel helpers for [C,T,F] tensors

template <class S>
Var<S> ch_sum(const Var<S>& x);
template <class S>
Var<S> broadcast_ch(const Var<S>& v, int64_t T, int64_t F);

template <class S>
Var<S> ch_sum(const Var<S>& x) {
  const auto& X = x.value();
  if (X.rank() != 3) fail_config("ch_sum: rank != 3");
  int64_t C = X.dim(0), TF = X.dim(1) * X.dim(2);
  int64_t T = X.dim(1), F = X.dim(2);
  Tensor<S> out({C});
  const S* p = X.data();
  for (int64_t c = 0; c < C; ++c) {
    S s = 0;
    for (int64_t i = 0; i < TF; ++i) s += p[c * TF + i];
    out[c] = s;
  }
  return make_node<S>("ch_sum", std::move(out), {x},
                      [T, F](const Var<S>& g, const std::vector<Var<S>>&) {
                        return std::vector<Var<S>>{broadcast_ch(g, T, F)};
                      });
}

template <class S>
Var<S> broadcast_ch(const Var<S>& v, int64_t T, int64_t F) {
  const auto& V = v.value();
  if (V.rank() != 1) fail_config("broadcast_ch: rank != 1");
  int64_t C = V.dim(0);
  Tensor<S> out({C, T, F});
  S* p = out.data();
  for (int64_t c = 0; c < C; ++c) std::fill(p + c * T * F, p + (c + 1) * T * F, V[c]);
  return make_node<S>("broadcast_ch", std::move(out), {v},
                      [](const Var<S>& g, const std::vector<Var<S>>&) {
                        return std::vector<Var<S>>{ch_sum(g)};
                      });
}

template <class S>
Var<S> ch_mean(const Var<S>& x) {
  const auto& X = x.value();
  if (X.rank() != 3) fail_config("ch_mean: rank != 3");
  return scale(ch_sum(x), S(1) / static_cast<S>(X.dim(1) * X.dim(2)));
}

template <class S>
Var<S> mul_ch(const Var<S>& x, const Var<S>& s) {
  const auto& X = x.value();
  const auto& V = s.value();
  if (X.rank() != 3 || V.rank() != 1 || X.dim(0) != V.dim(0)) shape_error("mul_ch", X, V);
  int64_t C = X.dim(0), TF = X.dim(1) * X.dim(2);
  Tensor<S> out = X;
  S* p = out.data();
  for (int64_t c = 0; c < C; ++c) {
    S f = V[c];
    for (int64_t i = 0; i < TF; ++i) p[c * TF + i] *= f;
  }
  return make_node<S>("mul_ch", std::move(out), {x, s},
                      [](const Var<S>& g, const std::vector<Var<S>>& ps) {
                        return std::vector<Var<S>>{mul_ch(g, ps[1]), ch_sum(mul(g, ps[0]))};
                      });
}

template <class S>
Var<S> add_ch(const Var<S>& x, const Var<S>& b) {
  const auto& X = x.value();
  const auto& V = b.value();
  if (X.rank() != 3 || V.rank() != 1 || X.dim(0) != V.dim(0)) shape_error("add_ch", X, V);
  int64_t C = X.dim(0), TF = X.dim(1) * X.dim(2);
  Tensor<S> out = X;
  S* p = out.data();
  for (int64_t c = 0; c < C; ++c) {
    S f = V[c];
    for (int64_t i = 0; i < TF; ++i) p[c * TF + i] += f;
  }
  return make_node<S>("add_ch", std::move(out), {x, b},
                      [](const Var<S>& g, const std::vector<Var<S>>&) {
                        return std::vector<Var<S>>{g, ch_sum(g)};
                      });
}

// ---------------------------------------------------------------------------
// shape ops

template <class S>
Var<S> reshape(const Var<S>& x, std::vector<int64_t> shape) {
  const auto& X = x.value();
  if (Tensor<S>::numel_of(shape) != X.numel())
    fail_config("reshape: numel mismatch " + Tensor<S>::shape_str(X.shape()) + " -> " +
                Tensor<S>::shape_str(shape));
  Tensor<S> out(shape, std::vector<S>(X.data(), X.data() + X.numel()));
  auto old_shape = X.shape();
  return make_node<S>("reshape", std::move(out), {x},
                      [old_shape](const Var<S>& g, const std::vector<Var<S>>&) {
                        return std::vector<Var<S>>{reshape(g, old_shape)};
                      });
}

template <class S>
Var<S> unslice_rows(const Var<S>& g, int64_t r0, int64_t rows_total);

template <class S>
Var<S> slice_rows(const Var<S>& x, int64_t r0, int64_t rows) {
  const auto& X = x.value();
  if (X.rank() != 2 || r0 < 0 || r0 + rows > X.dim(0)) fail_config("slice_rows: out of range");
  int64_t N = X.dim(1), M = X.dim(0);
  Tensor<S> out({rows, N});
  std::copy(X.data() + r0 * N, X.data() + (r0 + rows) * N, out.data());
  return make_node<S>("slice_rows", std::move(out), {x},
                      [r0, M](const Var<S>& g, const std::vector<Var<S>>&) {
                        return std::vector<Var<S>>{unslice_rows(g, r0, M)};
                      });
}

template <class S>
Var<S> unslice_rows(const Var<S>& g, int64_t r0, int64_t rows_total) {
  const auto& G = g.value();
  if (G.rank() != 2) fail_config("unslice_rows: rank != 2");
  int64_t rows = G.dim(0), N = G.dim(1);
  Tensor<S> out({rows_total, N});
  std::copy(G.data(), G.data() + rows * N, out.data() + r0 * N);
  return make_node<S>("unslice_rows", std::move(out), {g},
                      [r0, rows](const Var<S>& g2, const std::vector<Var<S>>&) {
                        return std::vector<Var<S>>{slice_rows(g2, r0, rows)};
                      });
}

template <class S>
Var<S> unslice_cols(const Var<S>& g, int64_t c0, int64_t cols_total);

template <class S>
Var<S> slice_cols(const Var<S>& x, int64_t c0, int64_t cols) {
  const auto& X = x.value();
  if (X.rank() != 2 || c0 < 0 || c0 + cols > X.dim(1)) fail_config("slice_cols: out of range");
  int64_t M = X.dim(0), N = X.dim(1);
  Tensor<S> out({M, cols});
  for (int64_t i = 0; i < M; ++i)
    std::copy(X.data() + i * N + c0, X.data() + i * N + c0 + cols, out.data() + i * cols);
  return make_node<S>("slice_cols", std::move(out), {x},
                      [c0, N](const Var<S>& g, const std::vector<Var<S>>&) {
                        return std::vector<Var<S>>{unslice_cols(g, c0, N)};
                      });
}

template <class S>
Var<S> unslice_cols(const Var<S>& g, int64_t c0, int64_t cols_total) {
  const auto& G = g.value();
  if (G.rank() != 2) fail_config("unslice_cols: rank != 2");
  int64_t M = G.dim(0), cols = G.dim(1);
  Tensor<S> out({M, cols_total});
  for (int64_t i = 0; i < M; ++i)
    std::copy(G.data() + i * cols, G.data() + (i + 1) * cols, out.data() + i * cols_total + c0);
  return make_node<S>("unslice_cols", std::move(out), {g},
                      [c0, cols](const Var<S>& g2, const std::vector<Var<S>>&) {
                        return std::vector<Var<S>>{slice_cols(g2, c0, cols)};
                      });
}

template <class S>
Var<S> concat_cols(const Var<S>& a, const Var<S>& b) {
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(0) != B.dim(0)) shape_error("concat_cols", A, B);
  int64_t M = A.dim(0), Na = A.dim(1), Nb = B.dim(1);
  Tensor<S> out({M, Na + Nb});
  for (int64_t i = 0; i < M; ++i) {
    std::copy(A.data() + i * Na, A.data() + (i + 1) * Na, out.data() + i * (Na + Nb));
    std::copy(B.data() + i * Nb, B.data() + (i + 1) * Nb, out.data() + i * (Na + Nb) + Na);
  }
  return make_node<S>("concat_cols", std::move(out), {a, b},
                      [Na, Nb](const Var<S>& g, const std::vector<Var<S>>&) {
                        return std::vector<Var<S>>{slice_cols(g, 0, Na), slice_cols(g, Na, Nb)};
                      });
}

/// Stacks T row vectors [1,N] into [T,N].
template <class S>
Var<S> stack_rows(const std::vector<Var<S>>& rows) {
  if (rows.empty()) fail_config("stack_rows: empty");
  int64_t N = rows[0].value().dim(1);
  int64_t T = static_cast<int64_t>(rows.size());
  Tensor<S> out({T, N});
  for (int64_t t = 0; t < T; ++t) {
    const auto& R = rows[t].value();
    if (R.rank() != 2 || R.dim(0) != 1 || R.dim(1) != N) fail_config("stack_rows: bad row shape");
    std::copy(R.data(), R.data() + N, out.data() + t * N);
  }
  return make_node<S>("stack_rows", std::move(out), rows,
                      [](const Var<S>& g, const std::vector<Var<S>>& ps) {
                        std::vector<Var<S>> grads;
                        grads.reserve(ps.size());
                        for (size_t t = 0; t < ps.size(); ++t)
                          grads.push_back(slice_rows(g, static_cast<int64_t>(t), 1));
                        return grads;
                      });
}

template <class S>
Var<S> reverse_rows(const Var<S>& x) {
  const auto& X = x.value();
  if (X.rank() != 2) fail_config("reverse_rows: rank != 2");
  int64_t M = X.dim(0), N = X.dim(1);
  Tensor<S> out({M, N});
  for (int64_t i = 0; i < M; ++i)
    std::copy(X.data() + i * N, X.data() + (i + 1) * N, out.data() + (M - 1 - i) * N);
  return make_node<S>("reverse_rows", std::move(out), {x},
                      [](const Var<S>& g, const std::vector<Var<S>>&) {
                        return std::vector<Var<S>>{reverse_rows(g)};
                      });
}

// ---------------------------------------------------------------------------
// conv2d 3x3 (pad 1) via im2col + gemm, and pooling

template <class S>
void im2col3x3_raw(const Tensor<S>& x, Tensor<S>& col) {
  int64_t C = x.dim(0), T = x.dim(1), F = x.dim(2);
  const S* xp = x.data();
  S* cp = col.data();
  int64_t TF = T * F;
  for (int64_t c = 0; c < C; ++c)
    for (int64_t dt = -1; dt <= 1; ++dt)
      for (int64_t df = -1; df <= 1; ++df) {
        S* dst = cp + ((c * 3 + (dt + 1)) * 3 + (df + 1)) * TF;
        const S* src = xp + c * TF;
        for (int64_t t = 0; t < T; ++t) {
          int64_t ts = t + dt;
          if (ts < 0 || ts >= T) {
            std::fill(dst + t * F, dst + (t + 1) * F, S(0));
            continue;
          }
          S* d = dst + t * F;
          const S* s = src + ts * F;
          if (df == 0) {
            std::copy(s, s + F, d);
          } else if (df < 0) {
            d[0] = S(0);
            std::copy(s, s + F - 1, d + 1);
          } else {
            std::copy(s + 1, s + F, d);
            d[F - 1] = S(0);
          }
        }
      }
}

template <class S>
Var<S> col2im3x3(const Var<S>& col, int64_t C, int64_t T, int64_t F);

template <class S>
Var<S> im2col3x3(const Var<S>& x) {
  const auto& X = x.value();
  if (X.rank() != 3) fail_config("im2col3x3: rank != 3");
  int64_t C = X.dim(0), T = X.dim(1), F = X.dim(2);
  Tensor<S> col({C * 9, T * F});
  im2col3x3_raw(X, col);
  return make_node<S>("im2col3x3", std::move(col), {x},
                      [C, T, F](const Var<S>& g, const std::vector<Var<S>>&) {
                        return std::vector<Var<S>>{col2im3x3(g, C, T, F)};
                      });
}

template <class S>
Var<S> col2im3x3(const Var<S>& col, int64_t C, int64_t T, int64_t F) {
  const auto& G = col.value();
  if (G.rank() != 2 || G.dim(0) != C * 9 || G.dim(1) != T * F) fail_config("col2im3x3: bad shape");
  Tensor<S> out({C, T, F});
  S* xp = out.data();
  const S* cp = G.data();
  int64_t TF = T * F;
  for (int64_t c = 0; c < C; ++c)
    for (int64_t dt = -1; dt <= 1; ++dt)
      for (int64_t df = -1; df <= 1; ++df) {
        const S* src = cp + ((c * 3 + (dt + 1)) * 3 + (df + 1)) * TF;
        S* dst = xp + c * TF;
        for (int64_t t = 0; t < T; ++t) {
          int64_t ts = t + dt;
          if (ts < 0 || ts >= T) continue;
          const S* s = src + t * F;
          S* d = dst + ts * F;
          if (df == 0) {
            for (int64_t f = 0; f < F; ++f) d[f] += s[f];
          } else if (df < 0) {
            for (int64_t f = 1; f < F; ++f) d[f - 1] += s[f];
          } else {
            for (int64_t f = 0; f < F - 1; ++f) d[f + 1] += s[f];
          }
        }
      }
  return make_node<S>("col2im3x3", std::move(out), {col},
                      [](const Var<S>& g, const std::vector<Var<S>>&) {
                        return std::vector<Var<S>>{im2col3x3(g)};
                      });
}

/// 3x3 convolution, padding 1, stride 1. w: [Cout, Cin, 3, 3], b: [Cout].
/// The im2col buffer is scratch in the forward pass and recomputed for the
/// backward pass, which keeps per-sample tape memory small.
template <class S>
Var<S> conv2d3x3(const Var<S>& x, const Var<S>& w, const Var<S>& b) {
  const auto& X = x.value();
  const auto& W = w.value();
  if (X.rank() != 3 || W.rank() != 4 || W.dim(2) != 3 || W.dim(3) != 3 || W.dim(1) != X.dim(0))
    shape_error("conv2d3x3", X, W);
  int64_t Cin = X.dim(0), T = X.dim(1), F = X.dim(2), Cout = W.dim(0);
  if (b.value().rank() != 1 || b.value().dim(0) != Cout) shape_error("conv2d3x3(bias)", X, b.value());
  Tensor<S> col({Cin * 9, T * F});
  im2col3x3_raw(X, col);
  Tensor<S> out({Cout, T, F});
  blas::gemm(false, false, Cout, T * F, Cin * 9, W.data(), col.data(), out.data());
  S* p = out.data();
  const S* bp = b.value().data();
  for (int64_t c = 0; c < Cout; ++c)
    for (int64_t i = 0; i < T * F; ++i) p[c * T * F + i] += bp[c];
  return make_node<S>(
      "conv2d3x3", std::move(out), {x, w, b},
      [Cin, T, F, Cout](const Var<S>& g, const std::vector<Var<S>>& ps) {
        Var<S> gm = reshape(g, {Cout, T * F});
        Var<S> colv = im2col3x3(ps[0]);
        Var<S> dw = reshape(matmul_nt(gm, colv), {Cout, Cin, 3, 3});
        Var<S> wm = reshape(ps[1], {Cout, Cin * 9});
        Var<S> dx = col2im3x3(matmul_tn(wm, gm), Cin, T, F);
        Var<S> db = row_sum(gm);
        return std::vector<Var<S>>{dx, dw, db};
      });
}

template <class S>
Var<S> avgunpool2d(const Var<S>& g, int64_t kt, int64_t kf, int64_t T, int64_t F);

/// Average pooling over (time, freq) with window = stride = (kt, kf).
/// Trailing rows/cols that do not fill a window are dropped (floor semantics).
template <class S>
Var<S> avgpool2d(const Var<S>& x, int64_t kt, int64_t kf) {
  const auto& X = x.value();
  if (X.rank() != 3) fail_config("avgpool2d: rank != 3");
  int64_t C = X.dim(0), T = X.dim(1), F = X.dim(2);
  int64_t To = T / kt, Fo = F / kf;
  if (To < 1 || Fo < 1) fail_config("avgpool2d: window larger than input");
  Tensor<S> out({C, To, Fo});
  S inv = S(1) / static_cast<S>(kt * kf);
  for (int64_t c = 0; c < C; ++c)
    for (int64_t to = 0; to < To; ++to)
      for (int64_t fo = 0; fo < Fo; ++fo) {
        S s = 0;
        for (int64_t i = 0; i < kt; ++i)
          for (int64_t j = 0; j < kf; ++j) s += X.at(c, to * kt + i, fo * kf + j);
        out.at(c, to, fo) = s * inv;
      }
  return make_node<S>("avgpool2d", std::move(out), {x},
                      [kt, kf, T, F](const Var<S>& g, const std::vector<Var<S>>&) {
                        return std::vector<Var<S>>{avgunpool2d(g, kt, kf, T, F)};
                      });
}

template <class S>
Var<S> avgunpool2d(const Var<S>& g, int64_t kt, int64_t kf, int64_t T, int64_t F) {
  const auto& G = g.value();
  if (G.rank() != 3) fail_config("avgunpool2d: rank != 3");
  int64_t C = G.dim(0), To = G.dim(1), Fo = G.dim(2);
  Tensor<S> out({C, T, F});
  S inv = S(1) / static_cast<S>(kt * kf);
  for (int64_t c = 0; c < C; ++c)
    for (int64_t to = 0; to < To; ++to)
      for (int64_t fo = 0; fo < Fo; ++fo) {
        S v = G.at(c, to, fo) * inv;
        for (int64_t i = 0; i < kt; ++i)
          for (int64_t j = 0; j < kf; ++j) out.at(c, to * kt + i, fo * kf + j) = v;
      }
  return make_node<S>("avgunpool2d", std::move(out), {g},
                      [kt, kf](const Var<S>& g2, const std::vector<Var<S>>&) {
                        return std::vector<Var<S>>{avgpool2d(g2, kt, kf)};
                      });
}

template <class S>
Var<S> freq_unmean(const Var<S>& g, int64_t F);

/// [C,T,F] -> [C,T], mean over the frequency axis.
template <class S>
Var<S> freq_mean(const Var<S>& x) {
  const auto& X = x.value();
  if (X.rank() != 3) fail_config("freq_mean: rank != 3");
  int64_t C = X.dim(0), T = X.dim(1), F = X.dim(2);
  Tensor<S> out({C, T});
  S inv = S(1) / static_cast<S>(F);
  for (int64_t c = 0; c < C; ++c)
    for (int64_t t = 0; t < T; ++t) {
      S s = 0;
      for (int64_t f = 0; f < F; ++f) s += X.at(c, t, f);
      out.at(c, t) = s * inv;
    }
  return make_node<S>("freq_mean", std::move(out), {x},
                      [F](const Var<S>& g, const std::vector<Var<S>>&) {
                        return std::vector<Var<S>>{freq_unmean(g, F)};
                      });
}

template <class S>
Var<S> freq_unmean(const Var<S>& g, int64_t F) {
  const auto& G = g.value();
  if (G.rank() != 2) fail_config("freq_unmean: rank != 2");
  int64_t C = G.dim(0), T = G.dim(1);
  Tensor<S> out({C, T, F});
  S inv = S(1) / static_cast<S>(F);
  for (int64_t c = 0; c < C; ++c)
    for (int64_t t = 0; t < T; ++t) {
      S v = G.at(c, t) * inv;
      for (int64_t f = 0; f < F; ++f) out.at(c, t, f) = v;
    }
  return make_node<S>("freq_unmean", std::move(out), {g},
                      [](const Var<S>& g2, const std::vector<Var<S>>&) {
                        return std::vector<Var<S>>{freq_mean(g2)};
                      });
}

// ---------------------------------------------------------------------------
// composites

/// Batch normalization over (T,F) per channel with learnable affine.
/// Statistics come from the tensor being normalized (single-sample batch
/// statistics in every mode); backward flows through mean and variance.
template <class S>
Var<S> batchnorm2d(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, S eps = S(1e-5)) {
  const auto& X = x.value();
  if (X.rank() != 3) fail_config("batchnorm2d: rank != 3");
  int64_t T = X.dim(1), F = X.dim(2);
  Var<S> m = ch_mean(x);
  Var<S> xc = sub(x, broadcast_ch(m, T, F));
  Var<S> v = ch_mean(mul(xc, xc));
  Var<S> xn = mul_ch(xc, rsqrt_eps(v, eps));
  return add_ch(mul_ch(xn, gamma), beta);
}

template <class S>
Var<S> linear(const Var<S>& x, const Var<S>& w, const Var<S>& b) {
  return add_row_vector(matmul_nt(x, w), b);
}

template <class S>
Var<S> mse_loss(const Var<S>& pred, const Var<S>& target) {
  if (!pred.value().same_shape(target.value())) shape_error("mse_loss", pred.value(), target.value());
  Var<S> d = sub(pred, target);
  return mean_all(mul(d, d));
}

// ---------------------------------------------------------------------------
// reverse sweep

/// Gradients of a scalar loss w.r.t. `wrt`. With create_graph=true the
/// backward computation is itself recorded, so taking grad() of the result
/// yields exact higher-order derivatives. Vars not connected to the loss get
/// zero gradients.
template <class S>
std::vector<Var<S>> grad(const Var<S>& loss, const std::vector<Var<S>>& wrt,
                         bool create_graph = false) {
  if (loss.value().numel() != 1) fail_config("grad: loss must be scalar");

  // Reverse postorder (= topological order) of the reachable grad-requiring
  // subgraph, found with an iterative DFS.
  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> visited;
  if (loss.requires_grad()) {
    struct Frame {
      Node<S>* n;
      size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.node(), 0});
    visited.insert(loss.node());
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next_parent < f.n->parents.size()) {
        const Var<S>& p = f.n->parents[f.next_parent++];
        Node<S>* pn = p.node();
        if (p.requires_grad() && !visited.count(pn)) {
          visited.insert(pn);
          stack.push_back({pn, 0});
        }
      } else {
        order.push_back(f.n);
        stack.pop_back();
      }
    }
  }

  std::unordered_map<Node<S>*, Var<S>> grads;
  grads[loss.node()] = constant(Tensor<S>::scalar(S(1)));

  auto run = [&] {
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<S>* n = *it;
      auto git = grads.find(n);
      if (git == grads.end() || !n->vjp) continue;
      Var<S> g = git->second;
      std::vector<Var<S>> pgrads = n->vjp(g, n->parents);
      if (pgrads.size() != n->parents.size()) fail_numeric("vjp arity mismatch in op " + n->op);
      for (size_t i = 0; i < pgrads.size(); ++i) {
        if (!pgrads[i].defined() || !n->parents[i].requires_grad()) continue;
        Node<S>* pn = n->parents[i].node();
        auto pit = grads.find(pn);
        if (pit == grads.end())
          grads.emplace(pn, pgrads[i]);
        else
          pit->second = add(pit->second, pgrads[i]);
      }
    }
  };

  if (create_graph) {
    EnableGradGuard guard;
    run();
  } else {
    NoGradGuard guard;
    run();
  }

  std::vector<Var<S>> out;
  out.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto it = grads.find(w.node());
    if (it == grads.end())
      out.push_back(constant(Tensor<S>(w.value().shape())));  // disconnected -> zeros
    else
      out.push_back(it->second);
  }
  return out;
}

}  // namespace metaseld::nn
