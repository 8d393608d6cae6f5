#pragma once

#include "metaseld/autodiff.hpp"

namespace metaseld::nn {

/// One GRU direction. Gate order along the 3H axis: reset, update, new.
/// w_ih: [3H, I], w_hh: [3H, H], b_ih/b_hh: [3H].
template <class S>
struct GruDirParams {
  Var<S> w_ih, w_hh, b_ih, b_hh;
};

/// Runs a single-direction GRU over x [T, I], returning hidden states [T, H].
/// h_0 = 0. The input projection for all steps is batched into one gemm.
template <class S>
Var<S> gru_direction(const Var<S>& x, const GruDirParams<S>& p, int64_t hidden) {
  const int64_t T = x.value().dim(0);
  const int64_t H = hidden;
  Var<S> xp = add_row_vector(matmul_nt(x, p.w_ih), p.b_ih);  // [T, 3H]
  Var<S> h = constant(Tensor<S>({1, H}));
  std::vector<Var<S>> rows;
  rows.reserve(T);
  for (int64_t t = 0; t < T; ++t) {
    Var<S> xr = slice_rows(xp, t, 1);                              // [1, 3H]
    Var<S> hp = add_row_vector(matmul_nt(h, p.w_hh), p.b_hh);      // [1, 3H]
    Var<S> r = sigmoid(add(slice_cols(xr, 0, H), slice_cols(hp, 0, H)));
    Var<S> z = sigmoid(add(slice_cols(xr, H, H), slice_cols(hp, H, H)));
    Var<S> n = tanh(add(slice_cols(xr, 2 * H, H), mul(r, slice_cols(hp, 2 * H, H))));
    h = add(mul(one_minus(z), n), mul(z, h));
    rows.push_back(h);
  }
  return stack_rows(rows);
}

/// Bidirectional GRU: forward and reversed passes concatenated to [T, 2H].
template <class S>
Var<S> bigru(const Var<S>& x, const GruDirParams<S>& fwd, const GruDirParams<S>& bwd,
             int64_t hidden) {
  Var<S> f = gru_direction(x, fwd, hidden);
  Var<S> b = reverse_rows(gru_direction(reverse_rows(x), bwd, hidden));
  return concat_cols(f, b);
}

}  // namespace metaseld::nn
