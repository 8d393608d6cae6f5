#pragma once

#include <cmath>

#include "metaseld/rng.hpp"
#include "metaseld/tensor.hpp"

namespace metaseld::nn {

/// Uniform in +-sqrt(6 / (fan_in + fan_out)).
template <class S>
Tensor<S> glorot_uniform(std::vector<int64_t> shape, int64_t fan_in, int64_t fan_out, Rng& rng) {
  double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor<S> t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(rng.uniform(-bound, bound));
  return t;
}

/// Square orthogonal matrix via Gram-Schmidt on a Gaussian draw.
template <class S>
Tensor<S> orthogonal(int64_t n, Rng& rng) {
  // work in double regardless of S
  std::vector<double> a(static_cast<size_t>(n * n));
  for (auto& v : a) v = rng.normal();
  for (int64_t i = 0; i < n; ++i) {
    double* row = a.data() + i * n;
    for (int64_t j = 0; j < i; ++j) {
      const double* prev = a.data() + j * n;
      double dot = 0;
      for (int64_t k = 0; k < n; ++k) dot += row[k] * prev[k];
      for (int64_t k = 0; k < n; ++k) row[k] -= dot * prev[k];
    }
    double norm = 0;
    for (int64_t k = 0; k < n; ++k) norm += row[k] * row[k];
    norm = std::sqrt(norm);
    if (norm < 1e-12) {  // degenerate draw; retry the row
      for (int64_t k = 0; k < n; ++k) row[k] = rng.normal();
      --i;
      continue;
    }
    for (int64_t k = 0; k < n; ++k) row[k] /= norm;
  }
  Tensor<S> t({n, n});
  for (int64_t i = 0; i < n * n; ++i) t[i] = static_cast<S>(a[static_cast<size_t>(i)]);
  return t;
}

}  // namespace metaseld::nn
