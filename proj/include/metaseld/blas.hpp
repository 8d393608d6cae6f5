#pragma once

#include <cstdint>

namespace metaseld::blas {

/// Row-major C[M,N] = op(A) * op(B). op = transpose when ta/tb set.
/// A is [M,K] (or [K,M] if ta), B is [K,N] (or [N,K] if tb).
void gemm(bool ta, bool tb, int64_t M, int64_t N, int64_t K, const float* A, const float* B,
          float* C);
void gemm(bool ta, bool tb, int64_t M, int64_t N, int64_t K, const double* A, const double* B,
          double* C);

/// Pins the BLAS backend to one thread; worker-level parallelism is handled
/// by the engine so results do not depend on the parallelism degree.
void set_single_threaded();

}  // namespace metaseld::blas
