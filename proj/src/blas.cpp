#include "metaseld/blas.hpp"

#include <cblas.h>

extern "C" void openblas_set_num_threads(int);

namespace metaseld::blas {

namespace {
struct BlasInit {
  BlasInit() { openblas_set_num_threads(1); }
};
BlasInit init_once;
}  // namespace

void gemm(bool ta, bool tb, int64_t M, int64_t N, int64_t K, const float* A, const float* B,
          float* C) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              static_cast<int>(M), static_cast<int>(N), static_cast<int>(K), 1.0f, A,
              static_cast<int>(ta ? M : K), B, static_cast<int>(tb ? K : N), 0.0f, C,
              static_cast<int>(N));
}

void gemm(bool ta, bool tb, int64_t M, int64_t N, int64_t K, const double* A, const double* B,
          double* C) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              static_cast<int>(M), static_cast<int>(N), static_cast<int>(K), 1.0, A,
              static_cast<int>(ta ? M : K), B, static_cast<int>(tb ? K : N), 0.0, C,
              static_cast<int>(N));
}

void set_single_threaded() { openblas_set_num_threads(1); }

}  // namespace metaseld::blas
