#include "suggest/numerics/blas.hpp"

#include <cblas.h>

namespace suggest::num::blas {

namespace {
CBLAS_TRANSPOSE tr(bool t) { return t ? CblasTrans : CblasNoTrans; }
int i(std::size_t v) { return static_cast<int>(v); }
}  // namespace

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, float alpha,
          const float* a, std::size_t lda, const float* b, std::size_t ldb, float beta, float* c,
          std::size_t ldc) {
  if (m == 0 || n == 0) return;
  cblas_sgemm(CblasRowMajor, tr(trans_a), tr(trans_b), i(m), i(n), i(k), alpha, a, i(lda), b, i(ldb), beta, c,
              i(ldc));
}

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta, double* c,
          std::size_t ldc) {
  if (m == 0 || n == 0) return;
  cblas_dgemm(CblasRowMajor, tr(trans_a), tr(trans_b), i(m), i(n), i(k), alpha, a, i(lda), b, i(ldb), beta, c,
              i(ldc));
}

void gemv(bool trans, std::size_t m, std::size_t n, float alpha, const float* a, std::size_t lda, const float* x,
          float beta, float* y) {
  if (m == 0 || n == 0) return;
  cblas_sgemv(CblasRowMajor, tr(trans), i(m), i(n), alpha, a, i(lda), x, 1, beta, y, 1);
}

void gemv(bool trans, std::size_t m, std::size_t n, double alpha, const double* a, std::size_t lda,
          const double* x, double beta, double* y) {
  if (m == 0 || n == 0) return;
  cblas_dgemv(CblasRowMajor, tr(trans), i(m), i(n), alpha, a, i(lda), x, 1, beta, y, 1);
}

void set_single_thread() { openblas_set_num_threads(1); }

}  // namespace suggest::num::blas
