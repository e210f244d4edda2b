#pragma once

#include <cstddef>

namespace emnet::detail {

// Row-major C(m,n) = alpha * op(A) * op(B) + beta * C.
// Backed by OpenBLAS when available (loaded at first use so the kernel
// selection can be pinned beforehand), otherwise by a portable blocked
// fallback. For fixed shapes and a fixed backend the reduction order is
// fixed, so results are bitwise reproducible run to run.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, float alpha,
          const float* a, std::size_t lda, const float* b, std::size_t ldb, float beta, float* c,
          std::size_t ldc);
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta,
          double* c, std::size_t ldc);

// True when the OpenBLAS backend is active.
bool blas_backend_available();

}  // namespace emnet::detail
