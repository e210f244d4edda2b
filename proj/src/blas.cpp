#include "emnet/blas.hpp"

#include <cstdlib>
#include <mutex>
#include <vector>

#include <dlfcn.h>
#include <malloc.h>

namespace emnet::detail {

namespace {

// Activation buffers churn every training step; keep large blocks on the
// heap instead of round-tripping through mmap/munmap, which refaults every
// page on reuse.
struct MallocTuning {
    MallocTuning() {
        mallopt(M_MMAP_THRESHOLD, 512 * 1024 * 1024);
        mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
    }
};
const MallocTuning malloc_tuning;

// CBLAS ABI constants
constexpr int kRowMajor = 101;
constexpr int kNoTrans = 111;
constexpr int kTrans = 112;

using SgemmFn = void (*)(int, int, int, int, int, int, float, const float*, int, const float*,
                         int, float, float*, int);
using DgemmFn = void (*)(int, int, int, int, int, int, double, const double*, int, const double*,
                         int, double, double*, int);
using SetThreadsFn = void (*)(int);

struct BlasBackend {
    SgemmFn sgemm = nullptr;
    DgemmFn dgemm = nullptr;
};

// OpenBLAS picks its kernels from OPENBLAS_CORETYPE at load time. The
// runtime CPU probe misreports masked virtual CPUs, so when the host has
// AVX-512 and the user has not chosen a core type, pin the Skylake-X
// kernels before the library is mapped. Loading lazily (dlopen, not a link
// dependency) is what makes that ordering possible.
BlasBackend load_backend() {
    BlasBackend be;
#if defined(__x86_64__) && defined(__GNUC__)
    if (!std::getenv("OPENBLAS_CORETYPE") && __builtin_cpu_supports("avx512f"))
        setenv("OPENBLAS_CORETYPE", "SKYLAKEX", 1);
#endif
    void* handle = dlopen("libopenblas.so.0", RTLD_NOW | RTLD_LOCAL);
    if (!handle) handle = dlopen("libopenblas.so", RTLD_NOW | RTLD_LOCAL);
    if (!handle) return be;
    be.sgemm = reinterpret_cast<SgemmFn>(dlsym(handle, "cblas_sgemm"));
    be.dgemm = reinterpret_cast<DgemmFn>(dlsym(handle, "cblas_dgemm"));
    if (!be.sgemm || !be.dgemm) {
        be = BlasBackend{};
        return be;
    }
    // our parallelism lives above the gemm calls; keep the library serial
    if (auto set_threads = reinterpret_cast<SetThreadsFn>(
            dlsym(handle, "openblas_set_num_threads")))
        set_threads(1);
    return be;
}

const BlasBackend& backend() {
    static const BlasBackend be = load_backend();
    return be;
}

// Portable blocked fallback. AXPY-style inner loops over contiguous rows of
// the (possibly logically transposed) operands; reduction order fixed.
template <class T>
void gemm_fallback(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                   T alpha, const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta,
                   T* c, std::size_t ldc) {
    auto a_at = [&](std::size_t i, std::size_t p) { return trans_a ? a[p * lda + i] : a[i * lda + p]; };
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c + i * ldc;
        if (beta == T(0)) {
            for (std::size_t j = 0; j < n; ++j) crow[j] = T(0);
        } else if (beta != T(1)) {
            for (std::size_t j = 0; j < n; ++j) crow[j] *= beta;
        }
        if (!trans_b) {
            for (std::size_t p = 0; p < k; ++p) {
                const T av = alpha * a_at(i, p);
                if (av == T(0)) continue;
                const T* brow = b + p * ldb;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        } else {
            // b is (n x k); dot products with multiple accumulators
            for (std::size_t j = 0; j < n; ++j) {
                const T* brow = b + j * ldb;
                T lanes[8] = {};
                std::size_t p = 0;
                for (; p + 8 <= k; p += 8)
                    for (std::size_t l = 0; l < 8; ++l) lanes[l] += a_at(i, p + l) * brow[p + l];
                T acc = 0;
                for (; p < k; ++p) acc += a_at(i, p) * brow[p];
                for (std::size_t l = 0; l < 8; ++l) acc += lanes[l];
                crow[j] += alpha * acc;
            }
        }
    }
}

}  // namespace

bool blas_backend_available() { return backend().sgemm != nullptr; }

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, float alpha,
          const float* a, std::size_t lda, const float* b, std::size_t ldb, float beta, float* c,
          std::size_t ldc) {
    if (m == 0 || n == 0) return;
    if (const auto& be = backend(); be.sgemm) {
        be.sgemm(kRowMajor, trans_a ? kTrans : kNoTrans, trans_b ? kTrans : kNoTrans,
                 static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
                 static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
        return;
    }
    gemm_fallback(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta,
          double* c, std::size_t ldc) {
    if (m == 0 || n == 0) return;
    if (const auto& be = backend(); be.dgemm) {
        be.dgemm(kRowMajor, trans_a ? kTrans : kNoTrans, trans_b ? kTrans : kNoTrans,
                 static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
                 static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
        return;
    }
    gemm_fallback(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

}  // namespace emnet::detail
