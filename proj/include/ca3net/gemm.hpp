#pragma once

#include <mutex>

#ifdef CA3NET_WITH_OPENBLAS
#include <cblas.h>
extern "C" void openblas_set_num_threads(int);
#endif

namespace ca3net {
namespace detail {

#ifdef CA3NET_WITH_OPENBLAS
inline void blas_single_thread_once() {
    static std::once_flag flag;
    std::call_once(flag, [] { openblas_set_num_threads(1); });
}
#endif

/// C[m x n] += or = alpha * op(A) * op(B). Row-major, leading dimensions as
/// in BLAS. The BLAS route is pinned to one thread for determinism.
inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a,
                 int lda, const double* b, int ldb, double beta, double* c, int ldc) {
#ifdef CA3NET_WITH_OPENBLAS
    blas_single_thread_once();
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
#else
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) c[i * static_cast<std::size_t>(ldc) + j] *= beta;
    // ikj order keeps the inner loop contiguous over B and C rows.
    for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
            double av = alpha * (trans_a ? a[p * static_cast<std::size_t>(lda) + i]
                                         : a[i * static_cast<std::size_t>(lda) + p]);
            if (av == 0.0) continue;
            if (!trans_b) {
                const double* brow = b + p * static_cast<std::size_t>(ldb);
                double* crow = c + i * static_cast<std::size_t>(ldc);
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            } else {
                double* crow = c + i * static_cast<std::size_t>(ldc);
                for (int j = 0; j < n; ++j) crow[j] += av * b[j * static_cast<std::size_t>(ldb) + p];
            }
        }
    }
#endif
}

} // namespace detail
} // namespace ca3net
