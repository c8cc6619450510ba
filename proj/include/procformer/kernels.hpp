#pragma once

#include <cstddef>
#include <string>

namespace procformer::kernels {

// Dense f64 inner loops behind the tensor engine. Two implementations exist:
// a scalar reference and an AVX2 variant selected at runtime. Both compute
// every output element with the same accumulation order and without fused
// multiply-adds, so their results are bit-identical; the equivalence suite
// asserts exact equality, and runtime dispatch can never change a result.
//
// Matmul kernels accumulate into C (C += ...); callers zero-fill first when
// they want plain assignment. Leading dimensions (lda/ldb/ldc) are row
// strides, allowing callers to address sub-blocks for parallel execution.

struct KernelTable {
    const char* name;

    // C[m,n] += A[m,k] * B[k,n]
    void (*matmul_nn)(const double* a, int lda, const double* b, int ldb,
                      double* c, int ldc, int m, int k, int n);
    // C[m,n] += A[m,k] * B[n,k]^T   (B stored row-major [n,k])
    void (*matmul_nt)(const double* a, int lda, const double* b, int ldb,
                      double* c, int ldc, int m, int k, int n);
    // C[k,n] += A[m,k]^T * B[m,n]   (A stored row-major [m,k])
    void (*matmul_tn)(const double* a, int lda, const double* b, int ldb,
                      double* c, int ldc, int m, int k, int n);

    void (*add)(const double* a, const double* b, double* out, size_t n);
    void (*mul)(const double* a, const double* b, double* out, size_t n);
    void (*axpy)(double alpha, const double* x, double* y, size_t n);  // y += alpha*x
    void (*scale)(const double* x, double alpha, double* out, size_t n);
    void (*relu)(const double* x, double* out, size_t n);
    void (*relu_bwd)(const double* x, const double* dy, double* dx, size_t n);

    // One elementwise Adam step. c1 = 1/(1-beta1^t), c2 = 1/(1-beta2^t) are
    // precomputed by the caller so t-dependent work stays out of the loop.
    void (*adam_update)(double* param, double* m, double* v, const double* g,
                        size_t n, double lr, double beta1, double beta2,
                        double eps, double c1, double c2);
};

enum class Backend { scalar, avx2 };

const KernelTable& scalar_table();
const KernelTable& avx2_table();  // scalar fallback on non-x86 builds
bool avx2_supported();

/// Active table. First call selects: AVX2 when the CPU supports it, scalar
/// otherwise; the PROCFORMER_KERNELS environment variable (scalar | avx2)
/// overrides detection.
const KernelTable& active();

/// Force a backend (tests). Throws EngineError if unsupported on this CPU.
void set_backend(Backend b);
Backend current_backend();
std::string backend_name();

} // namespace procformer::kernels
