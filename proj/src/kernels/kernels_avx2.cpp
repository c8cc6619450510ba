#include <immintrin.h>

#include <cmath>

#include "procformer/kernels.hpp"

// AVX2 variants of the scalar reference kernels. Vectorization always runs
// across independent output elements, never across a reduction axis, so each
// element sees the same accumulation order as the scalar code. No FMA: the
// scalar build cannot contract mul+add, so the vector code must not either.

namespace procformer::kernels {

namespace {

void v_matmul_nn(const double* a, int lda, const double* b, int ldb,
                 double* c, int ldc, int m, int k, int n) {
    const int n4 = n & ~3;
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<size_t>(i) * lda;
        double* crow = c + static_cast<size_t>(i) * ldc;
        for (int p = 0; p < k; ++p) {
            const __m256d av = _mm256_set1_pd(arow[p]);
            const double* brow = b + static_cast<size_t>(p) * ldb;
            int j = 0;
            for (; j < n4; j += 4) {
                __m256d cv = _mm256_loadu_pd(crow + j);
                cv = _mm256_add_pd(cv, _mm256_mul_pd(av, _mm256_loadu_pd(brow + j)));
                _mm256_storeu_pd(crow + j, cv);
            }
            const double as = arow[p];
            for (; j < n; ++j) crow[j] += as * brow[j];
        }
    }
}

void v_matmul_nt(const double* a, int lda, const double* b, int ldb,
                 double* c, int ldc, int m, int k, int n) {
    // Four output columns at a time; the k loop stays sequential per element.
    const int n4 = n & ~3;
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<size_t>(i) * lda;
        double* crow = c + static_cast<size_t>(i) * ldc;
        int j = 0;
        for (; j < n4; j += 4) {
            const double* b0 = b + static_cast<size_t>(j) * ldb;
            const double* b1 = b0 + ldb;
            const double* b2 = b1 + ldb;
            const double* b3 = b2 + ldb;
            __m256d acc = _mm256_loadu_pd(crow + j);
            for (int p = 0; p < k; ++p) {
                const __m256d av = _mm256_set1_pd(arow[p]);
                const __m256d bv = _mm256_set_pd(b3[p], b2[p], b1[p], b0[p]);
                acc = _mm256_add_pd(acc, _mm256_mul_pd(av, bv));
            }
            _mm256_storeu_pd(crow + j, acc);
        }
        for (; j < n; ++j) {
            const double* brow = b + static_cast<size_t>(j) * ldb;
            double acc = crow[j];
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] = acc;
        }
    }
}

void v_matmul_tn(const double* a, int lda, const double* b, int ldb,
                 double* c, int ldc, int m, int k, int n) {
    const int n4 = n & ~3;
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<size_t>(i) * lda;
        const double* brow = b + static_cast<size_t>(i) * ldb;
        for (int p = 0; p < k; ++p) {
            const __m256d av = _mm256_set1_pd(arow[p]);
            double* crow = c + static_cast<size_t>(p) * ldc;
            int j = 0;
            for (; j < n4; j += 4) {
                __m256d cv = _mm256_loadu_pd(crow + j);
                cv = _mm256_add_pd(cv, _mm256_mul_pd(av, _mm256_loadu_pd(brow + j)));
                _mm256_storeu_pd(crow + j, cv);
            }
            const double as = arow[p];
            for (; j < n; ++j) crow[j] += as * brow[j];
        }
    }
}

void v_add(const double* a, const double* b, double* out, size_t n) {
    size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) out[i] = a[i] + b[i];
}

void v_mul(const double* a, const double* b, double* out, size_t n) {
    size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) out[i] = a[i] * b[i];
}

void v_axpy(double alpha, const double* x, double* y, size_t n) {
    const __m256d av = _mm256_set1_pd(alpha);
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d yv = _mm256_loadu_pd(y + i);
        yv = _mm256_add_pd(yv, _mm256_mul_pd(av, _mm256_loadu_pd(x + i)));
        _mm256_storeu_pd(y + i, yv);
    }
    for (; i < n; ++i) y[i] += alpha * x[i];
}

void v_scale(const double* x, double alpha, double* out, size_t n) {
    const __m256d av = _mm256_set1_pd(alpha);
    size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_mul_pd(av, _mm256_loadu_pd(x + i)));
    for (; i < n; ++i) out[i] = alpha * x[i];
}

void v_relu(const double* x, double* out, size_t n) {
    // max_pd(x, 0) returns the second operand for -0.0 and NaN inputs,
    // matching the scalar (x > 0 ? x : 0) exactly.
    const __m256d zero = _mm256_setzero_pd();
    size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_max_pd(_mm256_loadu_pd(x + i), zero));
    for (; i < n; ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void v_relu_bwd(const double* x, const double* dy, double* dx, size_t n) {
    // Blend rather than add-a-zero: adding 0.0 would flip a -0.0 in dx.
    const __m256d zero = _mm256_setzero_pd();
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d keep = _mm256_cmp_pd(_mm256_loadu_pd(x + i), zero, _CMP_GT_OQ);
        const __m256d dxv = _mm256_loadu_pd(dx + i);
        const __m256d summed = _mm256_add_pd(dxv, _mm256_loadu_pd(dy + i));
        _mm256_storeu_pd(dx + i, _mm256_blendv_pd(dxv, summed, keep));
    }
    for (; i < n; ++i)
        if (x[i] > 0.0) dx[i] += dy[i];
}

void v_adam_update(double* param, double* m, double* v, const double* g,
                   size_t n, double lr, double beta1, double beta2,
                   double eps, double c1, double c2) {
    const __m256d b1 = _mm256_set1_pd(beta1);
    const __m256d b2 = _mm256_set1_pd(beta2);
    const __m256d ob1 = _mm256_set1_pd(1.0 - beta1);
    const __m256d ob2 = _mm256_set1_pd(1.0 - beta2);
    const __m256d c1v = _mm256_set1_pd(c1);
    const __m256d c2v = _mm256_set1_pd(c2);
    const __m256d lrv = _mm256_set1_pd(lr);
    const __m256d epsv = _mm256_set1_pd(eps);
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d gv = _mm256_loadu_pd(g + i);
        __m256d mv = _mm256_loadu_pd(m + i);
        __m256d vv = _mm256_loadu_pd(v + i);
        mv = _mm256_add_pd(_mm256_mul_pd(b1, mv), _mm256_mul_pd(ob1, gv));
        vv = _mm256_add_pd(_mm256_mul_pd(b2, vv), _mm256_mul_pd(ob2, _mm256_mul_pd(gv, gv)));
        _mm256_storeu_pd(m + i, mv);
        _mm256_storeu_pd(v + i, vv);
        const __m256d mhat = _mm256_mul_pd(mv, c1v);
        const __m256d vhat = _mm256_mul_pd(vv, c2v);
        const __m256d denom = _mm256_add_pd(_mm256_sqrt_pd(vhat), epsv);
        const __m256d step = _mm256_div_pd(_mm256_mul_pd(lrv, mhat), denom);
        _mm256_storeu_pd(param + i, _mm256_sub_pd(_mm256_loadu_pd(param + i), step));
    }
    for (; i < n; ++i) {
        const double gi = g[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
        v[i] = beta2 * v[i] + (1.0 - beta2) * (gi * gi);
        param[i] -= lr * (m[i] * c1) / (std::sqrt(v[i] * c2) + eps);
    }
}

constexpr KernelTable kAvx2Table = {
    "avx2", v_matmul_nn, v_matmul_nt, v_matmul_tn, v_add,
    v_mul,  v_axpy,      v_scale,     v_relu,      v_relu_bwd,
    v_adam_update,
};

} // namespace

bool avx2_supported() { return __builtin_cpu_supports("avx2") != 0; }

const KernelTable& avx2_table() { return kAvx2Table; }

} // namespace procformer::kernels
