#include "procformer/kernels.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <cstring>

#include "procformer/errors.hpp"

namespace procformer::kernels {

namespace {

// Reference kernels. Loop orders are part of the contract: the AVX2 variants
// reproduce the exact per-element accumulation sequence used here.

void s_matmul_nn(const double* a, int lda, const double* b, int ldb,
                 double* c, int ldc, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<size_t>(i) * lda;
        double* crow = c + static_cast<size_t>(i) * ldc;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + static_cast<size_t>(p) * ldb;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void s_matmul_nt(const double* a, int lda, const double* b, int ldb,
                 double* c, int ldc, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<size_t>(i) * lda;
        double* crow = c + static_cast<size_t>(i) * ldc;
        for (int j = 0; j < n; ++j) {
            const double* brow = b + static_cast<size_t>(j) * ldb;
            double acc = crow[j];
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] = acc;
        }
    }
}

void s_matmul_tn(const double* a, int lda, const double* b, int ldb,
                 double* c, int ldc, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<size_t>(i) * lda;
        const double* brow = b + static_cast<size_t>(i) * ldb;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            double* crow = c + static_cast<size_t>(p) * ldc;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void s_add(const double* a, const double* b, double* out, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void s_mul(const double* a, const double* b, double* out, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void s_axpy(double alpha, const double* x, double* y, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void s_scale(const double* x, double alpha, double* out, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] = alpha * x[i];
}

void s_relu(const double* x, double* out, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void s_relu_bwd(const double* x, const double* dy, double* dx, size_t n) {
    for (size_t i = 0; i < n; ++i)
        if (x[i] > 0.0) dx[i] += dy[i];
}

void s_adam_update(double* param, double* m, double* v, const double* g,
                   size_t n, double lr, double beta1, double beta2,
                   double eps, double c1, double c2) {
    for (size_t i = 0; i < n; ++i) {
        const double gi = g[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
        v[i] = beta2 * v[i] + (1.0 - beta2) * (gi * gi);
        const double mhat = m[i] * c1;
        const double vhat = v[i] * c2;
        param[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

constexpr KernelTable kScalarTable = {
    "scalar",   s_matmul_nn, s_matmul_nt, s_matmul_tn, s_add,
    s_mul,      s_axpy,      s_scale,     s_relu,      s_relu_bwd,
    s_adam_update,
};

std::atomic<const KernelTable*> g_active{nullptr};

const KernelTable* pick_initial() {
    if (const char* env = std::getenv("PROCFORMER_KERNELS")) {
        if (std::strcmp(env, "scalar") == 0) return &kScalarTable;
        if (std::strcmp(env, "avx2") == 0 && avx2_supported()) return &avx2_table();
        // unknown value or unsupported request falls through to detection
    }
    return avx2_supported() ? &avx2_table() : &kScalarTable;
}

} // namespace

const KernelTable& scalar_table() { return kScalarTable; }

#if !PROCFORMER_HAVE_AVX2_BUILD
bool avx2_supported() { return false; }
const KernelTable& avx2_table() { return kScalarTable; }
#endif

const KernelTable& active() {
    const KernelTable* t = g_active.load(std::memory_order_acquire);
    if (!t) {
        t = pick_initial();
        g_active.store(t, std::memory_order_release);
    }
    return *t;
}

void set_backend(Backend b) {
    switch (b) {
    case Backend::scalar:
        g_active.store(&kScalarTable, std::memory_order_release);
        return;
    case Backend::avx2:
        if (!avx2_supported()) throw EngineError("avx2 backend not supported on this CPU");
        g_active.store(&avx2_table(), std::memory_order_release);
        return;
    }
    throw EngineError("unknown kernel backend");
}

Backend current_backend() {
    return &active() == &kScalarTable ? Backend::scalar : Backend::avx2;
}

std::string backend_name() { return active().name; }

} // namespace procformer::kernels
