#include "procformer/tensor.hpp"

#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>

#include "procformer/errors.hpp"
#include "procformer/kernels.hpp"

namespace procformer {

int64_t shape_size(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

Tensor Tensor::make(Shape shape, std::vector<double> values, bool requires_grad) {
    for (int64_t d : shape) {
        if (d <= 0) throw ShapeMismatch("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (static_cast<int64_t>(values.size()) != shape_size(shape)) {
        throw ShapeMismatch("value count " + std::to_string(values.size()) +
                            " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.shape = std::move(shape);
    t.val = std::make_shared<std::vector<double>>(std::move(values));
    t.requires_grad = requires_grad;
    if (requires_grad) t.grad = std::make_shared<std::vector<double>>(t.val->size(), 0.0);
    return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto n = static_cast<size_t>(shape_size(shape));
    return make(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::scalar(double v) { return make({1}, {v}, false); }

void Tensor::zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), 0.0);
}

Tensor Tensor::with_grad_sink(std::shared_ptr<std::vector<double>> sink) const {
    if (!sink) throw EngineError("with_grad_sink: null sink");
    if (sink->empty()) sink->resize(val->size(), 0.0);
    if (sink->size() != val->size()) {
        throw ShapeMismatch("gradient sink size " + std::to_string(sink->size()) +
                            " does not match tensor " + shape_str(shape));
    }
    Tensor t = *this;
    t.grad = std::move(sink);
    t.requires_grad = true;
    return t;
}

Mask Mask::all(int64_t n) {
    Mask m;
    m.shape = {n};
    m.keep.assign(static_cast<size_t>(n), 1);
    return m;
}

namespace {

// Resolves a [n] or [b, n] mask against a tensor whose rows have width n.
// Returns the flags row to use for flattened row r.
struct MaskView {
    const uint8_t* base;
    int64_t n;
    int64_t group; // consecutive tensor rows sharing one mask row

    const uint8_t* row(int64_t r) const { return base + (r / group) * n; }
};

MaskView resolve_mask(const Mask& mask, const Tensor& x, const char* op) {
    int64_t n = x.shape.back();
    int64_t rows = x.size() / n;
    if (static_cast<int64_t>(mask.keep.size()) != shape_size(mask.shape)) {
        throw ShapeMismatch(std::string(op) + ": mask flag count does not match mask shape " +
                            shape_str(mask.shape));
    }
    if (mask.shape.size() == 1) {
        if (mask.shape[0] != n) {
            throw ShapeMismatch(std::string(op) + ": mask " + shape_str(mask.shape) +
                                " does not match last axis of " + shape_str(x.shape));
        }
        return {mask.keep.data(), n, rows};
    }
    if (mask.shape.size() == 2) {
        if (x.shape.size() < 2 || mask.shape[0] != x.shape[0] || mask.shape[1] != n) {
            throw ShapeMismatch(std::string(op) + ": mask " + shape_str(mask.shape) +
                                " is incompatible with " + shape_str(x.shape));
        }
        return {mask.keep.data(), n, rows / x.shape[0]};
    }
    throw ShapeMismatch(std::string(op) + ": mask rank must be 1 or 2, got " +
                        shape_str(mask.shape));
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

// b broadcasts over a's leading axes when its shape is a strict trailing
// suffix of a's shape.
bool suffix_shape(const Shape& a, const Shape& b) {
    if (b.size() >= a.size()) return false;
    size_t off = a.size() - b.size();
    for (size_t i = 0; i < b.size(); ++i) {
        if (a[off + i] != b[i]) return false;
    }
    return true;
}

} // namespace

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
    const auto& K = kernels::active();
    int64_t batches, m, kd, n;
    int64_t astride, bstride;
    Shape out_shape;

    if (a.shape.size() == 2 && b.shape.size() == 2) {
        if (a.shape[1] != b.shape[0]) {
            throw ShapeMismatch("matmul: " + shape_str(a.shape) + " x " + shape_str(b.shape));
        }
        batches = 1; m = a.shape[0]; kd = a.shape[1]; n = b.shape[1];
        astride = 0; bstride = 0;
        out_shape = {m, n};
    } else if (a.shape.size() == 3 && b.shape.size() == 2) {
        if (a.shape[2] != b.shape[0]) {
            throw ShapeMismatch("matmul: " + shape_str(a.shape) + " x " + shape_str(b.shape));
        }
        // Shared right operand: [B, m, k] is contiguous [B*m, k], so this is
        // one flat matmul.
        batches = 1; m = a.shape[0] * a.shape[1]; kd = a.shape[2]; n = b.shape[1];
        astride = 0; bstride = 0;
        out_shape = {a.shape[0], a.shape[1], n};
    } else if (a.shape.size() == 3 && b.shape.size() == 3) {
        if (a.shape[0] != b.shape[0] || a.shape[2] != b.shape[1]) {
            throw ShapeMismatch("matmul: " + shape_str(a.shape) + " x " + shape_str(b.shape));
        }
        batches = a.shape[0]; m = a.shape[1]; kd = a.shape[2]; n = b.shape[2];
        astride = m * kd; bstride = kd * n;
        out_shape = {batches, m, n};
    } else {
        throw ShapeMismatch("matmul: unsupported ranks " + shape_str(a.shape) + " x " +
                            shape_str(b.shape));
    }

    Tensor out = Tensor::zeros(out_shape, a.requires_grad || b.requires_grad);
    int64_t ostride = m * n;
    for (int64_t bt = 0; bt < batches; ++bt) {
        K.matmul_nn(a.data() + bt * astride, static_cast<int>(kd),
                    b.data() + bt * bstride, static_cast<int>(n),
                    out.data() + bt * ostride, static_cast<int>(n),
                    static_cast<int>(m), static_cast<int>(kd), static_cast<int>(n));
    }

    if (out.requires_grad) {
        record([a, b, out, batches, m, kd, n, astride, bstride, ostride] {
            const auto& KK = kernels::active();
            for (int64_t bt = 0; bt < batches; ++bt) {
                const double* g = out.gdata() + bt * ostride;
                if (a.requires_grad) {
                    // dA += dC * B^T
                    KK.matmul_nt(g, static_cast<int>(n),
                                 b.data() + bt * bstride, static_cast<int>(n),
                                 a.grad->data() + bt * astride, static_cast<int>(kd),
                                 static_cast<int>(m), static_cast<int>(n), static_cast<int>(kd));
                }
                if (b.requires_grad) {
                    // dB += A^T * dC (accumulates across batches for shared B)
                    KK.matmul_tn(a.data() + bt * astride, static_cast<int>(kd),
                                 g, static_cast<int>(n),
                                 b.grad->data() + bt * bstride, static_cast<int>(n),
                                 static_cast<int>(m), static_cast<int>(kd), static_cast<int>(n));
                }
            }
        });
    }
    return out;
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
    const auto& K = kernels::active();
    size_t bn = b.val->size();
    if (same_shape(a.shape, b.shape)) {
        Tensor out = Tensor::zeros(a.shape, a.requires_grad || b.requires_grad);
        K.add(a.data(), b.data(), out.data(), a.val->size());
        if (out.requires_grad) {
            record([a, b, out] {
                const auto& KK = kernels::active();
                if (a.requires_grad) KK.axpy(1.0, out.gdata(), a.grad->data(), a.val->size());
                if (b.requires_grad) KK.axpy(1.0, out.gdata(), b.grad->data(), b.val->size());
            });
        }
        return out;
    }
    if (suffix_shape(a.shape, b.shape)) {
        int64_t rows = a.size() / static_cast<int64_t>(bn);
        Tensor out = Tensor::zeros(a.shape, a.requires_grad || b.requires_grad);
        for (int64_t r = 0; r < rows; ++r) {
            K.add(a.data() + r * bn, b.data(), out.data() + r * bn, bn);
        }
        if (out.requires_grad) {
            record([a, b, out, rows, bn] {
                const auto& KK = kernels::active();
                if (a.requires_grad) KK.axpy(1.0, out.gdata(), a.grad->data(), a.val->size());
                if (b.requires_grad) {
                    for (int64_t r = 0; r < rows; ++r) {
                        KK.axpy(1.0, out.gdata() + r * bn, b.grad->data(), bn);
                    }
                }
            });
        }
        return out;
    }
    throw ShapeMismatch("add: shapes " + shape_str(a.shape) + " and " + shape_str(b.shape) +
                        " are incompatible");
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
    if (!same_shape(a.shape, b.shape)) {
        throw ShapeMismatch("mul: shapes " + shape_str(a.shape) + " and " + shape_str(b.shape) +
                            " differ");
    }
    const auto& K = kernels::active();
    Tensor out = Tensor::zeros(a.shape, a.requires_grad || b.requires_grad);
    K.mul(a.data(), b.data(), out.data(), a.val->size());
    if (out.requires_grad) {
        record([a, b, out] {
            size_t n = a.val->size();
            const double* g = out.gdata();
            if (a.requires_grad) {
                double* da = a.grad->data();
                const double* bv = b.data();
                for (size_t i = 0; i < n; ++i) da[i] += bv[i] * g[i];
            }
            if (b.requires_grad) {
                double* db = b.grad->data();
                const double* av = a.data();
                for (size_t i = 0; i < n; ++i) db[i] += av[i] * g[i];
            }
        });
    }
    return out;
}

Tensor Tape::mul_scalar(const Tensor& a, double s) {
    const auto& K = kernels::active();
    Tensor out = Tensor::zeros(a.shape, a.requires_grad);
    K.scale(a.data(), s, out.data(), a.val->size());
    if (out.requires_grad) {
        record([a, out, s] {
            kernels::active().axpy(s, out.gdata(), a.grad->data(), a.val->size());
        });
    }
    return out;
}

Tensor Tape::relu(const Tensor& a) {
    const auto& K = kernels::active();
    Tensor out = Tensor::zeros(a.shape, a.requires_grad);
    K.relu(a.data(), out.data(), a.val->size());
    if (out.requires_grad) {
        record([a, out] {
            kernels::active().relu_bwd(a.data(), out.gdata(), a.grad->data(), a.val->size());
        });
    }
    return out;
}

Tensor Tape::softmax_last_axis(const Tensor& x, const Mask& mask) {
    if (x.shape.empty()) throw ShapeMismatch("softmax_last_axis: scalar input");
    MaskView mv = resolve_mask(mask, x, "softmax_last_axis");
    int64_t n = x.shape.back();
    int64_t rows = x.size() / n;

    Tensor out = Tensor::zeros(x.shape, x.requires_grad);
    auto kept = std::make_shared<std::vector<uint8_t>>(static_cast<size_t>(rows * n));
    const double* xv = x.data();
    double* ov = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const uint8_t* flags = mv.row(r);
        const double* xr = xv + r * n;
        double* orow = ov + r * n;
        uint8_t* krow = kept->data() + r * n;
        double mx = -std::numeric_limits<double>::infinity();
        int64_t nkept = 0;
        for (int64_t i = 0; i < n; ++i) {
            krow[i] = flags[i] ? 1 : 0;
            if (krow[i]) {
                ++nkept;
                if (xr[i] > mx) mx = xr[i];
            }
        }
        if (nkept == 0) {
            throw AllMasked("softmax_last_axis: row " + std::to_string(r) +
                            " has no kept positions");
        }
        double sum = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            if (krow[i]) {
                orow[i] = std::exp(xr[i] - mx);
                sum += orow[i];
            } // dropped entries stay exactly 0
        }
        for (int64_t i = 0; i < n; ++i) {
            if (krow[i]) orow[i] /= sum;
        }
    }

    if (out.requires_grad) {
        record([x, out, kept, rows, n] {
            const double* y = out.data();
            const double* gy = out.gdata();
            double* gx = x.grad->data();
            for (int64_t r = 0; r < rows; ++r) {
                const double* yr = y + r * n;
                const double* gr = gy + r * n;
                const uint8_t* krow = kept->data() + r * n;
                double dot = 0.0;
                for (int64_t i = 0; i < n; ++i) {
                    if (krow[i]) dot += yr[i] * gr[i];
                }
                double* gxr = gx + r * n;
                for (int64_t i = 0; i < n; ++i) {
                    if (krow[i]) gxr[i] += yr[i] * (gr[i] - dot);
                }
            }
        });
    }
    return out;
}

Tensor Tape::layer_norm_last_axis(const Tensor& x, const Tensor& gain, const Tensor& bias,
                                  double eps) {
    if (x.shape.empty()) throw ShapeMismatch("layer_norm_last_axis: scalar input");
    int64_t d = x.shape.back();
    if (gain.shape != Shape{d} || bias.shape != Shape{d}) {
        throw ShapeMismatch("layer_norm_last_axis: gain " + shape_str(gain.shape) + " / bias " +
                            shape_str(bias.shape) + " must be [" + std::to_string(d) + "]");
    }
    if (eps <= 0.0) throw EngineError("layer_norm_last_axis: eps must be positive");
    int64_t rows = x.size() / d;

    bool needs = x.requires_grad || gain.requires_grad || bias.requires_grad;
    Tensor out = Tensor::zeros(x.shape, needs);
    auto xhat = std::make_shared<std::vector<double>>(static_cast<size_t>(rows * d));
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));

    const double* xv = x.data();
    const double* gv = gain.data();
    const double* bv = bias.data();
    double* ov = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = xv + r * d;
        double mean = 0.0;
        for (int64_t i = 0; i < d; ++i) mean += xr[i];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t i = 0; i < d; ++i) {
            double c = xr[i] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        double inv = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = inv;
        double* hr = xhat->data() + r * d;
        double* orow = ov + r * d;
        for (int64_t i = 0; i < d; ++i) {
            hr[i] = (xr[i] - mean) * inv;
            orow[i] = gv[i] * hr[i] + bv[i];
        }
    }

    if (needs) {
        record([x, gain, bias, out, xhat, inv_std, rows, d] {
            const double* gy = out.gdata();
            const double* gv = gain.data();
            for (int64_t r = 0; r < rows; ++r) {
                const double* gr = gy + r * d;
                const double* hr = xhat->data() + r * d;
                if (gain.requires_grad) {
                    double* gg = gain.grad->data();
                    for (int64_t i = 0; i < d; ++i) gg[i] += gr[i] * hr[i];
                }
                if (bias.requires_grad) {
                    double* gb = bias.grad->data();
                    for (int64_t i = 0; i < d; ++i) gb[i] += gr[i];
                }
                if (x.requires_grad) {
                    double m1 = 0.0, m2 = 0.0;
                    for (int64_t i = 0; i < d; ++i) {
                        double dxh = gr[i] * gv[i];
                        m1 += dxh;
                        m2 += dxh * hr[i];
                    }
                    m1 /= static_cast<double>(d);
                    m2 /= static_cast<double>(d);
                    double inv = (*inv_std)[r];
                    double* gx = x.grad->data() + r * d;
                    for (int64_t i = 0; i < d; ++i) {
                        double dxh = gr[i] * gv[i];
                        gx[i] += (dxh - m1 - hr[i] * m2) * inv;
                    }
                }
            }
        });
    }
    return out;
}

Tensor Tape::dropout(const Tensor& x, double rate, bool training, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) {
        throw EngineError("dropout: rate must be in [0, 1), got " + std::to_string(rate));
    }
    if (!training || rate == 0.0) {
        // Identity: share the value buffer, pass gradients straight through.
        Tensor out = x;
        if (x.requires_grad) {
            out.grad = std::make_shared<std::vector<double>>(x.val->size(), 0.0);
            record([x, out] {
                kernels::active().axpy(1.0, out.gdata(), x.grad->data(), x.val->size());
            });
        }
        return out;
    }
    size_t n = x.val->size();
    auto factors = std::make_shared<std::vector<double>>(n);
    double scale = 1.0 / (1.0 - rate);
    for (size_t i = 0; i < n; ++i) {
        (*factors)[i] = rng.next_double() >= rate ? scale : 0.0;
    }
    Tensor out = Tensor::zeros(x.shape, x.requires_grad);
    const double* xv = x.data();
    double* ov = out.data();
    for (size_t i = 0; i < n; ++i) ov[i] = xv[i] * (*factors)[i];
    if (out.requires_grad) {
        record([x, out, factors] {
            const double* g = out.gdata();
            double* gx = x.grad->data();
            for (size_t i = 0; i < factors->size(); ++i) gx[i] += g[i] * (*factors)[i];
        });
    }
    return out;
}

Tensor Tape::embedding_lookup(const Tensor& table, const std::vector<int64_t>& ids,
                              const Shape& ids_shape) {
    if (table.shape.size() != 2) {
        throw ShapeMismatch("embedding_lookup: table must be rank 2, got " +
                            shape_str(table.shape));
    }
    if (static_cast<int64_t>(ids.size()) != shape_size(ids_shape)) {
        throw ShapeMismatch("embedding_lookup: " + std::to_string(ids.size()) +
                            " ids do not fill shape " + shape_str(ids_shape));
    }
    int64_t v = table.shape[0];
    int64_t d = table.shape[1];
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= v) {
            throw ShapeMismatch("embedding_lookup: id " + std::to_string(ids[i]) +
                                " outside [0, " + std::to_string(v) + ") at position " +
                                std::to_string(i));
        }
    }
    Shape out_shape = ids_shape;
    out_shape.push_back(d);
    Tensor out = Tensor::zeros(out_shape, table.requires_grad);
    const double* tv = table.data();
    double* ov = out.data();
    for (size_t r = 0; r < ids.size(); ++r) {
        std::memcpy(ov + r * d, tv + ids[r] * d, static_cast<size_t>(d) * sizeof(double));
    }
    if (out.requires_grad) {
        auto saved_ids = std::make_shared<std::vector<int64_t>>(ids);
        record([table, out, saved_ids, d] {
            const auto& KK = kernels::active();
            const double* g = out.gdata();
            double* gt = table.grad->data();
            for (size_t r = 0; r < saved_ids->size(); ++r) {
                KK.axpy(1.0, g + r * d, gt + (*saved_ids)[r] * d, static_cast<size_t>(d));
            }
        });
    }
    return out;
}

Tensor Tape::max_over_axis(const Tensor& x, int axis, const Mask& mask) {
    if (x.shape.size() != 3 || axis != 1) {
        throw ShapeMismatch("max_over_axis: supports rank-3 input over axis 1, got " +
                            shape_str(x.shape) + " axis " + std::to_string(axis));
    }
    int64_t b = x.shape[0], l = x.shape[1], d = x.shape[2];
    // The mask runs along the pooled axis: one flag per (batch, position).
    if (!(mask.shape == Shape{l} || mask.shape == Shape{b, l})) {
        throw ShapeMismatch("max_over_axis: mask " + shape_str(mask.shape) +
                            " must be [" + std::to_string(l) + "] or [" + std::to_string(b) +
                            ", " + std::to_string(l) + "]");
    }
    if (static_cast<int64_t>(mask.keep.size()) != shape_size(mask.shape)) {
        throw ShapeMismatch("max_over_axis: mask flag count does not match " +
                            shape_str(mask.shape));
    }
    bool per_batch = mask.shape.size() == 2;

    Tensor out = Tensor::zeros({b, d}, x.requires_grad);
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(b * d));
    const double* xv = x.data();
    double* ov = out.data();
    for (int64_t bi = 0; bi < b; ++bi) {
        const uint8_t* flags = mask.keep.data() + (per_batch ? bi * l : 0);
        int64_t nkept = 0;
        for (int64_t li = 0; li < l; ++li) nkept += flags[li] ? 1 : 0;
        if (nkept == 0) {
            throw AllMasked("max_over_axis: batch row " + std::to_string(bi) +
                            " has no kept positions");
        }
        for (int64_t di = 0; di < d; ++di) {
            double best = -std::numeric_limits<double>::infinity();
            int64_t best_l = -1;
            for (int64_t li = 0; li < l; ++li) {
                if (!flags[li]) continue;
                double v = xv[(bi * l + li) * d + di];
                if (v > best) {
                    best = v;
                    best_l = li;
                }
            }
            ov[bi * d + di] = best;
            (*argmax)[bi * d + di] = best_l;
        }
    }
    if (out.requires_grad) {
        record([x, out, argmax, b, l, d] {
            const double* g = out.gdata();
            double* gx = x.grad->data();
            for (int64_t bi = 0; bi < b; ++bi) {
                for (int64_t di = 0; di < d; ++di) {
                    int64_t li = (*argmax)[bi * d + di];
                    gx[(bi * l + li) * d + di] += g[bi * d + di];
                }
            }
        });
    }
    return out;
}

Tensor Tape::concat_last_axis(const Tensor& a, const Tensor& b) {
    if (a.shape.size() != b.shape.size() || a.shape.empty()) {
        throw ShapeMismatch("concat_last_axis: ranks differ, " + shape_str(a.shape) + " vs " +
                            shape_str(b.shape));
    }
    for (size_t i = 0; i + 1 < a.shape.size(); ++i) {
        if (a.shape[i] != b.shape[i]) {
            throw ShapeMismatch("concat_last_axis: leading axes differ, " + shape_str(a.shape) +
                                " vs " + shape_str(b.shape));
        }
    }
    int64_t p = a.shape.back(), q = b.shape.back();
    int64_t rows = a.size() / p;
    Shape out_shape = a.shape;
    out_shape.back() = p + q;
    Tensor out = Tensor::zeros(out_shape, a.requires_grad || b.requires_grad);
    const double* av = a.data();
    const double* bv = b.data();
    double* ov = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        std::memcpy(ov + r * (p + q), av + r * p, static_cast<size_t>(p) * sizeof(double));
        std::memcpy(ov + r * (p + q) + p, bv + r * q, static_cast<size_t>(q) * sizeof(double));
    }
    if (out.requires_grad) {
        record([a, b, out, rows, p, q] {
            const auto& KK = kernels::active();
            const double* g = out.gdata();
            for (int64_t r = 0; r < rows; ++r) {
                if (a.requires_grad) {
                    KK.axpy(1.0, g + r * (p + q), a.grad->data() + r * p,
                            static_cast<size_t>(p));
                }
                if (b.requires_grad) {
                    KK.axpy(1.0, g + r * (p + q) + p, b.grad->data() + r * q,
                            static_cast<size_t>(q));
                }
            }
        });
    }
    return out;
}

Tensor Tape::transpose_last_two(const Tensor& x) {
    if (x.shape.size() != 2 && x.shape.size() != 3) {
        throw ShapeMismatch("transpose_last_two: rank must be 2 or 3, got " +
                            shape_str(x.shape));
    }
    int64_t batches = x.shape.size() == 3 ? x.shape[0] : 1;
    int64_t m = x.shape[x.shape.size() - 2];
    int64_t n = x.shape.back();
    Shape out_shape = x.shape;
    out_shape[out_shape.size() - 2] = n;
    out_shape.back() = m;
    Tensor out = Tensor::zeros(out_shape, x.requires_grad);
    const double* xv = x.data();
    double* ov = out.data();
    for (int64_t b = 0; b < batches; ++b) {
        const double* xb = xv + b * m * n;
        double* ob = ov + b * m * n;
        for (int64_t i = 0; i < m; ++i) {
            for (int64_t j = 0; j < n; ++j) ob[j * m + i] = xb[i * n + j];
        }
    }
    if (out.requires_grad) {
        record([x, out, batches, m, n] {
            const double* g = out.gdata();
            double* gx = x.grad->data();
            for (int64_t b = 0; b < batches; ++b) {
                const double* gb = g + b * m * n;
                double* gxb = gx + b * m * n;
                for (int64_t i = 0; i < m; ++i) {
                    for (int64_t j = 0; j < n; ++j) gxb[i * n + j] += gb[j * m + i];
                }
            }
        });
    }
    return out;
}

Tensor Tape::sum_all(const Tensor& x) {
    double s = 0.0;
    const double* xv = x.data();
    for (size_t i = 0; i < x.val->size(); ++i) s += xv[i];
    Tensor out = Tensor::make({1}, {s}, x.requires_grad);
    if (out.requires_grad) {
        record([x, out] {
            double g = (*out.grad)[0];
            double* gx = x.grad->data();
            for (size_t i = 0; i < x.val->size(); ++i) gx[i] += g;
        });
    }
    return out;
}

Tensor Tape::cross_entropy(const Tensor& logits, const std::vector<int64_t>& targets,
                           const std::vector<double>& class_weights) {
    if (logits.shape.size() != 2) {
        throw ShapeMismatch("cross_entropy: logits must be [batch, classes], got " +
                            shape_str(logits.shape));
    }
    int64_t b = logits.shape[0], c = logits.shape[1];
    if (static_cast<int64_t>(targets.size()) != b) {
        throw ShapeMismatch("cross_entropy: " + std::to_string(targets.size()) +
                            " targets for batch " + std::to_string(b));
    }
    if (!class_weights.empty()) {
        if (static_cast<int64_t>(class_weights.size()) != c) {
            throw ShapeMismatch("cross_entropy: " + std::to_string(class_weights.size()) +
                                " class weights for " + std::to_string(c) + " classes");
        }
        for (double w : class_weights) {
            if (!(w > 0.0)) throw EngineError("cross_entropy: class weights must be positive");
        }
    }

    auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(b * c));
    auto row_w = std::make_shared<std::vector<double>>(static_cast<size_t>(b));
    const double* z = logits.data();
    double num = 0.0, den = 0.0;
    for (int64_t r = 0; r < b; ++r) {
        int64_t t = targets[r];
        if (t < 0 || t >= c) {
            throw BadTargetId("cross_entropy: target id " + std::to_string(t) + " outside [0, " +
                              std::to_string(c) + ") at row " + std::to_string(r));
        }
        const double* zr = z + r * c;
        double mx = zr[0];
        for (int64_t i = 1; i < c; ++i) mx = std::max(mx, zr[i]);
        double sum = 0.0;
        double* pr = probs->data() + r * c;
        for (int64_t i = 0; i < c; ++i) {
            pr[i] = std::exp(zr[i] - mx);
            sum += pr[i];
        }
        for (int64_t i = 0; i < c; ++i) pr[i] /= sum;
        double lse = mx + std::log(sum);
        double w = class_weights.empty() ? 1.0 : class_weights[static_cast<size_t>(t)];
        (*row_w)[r] = w;
        num += w * (lse - zr[t]);
        den += w;
    }
    Tensor out = Tensor::make({1}, {num / den}, logits.requires_grad);
    if (out.requires_grad) {
        auto saved_t = std::make_shared<std::vector<int64_t>>(targets);
        record([logits, out, probs, row_w, saved_t, b, c, den] {
            double g = (*out.grad)[0];
            double* gz = logits.grad->data();
            for (int64_t r = 0; r < b; ++r) {
                double coeff = g * (*row_w)[r] / den;
                const double* pr = probs->data() + r * c;
                double* gr = gz + r * c;
                int64_t t = (*saved_t)[r];
                for (int64_t i = 0; i < c; ++i) {
                    gr[i] += coeff * (pr[i] - (i == t ? 1.0 : 0.0));
                }
            }
        });
    }
    return out;
}

Tensor Tape::log_cosh(const Tensor& pred, const Tensor& target) {
    if (!same_shape(pred.shape, target.shape)) {
        throw ShapeMismatch("log_cosh: shapes " + shape_str(pred.shape) + " and " +
                            shape_str(target.shape) + " differ");
    }
    size_t n = pred.val->size();
    auto diff = std::make_shared<std::vector<double>>(n);
    const double* pv = pred.data();
    const double* tv = target.data();
    double sum = 0.0;
    for (size_t i = 0; i < n; ++i) {
        double x = pv[i] - tv[i];
        (*diff)[i] = x;
        double ax = std::abs(x);
        sum += ax + std::log1p(std::exp(-2.0 * ax)) - std::numbers::ln2;
    }
    bool needs = pred.requires_grad || target.requires_grad;
    Tensor out = Tensor::make({1}, {sum / static_cast<double>(n)}, needs);
    if (needs) {
        record([pred, target, out, diff, n] {
            double g = (*out.grad)[0] / static_cast<double>(n);
            for (size_t i = 0; i < n; ++i) {
                double d = g * std::tanh((*diff)[i]);
                if (pred.requires_grad) (*pred.grad)[i] += d;
                if (target.requires_grad) (*target.grad)[i] -= d;
            }
        });
    }
    return out;
}

void Tape::backward(const Tensor& loss) {
    if (loss.size() != 1) {
        throw NonScalarLoss("backward: loss has shape " + shape_str(loss.shape) +
                            ", expected a single element");
    }
    if (loss.requires_grad) (*loss.grad)[0] += 1.0;
    for (size_t i = nodes_.size(); i > 0; --i) nodes_[i - 1]();
    nodes_.clear();
}

} // namespace procformer
