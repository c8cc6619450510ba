#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "procformer/rng.hpp"

namespace procformer {

using Shape = std::vector<int64_t>;

int64_t shape_size(const Shape& s);
std::string shape_str(const Shape& s);

/// Dense row-major f64 tensor. A Tensor is a cheap handle: copies share the
/// underlying buffers. Values are immutable once the tensor has entered a
/// tape; only grad accumulates. requires_grad implies grad is allocated and
/// the same length as val.
struct Tensor {
    Shape shape;
    std::shared_ptr<std::vector<double>> val;
    std::shared_ptr<std::vector<double>> grad;
    bool requires_grad = false;

    static Tensor make(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor scalar(double v);

    int64_t size() const { return val ? static_cast<int64_t>(val->size()) : 0; }
    double* data() { return val->data(); }
    const double* data() const { return val->data(); }
    double* gdata() { return grad->data(); }
    const double* gdata() const { return grad->data(); }

    void zero_grad();

    /// Same values/shape, gradient redirected into `sink` (zero-extended to
    /// size). Used to route a shared parameter's gradient into a worker-local
    /// buffer so batch workers never race on one accumulator.
    Tensor with_grad_sink(std::shared_ptr<std::vector<double>> sink) const;
};

/// Keep/drop flags aligned with one axis of a tensor. shape is [n] (applied
/// to every row) or [b, n] where b matches the tensor's leading axis.
struct Mask {
    Shape shape;
    std::vector<uint8_t> keep;

    static Mask all(int64_t n);
};

/// Records forward ops and replays their backward rules in exact reverse
/// order. One tape per execution context; never shared across threads.
/// Ops only record a node when an input requires gradients, so forward
/// passes over frozen parameters leave the tape empty.
class Tape {
public:
    /// matmul: [m,k]x[k,n] -> [m,n]; [B,m,k]x[k,n] -> [B,m,n] (shared
    /// right operand); [B,m,k]x[B,k,n] -> [B,m,n] (batched).
    Tensor matmul(const Tensor& a, const Tensor& b);

    /// add: identical shapes, or b's shape a trailing suffix of a's
    /// (broadcast over the leading axes, e.g. bias or positional rows).
    Tensor add(const Tensor& a, const Tensor& b);

    Tensor mul(const Tensor& a, const Tensor& b); // elementwise, same shape
    Tensor mul_scalar(const Tensor& a, double s);
    Tensor relu(const Tensor& a);

    /// Masked softmax over the last axis. Dropped positions get exactly 0;
    /// kept positions renormalize. Throws AllMasked when a row keeps nothing.
    Tensor softmax_last_axis(const Tensor& x, const Mask& mask);

    /// Per-row normalization over the last axis (population variance), then
    /// gain/bias affine. gain and bias are [last_dim].
    Tensor layer_norm_last_axis(const Tensor& x, const Tensor& gain,
                                const Tensor& bias, double eps = 1e-6);

    /// Inverted dropout: kept activations scale by 1/(1-rate). Identity
    /// (value buffer shared, no rng draws) when !training or rate == 0.
    Tensor dropout(const Tensor& x, double rate, bool training, Rng& rng);

    /// table [V, D], ids in [0, V) with ids.size() == product(ids_shape);
    /// result shape = ids_shape + [D].
    Tensor embedding_lookup(const Tensor& table, const std::vector<int64_t>& ids,
                            const Shape& ids_shape);

    /// Masked max-pool of x [B, L, D] over axis 1 -> [B, D]. mask is [B, L]
    /// or [L]; only kept positions participate. Ties pick the earliest
    /// position so gradients are deterministic.
    Tensor max_over_axis(const Tensor& x, int axis, const Mask& mask);

    Tensor concat_last_axis(const Tensor& a, const Tensor& b);
    Tensor transpose_last_two(const Tensor& x);
    Tensor sum_all(const Tensor& x); // -> scalar [1]

    /// Mean over rows of -w_t * log softmax(logits)_t, normalized by the sum
    /// of applied weights; stabilized by max-subtraction. Empty weights mean
    /// uniform 1.0.
    Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& targets,
                         const std::vector<double>& class_weights = {});

    /// Mean over elements of log(cosh(pred - target)) via the overflow-safe
    /// identity |x| + log(1 + e^{-2|x|}) - log 2.
    Tensor log_cosh(const Tensor& pred, const Tensor& target);

    /// Accumulate d(loss)/d(leaf) into every requires_grad tensor reachable
    /// from loss (+=), then clear the tape. Throws NonScalarLoss unless
    /// loss has exactly one element.
    void backward(const Tensor& loss);

    size_t node_count() const { return nodes_.size(); }

private:
    std::vector<std::function<void()>> nodes_;
    void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }
};

} // namespace procformer
