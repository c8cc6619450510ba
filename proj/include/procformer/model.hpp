#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "procformer/eventlog.hpp"
#include "procformer/features.hpp"
#include "procformer/rng.hpp"
#include "procformer/tensor.hpp"

namespace procformer {

enum class Task { next_activity, next_time, remaining_time };

std::string task_name(Task t);
Task task_from_name(const std::string& name); // EngineError on unknown name

struct ModelConfig {
    int64_t vocab_size = 0; // distinct activities; ids 1..vocab_size
    int64_t max_len = 0;
    int64_t embed_dim = 36;
    int64_t num_heads = 4;
    int64_t num_blocks = 1;
    int64_t ff_hidden = 64;
    double dropout_rate = 0.1;
    std::pair<int64_t, int64_t> dense_units = {32, 128};
    Task task = Task::next_activity;
    uint64_t seed = 0;

    int64_t d_k() const { return embed_dim / num_heads; }
    int64_t num_ids() const { return vocab_size + 2; } // + pad + unk
    int64_t output_dim() const;
    bool is_time_task() const { return task != Task::next_activity; }
    void validate() const; // EngineError on any broken invariant
};

/// Fixed sinusoidal table [max_len, embed_dim]: row p, column 2i holds
/// sin(p / 10000^{2i/embed_dim}) and column 2i+1 the cosine of the same
/// argument. Not a parameter; recomputed from the config.
Tensor positional_encoding(int64_t max_len, int64_t embed_dim);

/// Handles into one attention block's parameters (cheap copies; the
/// underlying buffers are shared with the owning ModelParams).
struct BlockParams {
    std::vector<Tensor> Wq, Wk, Wv; // per head, [embed_dim, d_k]
    Tensor Wo;                      // [embed_dim, embed_dim]
    Tensor ln1_gain, ln1_bias;
    Tensor ffn_W1, ffn_b1, ffn_W2, ffn_b2;
    Tensor ln2_gain, ln2_bias;
};

struct ModelParams {
    ModelConfig config;
    /// Every learnable tensor, in the fixed declared order used by the
    /// file format ("embedding", "block0.mha.head0.Wq", ..., "output.b").
    std::vector<std::pair<std::string, Tensor>> entries;
    Tensor pos; // cached positional encoding, never trained

    /// Seeded Glorot-uniform matrices, zero biases, unit layer-norm gains.
    static ModelParams init(const ModelConfig& config);

    Tensor& at(const std::string& name);             // EngineError if absent
    const Tensor& at(const std::string& name) const; // EngineError if absent
    BlockParams block(int64_t index) const;
    int64_t total_parameters() const;

    /// Same buffers with requires_grad off everywhere, so forward passes
    /// record nothing on the tape. Use for validation and inference.
    ModelParams inference_view() const;
};

/// One forward batch: ids padded to [batch, max_len], keep flags for real
/// positions, and the three scaled temporal features as a [batch, 3] tensor.
struct ModelInput {
    std::vector<int64_t> ids;
    Shape ids_shape;
    Mask keep;
    Tensor fv;
};

/// Repads each sample's prefix to config.max_len. Throws
/// PrefixLongerThanMaxLen when a prefix does not fit and EmptyInput on an
/// empty batch.
ModelInput make_input(const std::vector<const PrefixSample*>& samples,
                      const ModelConfig& config);

/// Z = masked_softmax(Q Kᵀ / sqrt(d_k)) V over key positions. Q, K, V are
/// [len, d_k] or [batch, len, d_k]; the mask is [len] or [batch, len].
/// When weights_out is given it receives the attention weights (debug dump).
Tensor scaled_dot_product_attention(Tape& tape, const Tensor& Q, const Tensor& K,
                                    const Tensor& V, const Mask& keep,
                                    Tensor* weights_out = nullptr);

/// Concat(head_1..head_h) · Wo with Q = K = V = x (self-attention).
Tensor multi_head_attention(Tape& tape, const Tensor& x, const BlockParams& bp,
                            const Mask& keep);

/// y1 = LN(x + dropout(MHA(x))); returns LN(y1 + dropout(FFN(y1))) where
/// FFN is the position-wise relu map embed_dim -> ff_hidden -> embed_dim.
Tensor attention_block(Tape& tape, const Tensor& x, const BlockParams& bp,
                       const Mask& keep, double dropout_rate, bool training,
                       Rng* rng);

/// Full pipeline: embedding + positional rows -> attention blocks -> masked
/// max-pool -> dropout -> dense stack -> output. next_activity yields
/// [batch, vocab_size+2] logits; time tasks concat the scaled temporal
/// features after pooling and yield [batch, 1]. rng is required only when
/// training with a nonzero dropout rate.
Tensor forward_batch(Tape& tape, const ModelParams& params, const ModelInput& input,
                     bool training, Rng* rng = nullptr);

/// Everything inference needs in one artifact.
struct ModelBundle {
    ModelParams params;
    std::vector<std::string> vocab_labels;
    FeatureScaler scaler;

    ActivityVocabulary vocabulary() const { return ActivityVocabulary::from_labels(vocab_labels); }
    /// CRC-32 of the canonical config + vocabulary + scaler header text.
    uint32_t config_hash() const;
};

/// Binary model file: magic, format version u32, JSON header (config,
/// vocabulary, scaler, parameter manifest), little-endian f64 blobs in
/// declared order, trailing CRC-32 of all preceding bytes.
void save_model(const ModelBundle& bundle, const std::string& path);
ModelBundle load_model(const std::string& path);
/// Load and insist the stored header hashes to expected_config_hash;
/// throws VersionMismatch otherwise.
ModelBundle load_model(const std::string& path, uint32_t expected_config_hash);

} // namespace procformer
