#include "procformer/model.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <utility>

#include "json.hpp"
#include "procformer/errors.hpp"

namespace procformer {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'P', 'R', 'O', 'C', 'F', 'M', 'D', 'L'};
constexpr uint32_t kFormatVersion = 1;

/// Same buffers under a different shape; layouts are row-major contiguous,
/// so this is free and gradient-safe.
Tensor reshaped(const Tensor& t, Shape shape) {
    if (shape_size(shape) != t.size())
        throw ShapeMismatch("cannot view " + shape_str(t.shape) + " as " + shape_str(shape));
    Tensor v = t;
    v.shape = std::move(shape);
    return v;
}

/// Names and shapes of every learnable tensor, in file order.
std::vector<std::pair<std::string, Shape>> parameter_manifest(const ModelConfig& cfg) {
    const int64_t D = cfg.embed_dim, dk = cfg.d_k(), ff = cfg.ff_hidden;
    std::vector<std::pair<std::string, Shape>> m;
    m.emplace_back("embedding", Shape{cfg.num_ids(), D});
    for (int64_t b = 0; b < cfg.num_blocks; ++b) {
        const std::string pre = "block" + std::to_string(b) + ".";
        for (int64_t h = 0; h < cfg.num_heads; ++h) {
            const std::string hp = pre + "mha.head" + std::to_string(h) + ".";
            m.emplace_back(hp + "Wq", Shape{D, dk});
            m.emplace_back(hp + "Wk", Shape{D, dk});
            m.emplace_back(hp + "Wv", Shape{D, dk});
        }
        m.emplace_back(pre + "mha.Wo", Shape{D, D});
        m.emplace_back(pre + "ln1.gain", Shape{D});
        m.emplace_back(pre + "ln1.bias", Shape{D});
        m.emplace_back(pre + "ffn.W1", Shape{D, ff});
        m.emplace_back(pre + "ffn.b1", Shape{ff});
        m.emplace_back(pre + "ffn.W2", Shape{ff, D});
        m.emplace_back(pre + "ffn.b2", Shape{D});
        m.emplace_back(pre + "ln2.gain", Shape{D});
        m.emplace_back(pre + "ln2.bias", Shape{D});
    }
    const int64_t in1 = D + (cfg.is_time_task() ? 3 : 0);
    m.emplace_back("dense1.W", Shape{in1, cfg.dense_units.first});
    m.emplace_back("dense1.b", Shape{cfg.dense_units.first});
    m.emplace_back("dense2.W", Shape{cfg.dense_units.first, cfg.dense_units.second});
    m.emplace_back("dense2.b", Shape{cfg.dense_units.second});
    m.emplace_back("output.W", Shape{cfg.dense_units.second, cfg.output_dim()});
    m.emplace_back("output.b", Shape{cfg.output_dim()});
    return m;
}

json config_json(const ModelConfig& c) {
    return json{{"vocab_size", c.vocab_size},
                {"max_len", c.max_len},
                {"embed_dim", c.embed_dim},
                {"num_heads", c.num_heads},
                {"num_blocks", c.num_blocks},
                {"ff_hidden", c.ff_hidden},
                {"dropout_rate", c.dropout_rate},
                {"dense1", c.dense_units.first},
                {"dense2", c.dense_units.second},
                {"task", task_name(c.task)},
                {"seed", c.seed}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<int64_t>();
    c.max_len = j.at("max_len").get<int64_t>();
    c.embed_dim = j.at("embed_dim").get<int64_t>();
    c.num_heads = j.at("num_heads").get<int64_t>();
    c.num_blocks = j.at("num_blocks").get<int64_t>();
    c.ff_hidden = j.at("ff_hidden").get<int64_t>();
    c.dropout_rate = j.at("dropout_rate").get<double>();
    c.dense_units = {j.at("dense1").get<int64_t>(), j.at("dense2").get<int64_t>()};
    c.task = task_from_name(j.at("task").get<std::string>());
    c.seed = j.at("seed").get<uint64_t>();
    return c;
}

/// The part of the header that defines compatibility: architecture,
/// vocabulary, and scaler, but not the parameter values.
json identity_json(const ModelBundle& b) {
    return json{{"config", config_json(b.params.config)},
                {"vocab", b.vocab_labels},
                {"scaler", json{{"mean", b.scaler.mean}, {"stdev", b.scaler.stdev}}}};
}

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint32_t get_u32(const std::string& buf, size_t off) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
    return v;
}

uint64_t get_u64(const std::string& buf, size_t off) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
    return v;
}

uint32_t crc_of(const std::string& buf, size_t len) {
    return static_cast<uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(len)));
}

} // namespace

std::string task_name(Task t) {
    switch (t) {
        case Task::next_activity: return "next_activity";
        case Task::next_time: return "next_time";
        case Task::remaining_time: return "remaining_time";
    }
    throw EngineError("task_name: invalid task value");
}

Task task_from_name(const std::string& name) {
    if (name == "next_activity") return Task::next_activity;
    if (name == "next_time") return Task::next_time;
    if (name == "remaining_time") return Task::remaining_time;
    throw EngineError("unknown task: " + name);
}

int64_t ModelConfig::output_dim() const {
    return task == Task::next_activity ? num_ids() : 1;
}

void ModelConfig::validate() const {
    if (vocab_size < 1) throw EngineError("ModelConfig: vocab_size must be positive");
    if (max_len < 1) throw EngineError("ModelConfig: max_len must be positive");
    if (embed_dim < 1 || num_heads < 1 || num_blocks < 1 || ff_hidden < 1)
        throw EngineError("ModelConfig: architecture sizes must be positive");
    if (embed_dim % num_heads != 0)
        throw EngineError("ModelConfig: embed_dim " + std::to_string(embed_dim) +
                          " not divisible by num_heads " + std::to_string(num_heads));
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
        throw EngineError("ModelConfig: dropout_rate must lie in [0, 1)");
    if (dense_units.first < 1 || dense_units.second < 1)
        throw EngineError("ModelConfig: dense_units must be positive");
}

Tensor positional_encoding(int64_t max_len, int64_t embed_dim) {
    std::vector<double> v(static_cast<size_t>(max_len * embed_dim));
    for (int64_t p = 0; p < max_len; ++p) {
        for (int64_t c = 0; c < embed_dim; ++c) {
            const double arg =
                static_cast<double>(p) /
                std::pow(10000.0, static_cast<double>(2 * (c / 2)) / static_cast<double>(embed_dim));
            v[static_cast<size_t>(p * embed_dim + c)] = (c % 2 == 0) ? std::sin(arg) : std::cos(arg);
        }
    }
    return Tensor::make({max_len, embed_dim}, std::move(v));
}

ModelParams ModelParams::init(const ModelConfig& config) {
    config.validate();
    ModelParams p;
    p.config = config;
    Rng rng = Rng(config.seed).split(0);
    for (auto& [name, shape] : parameter_manifest(config)) {
        Tensor t;
        if (shape.size() == 2) {
            const double bound = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
            std::vector<double> v(static_cast<size_t>(shape_size(shape)));
            for (double& x : v) x = rng.uniform(-bound, bound);
            t = Tensor::make(shape, std::move(v), true);
        } else if (name.ends_with(".gain")) {
            t = Tensor::make(shape, std::vector<double>(static_cast<size_t>(shape_size(shape)), 1.0), true);
        } else {
            t = Tensor::zeros(shape, true);
        }
        p.entries.emplace_back(name, std::move(t));
    }
    p.pos = positional_encoding(config.max_len, config.embed_dim);
    return p;
}

Tensor& ModelParams::at(const std::string& name) {
    for (auto& [n, t] : entries)
        if (n == name) return t;
    throw EngineError("unknown parameter: " + name);
}

const Tensor& ModelParams::at(const std::string& name) const {
    for (const auto& [n, t] : entries)
        if (n == name) return t;
    throw EngineError("unknown parameter: " + name);
}

BlockParams ModelParams::block(int64_t index) const {
    const std::string pre = "block" + std::to_string(index) + ".";
    BlockParams bp;
    for (int64_t h = 0; h < config.num_heads; ++h) {
        const std::string hp = pre + "mha.head" + std::to_string(h) + ".";
        bp.Wq.push_back(at(hp + "Wq"));
        bp.Wk.push_back(at(hp + "Wk"));
        bp.Wv.push_back(at(hp + "Wv"));
    }
    bp.Wo = at(pre + "mha.Wo");
    bp.ln1_gain = at(pre + "ln1.gain");
    bp.ln1_bias = at(pre + "ln1.bias");
    bp.ffn_W1 = at(pre + "ffn.W1");
    bp.ffn_b1 = at(pre + "ffn.b1");
    bp.ffn_W2 = at(pre + "ffn.W2");
    bp.ffn_b2 = at(pre + "ffn.b2");
    bp.ln2_gain = at(pre + "ln2.gain");
    bp.ln2_bias = at(pre + "ln2.bias");
    return bp;
}

int64_t ModelParams::total_parameters() const {
    int64_t n = 0;
    for (const auto& [name, t] : entries) n += t.size();
    return n;
}

ModelParams ModelParams::inference_view() const {
    ModelParams v;
    v.config = config;
    v.pos = pos;
    v.entries.reserve(entries.size());
    for (const auto& [name, t] : entries) {
        Tensor d = t;
        d.requires_grad = false;
        d.grad = nullptr;
        v.entries.emplace_back(name, std::move(d));
    }
    return v;
}

ModelInput make_input(const std::vector<const PrefixSample*>& samples,
                      const ModelConfig& config) {
    if (samples.empty()) throw EmptyInput("make_input: empty batch");
    const int64_t B = static_cast<int64_t>(samples.size());
    const int64_t L = config.max_len;
    ModelInput in;
    in.ids.assign(static_cast<size_t>(B * L), ActivityVocabulary::kPadId);
    in.ids_shape = {B, L};
    in.keep.shape = {B, L};
    in.keep.keep.assign(static_cast<size_t>(B * L), 0);
    std::vector<double> fv(static_cast<size_t>(B * 3));
    for (int64_t s = 0; s < B; ++s) {
        const PrefixSample& ps = *samples[static_cast<size_t>(s)];
        if (ps.prefix_len < 1) throw EngineError("make_input: sample with empty prefix");
        if (ps.prefix_len > L)
            throw PrefixLongerThanMaxLen("prefix of length " + std::to_string(ps.prefix_len) +
                                         " does not fit max_len " + std::to_string(L));
        if (static_cast<int64_t>(ps.prefix.size()) < ps.prefix_len)
            throw EngineError("make_input: prefix vector shorter than prefix_len");
        for (int64_t j = 0; j < ps.prefix_len; ++j) {
            const int64_t id = ps.prefix[static_cast<size_t>(j)];
            if (id < 0 || id >= config.num_ids())
                throw EngineError("make_input: activity id " + std::to_string(id) +
                                  " outside vocabulary of " + std::to_string(config.num_ids()) + " ids");
            in.ids[static_cast<size_t>(s * L + j)] = id;
            in.keep.keep[static_cast<size_t>(s * L + j)] = 1;
        }
        fv[static_cast<size_t>(s * 3 + 0)] = ps.fv1;
        fv[static_cast<size_t>(s * 3 + 1)] = ps.fv2;
        fv[static_cast<size_t>(s * 3 + 2)] = ps.fv3;
    }
    in.fv = Tensor::make({B, 3}, std::move(fv));
    return in;
}

Tensor scaled_dot_product_attention(Tape& tape, const Tensor& Q, const Tensor& K,
                                    const Tensor& V, const Mask& keep,
                                    Tensor* weights_out) {
    if (Q.shape != K.shape || Q.shape != V.shape)
        throw ShapeMismatch("attention expects Q, K, V of one shape, got " + shape_str(Q.shape) +
                            ", " + shape_str(K.shape) + ", " + shape_str(V.shape));
    const bool rank2 = Q.shape.size() == 2;
    if (!rank2 && Q.shape.size() != 3)
        throw ShapeMismatch("attention expects rank 2 or 3 inputs, got " + shape_str(Q.shape));
    const Tensor q = rank2 ? reshaped(Q, {1, Q.shape[0], Q.shape[1]}) : Q;
    const Tensor k = rank2 ? reshaped(K, {1, K.shape[0], K.shape[1]}) : K;
    const Tensor v = rank2 ? reshaped(V, {1, V.shape[0], V.shape[1]}) : V;
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.shape[2]));
    const Tensor scores = tape.mul_scalar(tape.matmul(q, tape.transpose_last_two(k)), scale);
    const Tensor w = tape.softmax_last_axis(scores, keep);
    if (weights_out) *weights_out = rank2 ? reshaped(w, {Q.shape[0], Q.shape[0]}) : w;
    const Tensor z = tape.matmul(w, v);
    return rank2 ? reshaped(z, Q.shape) : z;
}

Tensor multi_head_attention(Tape& tape, const Tensor& x, const BlockParams& bp,
                            const Mask& keep) {
    if (bp.Wq.empty() || bp.Wq.size() != bp.Wk.size() || bp.Wq.size() != bp.Wv.size())
        throw EngineError("multi_head_attention: inconsistent head parameters");
    const bool rank2 = x.shape.size() == 2;
    const Tensor xx = rank2 ? reshaped(x, {1, x.shape[0], x.shape[1]}) : x;
    Tensor cat;
    for (size_t h = 0; h < bp.Wq.size(); ++h) {
        const Tensor head = scaled_dot_product_attention(tape, tape.matmul(xx, bp.Wq[h]),
                                                         tape.matmul(xx, bp.Wk[h]),
                                                         tape.matmul(xx, bp.Wv[h]), keep);
        cat = h == 0 ? head : tape.concat_last_axis(cat, head);
    }
    const Tensor out = tape.matmul(cat, bp.Wo);
    return rank2 ? reshaped(out, x.shape) : out;
}

Tensor attention_block(Tape& tape, const Tensor& x, const BlockParams& bp,
                       const Mask& keep, double dropout_rate, bool training,
                       Rng* rng) {
    if (training && dropout_rate > 0.0 && rng == nullptr)
        throw EngineError("attention_block: dropout during training needs an rng");
    Rng idle(0);
    Rng& r = rng ? *rng : idle;
    const Tensor attended = multi_head_attention(tape, x, bp, keep);
    const Tensor y1 = tape.layer_norm_last_axis(
        tape.add(x, tape.dropout(attended, dropout_rate, training, r)), bp.ln1_gain, bp.ln1_bias);
    Tensor f = tape.relu(tape.add(tape.matmul(y1, bp.ffn_W1), bp.ffn_b1));
    f = tape.add(tape.matmul(f, bp.ffn_W2), bp.ffn_b2);
    return tape.layer_norm_last_axis(
        tape.add(y1, tape.dropout(f, dropout_rate, training, r)), bp.ln2_gain, bp.ln2_bias);
}

Tensor forward_batch(Tape& tape, const ModelParams& params, const ModelInput& input,
                     bool training, Rng* rng) {
    const ModelConfig& cfg = params.config;
    if (input.ids_shape.size() != 2 || input.ids_shape[1] != cfg.max_len)
        throw ShapeMismatch("forward_batch: ids must be [batch, max_len], got " +
                            shape_str(input.ids_shape));
    if (training && cfg.dropout_rate > 0.0 && rng == nullptr)
        throw EngineError("forward_batch: dropout during training needs an rng");
    Rng idle(0);
    Rng& r = rng ? *rng : idle;

    Tensor x = tape.embedding_lookup(params.at("embedding"), input.ids, input.ids_shape);
    x = tape.add(x, params.pos);
    for (int64_t b = 0; b < cfg.num_blocks; ++b)
        x = attention_block(tape, x, params.block(b), input.keep, cfg.dropout_rate, training, rng);
    Tensor h = tape.dropout(tape.max_over_axis(x, 1, input.keep), cfg.dropout_rate, training, r);
    if (cfg.is_time_task()) {
        const Shape want{input.ids_shape[0], 3};
        if (input.fv.shape != want)
            throw ShapeMismatch("forward_batch: temporal features must be " + shape_str(want) +
                                ", got " + shape_str(input.fv.shape));
        h = tape.concat_last_axis(h, input.fv);
    }
    h = tape.relu(tape.add(tape.matmul(h, params.at("dense1.W")), params.at("dense1.b")));
    h = tape.relu(tape.add(tape.matmul(h, params.at("dense2.W")), params.at("dense2.b")));
    return tape.add(tape.matmul(h, params.at("output.W")), params.at("output.b"));
}

uint32_t ModelBundle::config_hash() const {
    const std::string text = identity_json(*this).dump();
    return static_cast<uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(text.data()), static_cast<uInt>(text.size())));
}

void save_model(const ModelBundle& bundle, const std::string& path) {
    bundle.params.config.validate();
    json header = identity_json(bundle);
    json manifest = json::array();
    for (const auto& [name, t] : bundle.params.entries)
        manifest.push_back(json{{"name", name}, {"shape", t.shape}});
    header["params"] = std::move(manifest);
    const std::string header_text = header.dump();

    std::string buf;
    buf.append(kMagic, sizeof(kMagic));
    put_u32(buf, kFormatVersion);
    put_u64(buf, header_text.size());
    buf.append(header_text);
    for (const auto& [name, t] : bundle.params.entries) {
        const double* d = t.data();
        for (int64_t i = 0; i < t.size(); ++i) {
            uint64_t bits;
            std::memcpy(&bits, &d[i], sizeof(bits));
            put_u64(buf, bits);
        }
    }
    put_u32(buf, crc_of(buf, buf.size()));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ModelFileError("cannot open for writing: " + path);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    out.flush();
    if (!out) throw ModelFileError("write failed: " + path);
}

ModelBundle load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ModelFileError("cannot open model file: " + path);
    const std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    constexpr size_t kPrefixLen = sizeof(kMagic) + 4 + 8; // magic, version, header length
    if (buf.size() < kPrefixLen + 4) throw CorruptFile("model file truncated: " + path);
    if (crc_of(buf, buf.size() - 4) != get_u32(buf, buf.size() - 4))
        throw CorruptFile("model file checksum mismatch: " + path);
    if (std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0)
        throw CorruptFile("not a model file (bad magic): " + path);
    const uint32_t version = get_u32(buf, sizeof(kMagic));
    if (version != kFormatVersion)
        throw VersionMismatch("model format version " + std::to_string(version) +
                              " unsupported (expected " + std::to_string(kFormatVersion) + ")");
    const uint64_t header_len = get_u64(buf, sizeof(kMagic) + 4);
    if (kPrefixLen + header_len + 4 > buf.size()) throw CorruptFile("model header truncated: " + path);

    ModelBundle b;
    std::vector<std::pair<std::string, Shape>> stored;
    try {
        const json header = json::parse(buf.substr(kPrefixLen, header_len));
        b.params.config = config_from_json(header.at("config"));
        b.vocab_labels = header.at("vocab").get<std::vector<std::string>>();
        b.scaler.mean = header.at("scaler").at("mean").get<std::array<double, 5>>();
        b.scaler.stdev = header.at("scaler").at("stdev").get<std::array<double, 5>>();
        for (const json& e : header.at("params"))
            stored.emplace_back(e.at("name").get<std::string>(), e.at("shape").get<Shape>());
    } catch (const json::exception& e) {
        throw CorruptFile("bad model header: " + std::string(e.what()));
    }
    try {
        b.params.config.validate();
    } catch (const EngineError& e) {
        throw CorruptFile("bad model config: " + std::string(e.what()));
    }
    if (static_cast<int64_t>(b.vocab_labels.size()) != b.params.config.vocab_size)
        throw CorruptFile("vocabulary size disagrees with config");
    if (stored != parameter_manifest(b.params.config))
        throw CorruptFile("parameter manifest disagrees with config");

    size_t off = kPrefixLen + header_len;
    const size_t blob_end = buf.size() - 4;
    for (auto& [name, shape] : stored) {
        const size_t n = static_cast<size_t>(shape_size(shape));
        if (off + 8 * n > blob_end) throw CorruptFile("parameter blob truncated: " + name);
        std::vector<double> v(n);
        for (size_t i = 0; i < n; ++i) {
            const uint64_t bits = get_u64(buf, off + 8 * i);
            std::memcpy(&v[i], &bits, sizeof(double));
        }
        off += 8 * n;
        b.params.entries.emplace_back(name, Tensor::make(shape, std::move(v), true));
    }
    if (off != blob_end) throw CorruptFile("trailing bytes after parameter blobs");
    b.params.pos = positional_encoding(b.params.config.max_len, b.params.config.embed_dim);
    return b;
}

ModelBundle load_model(const std::string& path, uint32_t expected_config_hash) {
    ModelBundle b = load_model(path);
    const uint32_t got = b.config_hash();
    if (got != expected_config_hash)
        throw VersionMismatch("model identity hash " + std::to_string(got) +
                              " does not match expected " + std::to_string(expected_config_hash));
    return b;
}

} // namespace procformer
