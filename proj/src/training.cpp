#include "procformer/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numeric>
#include <ostream>

#include "json.hpp"
#include "procformer/errors.hpp"
#include "procformer/evaluation.hpp"
#include "procformer/kernels.hpp"
#include "procformer/parallel.hpp"
#include "procformer/tensor.hpp"

namespace procformer {

namespace {

using nlohmann::json;

/// Fixed micro-batch width. Batches are cut into these chunks, each chunk
/// runs on its own tape, and gradients reduce in chunk order, so results
/// cannot depend on how many workers picked chunks up.
constexpr int64_t kMicroBatch = 32;

// Substream ids carved off the root seed. Parameter init uses split(0)
// inside ModelParams::init.
constexpr uint64_t kShuffleStream = 2;
constexpr uint64_t kDropoutStream = 3;

std::string g17(double x) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

using SinkSet = std::vector<std::shared_ptr<std::vector<double>>>;

/// Parameter view whose gradients land in the given per-chunk buffers.
ModelParams sink_view(const ModelParams& p, const SinkSet& sinks) {
    ModelParams v;
    v.config = p.config;
    v.pos = p.pos;
    v.entries.reserve(p.entries.size());
    for (size_t i = 0; i < p.entries.size(); ++i)
        v.entries.emplace_back(p.entries[i].first, p.entries[i].second.with_grad_sink(sinks[i]));
    return v;
}

struct ValScore {
    double loss = 0.0;
    double metric = 0.0;
};

} // namespace

void TrainConfig::validate() const {
    if (epochs < 0) throw EngineError("TrainConfig: epochs must be non-negative");
    // learning_rate 0 is allowed: it makes train() a (useful) no-op bound.
    if (learning_rate < 0.0) throw EngineError("TrainConfig: learning_rate must be non-negative");
    if (batch_size < 1) throw EngineError("TrainConfig: batch_size must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
        throw EngineError("TrainConfig: betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw EngineError("TrainConfig: adam_eps must be positive");
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
        throw EngineError("TrainConfig: validation_fraction must lie in (0, 1)");
    if (class_weight_power < 0.0) throw EngineError("TrainConfig: class_weight_power must be non-negative");
}

AdamState AdamState::init(const ModelParams& params) {
    AdamState s;
    s.m.reserve(params.entries.size());
    s.v.reserve(params.entries.size());
    for (const auto& [name, t] : params.entries) {
        s.m.emplace_back(static_cast<size_t>(t.size()), 0.0);
        s.v.emplace_back(static_cast<size_t>(t.size()), 0.0);
    }
    return s;
}

void adam_step(ModelParams& params, AdamState& state, const TrainConfig& config) {
    if (state.m.size() != params.entries.size() || state.v.size() != params.entries.size())
        throw EngineError("adam_step: optimizer state misaligned with parameters");
    for (const auto& [name, t] : params.entries) {
        if (!t.requires_grad || !t.grad)
            throw EngineError("adam_step: parameter without gradients: " + name);
        const double* g = t.gdata();
        for (int64_t i = 0; i < t.size(); ++i)
            if (!std::isfinite(g[i]))
                throw NonFiniteGradient("non-finite gradient in " + name + " at index " +
                                        std::to_string(i));
    }
    state.t += 1;
    const double c1 = 1.0 / (1.0 - std::pow(config.beta1, static_cast<double>(state.t)));
    const double c2 = 1.0 / (1.0 - std::pow(config.beta2, static_cast<double>(state.t)));
    const auto& kt = kernels::active();
    for (size_t pi = 0; pi < params.entries.size(); ++pi) {
        Tensor& t = params.entries[pi].second;
        if (state.m[pi].size() != static_cast<size_t>(t.size()))
            throw EngineError("adam_step: state size mismatch for " + params.entries[pi].first);
        kt.adam_update(t.data(), state.m[pi].data(), state.v[pi].data(), t.gdata(),
                       static_cast<size_t>(t.size()), config.learning_rate, config.beta1,
                       config.beta2, config.adam_eps, c1, c2);
        t.zero_grad();
    }
}

std::vector<double> class_weights_from_targets(const std::vector<int64_t>& targets,
                                               int64_t num_classes, double power) {
    if (num_classes < 1) throw EngineError("class weights need at least one class");
    std::vector<int64_t> count(static_cast<size_t>(num_classes), 0);
    for (int64_t t : targets) {
        if (t < 0 || t >= num_classes)
            throw BadTargetId("class-weight target " + std::to_string(t) + " outside [0, " +
                              std::to_string(num_classes) + ")");
        ++count[static_cast<size_t>(t)];
    }
    std::vector<double> w(static_cast<size_t>(num_classes), 1.0);
    double sum = 0.0;
    int64_t present = 0;
    for (size_t c = 0; c < count.size(); ++c) {
        if (count[c] == 0) continue;
        w[c] = std::pow(static_cast<double>(count[c]), -power);
        sum += w[c];
        ++present;
    }
    if (present == 0) return w;
    const double mean = sum / static_cast<double>(present);
    for (size_t c = 0; c < count.size(); ++c)
        if (count[c] > 0) w[c] /= mean;
    return w;
}

TrainOutput train(const Dataset& train_data, const ModelConfig& model_config,
                  const TrainConfig& train_config) {
    model_config.validate();
    train_config.validate();
    const int64_t n = static_cast<int64_t>(train_data.samples.size());
    if (n == 0) throw EmptyDataset("train: the dataset has no samples");
    const int64_t carve = leading_count(n, 1.0 - train_config.validation_fraction);
    if (carve < 2)
        throw EmptyDataset("train: fewer than two samples left of " + std::to_string(n) +
                           " after the validation carve-out");
    if (carve >= n) throw EmptyDataset("train: the validation carve-out is empty");

    const bool classify = model_config.task == Task::next_activity;
    const int target_dim = model_config.task == Task::next_time ? FeatureScaler::kNextDelta
                                                                : FeatureScaler::kRemaining;

    TrainOutput out;
    out.scaler = fit_scaler(train_data.samples);
    std::vector<PrefixSample> scaled;
    scaled.reserve(static_cast<size_t>(n));
    for (const auto& s : train_data.samples) scaled.push_back(apply_scaler(out.scaler, s));

    if (classify) {
        std::vector<int64_t> targets;
        targets.reserve(static_cast<size_t>(carve));
        for (int64_t i = 0; i < carve; ++i)
            targets.push_back(train_data.samples[static_cast<size_t>(i)].target_activity);
        out.class_weights =
            class_weights_from_targets(targets, model_config.num_ids(), train_config.class_weight_power);
    }

    out.params = ModelParams::init(model_config);
    AdamState adam = AdamState::init(out.params);
    for (auto& [name, t] : out.params.entries) t.zero_grad();
    out.report.metric_name = classify ? "accuracy" : "mae_days";
    out.report.val_start = carve;

    const Rng root(train_config.seed);
    const Rng shuffle_root = root.split(kShuffleStream);
    const Rng dropout_root = root.split(kDropoutStream);

    auto row_weight = [&](int64_t sample) {
        return classify
                   ? out.class_weights[static_cast<size_t>(
                         scaled[static_cast<size_t>(sample)].target_activity)]
                   : 1.0;
    };
    auto scaled_target = [&](int64_t sample) {
        const PrefixSample& s = scaled[static_cast<size_t>(sample)];
        return target_dim == FeatureScaler::kNextDelta ? s.target_next_delta : s.target_remaining;
    };

    // Reusable per-chunk gradient buffers; chunk c of every batch writes into
    // slot c, the reduction drains and re-zeroes it.
    const int64_t slots = (train_config.batch_size + kMicroBatch - 1) / kMicroBatch;
    std::vector<SinkSet> sink_pool(static_cast<size_t>(slots));
    for (auto& set : sink_pool)
        for (const auto& [name, t] : out.params.entries)
            set.push_back(std::make_shared<std::vector<double>>(static_cast<size_t>(t.size()), 0.0));

    // Chunked inference over the held-out tail; combination happens in chunk
    // order, so the score is identical for any worker count.
    auto validation_pass = [&]() {
        const ModelParams frozen = out.params.inference_view();
        const int64_t vn = n - carve;
        const int64_t chunks = (vn + kMicroBatch - 1) / kMicroBatch;
        std::vector<double> closs(static_cast<size_t>(chunks));
        std::vector<double> cweight(static_cast<size_t>(chunks));
        std::vector<double> cscore(static_cast<size_t>(chunks)); // hits or summed |error|
        parallel_for(chunks, 1, [&](int64_t lo, int64_t hi) {
            for (int64_t c = lo; c < hi; ++c) {
                const int64_t s0 = carve + c * kMicroBatch;
                const int64_t s1 = std::min(n, s0 + kMicroBatch);
                std::vector<const PrefixSample*> rows;
                std::vector<int64_t> targets;
                std::vector<double> tvals;
                double w = 0.0;
                for (int64_t i = s0; i < s1; ++i) {
                    rows.push_back(&scaled[static_cast<size_t>(i)]);
                    if (classify)
                        targets.push_back(scaled[static_cast<size_t>(i)].target_activity);
                    else
                        tvals.push_back(scaled_target(i));
                    w += row_weight(i);
                }
                Tape tape;
                const Tensor logits = forward_batch(tape, frozen, make_input(rows, model_config), false);
                double score = 0.0;
                Tensor loss;
                if (classify) {
                    loss = tape.cross_entropy(logits, targets, out.class_weights);
                    for (int64_t i = s0; i < s1; ++i) {
                        const double* row = logits.data() + (i - s0) * model_config.output_dim();
                        if (predicted_activity(row, model_config.num_ids()) ==
                            scaled[static_cast<size_t>(i)].target_activity)
                            score += 1.0;
                    }
                } else {
                    loss = tape.log_cosh(logits, Tensor::make({s1 - s0, 1}, tvals));
                    for (int64_t i = s0; i < s1; ++i) {
                        const double days = out.scaler.unscale(target_dim, logits.data()[i - s0]);
                        const PrefixSample& raw = train_data.samples[static_cast<size_t>(i)];
                        const double want = target_dim == FeatureScaler::kNextDelta
                                                ? raw.target_next_delta
                                                : raw.target_remaining;
                        score += std::abs(days - want);
                    }
                }
                closs[static_cast<size_t>(c)] = loss.data()[0];
                cweight[static_cast<size_t>(c)] = w;
                cscore[static_cast<size_t>(c)] = score;
            }
        });
        ValScore v;
        double wsum = 0.0, lsum = 0.0, ssum = 0.0;
        for (int64_t c = 0; c < chunks; ++c) {
            lsum += closs[static_cast<size_t>(c)] * cweight[static_cast<size_t>(c)];
            wsum += cweight[static_cast<size_t>(c)];
            ssum += cscore[static_cast<size_t>(c)];
        }
        v.loss = lsum / wsum;
        v.metric = ssum / static_cast<double>(vn);
        return v;
    };

    std::vector<std::vector<double>> best_values;
    bool have_best = false;
    double best_metric = 0.0;
    std::vector<int64_t> order(static_cast<size_t>(carve));

    for (int64_t epoch = 0; epoch < train_config.epochs; ++epoch) {
        const auto tic = std::chrono::steady_clock::now();
        std::iota(order.begin(), order.end(), int64_t{0});
        if (train_config.shuffle_each_epoch) {
            Rng r = shuffle_root.split(static_cast<uint64_t>(epoch));
            r.shuffle(order);
        }

        double epoch_loss = 0.0, epoch_weight = 0.0;
        int64_t batch_index = 0;
        for (int64_t b0 = 0; b0 < carve; b0 += train_config.batch_size, ++batch_index) {
            const int64_t b1 = std::min(carve, b0 + train_config.batch_size);
            double batch_weight = 0.0;
            for (int64_t i = b0; i < b1; ++i) batch_weight += row_weight(order[static_cast<size_t>(i)]);
            const int64_t chunks = (b1 - b0 + kMicroBatch - 1) / kMicroBatch;
            std::vector<double> closs(static_cast<size_t>(chunks));
            std::vector<double> cweight(static_cast<size_t>(chunks));
            parallel_for(chunks, 1, [&](int64_t lo, int64_t hi) {
                for (int64_t c = lo; c < hi; ++c) {
                    const int64_t s0 = b0 + c * kMicroBatch;
                    const int64_t s1 = std::min(b1, s0 + kMicroBatch);
                    std::vector<const PrefixSample*> rows;
                    std::vector<int64_t> targets;
                    std::vector<double> tvals;
                    double w = 0.0;
                    for (int64_t i = s0; i < s1; ++i) {
                        const int64_t sample = order[static_cast<size_t>(i)];
                        rows.push_back(&scaled[static_cast<size_t>(sample)]);
                        if (classify)
                            targets.push_back(scaled[static_cast<size_t>(sample)].target_activity);
                        else
                            tvals.push_back(scaled_target(sample));
                        w += row_weight(sample);
                    }
                    const ModelParams wp = sink_view(out.params, sink_pool[static_cast<size_t>(c)]);
                    Rng drop = dropout_root.split(static_cast<uint64_t>(epoch))
                                   .split(static_cast<uint64_t>(batch_index))
                                   .split(static_cast<uint64_t>(c));
                    Tape tape;
                    const Tensor logits = forward_batch(tape, wp, make_input(rows, model_config), true, &drop);
                    const Tensor loss =
                        classify ? tape.cross_entropy(logits, targets, out.class_weights)
                                 : tape.log_cosh(logits, Tensor::make({s1 - s0, 1}, tvals));
                    closs[static_cast<size_t>(c)] = loss.data()[0];
                    cweight[static_cast<size_t>(c)] = w;
                    tape.backward(tape.mul_scalar(loss, w / batch_weight));
                }
            });
            const auto& kt = kernels::active();
            for (int64_t c = 0; c < chunks; ++c) {
                SinkSet& set = sink_pool[static_cast<size_t>(c)];
                for (size_t pi = 0; pi < out.params.entries.size(); ++pi) {
                    Tensor& t = out.params.entries[pi].second;
                    kt.axpy(1.0, set[pi]->data(), t.gdata(), static_cast<size_t>(t.size()));
                    std::fill(set[pi]->begin(), set[pi]->end(), 0.0);
                }
                epoch_loss += closs[static_cast<size_t>(c)] * cweight[static_cast<size_t>(c)];
                epoch_weight += cweight[static_cast<size_t>(c)];
            }
            adam_step(out.params, adam, train_config);
        }

        const ValScore val = validation_pass();
        if (!std::isfinite(val.loss))
            throw DivergedLoss(
                "validation loss diverged at epoch " + std::to_string(epoch + 1) +
                (epoch > 0 ? " (last finite epoch: " + std::to_string(epoch) + ")" : ""));

        out.report.train_loss.push_back(epoch_loss / epoch_weight);
        out.report.val_loss.push_back(val.loss);
        out.report.val_metric.push_back(val.metric);
        out.report.seconds.push_back(
            std::chrono::duration<double>(std::chrono::steady_clock::now() - tic).count());

        const bool better =
            !have_best || (classify ? val.metric > best_metric : val.metric < best_metric);
        if (better) {
            have_best = true;
            best_metric = val.metric;
            out.report.best_epoch = epoch;
            best_values.clear();
            for (const auto& [name, t] : out.params.entries) best_values.push_back(*t.val);
        }
    }

    if (have_best)
        for (size_t pi = 0; pi < out.params.entries.size(); ++pi)
            *out.params.entries[pi].second.val = best_values[pi];
    return out;
}

void write_train_report_csv(const TrainReport& report, std::ostream& out, bool include_seconds) {
    out << "epoch,train_loss,val_loss,val_metric";
    if (include_seconds) out << ",seconds";
    out << "\n";
    for (size_t e = 0; e < report.train_loss.size(); ++e) {
        out << (e + 1) << "," << g17(report.train_loss[e]) << "," << g17(report.val_loss[e]) << ","
            << g17(report.val_metric[e]);
        if (include_seconds) out << "," << g17(report.seconds[e]);
        out << "\n";
    }
}

void write_train_report_json(const TrainReport& report, std::ostream& out, bool include_seconds) {
    json j;
    j["epochs"] = report.train_loss.size();
    j["metric"] = report.metric_name;
    j["val_start"] = report.val_start;
    if (report.best_epoch >= 0) {
        j["best_epoch"] = report.best_epoch + 1;
        j["best_val_metric"] = report.val_metric[static_cast<size_t>(report.best_epoch)];
    } else {
        j["best_epoch"] = nullptr;
    }
    json history = json::array();
    for (size_t e = 0; e < report.train_loss.size(); ++e) {
        json row{{"epoch", e + 1},
                 {"train_loss", report.train_loss[e]},
                 {"val_loss", report.val_loss[e]},
                 {"val_metric", report.val_metric[e]}};
        if (include_seconds) row["seconds"] = report.seconds[e];
        history.push_back(std::move(row));
    }
    j["history"] = std::move(history);
    out << j.dump(2) << "\n";
}

} // namespace procformer
