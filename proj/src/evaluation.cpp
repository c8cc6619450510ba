#include "procformer/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "json.hpp"
#include "procformer/errors.hpp"
#include "procformer/parallel.hpp"
#include "procformer/tensor.hpp"

namespace procformer {

namespace {

using nlohmann::json;

constexpr int64_t kMicroBatch = 32;

std::string g17(double x) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

void check_pair(size_t np, size_t nt, const char* what) {
    if (np != nt)
        throw ShapeMismatch(std::string(what) + ": " + std::to_string(np) + " predictions vs " +
                            std::to_string(nt) + " targets");
    if (np == 0) throw EmptyInput(std::string(what) + " of an empty set");
}

} // namespace

double accuracy(const std::vector<int64_t>& predictions, const std::vector<int64_t>& targets) {
    check_pair(predictions.size(), targets.size(), "accuracy");
    int64_t hits = 0;
    for (size_t i = 0; i < predictions.size(); ++i)
        if (predictions[i] == targets[i]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

double weighted_f_score(const std::vector<int64_t>& predictions,
                        const std::vector<int64_t>& targets, int64_t num_classes) {
    check_pair(predictions.size(), targets.size(), "weighted_f_score");
    if (num_classes < 1) throw EngineError("weighted_f_score: num_classes must be positive");
    std::vector<int64_t> tp(static_cast<size_t>(num_classes), 0);
    std::vector<int64_t> fp(static_cast<size_t>(num_classes), 0);
    std::vector<int64_t> fn(static_cast<size_t>(num_classes), 0);
    for (size_t i = 0; i < predictions.size(); ++i) {
        const int64_t p = predictions[i], t = targets[i];
        if (p < 0 || p >= num_classes || t < 0 || t >= num_classes)
            throw EngineError("weighted_f_score: class id outside [0, " +
                              std::to_string(num_classes) + ")");
        if (p == t) {
            ++tp[static_cast<size_t>(p)];
        } else {
            ++fp[static_cast<size_t>(p)];
            ++fn[static_cast<size_t>(t)];
        }
    }
    double weighted = 0.0;
    for (int64_t c = 0; c < num_classes; ++c) {
        const auto i = static_cast<size_t>(c);
        const int64_t support = tp[i] + fn[i];
        if (support == 0) continue;
        const double prec = tp[i] + fp[i] > 0 ? static_cast<double>(tp[i]) / static_cast<double>(tp[i] + fp[i]) : 0.0;
        const double rec = static_cast<double>(tp[i]) / static_cast<double>(support);
        const double f = prec + rec > 0.0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
        weighted += static_cast<double>(support) * f;
    }
    return weighted / static_cast<double>(targets.size());
}

double mae(const std::vector<double>& predictions, const std::vector<double>& targets) {
    check_pair(predictions.size(), targets.size(), "mae");
    double sum = 0.0;
    for (size_t i = 0; i < predictions.size(); ++i) sum += std::abs(predictions[i] - targets[i]);
    return sum / static_cast<double>(predictions.size());
}

int64_t predicted_activity(const double* logits, int64_t num_ids) {
    if (num_ids < 2) throw EngineError("predicted_activity: need at least one non-pad class");
    int64_t best = 1;
    for (int64_t i = 2; i < num_ids; ++i)
        if (logits[i] > logits[best]) best = i;
    return best;
}

EvalReport evaluate_per_prefix(const ModelBundle& bundle, const Dataset& test_data, Task task) {
    const ModelConfig& cfg = bundle.params.config;
    if (cfg.task != task)
        throw EngineError("evaluate_per_prefix: model trained for " + task_name(cfg.task) +
                          ", asked to evaluate " + task_name(task));
    const int64_t n = static_cast<int64_t>(test_data.samples.size());
    if (n == 0) throw EmptyTestSet("evaluate_per_prefix: no test samples");

    std::vector<PrefixSample> scaled;
    scaled.reserve(static_cast<size_t>(n));
    for (const auto& s : test_data.samples) scaled.push_back(apply_scaler(bundle.scaler, s));

    const bool classify = task == Task::next_activity;
    const int scale_dim = task == Task::next_time ? FeatureScaler::kNextDelta : FeatureScaler::kRemaining;
    const ModelParams frozen = bundle.params.inference_view();

    std::vector<int64_t> pred_ids(classify ? static_cast<size_t>(n) : 0);
    std::vector<double> pred_days(classify ? 0 : static_cast<size_t>(n));
    const int64_t chunks = (n + kMicroBatch - 1) / kMicroBatch;
    parallel_for(chunks, 1, [&](int64_t lo, int64_t hi) {
        for (int64_t c = lo; c < hi; ++c) {
            const int64_t s0 = c * kMicroBatch;
            const int64_t s1 = std::min(n, s0 + kMicroBatch);
            std::vector<const PrefixSample*> rows;
            rows.reserve(static_cast<size_t>(s1 - s0));
            for (int64_t i = s0; i < s1; ++i) rows.push_back(&scaled[static_cast<size_t>(i)]);
            Tape tape;
            const Tensor out = forward_batch(tape, frozen, make_input(rows, cfg), false);
            for (int64_t i = s0; i < s1; ++i) {
                const double* row = out.data() + (i - s0) * cfg.output_dim();
                if (classify) {
                    pred_ids[static_cast<size_t>(i)] = predicted_activity(row, cfg.num_ids());
                } else {
                    pred_days[static_cast<size_t>(i)] = bundle.scaler.unscale(scale_dim, row[0]);
                }
            }
        }
    });

    std::map<int64_t, std::vector<int64_t>> groups;
    for (int64_t i = 0; i < n; ++i)
        groups[test_data.samples[static_cast<size_t>(i)].prefix_len].push_back(i);

    EvalReport report;
    report.task = task;
    report.total_samples = n;
    report.primary_name = classify ? "accuracy" : "mae_days";
    if (classify) report.f_score.emplace();

    std::vector<int64_t> all_targets;
    std::vector<double> all_days;
    for (int64_t i = 0; i < n; ++i) {
        const PrefixSample& raw = test_data.samples[static_cast<size_t>(i)];
        if (classify)
            all_targets.push_back(raw.target_activity);
        else
            all_days.push_back(task == Task::next_time ? raw.target_next_delta : raw.target_remaining);
    }

    auto metric_of = [&](const std::vector<int64_t>& idx, bool f_variant) {
        if (classify) {
            std::vector<int64_t> p, t;
            for (int64_t i : idx) {
                p.push_back(pred_ids[static_cast<size_t>(i)]);
                t.push_back(all_targets[static_cast<size_t>(i)]);
            }
            return f_variant ? weighted_f_score(p, t, cfg.num_ids()) : accuracy(p, t);
        }
        std::vector<double> p, t;
        for (int64_t i : idx) {
            p.push_back(pred_days[static_cast<size_t>(i)]);
            t.push_back(all_days[static_cast<size_t>(i)]);
        }
        return mae(p, t);
    };

    double sum_primary = 0.0, sum_f = 0.0;
    for (const auto& [k, idx] : groups) {
        const double v = metric_of(idx, false);
        report.primary.per_k[k] = PerK{static_cast<int64_t>(idx.size()), v};
        sum_primary += v;
        if (classify) {
            const double f = metric_of(idx, true);
            report.f_score->per_k[k] = PerK{static_cast<int64_t>(idx.size()), f};
            sum_f += f;
        }
    }
    std::vector<int64_t> everything(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) everything[static_cast<size_t>(i)] = i;
    report.primary.averaged = sum_primary / static_cast<double>(groups.size());
    report.primary.overall = metric_of(everything, false);
    if (classify) {
        report.f_score->averaged = sum_f / static_cast<double>(groups.size());
        report.f_score->overall = metric_of(everything, true);
    }
    return report;
}

namespace {

json summary_json(const MetricByPrefix& m) {
    json per_k = json::array();
    for (const auto& [k, e] : m.per_k)
        per_k.push_back(json{{"k", k}, {"count", e.count}, {"value", e.value}});
    return json{{"averaged", m.averaged}, {"overall", m.overall}, {"per_k", per_k}};
}

} // namespace

void write_eval_json(const EvalReport& report, std::ostream& out) {
    json j{{"task", task_name(report.task)},
           {"metric", report.primary_name},
           {"total_samples", report.total_samples},
           {report.primary_name, summary_json(report.primary)}};
    if (report.f_score) j["f_score"] = summary_json(*report.f_score);
    out << j.dump(2) << "\n";
}

void write_eval_csv(const EvalReport& report, std::ostream& out) {
    if (report.f_score) {
        out << "k,count," << report.primary_name << ",f_score\n";
        for (const auto& [k, e] : report.primary.per_k)
            out << k << "," << e.count << "," << g17(e.value) << ","
                << g17(report.f_score->per_k.at(k).value) << "\n";
    } else {
        out << "k,count," << report.primary_name << "\n";
        for (const auto& [k, e] : report.primary.per_k)
            out << k << "," << e.count << "," << g17(e.value) << "\n";
    }
}

} // namespace procformer
