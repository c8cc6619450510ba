#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "procformer/features.hpp"
#include "procformer/model.hpp"

namespace procformer {

/// Fraction of positions where predictions and targets agree.
double accuracy(const std::vector<int64_t>& predictions, const std::vector<int64_t>& targets);

/// Support-weighted mean of per-class F1. Undefined precision or recall
/// counts as 0, as does F for a class with p + r = 0.
double weighted_f_score(const std::vector<int64_t>& predictions,
                        const std::vector<int64_t>& targets, int64_t num_classes);

/// Mean absolute difference; callers pass values already in days.
double mae(const std::vector<double>& predictions, const std::vector<double>& targets);

/// Argmax over logits[1..num_ids): the padding class is never predicted,
/// ties resolve to the lowest id.
int64_t predicted_activity(const double* logits, int64_t num_ids);

struct PerK {
    int64_t count = 0;
    double value = 0.0;
};

struct MetricByPrefix {
    std::map<int64_t, PerK> per_k;
    double averaged = 0.0; // unweighted mean over prefix lengths present
    double overall = 0.0;  // pooled over all samples
};

struct EvalReport {
    Task task = Task::next_activity;
    int64_t total_samples = 0;
    std::string primary_name;              // "accuracy" or "mae_days"
    MetricByPrefix primary;                // accuracy, or MAE in days
    std::optional<MetricByPrefix> f_score; // next_activity only
};

/// Test-set protocol: group samples by prefix length k, compute the task
/// metric inside each group, average groups unweighted, and also report the
/// pooled value. test_data holds raw (unscaled) samples; the bundle's scaler
/// is applied on the way in and inverted on the way out for time tasks.
EvalReport evaluate_per_prefix(const ModelBundle& bundle, const Dataset& test_data, Task task);

void write_eval_json(const EvalReport& report, std::ostream& out);
void write_eval_csv(const EvalReport& report, std::ostream& out);

} // namespace procformer
