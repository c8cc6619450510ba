#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "procformer/eventlog.hpp"

namespace procformer {

/// One k-prefix of a trace plus its three prediction targets. Durations are
/// fractional days.
struct PrefixSample {
    std::vector<int64_t> prefix; // length max_len, right-padded with PAD (0)
    int64_t prefix_len;          // k; first k entries are the encoded events
    double fv1, fv2, fv3;        // last-step, two-step, and since-start spans
    int64_t target_activity;     // encoded activity of event k+1
    double target_next_delta;    // days until event k+1
    double target_remaining;     // days until the trace ends
    std::string case_id;
};

/// Per-dimension standardization fitted on training samples. Dimensions:
/// 0..2 = fv1..fv3, 3 = next delta, 4 = remaining time.
struct FeatureScaler {
    static constexpr int kFv1 = 0, kFv2 = 1, kFv3 = 2, kNextDelta = 3, kRemaining = 4;
    std::array<double, 5> mean{};
    std::array<double, 5> stdev{1, 1, 1, 1, 1};

    double scale(int dim, double x) const { return (x - mean[static_cast<size_t>(dim)]) / stdev[static_cast<size_t>(dim)]; }
    double unscale(int dim, double x) const { return mean[static_cast<size_t>(dim)] + stdev[static_cast<size_t>(dim)] * x; }
};

struct Dataset {
    std::vector<PrefixSample> samples;
    int64_t vocab_size; // V: distinct training labels (ids run 0..V+1)
    int64_t max_len;
    int64_t skipped_short_traces = 0; // length-1 traces produce no samples
};

/// fv triple of a prefix: last-event deltas and span since the first event,
/// in days. Single-event prefixes are all zero.
std::array<double, 3> temporal_features(const Trace& prefix);

/// All k-prefixes (k = 1..|trace|-1) of one trace. A trace shorter than two
/// events yields nothing; longer than max_len is an error (TraceTooLong).
std::vector<PrefixSample> generate_prefix_samples(const Trace& trace,
                                                  const ActivityVocabulary& vocab,
                                                  int64_t max_len);

/// Samples for every trace of the log, in trace order. max_len must be the
/// maximum trace length of the full log so train and test pad identically.
Dataset build_dataset(const EventLog& log, const ActivityVocabulary& vocab, int64_t max_len);

/// Population mean/std per dimension; constant dimensions get std 1.
FeatureScaler fit_scaler(const std::vector<PrefixSample>& train_samples);

/// Copy of the sample with fv values and regression targets standardized.
PrefixSample apply_scaler(const FeatureScaler& s, const PrefixSample& sample);

/// Debug/oracle dump: one line per sample.
void write_samples_csv(const std::vector<PrefixSample>& samples, std::ostream& out);

} // namespace procformer
