#include "procformer/features.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>

#include "procformer/errors.hpp"

namespace procformer {

namespace {

constexpr double kSecondsPerDay = 86400.0;

double days_between(int64_t from, int64_t to) {
    return static_cast<double>(to - from) / kSecondsPerDay;
}

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace

std::array<double, 3> temporal_features(const Trace& prefix) {
    size_t n = prefix.events.size();
    if (n == 0) throw EngineError("temporal_features: empty prefix");
    if (n == 1) return {0.0, 0.0, 0.0};
    int64_t tn = prefix.events[n - 1].timestamp;
    double fv1 = days_between(prefix.events[n - 2].timestamp, tn);
    double fv2 = n == 2 ? 0.0 : days_between(prefix.events[n - 3].timestamp, tn);
    double fv3 = days_between(prefix.events[0].timestamp, tn);
    return {fv1, fv2, fv3};
}

std::vector<PrefixSample> generate_prefix_samples(const Trace& trace,
                                                  const ActivityVocabulary& vocab,
                                                  int64_t max_len) {
    int64_t n = trace.length();
    if (n > max_len) {
        throw TraceTooLong("case \"" + trace.case_id + "\" has " + std::to_string(n) +
                           " events, max_len is " + std::to_string(max_len));
    }
    std::vector<PrefixSample> out;
    if (n < 2) return out;

    std::vector<int64_t> encoded(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        encoded[static_cast<size_t>(i)] = vocab.encode(trace.events[static_cast<size_t>(i)].activity);
    }

    Trace prefix{trace.case_id, {}};
    prefix.events.reserve(static_cast<size_t>(n));
    int64_t end_time = trace.events[static_cast<size_t>(n - 1)].timestamp;
    for (int64_t k = 1; k < n; ++k) {
        prefix.events.push_back(trace.events[static_cast<size_t>(k - 1)]);
        auto fv = temporal_features(prefix);

        PrefixSample s;
        s.prefix.assign(static_cast<size_t>(max_len), ActivityVocabulary::kPadId);
        for (int64_t i = 0; i < k; ++i) s.prefix[static_cast<size_t>(i)] = encoded[static_cast<size_t>(i)];
        s.prefix_len = k;
        s.fv1 = fv[0];
        s.fv2 = fv[1];
        s.fv3 = fv[2];
        s.target_activity = encoded[static_cast<size_t>(k)];
        int64_t tk = trace.events[static_cast<size_t>(k - 1)].timestamp;
        s.target_next_delta = days_between(tk, trace.events[static_cast<size_t>(k)].timestamp);
        s.target_remaining = days_between(tk, end_time);
        s.case_id = trace.case_id;
        out.push_back(std::move(s));
    }
    return out;
}

Dataset build_dataset(const EventLog& log, const ActivityVocabulary& vocab, int64_t max_len) {
    Dataset ds;
    ds.vocab_size = vocab.size();
    ds.max_len = max_len;
    for (const auto& trace : log.traces) {
        if (trace.length() < 2) {
            ++ds.skipped_short_traces;
            continue;
        }
        auto samples = generate_prefix_samples(trace, vocab, max_len);
        for (auto& s : samples) ds.samples.push_back(std::move(s));
    }
    return ds;
}

FeatureScaler fit_scaler(const std::vector<PrefixSample>& train_samples) {
    if (train_samples.empty()) throw EmptyDataset("fit_scaler: no training samples");
    FeatureScaler sc;
    auto value = [](const PrefixSample& s, int dim) {
        switch (dim) {
            case FeatureScaler::kFv1: return s.fv1;
            case FeatureScaler::kFv2: return s.fv2;
            case FeatureScaler::kFv3: return s.fv3;
            case FeatureScaler::kNextDelta: return s.target_next_delta;
            default: return s.target_remaining;
        }
    };
    double n = static_cast<double>(train_samples.size());
    for (int dim = 0; dim < 5; ++dim) {
        double sum = 0.0;
        for (const auto& s : train_samples) sum += value(s, dim);
        double mean = sum / n;
        double sq = 0.0;
        for (const auto& s : train_samples) {
            double c = value(s, dim) - mean;
            sq += c * c;
        }
        double stdev = std::sqrt(sq / n); // population convention
        sc.mean[static_cast<size_t>(dim)] = mean;
        sc.stdev[static_cast<size_t>(dim)] = stdev > 0.0 ? stdev : 1.0;
    }
    return sc;
}

PrefixSample apply_scaler(const FeatureScaler& s, const PrefixSample& sample) {
    PrefixSample out = sample;
    out.fv1 = s.scale(FeatureScaler::kFv1, sample.fv1);
    out.fv2 = s.scale(FeatureScaler::kFv2, sample.fv2);
    out.fv3 = s.scale(FeatureScaler::kFv3, sample.fv3);
    out.target_next_delta = s.scale(FeatureScaler::kNextDelta, sample.target_next_delta);
    out.target_remaining = s.scale(FeatureScaler::kRemaining, sample.target_remaining);
    return out;
}

void write_samples_csv(const std::vector<PrefixSample>& samples, std::ostream& out) {
    out << "case_id,prefix_len,prefix,fv_t1,fv_t2,fv_t3,"
           "target_activity,target_next_delta,target_remaining\n";
    for (const auto& s : samples) {
        std::string ids;
        for (size_t i = 0; i < s.prefix.size(); ++i) {
            if (i) ids += ' ';
            ids += std::to_string(s.prefix[i]);
        }
        bool quote = s.case_id.find_first_of(",\"\n\r") != std::string::npos;
        if (quote) {
            out << '"';
            for (char c : s.case_id) {
                if (c == '"') out << "\"\"";
                else out << c;
            }
            out << '"';
        } else {
            out << s.case_id;
        }
        out << ',' << s.prefix_len << ',' << ids << ',' << fmt_double(s.fv1) << ','
            << fmt_double(s.fv2) << ',' << fmt_double(s.fv3) << ',' << s.target_activity << ','
            << fmt_double(s.target_next_delta) << ',' << fmt_double(s.target_remaining) << '\n';
    }
}

} // namespace procformer
