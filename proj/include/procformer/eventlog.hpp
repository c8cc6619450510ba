#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace procformer {

struct Event {
    std::string activity;
    std::string case_id;
    int64_t timestamp; // seconds since the Unix epoch, UTC
    std::vector<std::pair<std::string, std::string>> extra_attributes;
};

/// Non-empty, single-case, timestamp-sorted event sequence.
struct Trace {
    std::string case_id;
    std::vector<Event> events;

    int64_t length() const { return static_cast<int64_t>(events.size()); }
    int64_t start_time() const { return events.front().timestamp; }
    int64_t end_time() const { return events.back().timestamp; }
};

struct EventLog {
    std::vector<Trace> traces;
    std::string source_name;

    int64_t num_traces() const { return static_cast<int64_t>(traces.size()); }
    int64_t total_events() const;
    int64_t max_trace_len() const;
    int64_t distinct_activities() const;
};

struct ColumnMapping {
    std::string case_column = "case:concept:name";
    std::string activity_column = "concept:name";
    std::string timestamp_column = "time:timestamp";
    // "iso8601" accepts YYYY-MM-DD[ T]HH:MM:SS with optional fractional
    // seconds (truncated) and optional offset (Z, +HH:MM, +HHMM, +HH);
    // anything else is a strptime pattern interpreted as UTC.
    std::string timestamp_format = "iso8601";
};

/// Parse a CSV export into traces: rows grouped by case, events sorted by
/// timestamp with original file order as tie-break. Throws MissingColumn,
/// BadRow, BadTimestamp (all with line context) and EmptyLog.
EventLog parse_csv(std::istream& in, const ColumnMapping& mapping = {},
                   const std::string& source_name = "");
EventLog parse_csv_file(const std::string& path, const ColumnMapping& mapping = {});

/// Emit the three mapped columns in canonical form (timestamps as UTC
/// "YYYY-MM-DD HH:MM:SS"). Extra attribute columns are not round-tripped.
void write_csv(const EventLog& log, std::ostream& out, const ColumnMapping& mapping = {});
void write_csv_file(const EventLog& log, const std::string& path,
                    const ColumnMapping& mapping = {});

/// Order traces by start time (case id as tie-break) and cut after
/// ceil(train_fraction * |L|) traces. Throws DegenerateSplit when either
/// side would be empty and EmptyLog on an empty input.
/// ceil(fraction * n) with a guard against binary representation noise; the
/// shared rounding rule for the trace split and the validation carve-out.
int64_t leading_count(int64_t n, double fraction);

std::pair<EventLog, EventLog> chronological_split(const EventLog& log, double train_fraction);

/// Bijection between training activity labels and ids 1..V, assigned in
/// lexicographic label order. Id 0 is PAD; id V+1 is UNK for labels never
/// seen in training.
class ActivityVocabulary {
public:
    static constexpr int64_t kPadId = 0;

    static ActivityVocabulary build(const EventLog& train);
    /// Rebuild from stored labels (model file); ids follow the given order.
    static ActivityVocabulary from_labels(std::vector<std::string> labels);

    int64_t encode(const std::string& label) const;
    const std::string& decode(int64_t id) const;

    int64_t size() const { return static_cast<int64_t>(labels_.size()); } // V
    int64_t unk_id() const { return size() + 1; }
    int64_t num_ids() const { return size() + 2; } // PAD + labels + UNK
    const std::vector<std::string>& labels() const { return labels_; }

private:
    std::vector<std::string> labels_;
    std::unordered_map<std::string, int64_t> index_;
};

/// Timestamp helpers shared by the parser and writer.
int64_t parse_timestamp(const std::string& text, const std::string& format);
std::string format_timestamp(int64_t seconds);

} // namespace procformer
