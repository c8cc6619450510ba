#include "procformer/eventlog.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <istream>
#include <iterator>
#include <optional>
#include <ostream>
#include <set>

#include "procformer/errors.hpp"

namespace procformer {

int64_t EventLog::total_events() const {
    int64_t n = 0;
    for (const auto& t : traces) n += t.length();
    return n;
}

int64_t EventLog::max_trace_len() const {
    int64_t n = 0;
    for (const auto& t : traces) n = std::max(n, t.length());
    return n;
}

int64_t EventLog::distinct_activities() const {
    std::set<std::string> seen;
    for (const auto& t : traces) {
        for (const auto& e : t.events) seen.insert(e.activity);
    }
    return static_cast<int64_t>(seen.size());
}

namespace {

struct CsvRecord {
    int64_t line; // 1-based line where the record starts
    std::vector<std::string> fields;
};

// RFC-4180-style reader: quoted fields may contain commas, escaped quotes
// ("") and newlines. Blank lines are skipped.
std::vector<CsvRecord> read_records(std::istream& in) {
    std::string buf(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>{});
    size_t pos = 0;
    if (buf.size() >= 3 && buf.compare(0, 3, "\xEF\xBB\xBF") == 0) pos = 3; // UTF-8 BOM

    std::vector<CsvRecord> records;
    std::vector<std::string> fields;
    std::string field;
    bool in_quotes = false;
    bool field_was_quoted = false;
    int64_t line = 1;
    int64_t record_line = 1;

    auto end_field = [&] {
        fields.push_back(std::move(field));
        field.clear();
        field_was_quoted = false;
    };
    auto end_record = [&] {
        end_field();
        bool blank = fields.size() == 1 && fields[0].empty();
        if (!blank) records.push_back({record_line, std::move(fields)});
        fields.clear();
    };

    while (pos < buf.size()) {
        char c = buf[pos];
        if (in_quotes) {
            if (c == '"') {
                if (pos + 1 < buf.size() && buf[pos + 1] == '"') {
                    field += '"';
                    ++pos;
                } else {
                    in_quotes = false;
                }
            } else {
                if (c == '\n') ++line;
                field += c;
            }
        } else if (c == '"' && field.empty() && !field_was_quoted) {
            in_quotes = true;
            field_was_quoted = true;
        } else if (c == ',') {
            end_field();
        } else if (c == '\n') {
            if (!field.empty() && field.back() == '\r') field.pop_back();
            end_record();
            ++line;
            record_line = line;
        } else {
            field += c;
        }
        ++pos;
    }
    if (!field.empty() || fields.size() > 0 || field_was_quoted) {
        if (!field.empty() && field.back() == '\r') field.pop_back();
        end_record();
    }
    return records;
}

std::optional<int64_t> read_int(const std::string& s, size_t& pos, int width) {
    if (pos + static_cast<size_t>(width) > s.size()) return std::nullopt;
    int64_t v = 0;
    for (int i = 0; i < width; ++i) {
        char c = s[pos + static_cast<size_t>(i)];
        if (c < '0' || c > '9') return std::nullopt;
        v = v * 10 + (c - '0');
    }
    pos += static_cast<size_t>(width);
    return v;
}

bool valid_date(int64_t y, int64_t mo, int64_t d) {
    if (mo < 1 || mo > 12 || d < 1) return false;
    static const int days[] = {31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
    int64_t dim = days[mo - 1];
    bool leap = (y % 4 == 0 && y % 100 != 0) || y % 400 == 0;
    if (mo == 2 && leap) dim = 29;
    return d <= dim;
}

std::optional<int64_t> parse_iso8601(const std::string& raw) {
    size_t b = raw.find_first_not_of(" \t");
    if (b == std::string::npos) return std::nullopt;
    size_t e = raw.find_last_not_of(" \t");
    std::string s = raw.substr(b, e - b + 1);

    size_t pos = 0;
    auto year = read_int(s, pos, 4);
    if (!year || pos >= s.size() || s[pos] != '-') return std::nullopt;
    ++pos;
    auto month = read_int(s, pos, 2);
    if (!month || pos >= s.size() || s[pos] != '-') return std::nullopt;
    ++pos;
    auto day = read_int(s, pos, 2);
    if (!day) return std::nullopt;
    if (pos >= s.size() || (s[pos] != ' ' && s[pos] != 'T')) return std::nullopt;
    ++pos;
    auto hour = read_int(s, pos, 2);
    if (!hour || pos >= s.size() || s[pos] != ':') return std::nullopt;
    ++pos;
    auto minute = read_int(s, pos, 2);
    if (!minute || pos >= s.size() || s[pos] != ':') return std::nullopt;
    ++pos;
    auto second = read_int(s, pos, 2);
    if (!second) return std::nullopt;

    if (pos < s.size() && s[pos] == '.') { // fractional seconds: truncated
        ++pos;
        size_t digits = 0;
        while (pos < s.size() && s[pos] >= '0' && s[pos] <= '9') {
            ++pos;
            ++digits;
        }
        if (digits == 0) return std::nullopt;
    }

    int64_t offset = 0;
    if (pos < s.size()) {
        char c = s[pos];
        if (c == 'Z' || c == 'z') {
            ++pos;
        } else if (c == '+' || c == '-') {
            int sign = c == '+' ? 1 : -1;
            ++pos;
            auto oh = read_int(s, pos, 2);
            if (!oh || *oh > 23) return std::nullopt;
            int64_t om = 0;
            if (pos < s.size()) {
                size_t save = pos;
                if (s[pos] == ':') ++pos;
                auto m2 = read_int(s, pos, 2);
                if (m2) {
                    om = *m2;
                } else {
                    pos = save;
                }
            }
            if (om > 59) return std::nullopt;
            offset = sign * (*oh * 3600 + om * 60);
        } else {
            return std::nullopt;
        }
    }
    if (pos != s.size()) return std::nullopt;

    if (!valid_date(*year, *month, *day)) return std::nullopt;
    if (*hour > 23 || *minute > 59 || *second > 60) return std::nullopt;

    std::tm tm{};
    tm.tm_year = static_cast<int>(*year - 1900);
    tm.tm_mon = static_cast<int>(*month - 1);
    tm.tm_mday = static_cast<int>(*day);
    tm.tm_hour = static_cast<int>(*hour);
    tm.tm_min = static_cast<int>(*minute);
    tm.tm_sec = static_cast<int>(*second);
    return static_cast<int64_t>(timegm(&tm)) - offset;
}

std::optional<int64_t> parse_with_pattern(const std::string& raw, const std::string& fmt) {
    std::tm tm{};
    const char* end = strptime(raw.c_str(), fmt.c_str(), &tm);
    if (end == nullptr) return std::nullopt;
    while (*end == ' ' || *end == '\t') ++end;
    if (*end != '\0') return std::nullopt;
    return static_cast<int64_t>(timegm(&tm));
}

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += '"';
    return out;
}

} // namespace

int64_t parse_timestamp(const std::string& text, const std::string& format) {
    std::optional<int64_t> t =
        format == "iso8601" ? parse_iso8601(text) : parse_with_pattern(text, format);
    if (!t) throw BadTimestamp("unparseable timestamp \"" + text + "\"");
    return *t;
}

std::string format_timestamp(int64_t seconds) {
    std::time_t tt = static_cast<std::time_t>(seconds);
    std::tm tm{};
    gmtime_r(&tt, &tm);
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%04d-%02d-%02d %02d:%02d:%02d", tm.tm_year + 1900,
                  tm.tm_mon + 1, tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec);
    return buf;
}

EventLog parse_csv(std::istream& in, const ColumnMapping& mapping,
                   const std::string& source_name) {
    auto records = read_records(in);
    if (records.empty()) throw EmptyLog(source_name + ": no header row");

    const auto& header = records[0].fields;
    auto find_col = [&](const std::string& name) -> int64_t {
        for (size_t i = 0; i < header.size(); ++i) {
            if (header[i] == name) return static_cast<int64_t>(i);
        }
        throw MissingColumn(source_name + ": column \"" + name + "\" not found in header");
    };
    int64_t case_col = find_col(mapping.case_column);
    int64_t act_col = find_col(mapping.activity_column);
    int64_t ts_col = find_col(mapping.timestamp_column);

    if (records.size() == 1) throw EmptyLog(source_name + ": no data rows");

    EventLog log;
    log.source_name = source_name;
    std::unordered_map<std::string, size_t> trace_index;

    for (size_t r = 1; r < records.size(); ++r) {
        const auto& rec = records[r];
        std::string at = source_name + ":" + std::to_string(rec.line);
        if (rec.fields.size() != header.size()) {
            throw BadRow(at + ": expected " + std::to_string(header.size()) + " fields, got " +
                         std::to_string(rec.fields.size()));
        }
        Event ev;
        ev.case_id = rec.fields[static_cast<size_t>(case_col)];
        ev.activity = rec.fields[static_cast<size_t>(act_col)];
        if (ev.case_id.empty()) throw BadRow(at + ": empty case id");
        if (ev.activity.empty()) throw BadRow(at + ": empty activity");
        try {
            ev.timestamp = parse_timestamp(rec.fields[static_cast<size_t>(ts_col)],
                                           mapping.timestamp_format);
        } catch (const BadTimestamp& ex) {
            throw BadTimestamp(at + ": " + ex.what());
        }
        for (size_t i = 0; i < header.size(); ++i) {
            int64_t ii = static_cast<int64_t>(i);
            if (ii == case_col || ii == act_col || ii == ts_col) continue;
            ev.extra_attributes.emplace_back(header[i], rec.fields[i]);
        }

        auto [it, inserted] = trace_index.try_emplace(ev.case_id, log.traces.size());
        if (inserted) log.traces.push_back(Trace{ev.case_id, {}});
        log.traces[it->second].events.push_back(std::move(ev));
    }

    for (auto& trace : log.traces) {
        std::stable_sort(trace.events.begin(), trace.events.end(),
                         [](const Event& a, const Event& b) { return a.timestamp < b.timestamp; });
    }
    return log;
}

EventLog parse_csv_file(const std::string& path, const ColumnMapping& mapping) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open \"" + path + "\"");
    return parse_csv(in, mapping, path);
}

void write_csv(const EventLog& log, std::ostream& out, const ColumnMapping& mapping) {
    out << csv_escape(mapping.case_column) << ',' << csv_escape(mapping.activity_column) << ','
        << csv_escape(mapping.timestamp_column) << '\n';
    for (const auto& trace : log.traces) {
        for (const auto& ev : trace.events) {
            out << csv_escape(ev.case_id) << ',' << csv_escape(ev.activity) << ','
                << format_timestamp(ev.timestamp) << '\n';
        }
    }
}

void write_csv_file(const EventLog& log, const std::string& path, const ColumnMapping& mapping) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot open \"" + path + "\" for writing");
    write_csv(log, out, mapping);
}

int64_t leading_count(int64_t n, double fraction) {
    double cut = fraction * static_cast<double>(n);
    int64_t count = static_cast<int64_t>(std::ceil(cut));
    // ceil() must not be poisoned by representation noise: 0.8 * 4580 lands a
    // hair above 3664 in binary and would otherwise round up to 3665.
    if (count > 0 && static_cast<double>(count - 1) >= cut - 1e-9) count -= 1;
    return count;
}

std::pair<EventLog, EventLog> chronological_split(const EventLog& log, double train_fraction) {
    if (log.traces.empty()) throw EmptyLog("chronological_split: empty log");
    if (!(train_fraction > 0.0) || !(train_fraction < 1.0)) {
        throw DegenerateSplit("train_fraction must be in (0, 1), got " +
                              std::to_string(train_fraction));
    }
    std::vector<size_t> order(log.traces.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        const Trace& ta = log.traces[a];
        const Trace& tb = log.traces[b];
        if (ta.start_time() != tb.start_time()) return ta.start_time() < tb.start_time();
        return ta.case_id < tb.case_id;
    });

    int64_t n = static_cast<int64_t>(order.size());
    int64_t train_n = leading_count(n, train_fraction);
    if (train_n <= 0 || train_n >= n) {
        throw DegenerateSplit("split of " + std::to_string(n) + " traces at fraction " +
                              std::to_string(train_fraction) + " leaves one side empty");
    }

    EventLog train, test;
    train.source_name = log.source_name;
    test.source_name = log.source_name;
    for (int64_t i = 0; i < n; ++i) {
        (i < train_n ? train : test).traces.push_back(log.traces[order[static_cast<size_t>(i)]]);
    }
    return {std::move(train), std::move(test)};
}

ActivityVocabulary ActivityVocabulary::build(const EventLog& train) {
    if (train.traces.empty()) throw EmptyLog("build_vocabulary: empty training log");
    std::set<std::string> distinct;
    for (const auto& t : train.traces) {
        for (const auto& e : t.events) distinct.insert(e.activity);
    }
    return from_labels(std::vector<std::string>(distinct.begin(), distinct.end()));
}

ActivityVocabulary ActivityVocabulary::from_labels(std::vector<std::string> labels) {
    ActivityVocabulary v;
    v.labels_ = std::move(labels);
    for (size_t i = 0; i < v.labels_.size(); ++i) {
        auto [it, inserted] = v.index_.emplace(v.labels_[i], static_cast<int64_t>(i) + 1);
        if (!inserted) throw EngineError("vocabulary label \"" + v.labels_[i] + "\" repeated");
    }
    return v;
}

int64_t ActivityVocabulary::encode(const std::string& label) const {
    auto it = index_.find(label);
    return it == index_.end() ? unk_id() : it->second;
}

const std::string& ActivityVocabulary::decode(int64_t id) const {
    static const std::string pad = "<pad>";
    static const std::string unk = "<unk>";
    if (id == kPadId) return pad;
    if (id == unk_id()) return unk;
    if (id < 1 || id > size()) {
        throw EngineError("decode: id " + std::to_string(id) + " outside [0, " +
                          std::to_string(num_ids()) + ")");
    }
    return labels_[static_cast<size_t>(id - 1)];
}

} // namespace procformer
