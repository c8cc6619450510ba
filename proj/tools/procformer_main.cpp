#include <cxxabi.h>

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "procformer/errors.hpp"
#include "procformer/eventlog.hpp"
#include "procformer/evaluation.hpp"
#include "procformer/features.hpp"
#include "procformer/model.hpp"
#include "procformer/parallel.hpp"
#include "procformer/tensor.hpp"
#include "procformer/training.hpp"

namespace fs = std::filesystem;
using namespace procformer;

namespace {

/// Chronological train/test cut shared by prepare, train, and evaluate.
constexpr double kTrainFraction = 0.8;

struct Options {
    std::string log_path;
    std::string model_path;
    std::string out_dir = ".";
    std::string task = "next_activity";
    int64_t epochs = 100;
    double lr = 1e-2;
    int64_t batch_size = 128;
    int64_t heads = 4;
    int64_t embed_dim = 36;
    int64_t max_len = 0; // 0: longest trace of the input log
    uint64_t seed = 42;
    int threads = 0; // 0: all available cores
    ColumnMapping mapping;
    std::vector<std::string> events; // predict: label/timestamp pairs
};

int available_cores() {
    const unsigned n = std::thread::hardware_concurrency();
    return n == 0 ? 1 : static_cast<int>(n);
}

/// "EmptyLog" from a procformer::EmptyLog, so error categories are visible
/// in the output without every throw site repeating its own class name.
std::string error_name(const std::exception& e) {
    int status = 1;
    char* dem = abi::__cxa_demangle(typeid(e).name(), nullptr, nullptr, &status);
    std::string name = (status == 0 && dem != nullptr) ? dem : typeid(e).name();
    std::free(dem);
    const size_t pos = name.rfind("::");
    if (pos != std::string::npos) name = name.substr(pos + 2);
    return name;
}

std::string thousands(int64_t v) {
    std::string digits = std::to_string(v);
    std::string out;
    const size_t start = digits[0] == '-' ? 1 : 0;
    for (size_t i = start; i < digits.size(); ++i) {
        if (i > start && (digits.size() - i) % 3 == 0) out += ',';
        out += digits[i];
    }
    return digits.substr(0, start) + out;
}

std::string fixed(double x, int places) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", places, x);
    return buf;
}

void write_file(const std::string& path, const std::function<void(std::ostream&)>& body) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    body(out);
    if (!out) throw std::runtime_error("failed while writing " + path);
}

// ---------------------------------------------------------------------------
// prepare

int cmd_prepare(const Options& o) {
    const EventLog log = parse_csv_file(o.log_path, o.mapping);
    const auto [train_log, test_log] = chronological_split(log, kTrainFraction);
    const ActivityVocabulary vocab = ActivityVocabulary::build(train_log);
    const int64_t max_len = o.max_len > 0 ? o.max_len : log.max_trace_len();
    const Dataset train_ds = build_dataset(train_log, vocab, max_len);
    const Dataset test_ds = build_dataset(test_log, vocab, max_len);
    const FeatureScaler scaler = fit_scaler(train_ds.samples);

    fs::create_directories(o.out_dir);
    write_file(o.out_dir + "/train_samples.csv",
               [&](std::ostream& s) { write_samples_csv(train_ds.samples, s); });
    write_file(o.out_dir + "/test_samples.csv",
               [&](std::ostream& s) { write_samples_csv(test_ds.samples, s); });
    write_file(o.out_dir + "/vocabulary.txt", [&](std::ostream& s) {
        for (const auto& label : vocab.labels()) s << label << "\n";
    });
    write_file(o.out_dir + "/scaler.json", [&](std::ostream& s) {
        nlohmann::json j{{"mean", scaler.mean}, {"stdev", scaler.stdev}};
        s << j.dump(2) << "\n";
    });

    double max_days = 0.0, sum_days = 0.0;
    for (const Trace& t : log.traces) {
        const double d = static_cast<double>(t.end_time() - t.start_time()) / 86400.0;
        max_days = std::max(max_days, d);
        sum_days += d;
    }
    const double n = static_cast<double>(log.num_traces());
    std::cout << "cases " << thousands(log.num_traces()) << "\n"
              << "events " << thousands(log.total_events()) << "\n"
              << "activities " << thousands(log.distinct_activities()) << "\n"
              << "max case length " << thousands(log.max_trace_len()) << "\n"
              << "avg case length " << fixed(static_cast<double>(log.total_events()) / n, 2) << "\n"
              << "max duration days " << fixed(max_days, 2) << "\n"
              << "avg duration days " << fixed(sum_days / n, 2) << "\n"
              << "train cases " << thousands(train_log.num_traces()) << "\n"
              << "test cases " << thousands(test_log.num_traces()) << "\n"
              << "train samples " << thousands(static_cast<int64_t>(train_ds.samples.size())) << "\n"
              << "test samples " << thousands(static_cast<int64_t>(test_ds.samples.size())) << "\n"
              << "artifacts written to " << o.out_dir << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train

int cmd_train(const Options& o) {
    const EventLog log = parse_csv_file(o.log_path, o.mapping);
    const auto [train_log, test_log] = chronological_split(log, kTrainFraction);
    const ActivityVocabulary vocab = ActivityVocabulary::build(train_log);

    ModelConfig mc;
    mc.vocab_size = vocab.size();
    mc.max_len = o.max_len > 0 ? o.max_len : log.max_trace_len();
    mc.embed_dim = o.embed_dim;
    mc.num_heads = o.heads;
    mc.task = task_from_name(o.task);
    mc.seed = o.seed;
    mc.validate();

    TrainConfig tc;
    tc.epochs = o.epochs;
    tc.learning_rate = o.lr;
    tc.batch_size = o.batch_size;
    tc.seed = o.seed;
    tc.validate();

    const Dataset ds = build_dataset(train_log, vocab, mc.max_len);
    std::cout << "training on " << thousands(static_cast<int64_t>(ds.samples.size()))
              << " prefixes from " << thousands(train_log.num_traces()) << " cases ("
              << thousands(vocab.size()) << " activities, task " << o.task << ")\n";

    const TrainOutput result = train(ds, mc, tc);

    ModelBundle bundle;
    bundle.params = result.params;
    bundle.vocab_labels = vocab.labels();
    bundle.scaler = result.scaler;

    fs::create_directories(o.out_dir);
    const std::string model_path =
        o.model_path.empty() ? o.out_dir + "/model.pfm" : o.model_path;
    if (fs::path(model_path).has_parent_path())
        fs::create_directories(fs::path(model_path).parent_path());
    save_model(bundle, model_path);
    write_file(o.out_dir + "/train_report.csv",
               [&](std::ostream& s) { write_train_report_csv(result.report, s); });
    write_file(o.out_dir + "/train_report.json",
               [&](std::ostream& s) { write_train_report_json(result.report, s); });

    if (result.report.best_epoch >= 0) {
        std::cout << "best epoch " << (result.report.best_epoch + 1) << " of " << o.epochs
                  << ": validation " << result.report.metric_name << " "
                  << fixed(result.report.val_metric[static_cast<size_t>(result.report.best_epoch)], 4)
                  << "\n";
    } else {
        std::cout << "no epochs run; saved the seeded initialization\n";
    }
    std::cout << "model written to " << model_path << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// evaluate

int cmd_evaluate(const Options& o) {
    const ModelBundle bundle = load_model(o.model_path);
    const EventLog log = parse_csv_file(o.log_path, o.mapping);
    const auto [train_log, test_log] = chronological_split(log, kTrainFraction);

    const ActivityVocabulary rebuilt = ActivityVocabulary::build(train_log);
    if (rebuilt.labels() != bundle.vocab_labels) {
        std::string detail = "the log has " + std::to_string(rebuilt.size()) +
                             " training labels, the model " +
                             std::to_string(bundle.vocab_labels.size());
        const size_t common = std::min(rebuilt.labels().size(), bundle.vocab_labels.size());
        for (size_t i = 0; i < common; ++i) {
            if (rebuilt.labels()[i] != bundle.vocab_labels[i]) {
                detail = "log label \"" + rebuilt.labels()[i] + "\" vs model label \"" +
                         bundle.vocab_labels[i] + "\" at id " + std::to_string(i + 1);
                break;
            }
        }
        throw VersionMismatch("the log's training vocabulary does not match the model's (" +
                              detail + ")");
    }

    const ActivityVocabulary vocab = bundle.vocabulary();
    const Dataset test_ds = build_dataset(test_log, vocab, bundle.params.config.max_len);
    const EvalReport report =
        evaluate_per_prefix(bundle, test_ds, bundle.params.config.task);

    fs::create_directories(o.out_dir);
    write_file(o.out_dir + "/eval_report.json",
               [&](std::ostream& s) { write_eval_json(report, s); });
    write_file(o.out_dir + "/eval_report.csv",
               [&](std::ostream& s) { write_eval_csv(report, s); });

    std::cout << "evaluated " << thousands(report.total_samples) << " test prefixes ("
              << report.primary.per_k.size() << " prefix lengths)\n"
              << "averaged " << report.primary_name << " " << fixed(report.primary.averaged, 4)
              << "\n"
              << "overall " << report.primary_name << " " << fixed(report.primary.overall, 4)
              << "\n";
    if (report.f_score)
        std::cout << "averaged f_score " << fixed(report.f_score->averaged, 4) << "\n"
                  << "overall f_score " << fixed(report.f_score->overall, 4) << "\n";
    std::cout << "reports written to " << o.out_dir << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// predict

int cmd_predict(const Options& o) {
    const ModelBundle bundle = load_model(o.model_path);
    const ModelConfig& cfg = bundle.params.config;
    const ActivityVocabulary vocab = bundle.vocabulary();

    if (o.events.empty() || o.events.size() % 2 != 0)
        throw BadRow("predict expects label/timestamp pairs, got " +
                     std::to_string(o.events.size()) + " arguments");

    Trace prefix;
    prefix.case_id = "prefix";
    for (size_t i = 0; i < o.events.size(); i += 2) {
        Event e;
        e.activity = o.events[i];
        e.case_id = prefix.case_id;
        e.timestamp = parse_timestamp(o.events[i + 1], o.mapping.timestamp_format);
        if (!prefix.events.empty() && e.timestamp < prefix.events.back().timestamp)
            throw BadTimestamp("prefix timestamps must be non-decreasing (event " +
                               std::to_string(i / 2 + 1) + " precedes its predecessor)");
        prefix.events.push_back(std::move(e));
    }
    if (prefix.length() > cfg.max_len)
        throw PrefixLongerThanMaxLen("prefix has " + std::to_string(prefix.length()) +
                                     " events; the model accepts at most " +
                                     std::to_string(cfg.max_len));

    PrefixSample sample{};
    sample.prefix_len = prefix.length();
    sample.prefix.assign(static_cast<size_t>(cfg.max_len), ActivityVocabulary::kPadId);
    for (int64_t i = 0; i < prefix.length(); ++i)
        sample.prefix[static_cast<size_t>(i)] =
            vocab.encode(prefix.events[static_cast<size_t>(i)].activity);
    const std::array<double, 3> fv = temporal_features(prefix);
    sample.fv1 = fv[0];
    sample.fv2 = fv[1];
    sample.fv3 = fv[2];
    sample.case_id = prefix.case_id;

    const PrefixSample scaled = apply_scaler(bundle.scaler, sample);
    Tape tape;
    const ModelParams frozen = bundle.params.inference_view();
    const Tensor out = forward_batch(tape, frozen, make_input({&scaled}, cfg), false);

    if (cfg.task == Task::next_activity) {
        // softmax over everything the model can actually predict (PAD excluded)
        const double* logits = out.data();
        std::vector<int64_t> ids;
        for (int64_t id = 1; id < cfg.num_ids(); ++id) ids.push_back(id);
        double hi = logits[ids.front()];
        for (int64_t id : ids) hi = std::max(hi, logits[id]);
        double z = 0.0;
        std::vector<double> p(static_cast<size_t>(cfg.num_ids()), 0.0);
        for (int64_t id : ids) z += std::exp(logits[id] - hi);
        for (int64_t id : ids) p[static_cast<size_t>(id)] = std::exp(logits[id] - hi) / z;
        std::stable_sort(ids.begin(), ids.end(), [&](int64_t a, int64_t b) {
            return p[static_cast<size_t>(a)] > p[static_cast<size_t>(b)];
        });
        std::cout << "predicted next activity: " << vocab.decode(ids.front()) << "\n"
                  << "top activities:\n";
        for (size_t r = 0; r < ids.size() && r < 5; ++r)
            std::cout << "  " << (r + 1) << ". " << vocab.decode(ids[r]) << "  "
                      << fixed(p[static_cast<size_t>(ids[r])], 6) << "\n";
        return 0;
    }

    const int dim = cfg.task == Task::next_time ? FeatureScaler::kNextDelta
                                                : FeatureScaler::kRemaining;
    const double raw = bundle.scaler.unscale(dim, out.data()[0]);
    const double days = std::max(0.0, raw);
    const char* what_of = cfg.task == Task::next_time ? "next-event delay" : "remaining time";
    std::cout << "predicted " << what_of << " days: " << fixed(days, 6);
    if (raw < 0.0) std::cout << " (clamped from " << fixed(raw, 6) << ")";
    std::cout << "\n";
    if (cfg.task == Task::next_time) {
        const int64_t eta =
            prefix.events.back().timestamp + llround(days * 86400.0);
        std::cout << "next event expected at: " << format_timestamp(eta) << "\n";
    }
    return 0;
}

// ---------------------------------------------------------------------------
// wiring

void add_column_flags(CLI::App* cmd, Options& o) {
    cmd->add_option("--case-col", o.mapping.case_column, "CSV column holding the case id")
        ->capture_default_str();
    cmd->add_option("--activity-col", o.mapping.activity_column,
                    "CSV column holding the activity label")
        ->capture_default_str();
    cmd->add_option("--time-col", o.mapping.timestamp_column, "CSV column holding the timestamp")
        ->capture_default_str();
    cmd->add_option("--time-format", o.mapping.timestamp_format,
                    "iso8601 or a strptime pattern, interpreted as UTC")
        ->capture_default_str();
}

void add_shared_flags(CLI::App* cmd, Options& o, std::string& config_path) {
    cmd->add_option("--threads", o.threads, "Worker threads (0: all available cores)")
        ->envname("PROCFORMER_THREADS")
        ->capture_default_str();
    cmd->add_option("--config", config_path, "Read key=value options; explicit flags win");
}

/// Expand `--config FILE` into trailing `--key value` pairs for every key the
/// command line does not set itself, so explicit flags always win. Unknown
/// keys then fail parsing exactly like unknown flags.
std::vector<std::string> merge_config_file(std::vector<std::string> args) {
    std::string path;
    for (size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
        else if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
    }
    if (path.empty()) return args;

    std::ifstream in(path);
    if (!in) throw CLI::FileError("cannot read config file " + path);
    auto given = [&](const std::string& flag) {
        for (const std::string& a : args)
            if (a == flag || a.rfind(flag + "=", 0) == 0) return true;
        return false;
    };
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const size_t begin = line.find_first_not_of(" \t");
        if (begin == std::string::npos || line[begin] == '#') continue;
        const size_t eq = line.find('=', begin);
        if (eq == std::string::npos)
            throw CLI::FileError(path + ":" + std::to_string(line_no) +
                                 ": expected key=value, got \"" + line + "\"");
        std::string key = line.substr(begin, eq - begin);
        key.erase(key.find_last_not_of(" \t") + 1);
        key.erase(0, key.find_first_not_of("-"));
        std::string value = line.substr(eq + 1);
        const size_t vb = value.find_first_not_of(" \t");
        value = vb == std::string::npos ? "" : value.substr(vb);
        value.erase(value.find_last_not_of(" \t\r") + 1);
        if (key.empty())
            throw CLI::FileError(path + ":" + std::to_string(line_no) + ": empty key");
        if (key == "config") continue;
        if (!given("--" + key)) {
            args.push_back("--" + key);
            args.push_back(value);
        }
    }
    return args;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Activity and time prediction over business process event logs"};
    app.require_subcommand(1);
    Options o;
    std::string config_path; // consumed before parsing; see merge_config_file

    CLI::App* prepare = app.add_subcommand(
        "prepare", "Split a log chronologically and dump prefix datasets");
    prepare->add_option("--log", o.log_path, "Event log CSV")->required();
    prepare->add_option("--out", o.out_dir, "Output directory")->capture_default_str();
    prepare->add_option("--max-len", o.max_len, "Pad length (0: longest trace)")
        ->capture_default_str();
    add_column_flags(prepare, o);
    add_shared_flags(prepare, o, config_path);

    CLI::App* train_cmd = app.add_subcommand("train", "Train a model on a log's training split");
    train_cmd->add_option("--log", o.log_path, "Event log CSV")->required();
    train_cmd->add_option("--task", o.task, "next_activity, next_time, or remaining_time")
        ->check(CLI::IsMember({"next_activity", "next_time", "remaining_time"}))
        ->capture_default_str();
    train_cmd->add_option("--epochs", o.epochs, "Training epochs")->capture_default_str();
    train_cmd->add_option("--lr", o.lr, "Adam learning rate")->capture_default_str();
    train_cmd->add_option("--batch-size", o.batch_size, "Batch size")->capture_default_str();
    train_cmd->add_option("--heads", o.heads, "Attention heads")->capture_default_str();
    train_cmd->add_option("--embed-dim", o.embed_dim, "Embedding width")->capture_default_str();
    train_cmd->add_option("--max-len", o.max_len, "Pad length (0: longest trace)")
        ->capture_default_str();
    train_cmd->add_option("--seed", o.seed, "Seed for every random choice")->capture_default_str();
    train_cmd->add_option("--out", o.out_dir, "Report directory")->capture_default_str();
    train_cmd->add_option("--model", o.model_path, "Model file (default: <out>/model.pfm)");
    add_column_flags(train_cmd, o);
    add_shared_flags(train_cmd, o, config_path);

    CLI::App* eval_cmd =
        app.add_subcommand("evaluate", "Per-prefix-length metrics on a log's test split");
    eval_cmd->add_option("--model", o.model_path, "Trained model file")->required();
    eval_cmd->add_option("--log", o.log_path, "Event log CSV")->required();
    eval_cmd->add_option("--out", o.out_dir, "Report directory")->capture_default_str();
    add_column_flags(eval_cmd, o);
    add_shared_flags(eval_cmd, o, config_path);

    CLI::App* predict_cmd =
        app.add_subcommand("predict", "Predict from an inline prefix of label/timestamp pairs");
    predict_cmd->add_option("--model", o.model_path, "Trained model file")->required();
    predict_cmd
        ->add_option("events", o.events,
                     "label timestamp [label timestamp ...] of the running case")
        ->expected(-1);
    predict_cmd
        ->add_option("--time-format", o.mapping.timestamp_format,
                     "iso8601 or a strptime pattern, interpreted as UTC")
        ->capture_default_str();
    add_shared_flags(predict_cmd, o, config_path);

    try {
        std::vector<std::string> args(argv + 1, argv + argc);
        args = merge_config_file(std::move(args));
        std::reverse(args.begin(), args.end()); // CLI11 consumes from the back
        app.parse(args);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    set_num_threads(o.threads > 0 ? o.threads : available_cores());

    try {
        if (app.got_subcommand(prepare)) return cmd_prepare(o);
        if (app.got_subcommand(train_cmd)) return cmd_train(o);
        if (app.got_subcommand(eval_cmd)) return cmd_evaluate(o);
        return cmd_predict(o);
    } catch (const InputError& e) {
        std::cerr << "error: " << error_name(e) << ": " << e.what() << "\n";
        return 2;
    } catch (const TrainingError& e) {
        std::cerr << "error: " << error_name(e) << ": " << e.what() << "\n";
        return 3;
    } catch (const ModelFileError& e) {
        std::cerr << "error: " << error_name(e) << ": " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << error_name(e) << ": " << e.what() << "\n";
        return 1;
    }
}
