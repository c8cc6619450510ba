#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "procformer/features.hpp"
#include "procformer/model.hpp"

namespace procformer {

struct TrainConfig {
    int64_t epochs = 100;
    double learning_rate = 1e-2;
    int64_t batch_size = 128;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double validation_fraction = 0.2;
    uint64_t seed = 0;
    bool shuffle_each_epoch = true;
    /// Exponent on inverse class frequency for next-activity class weights;
    /// 0 disables weighting, 1 is plain inverse frequency.
    double class_weight_power = 0.5;

    void validate() const; // EngineError on nonsense values
};

struct AdamState {
    std::vector<std::vector<double>> m, v; // aligned with ModelParams::entries
    int64_t t = 0;

    static AdamState init(const ModelParams& params);
};

/// One optimizer step consuming the gradients accumulated in params, which
/// are zeroed afterwards. Throws NonFiniteGradient naming the offending
/// parameter before touching any value.
void adam_step(ModelParams& params, AdamState& state, const TrainConfig& config);

struct TrainReport {
    std::vector<double> train_loss;
    std::vector<double> val_loss;
    std::vector<double> val_metric;
    std::vector<double> seconds;
    int64_t best_epoch = -1; // index into the vectors; -1 when no epoch ran
    std::string metric_name; // "accuracy" or "mae_days"
    int64_t val_start = 0;   // first validation sample in chronological order
};

struct TrainOutput {
    ModelParams params; // weights of the best-validation epoch
    TrainReport report;
    FeatureScaler scaler;              // fitted on the full training dataset
    std::vector<double> class_weights; // one per class id; empty for time tasks
};

/// Inverse-frequency weights count^(-power), normalized to mean 1 over the
/// classes that occur; absent classes get weight 1 (they are never targets).
std::vector<double> class_weights_from_targets(const std::vector<int64_t>& targets,
                                               int64_t num_classes, double power);

/// Mini-batch Adam over the chronologically ordered dataset. The trailing
/// validation_fraction of samples is held out (never shuffled into batches);
/// each epoch shuffles the rest, steps through batches, and scores the
/// held-out slice. Returns the parameters of the best validation epoch.
/// Deterministic for a fixed seed regardless of worker count.
TrainOutput train(const Dataset& train_data, const ModelConfig& model_config,
                  const TrainConfig& train_config);

/// epoch,train_loss,val_loss,val_metric rows, epochs numbered from 1.
/// Wall-clock seconds are kept out of the files by default so identical runs
/// produce identical bytes.
void write_train_report_csv(const TrainReport& report, std::ostream& out,
                            bool include_seconds = false);
void write_train_report_json(const TrainReport& report, std::ostream& out,
                             bool include_seconds = false);

} // namespace procformer
