#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "sinewich/analysis.hpp"
#include "sinewich/model.hpp"

namespace sinewich {

enum class Variant {
    Sinewich,
    LinearScale,
    NoModulation,
    IndependentBase,
    IndependentDecoder,
};

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

enum class ToyOperator { GaussianBlur, EdgeMagnitude, ChannelNegation, ChannelMix };

struct ToyTask {
    std::string name;
    ToyOperator op = ToyOperator::ChannelNegation;
    double blur_sigma = 1.0;
    Tensor mix;  // [C,C] for ChannelMix
    bool lower_is_better = true;
    double weight = 1.0;

    Tensor apply(const Tensor& input) const;
};

struct ToyDataset {
    std::vector<Tensor> inputs;
    std::vector<std::vector<Tensor>> targets;  // [task][sample]
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
};

struct AdamHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::size_t step = 0;

    static AdamState zeros_like(const ParameterSet& params);
};

struct TrainConfig {
    std::uint64_t seed = 0;
    std::size_t tasks = 3;
    Variant variant = Variant::Sinewich;
    std::size_t epochs = 30;
    std::size_t batch_size = 8;
    std::size_t train_samples = 64;
    std::size_t val_samples = 16;
    std::size_t channels = 3;
    std::size_t image_size = 32;
    std::size_t ta_rank = 2;
    std::size_t ts_rank = 2;
    std::size_t decoder_rank = 4;
    AdamHyper adam;
    std::optional<FilterSpec> filter = FilterSpec{7, 1.0};
    double blur_sigma = 1.0;
    std::vector<double> task_weights;  // empty: all 1

    void validate() const;
    /// Model layout for this config; `tasks` overrides the task count (single-task baselines).
    ModelConfig model_config(std::optional<std::size_t> tasks = std::nullopt) const;
    double weight(std::size_t task) const;
};

/// Strict JSON mapping: unknown keys and wrong types throw ContractViolation.
nlohmann::ordered_json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
/// Applies one `key=value` override, parsing the value as JSON when possible.
void apply_override(TrainConfig& cfg, const std::string& assignment);

struct ToySuite {
    ToyDataset data;
    std::vector<ToyTask> tasks;
};

/// Smooth random input fields and the first `cfg.tasks` operators, in the
/// order gaussian-blur, edge-magnitude, channel-negation, channel-mix.
ToySuite make_toy_suite(const TrainConfig& cfg);

struct MtlLoss {
    double total = 0.0;
    std::vector<double> per_task;
};

/// sum_t w_t * MSE_t, where MSE_t averages the per-sample mean squared error.
MtlLoss mtl_loss(const std::vector<std::vector<Tensor>>& predictions,
                 const std::vector<std::vector<Tensor>>& targets, const std::vector<double>& weights);

/// Mean signed relative improvement over the single-task baseline, in percent.
double delta_m(const std::vector<double>& r_mtl, const std::vector<double>& r_st,
               const std::vector<bool>& lower_is_better);
/// "+5.39", "-0.52", "0.00"
std::string format_delta_m(double percent);

void optimizer_step(ParameterSet& params, const GradientBundle& grads, AdamState& state, const AdamHyper& hyper);

struct EpochRecord {
    std::size_t epoch = 0;
    std::vector<double> train_loss;
    std::vector<double> val_metric;
};

struct KernelCorrelation {
    std::string layer;
    std::size_t task_i = 0;
    std::size_t task_j = 0;
    double omega_i = 0.0;
    double omega_j = 0.0;
    double correlation = 0.0;
};

struct RunReport {
    TrainConfig config;
    std::vector<ToyTask> tasks;
    ParameterCounts parameters;
    std::vector<EpochRecord> epochs;
    std::vector<GradSimMatrix> grad_sim;
    std::vector<double> final_val_metric;
    std::vector<double> baseline;
    std::optional<double> delta_m;
    std::vector<KernelCorrelation> kernel_correlations;
    bool diverged = false;
    std::string diagnostic;
    double wall_seconds = 0.0;  // kept out of the JSON report

    nlohmann::ordered_json to_json() const;
    std::string metrics_csv() const;
    std::string grad_sim_csv() const;
};

class TrainingDiverged : public std::runtime_error {
public:
    TrainingDiverged(const std::string& what, RunReport partial)
        : std::runtime_error(what), report(std::move(partial)) {}
    RunReport report;
};

struct TrainOptions {
    std::size_t threads = 1;
    /// Precomputed single-task baselines; computed with train_single_task when absent.
    std::optional<std::vector<double>> baseline;
    /// Skip baselines entirely; the report then carries no delta_m.
    bool skip_baseline = false;
};

/// Joint training of all tasks. Throws TrainingDiverged when the loss is
/// non-finite or exceeds 1e6.
RunReport train(const TrainConfig& cfg, const TrainOptions& options = {});
/// Same, leaving the trained model in `model_out` for checkpointing or inspection.
RunReport train(const TrainConfig& cfg, const TrainOptions& options, std::optional<Model>& model_out);

/// Validation metric of an adapter model with T = 1 trained on task `task`
/// alone with the same epochs, batches and optimizer.
double train_single_task(const TrainConfig& cfg, std::size_t task, std::size_t threads = 1);
std::vector<double> single_task_baselines(const TrainConfig& cfg, std::size_t threads = 1);

}  // namespace sinewich
