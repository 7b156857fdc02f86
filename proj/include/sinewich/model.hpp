#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "sinewich/adapter.hpp"
#include "sinewich/tensor.hpp"

namespace sinewich {

/// How a task frequency turns the shared base into a task kernel.
enum class Modulation {
    Sine,    // sin(omega * M)
    Linear,  // omega * M
    None,    // M, no Clock Net
};

std::string to_string(Modulation m);
Modulation modulation_from_string(const std::string& s);

struct ModelConfig {
    std::size_t in_channels = 3;
    std::size_t image_size = 32;
    std::array<std::size_t, 4> stage_channels{8, 8, 16, 16};
    /// Layers per stage; all but the last are task-agnostic (LoRA), the last is task-specific.
    std::size_t blocks_per_stage = 2;
    std::size_t tasks = 3;
    std::size_t out_channels = 3;
    std::size_t token_width = 8;
    std::size_t ta_rank = 2;
    std::size_t ts_rank = 2;
    std::size_t ts_kernel = 3;
    std::size_t proj_channels = 2;
    std::size_t decoder_channels = 8;
    std::size_t decoder_rank = 4;
    std::size_t decoder_kernel = 3;
    Modulation modulation = Modulation::Sine;
    bool independent_base = false;
    bool independent_decoder = false;
    std::optional<FilterSpec> filter = FilterSpec{7, 1.0};
    std::uint64_t seed = 0;

    /// Throws ContractViolation on inconsistent sizes.
    void validate() const;
};

/// Named, ordered collection of tensors. Order is insertion order and is
/// stable for a given config, which keeps optimizer state, checkpoints and
/// flattened gradient views aligned.
class ParameterSet {
public:
    std::size_t add(std::string name, Tensor value, bool shared_encoder = false);

    std::size_t size() const noexcept { return entries_.size(); }
    const std::string& name(std::size_t i) const { return entries_.at(i).name; }
    Tensor& value(std::size_t i) { return entries_.at(i).value; }
    const Tensor& value(std::size_t i) const { return entries_.at(i).value; }
    bool shared_encoder(std::size_t i) const { return entries_.at(i).shared_encoder; }
    std::optional<std::size_t> find(const std::string& name) const;
    std::size_t index_of(const std::string& name) const;
    std::size_t scalar_count() const;

private:
    struct Entry {
        std::string name;
        Tensor value;
        bool shared_encoder;
    };
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Gradients aligned one-to-one with a model's trainable ParameterSet.
struct GradientBundle {
    std::vector<Tensor> grads;

    static GradientBundle zeros_like(const ParameterSet& params);
    GradientBundle& operator+=(const GradientBundle& other);
    void scale(double factor);
    /// Concatenation of the gradients of shared encoder parameters, in parameter order.
    std::vector<double> shared_encoder_flat(const ParameterSet& params) const;
    bool all_finite() const;
};

enum class Mode { Train, Eval };

class StaleCache : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

struct ForwardCache;

struct ForwardPass {
    std::vector<Tensor> predictions;
    std::shared_ptr<const ForwardCache> cache;
};

struct ParameterCounts {
    std::size_t total = 0;
    std::size_t encoder_ta = 0;
    std::size_t encoder_ts = 0;
    std::size_t tokens = 0;
    std::size_t decoder = 0;
    /// Per encoder TS layer: fused-base parameters (all bases) and clock parameters.
    std::vector<std::size_t> ts_layer_base;
    std::vector<std::size_t> ts_layer_clock;
};

/// Desk-scale multi-task network: a frozen 4-stage convolutional backbone with
/// LoRA adapters on task-agnostic layers, frequency-switched AWB adapters on the
/// last layer of each stage, and a decoder group whose main convolution is a
/// frequency-switched shared base.
class Model {
public:
    explicit Model(ModelConfig config);

    const ModelConfig& config() const noexcept { return config_; }

    /// Mutable access invalidates outstanding forward caches.
    ParameterSet& parameters() noexcept;
    const ParameterSet& parameters() const noexcept { return params_; }
    ParameterSet& buffers() noexcept { return buffers_; }
    const ParameterSet& buffers() const noexcept { return buffers_; }
    const std::vector<ConvKernel>& frozen_backbone() const noexcept { return backbone_; }

    /// Runs the encoder and the task's decoder on a batch of [C,H,W] inputs.
    /// Train mode normalizes with batch statistics; Eval uses running statistics.
    ForwardPass forward(std::span<const Tensor> batch, std::size_t task, Mode mode = Mode::Train) const;

    /// Exact reverse-mode gradients of sum_k <grad_predictions[k], predictions[k]>.
    GradientBundle backward(const ForwardPass& pass, std::span<const Tensor> grad_predictions) const;

    /// Folds the batch statistics of a Train-mode pass into the task's running statistics.
    void update_running_stats(const ForwardPass& pass, double momentum = 0.1);

    /// Stage outputs g_1..g_4 for one input.
    std::vector<Tensor> encode(const Tensor& input, std::size_t task) const;
    /// Stage outputs of the frozen backbone alone (every adapter removed).
    std::vector<Tensor> backbone_features(const Tensor& input) const;

    std::size_t ts_layer_count() const noexcept { return ts_layers_.size(); }
    /// Frequency of `task` at encoder TS layer `layer` (layer == ts_layer_count() selects the decoder).
    double task_frequency(std::size_t layer, std::size_t task) const;
    /// The filtered task kernel M~_t at an encoder TS layer or the decoder.
    ConvKernel task_kernel(std::size_t layer, std::size_t task) const;

    ParameterCounts parameter_counts() const;
    std::uint64_t generation() const noexcept { return generation_; }

private:
    struct TALayer {
        std::size_t frozen;
        std::size_t a, b;
    };
    /// A frequency-switched module: one or T bases, optional clock net.
    struct SwitchedModule {
        std::vector<std::size_t> a, b, w;  // per base
        std::size_t wq = 0, s = 0, c = 0;
        bool has_clock = false;
    };
    struct TSLayer {
        std::size_t frozen;
        SwitchedModule module;
    };
    struct DecoderIndices {
        std::vector<std::vector<std::size_t>> proj;  // [stage][task]
        SwitchedModule module;
        std::size_t bias;  // [T, Dh]
        std::vector<std::size_t> norm_scale, norm_shift, tail_weight, tail_bias;  // per task
        std::vector<std::size_t> running_mean, running_var;                     // buffers, per task
    };
    struct TaskKernel;

    friend struct ForwardCache;

    SwitchedModule make_module(const std::string& prefix, std::size_t m, std::size_t n, std::size_t r,
                               std::size_t k, bool per_task, bool shared_encoder, std::uint64_t stream);
    TaskKernel build_task_kernel(const SwitchedModule& mod, std::size_t task) const;
    void backprop_task_kernel(const SwitchedModule& mod, std::size_t task, const TaskKernel& tk,
                              const Tensor& grad_kernel, GradientBundle& out) const;
    void check_task(std::size_t task) const;

    ModelConfig config_;
    ParameterSet params_;
    ParameterSet buffers_;
    std::vector<ConvKernel> backbone_;
    std::vector<std::vector<TALayer>> ta_layers_;  // [stage][layer]
    std::vector<TSLayer> ts_layers_;               // [stage]
    DecoderIndices decoder_;
    std::size_t tokens_ = 0;
    bool has_tokens_ = false;
    std::uint64_t generation_ = 0;
};

/// Mean squared error and its gradient with respect to the prediction.
double mse(const Tensor& prediction, const Tensor& target);
Tensor mse_grad(const Tensor& prediction, const Tensor& target, double scale);

struct TensorCheck {
    std::string name;
    std::size_t coordinates = 0;
    double max_rel_error = 0.0;
};

struct GradCheckReport {
    std::vector<TensorCheck> tensors;
    double worst() const;
};

class GradCheckRefused : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Relative error of a numerical gradient against an analytic one, normalized by
/// the larger of the two gradients' max-abs (floored at `floor`).
double gradient_relative_error(std::span<const double> analytic, std::span<const double> numeric,
                               double floor = 1e-8);

/// Central-difference check of `analytic` against `loss` over every coordinate of
/// every tensor in `params`. Parameters are restored afterwards.
GradCheckReport check_gradients(ParameterSet& params, const std::function<double()>& loss,
                                const GradientBundle& analytic, double h = 1e-6,
                                std::size_t max_parameters = 50'000, double floor = 1e-8);

/// Loss used by the model gradient check: sum over tasks of the task's mean squared error.
double multitask_loss(const Model& model, std::span<const Tensor> inputs,
                      const std::vector<std::vector<Tensor>>& targets);
GradientBundle multitask_gradient(const Model& model, std::span<const Tensor> inputs,
                                  const std::vector<std::vector<Tensor>>& targets);

/// Finite-difference check of Model::backward on the multi-task loss (Train mode).
/// Refuses models with more than 50k trainable scalars. The denominator floor is
/// 1e-4 of the largest analytic gradient entry in the model, so tensors whose
/// gradient vanishes structurally (a bias feeding batch normalization) are
/// measured against the model's gradient scale rather than roundoff.
GradCheckReport finite_diff_check(Model& model, std::span<const Tensor> inputs,
                                  const std::vector<std::vector<Tensor>>& targets, double h = 1e-6);

}  // namespace sinewich
