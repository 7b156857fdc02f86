#include "sinewich/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "sinewich/numerics.hpp"
#include "sinewich/random.hpp"

namespace sinewich {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr std::uint64_t kDataStream = 1ULL << 40;
constexpr std::uint64_t kMixStream = kDataStream - 1;
constexpr std::uint64_t kShuffleStream = (1ULL << 40) + (1ULL << 30);
constexpr double kDivergenceLimit = 1e6;
constexpr int kInputSmoothing = 7;
constexpr double kInputSigma = 1.5;

const char* kBaselineProtocol =
    "single-task baselines train the same adapter architecture with one task (T=1) on the same frozen "
    "backbone, data, epochs, batch size and optimizer; they do not fully fine-tune a separate model";

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

Tensor depthwise(const Tensor& x, const Tensor& kernel2d) {
    const std::size_t c = x.dim(0), k = kernel2d.dim(0);
    ConvKernel kern(c, c, k, k);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t u = 0; u < k; ++u)
            for (std::size_t v = 0; v < k; ++v) kern(ch, ch, u, v) = kernel2d(u, v);
    return conv2d(x, kern);
}

int blur_size(double sigma) { return 2 * static_cast<int>(std::ceil(2.0 * sigma)) + 1; }

std::string operator_name(ToyOperator op) {
    switch (op) {
        case ToyOperator::GaussianBlur: return "gaussian-blur";
        case ToyOperator::EdgeMagnitude: return "edge-magnitude";
        case ToyOperator::ChannelNegation: return "channel-negation";
        case ToyOperator::ChannelMix: return "channel-mix";
    }
    return "unknown";
}

// Strict JSON readers.

std::size_t read_count(const json& v, const std::string& key) {
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
        throw ContractViolation("config key '" + key + "' must be a non-negative integer");
    }
    return v.get<std::size_t>();
}

double read_number(const json& v, const std::string& key) {
    if (!v.is_number()) throw ContractViolation("config key '" + key + "' must be a number");
    return v.get<double>();
}

std::optional<FilterSpec> read_filter(const json& v) {
    if (v.is_null() || (v.is_boolean() && !v.get<bool>())) return std::nullopt;
    if (v.is_boolean()) return FilterSpec{};
    if (!v.is_object()) throw ContractViolation("config key 'filter' must be null, a boolean or {size, sigma}");
    FilterSpec f;
    for (const auto& [k, val] : v.items()) {
        if (k == "size") {
            f.size = static_cast<int>(read_count(val, "filter.size"));
        } else if (k == "sigma") {
            f.sigma = read_number(val, "filter.sigma");
        } else {
            throw ContractViolation("unknown config key 'filter." + k + "'");
        }
    }
    return f;
}

struct LoopResult {
    std::vector<EpochRecord> epochs;
    std::vector<GradSimMatrix> grad_sim;
    bool diverged = false;
    std::string diagnostic;
};

struct TaskStep {
    double loss = 0.0;
    ForwardPass pass;
    GradientBundle grad;
};

std::vector<Tensor> gather(const std::vector<Tensor>& all, std::span<const std::size_t> idx) {
    std::vector<Tensor> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(all[i]);
    return out;
}

double batch_mse(const std::vector<Tensor>& pred, const std::vector<Tensor>& target) {
    double s = 0.0;
    for (std::size_t k = 0; k < pred.size(); ++k) s += mse(pred[k], target[k]);
    return s / static_cast<double>(pred.size());
}

std::vector<double> evaluate(const Model& model, const ToySuite& suite, const std::vector<std::size_t>& heads,
                             const std::vector<std::size_t>& indices, std::size_t batch_size) {
    std::vector<double> out(heads.size(), 0.0);
    for (std::size_t t = 0; t < heads.size(); ++t) {
        double total = 0.0;
        for (std::size_t start = 0; start < indices.size(); start += batch_size) {
            const std::span<const std::size_t> idx(indices.data() + start,
                                                   std::min(batch_size, indices.size() - start));
            const ForwardPass pass = model.forward(gather(suite.data.inputs, idx), t, Mode::Eval);
            for (std::size_t k = 0; k < idx.size(); ++k)
                total += mse(pass.predictions[k], suite.data.targets[heads[t]][idx[k]]);
        }
        out[t] = total / static_cast<double>(indices.size());
    }
    return out;
}

std::string divergence_message(std::size_t epoch, std::size_t batch, const std::vector<double>& losses) {
    std::ostringstream os;
    os << "training diverged at epoch " << epoch << ", batch " << batch << ": task losses [";
    for (std::size_t t = 0; t < losses.size(); ++t) os << (t ? ", " : "") << num(losses[t]);
    os << "] (limit " << num(kDivergenceLimit) << ")";
    return os.str();
}

/// Runs `cfg.epochs` epochs of joint training on the model tasks mapped to suite tasks `heads`.
LoopResult run_loop(Model& model, const TrainConfig& cfg, const ToySuite& suite,
                    const std::vector<std::size_t>& heads, std::size_t threads, bool record_sim) {
    const std::size_t T = heads.size();
    const std::vector<std::size_t>& train_idx = suite.data.train;
    const std::size_t bs = cfg.batch_size;
    std::vector<double> weights(T);
    for (std::size_t t = 0; t < T; ++t) weights[t] = T == 1 ? 1.0 : cfg.weight(heads[t]);

    LoopResult result;
    AdamState adam = AdamState::zeros_like(model.parameters());

    auto batch_targets = [&](std::size_t t, std::span<const std::size_t> idx) {
        return gather(suite.data.targets[heads[t]], idx);
    };

    // Epoch 0: metrics at initialization.
    {
        EpochRecord rec;
        rec.train_loss.assign(T, 0.0);
        std::size_t batches = 0;
        for (std::size_t start = 0; start < train_idx.size(); start += bs, ++batches) {
            const std::span<const std::size_t> idx(train_idx.data() + start, std::min(bs, train_idx.size() - start));
            const std::vector<Tensor> inputs = gather(suite.data.inputs, idx);
            for (std::size_t t = 0; t < T; ++t)
                rec.train_loss[t] += batch_mse(model.forward(inputs, t, Mode::Train).predictions, batch_targets(t, idx));
        }
        for (double& l : rec.train_loss) l /= static_cast<double>(batches);
        rec.val_metric = evaluate(model, suite, heads, suite.data.val, bs);
        result.epochs.push_back(std::move(rec));
    }

    std::vector<std::size_t> order = train_idx;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        RandomStream shuffle(cfg.seed, kShuffleStream + epoch);
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss.assign(T, 0.0);
        std::vector<SimSample> sims;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += bs, ++batches) {
            const std::span<const std::size_t> idx(order.data() + start, std::min(bs, order.size() - start));
            const std::vector<Tensor> inputs = gather(suite.data.inputs, idx);
            std::vector<TaskStep> steps(T);
            const Model& view = model;
            parallel_for(T, threads, [&](std::size_t t) {
                const std::vector<Tensor> targets = batch_targets(t, idx);
                TaskStep& st = steps[t];
                st.pass = view.forward(inputs, t, Mode::Train);
                st.loss = batch_mse(st.pass.predictions, targets);
                std::vector<Tensor> grads;
                grads.reserve(idx.size());
                for (std::size_t k = 0; k < idx.size(); ++k)
                    grads.push_back(mse_grad(st.pass.predictions[k], targets[k], 1.0 / static_cast<double>(idx.size())));
                st.grad = view.backward(st.pass, grads);
            });

            std::vector<double> losses(T);
            double total = 0.0;
            for (std::size_t t = 0; t < T; ++t) {
                losses[t] = steps[t].loss;
                total += weights[t] * steps[t].loss;
            }
            if (!std::isfinite(total) || total > kDivergenceLimit) {
                result.diverged = true;
                result.diagnostic = divergence_message(epoch, batches, losses);
                return result;
            }
            for (std::size_t t = 0; t < T; ++t) rec.train_loss[t] += losses[t];

            if (record_sim) {
                std::vector<std::vector<double>> flats;
                for (const TaskStep& st : steps) flats.push_back(st.grad.shared_encoder_flat(view.parameters()));
                sims.push_back(pairwise_grad_cosine(flats));
            }

            GradientBundle merged = GradientBundle::zeros_like(view.parameters());
            for (std::size_t t = 0; t < T; ++t)
                for (std::size_t i = 0; i < merged.grads.size(); ++i) merged.grads[i].axpy(weights[t], steps[t].grad.grads[i]);
            for (const TaskStep& st : steps) model.update_running_stats(st.pass);
            optimizer_step(model.parameters(), merged, adam, cfg.adam);
        }
        for (double& l : rec.train_loss) l /= static_cast<double>(batches);
        rec.val_metric = evaluate(model, suite, heads, suite.data.val, bs);
        result.epochs.push_back(std::move(rec));
        if (record_sim) result.grad_sim.push_back(epoch_grad_sim(sims, T, epoch));
    }
    return result;
}

ModelConfig baseline_model_config(const TrainConfig& cfg) {
    ModelConfig mc = cfg.model_config(1);
    mc.modulation = Modulation::Sine;
    mc.independent_base = false;
    mc.independent_decoder = false;
    return mc;
}

std::vector<KernelCorrelation> kernel_correlations(const Model& model) {
    std::vector<KernelCorrelation> out;
    const std::size_t T = model.config().tasks;
    for (std::size_t layer = 0; layer <= model.ts_layer_count(); ++layer) {
        const std::string name =
            layer == model.ts_layer_count() ? "decoder" : "encoder.stage" + std::to_string(layer + 1);
        for (std::size_t i = 0; i < T; ++i)
            for (std::size_t j = i + 1; j < T; ++j) {
                KernelCorrelation kc{name, i, j, model.task_frequency(layer, i), model.task_frequency(layer, j), 0.0};
                try {
                    kc.correlation = vec_correlation(model.task_kernel(layer, i).weights(),
                                                     model.task_kernel(layer, j).weights());
                } catch (const UndefinedCorrelation&) {
                    kc.correlation = std::nan("");
                }
                out.push_back(kc);
            }
    }
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Variants and configuration

std::string to_string(Variant v) {
    switch (v) {
        case Variant::Sinewich: return "sinewich";
        case Variant::LinearScale: return "linear-scale";
        case Variant::NoModulation: return "no-modulation";
        case Variant::IndependentBase: return "independent-base";
        case Variant::IndependentDecoder: return "independent-decoder";
    }
    return "unknown";
}

Variant variant_from_string(const std::string& s) {
    for (Variant v : {Variant::Sinewich, Variant::LinearScale, Variant::NoModulation, Variant::IndependentBase,
                      Variant::IndependentDecoder}) {
        if (to_string(v) == s) return v;
    }
    throw ContractViolation("unknown variant '" + s +
                            "' (expected sinewich, linear-scale, no-modulation, independent-base or "
                            "independent-decoder)");
}

double TrainConfig::weight(std::size_t task) const { return task_weights.empty() ? 1.0 : task_weights.at(task); }

ModelConfig TrainConfig::model_config(std::optional<std::size_t> task_count) const {
    ModelConfig mc;
    mc.in_channels = channels;
    mc.out_channels = channels;
    mc.image_size = image_size;
    mc.tasks = task_count.value_or(tasks);
    mc.ta_rank = ta_rank;
    mc.ts_rank = ts_rank;
    mc.decoder_rank = decoder_rank;
    mc.filter = filter;
    mc.seed = seed;
    mc.modulation = variant == Variant::LinearScale    ? Modulation::Linear
                    : variant == Variant::NoModulation ? Modulation::None
                                                       : Modulation::Sine;
    mc.independent_base = variant == Variant::IndependentBase;
    mc.independent_decoder = variant == Variant::IndependentDecoder;
    return mc;
}

void TrainConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ContractViolation("train config: " + msg); };
    if (tasks < 1 || tasks > 4) fail("tasks must be between 1 and 4 (one per toy operator)");
    if (batch_size == 0) fail("batch_size must be positive");
    if (train_samples == 0 || val_samples == 0) fail("train_samples and val_samples must be positive");
    if (!(adam.lr > 0.0) || !(adam.eps > 0.0)) fail("lr and adam_eps must be positive");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
        fail("beta1 and beta2 must lie in [0, 1)");
    }
    if (!(blur_sigma > 0.0)) fail("blur_sigma must be positive");
    if (!task_weights.empty()) {
        if (task_weights.size() != tasks) fail("task_weights needs one entry per task");
        for (double w : task_weights)
            if (!(w > 0.0) || !std::isfinite(w)) fail("task weights must be positive and finite");
    }
    model_config().validate();
}

ordered_json to_json(const TrainConfig& cfg) {
    ordered_json j;
    j["version"] = 1;
    j["seed"] = cfg.seed;
    j["tasks"] = cfg.tasks;
    j["variant"] = to_string(cfg.variant);
    j["epochs"] = cfg.epochs;
    j["batch_size"] = cfg.batch_size;
    j["train_samples"] = cfg.train_samples;
    j["val_samples"] = cfg.val_samples;
    j["channels"] = cfg.channels;
    j["image_size"] = cfg.image_size;
    j["ta_rank"] = cfg.ta_rank;
    j["ts_rank"] = cfg.ts_rank;
    j["decoder_rank"] = cfg.decoder_rank;
    j["lr"] = cfg.adam.lr;
    j["beta1"] = cfg.adam.beta1;
    j["beta2"] = cfg.adam.beta2;
    j["adam_eps"] = cfg.adam.eps;
    if (cfg.filter) {
        j["filter"] = ordered_json{{"size", cfg.filter->size}, {"sigma", cfg.filter->sigma}};
    } else {
        j["filter"] = nullptr;
    }
    j["blur_sigma"] = cfg.blur_sigma;
    std::vector<double> weights(cfg.tasks);
    for (std::size_t t = 0; t < cfg.tasks; ++t) weights[t] = cfg.weight(t);
    j["task_weights"] = weights;
    return j;
}

TrainConfig train_config_from_json(const json& j, TrainConfig cfg) {
    if (!j.is_object()) throw ContractViolation("config must be a JSON object");
    for (const auto& [key, v] : j.items()) {
        if (key == "version") {
            if (read_count(v, key) != 1) throw ContractViolation("unsupported config version");
        } else if (key == "seed") {
            read_count(v, key);
            cfg.seed = v.get<std::uint64_t>();
        } else if (key == "tasks") {
            cfg.tasks = read_count(v, key);
        } else if (key == "variant") {
            if (!v.is_string()) throw ContractViolation("config key 'variant' must be a string");
            cfg.variant = variant_from_string(v.get<std::string>());
        } else if (key == "epochs") {
            cfg.epochs = read_count(v, key);
        } else if (key == "batch_size") {
            cfg.batch_size = read_count(v, key);
        } else if (key == "train_samples") {
            cfg.train_samples = read_count(v, key);
        } else if (key == "val_samples") {
            cfg.val_samples = read_count(v, key);
        } else if (key == "channels") {
            cfg.channels = read_count(v, key);
        } else if (key == "image_size") {
            cfg.image_size = read_count(v, key);
        } else if (key == "ta_rank") {
            cfg.ta_rank = read_count(v, key);
        } else if (key == "ts_rank") {
            cfg.ts_rank = read_count(v, key);
        } else if (key == "decoder_rank") {
            cfg.decoder_rank = read_count(v, key);
        } else if (key == "lr") {
            cfg.adam.lr = read_number(v, key);
        } else if (key == "beta1") {
            cfg.adam.beta1 = read_number(v, key);
        } else if (key == "beta2") {
            cfg.adam.beta2 = read_number(v, key);
        } else if (key == "adam_eps") {
            cfg.adam.eps = read_number(v, key);
        } else if (key == "filter") {
            cfg.filter = read_filter(v);
        } else if (key == "blur_sigma") {
            cfg.blur_sigma = read_number(v, key);
        } else if (key == "task_weights") {
            if (!v.is_array()) throw ContractViolation("config key 'task_weights' must be an array");
            cfg.task_weights.clear();
            for (const json& w : v) cfg.task_weights.push_back(read_number(w, key));
        } else {
            throw ContractViolation("unknown config key '" + key + "'");
        }
    }
    cfg.validate();
    return cfg;
}

void apply_override(TrainConfig& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ContractViolation("override '" + assignment + "' is not of the form key=value");
    }
    const std::string key = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    cfg = train_config_from_json(json{{key, value}}, cfg);
}

// ---------------------------------------------------------------------------
// Toy suite

Tensor ToyTask::apply(const Tensor& input) const {
    switch (op) {
        case ToyOperator::GaussianBlur: {
            return depthwise(input, gaussian_kernel(blur_size(blur_sigma), blur_sigma));
        }
        case ToyOperator::EdgeMagnitude: {
            const Tensor gx_k({3, 3}, {-0.25, 0.0, 0.25, -0.5, 0.0, 0.5, -0.25, 0.0, 0.25});
            const Tensor gy_k({3, 3}, {-0.25, -0.5, -0.25, 0.0, 0.0, 0.0, 0.25, 0.5, 0.25});
            const Tensor gx = depthwise(input, gx_k);
            const Tensor gy = depthwise(input, gy_k);
            Tensor out = Tensor::zeros_like(input);
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(gx[i] * gx[i] + gy[i] * gy[i]);
            return out;
        }
        case ToyOperator::ChannelNegation: {
            return -1.0 * input;
        }
        case ToyOperator::ChannelMix: {
            const std::size_t c = input.dim(0), plane = input.dim(1) * input.dim(2);
            Tensor out = Tensor::zeros_like(input);
            for (std::size_t o = 0; o < c; ++o)
                for (std::size_t i = 0; i < c; ++i) {
                    const double w = mix(o, i);
                    for (std::size_t p = 0; p < plane; ++p) out[o * plane + p] += w * input[i * plane + p];
                }
            return out;
        }
    }
    throw ContractViolation("unknown toy operator");
}

ToySuite make_toy_suite(const TrainConfig& cfg) {
    cfg.validate();
    ToySuite suite;
    const std::size_t c = cfg.channels, hw = cfg.image_size;
    const ToyOperator ops[] = {ToyOperator::GaussianBlur, ToyOperator::EdgeMagnitude, ToyOperator::ChannelNegation,
                               ToyOperator::ChannelMix};
    for (std::size_t t = 0; t < cfg.tasks; ++t) {
        ToyTask task;
        task.op = ops[t];
        task.name = operator_name(ops[t]);
        task.blur_sigma = cfg.blur_sigma;
        task.weight = cfg.weight(t);
        if (task.op == ToyOperator::ChannelMix) {
            RandomStream rng(cfg.seed, kMixStream);
            task.mix = sample_gaussian(rng, {c, c}, 1.0 / std::sqrt(static_cast<double>(c)));
        }
        suite.tasks.push_back(std::move(task));
    }

    const Tensor smoothing = gaussian_kernel(kInputSmoothing, kInputSigma);
    const std::size_t total = cfg.train_samples + cfg.val_samples;
    for (std::size_t k = 0; k < total; ++k) {
        RandomStream rng(cfg.seed, kDataStream + k);
        Tensor x = depthwise(sample_gaussian(rng, {c, hw, hw}, 1.0), smoothing);
        const double mean = x.sum() / static_cast<double>(x.size());
        for (double& v : x.data()) v -= mean;
        const double sd = std::sqrt(x.squared_norm() / static_cast<double>(x.size()));
        if (sd > 0.0) x *= 1.0 / sd;
        suite.data.inputs.push_back(std::move(x));
        (k < cfg.train_samples ? suite.data.train : suite.data.val).push_back(k);
    }
    suite.data.targets.resize(cfg.tasks);
    for (std::size_t t = 0; t < cfg.tasks; ++t)
        for (const Tensor& x : suite.data.inputs) suite.data.targets[t].push_back(suite.tasks[t].apply(x));
    return suite;
}

// ---------------------------------------------------------------------------
// Losses, metric, optimizer

MtlLoss mtl_loss(const std::vector<std::vector<Tensor>>& predictions, const std::vector<std::vector<Tensor>>& targets,
                 const std::vector<double>& weights) {
    if (predictions.size() != targets.size() || predictions.size() != weights.size()) {
        throw ContractViolation("mtl_loss: predictions, targets and weights must list the same tasks");
    }
    MtlLoss out;
    for (std::size_t t = 0; t < predictions.size(); ++t) {
        if (predictions[t].size() != targets[t].size() || predictions[t].empty()) {
            throw ContractViolation("mtl_loss: task " + std::to_string(t) + " has mismatched or empty samples");
        }
        const double l = batch_mse(predictions[t], targets[t]);
        out.per_task.push_back(l);
        out.total += weights[t] * l;
    }
    return out;
}

double delta_m(const std::vector<double>& r_mtl, const std::vector<double>& r_st,
               const std::vector<bool>& lower_is_better) {
    if (r_mtl.size() != r_st.size() || r_st.size() != lower_is_better.size()) {
        throw ContractViolation("delta_m: vectors differ in length (" + std::to_string(r_mtl.size()) + ", " +
                                std::to_string(r_st.size()) + ", " + std::to_string(lower_is_better.size()) + ")");
    }
    if (r_st.empty()) throw ContractViolation("delta_m: no tasks");
    double sum = 0.0;
    for (std::size_t t = 0; t < r_st.size(); ++t) {
        if (r_st[t] == 0.0) throw ContractViolation("delta_m: baseline for task " + std::to_string(t) + " is zero");
        const double rel = (r_mtl[t] - r_st[t]) / r_st[t];
        sum += lower_is_better[t] ? -rel : rel;
    }
    return 100.0 * sum / static_cast<double>(r_st.size());
}

std::string format_delta_m(double percent) {
    if (!std::isfinite(percent)) return "nan";
    if (std::round(percent * 100.0) == 0.0) return "0.00";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%+.2f", percent);
    return buf;
}

AdamState AdamState::zeros_like(const ParameterSet& params) {
    AdamState s;
    for (std::size_t i = 0; i < params.size(); ++i) {
        s.m.push_back(Tensor::zeros_like(params.value(i)));
        s.v.push_back(Tensor::zeros_like(params.value(i)));
    }
    return s;
}

void optimizer_step(ParameterSet& params, const GradientBundle& grads, AdamState& state, const AdamHyper& hyper) {
    if (state.m.empty()) state = AdamState::zeros_like(params);
    if (grads.grads.size() != params.size() || state.m.size() != params.size()) {
        throw ContractViolation("optimizer_step: parameters, gradients and state do not align");
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params.value(i);
        const Tensor& g = grads.grads[i];
        require_same_shape(p, g, "optimizer_step");
        Tensor& m = state.m[i];
        Tensor& v = state.v[i];
        for (std::size_t k = 0; k < p.size(); ++k) {
            m[k] = hyper.beta1 * m[k] + (1.0 - hyper.beta1) * g[k];
            v[k] = hyper.beta2 * v[k] + (1.0 - hyper.beta2) * g[k] * g[k];
            p[k] -= hyper.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + hyper.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Training

RunReport train(const TrainConfig& cfg, const TrainOptions& options) {
    std::optional<Model> model;
    return train(cfg, options, model);
}

RunReport train(const TrainConfig& cfg, const TrainOptions& options, std::optional<Model>& model_out) {
    const auto start = std::chrono::steady_clock::now();
    cfg.validate();
    const ToySuite suite = make_toy_suite(cfg);

    RunReport report;
    report.config = cfg;
    report.tasks = suite.tasks;
    model_out.emplace(cfg.model_config());
    Model& model = *model_out;
    report.parameters = model.parameter_counts();

    std::vector<std::size_t> heads(cfg.tasks);
    std::iota(heads.begin(), heads.end(), std::size_t{0});
    LoopResult loop = run_loop(model, cfg, suite, heads, options.threads, true);
    report.epochs = std::move(loop.epochs);
    report.grad_sim = std::move(loop.grad_sim);
    auto elapsed = [&] {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    };
    if (loop.diverged) {
        report.diverged = true;
        report.diagnostic = loop.diagnostic;
        report.wall_seconds = elapsed();
        throw TrainingDiverged(loop.diagnostic, std::move(report));
    }
    report.final_val_metric = report.epochs.back().val_metric;

    if (options.baseline) {
        if (options.baseline->size() != cfg.tasks) throw ContractViolation("train: baseline needs one value per task");
        report.baseline = *options.baseline;
    } else if (!options.skip_baseline) {
        report.baseline = single_task_baselines(cfg, options.threads);
    }
    if (!report.baseline.empty()) {
        std::vector<bool> lower;
        for (const ToyTask& t : suite.tasks) lower.push_back(t.lower_is_better);
        report.delta_m = delta_m(report.final_val_metric, report.baseline, lower);
    }
    report.kernel_correlations = kernel_correlations(model);
    report.wall_seconds = elapsed();
    return report;
}

double train_single_task(const TrainConfig& cfg, std::size_t task, std::size_t threads) {
    cfg.validate();
    if (task >= cfg.tasks) throw ContractViolation("train_single_task: unknown task " + std::to_string(task));
    const ToySuite suite = make_toy_suite(cfg);
    Model model(baseline_model_config(cfg));
    const LoopResult loop = run_loop(model, cfg, suite, {task}, threads, false);
    if (loop.diverged) {
        RunReport partial;
        partial.config = cfg;
        partial.epochs = loop.epochs;
        partial.diverged = true;
        partial.diagnostic = "single-task baseline for task " + std::to_string(task) + ": " + loop.diagnostic;
        throw TrainingDiverged(partial.diagnostic, std::move(partial));
    }
    return loop.epochs.back().val_metric.front();
}

std::vector<double> single_task_baselines(const TrainConfig& cfg, std::size_t threads) {
    std::vector<double> out;
    for (std::size_t t = 0; t < cfg.tasks; ++t) out.push_back(train_single_task(cfg, t, threads));
    return out;
}

// ---------------------------------------------------------------------------
// Report serialization

ordered_json RunReport::to_json() const {
    ordered_json j;
    j["format"] = "sinewich-run-report/1";
    j["baseline_protocol"] = kBaselineProtocol;
    j["config"] = sinewich::to_json(config);
    j["status"] = diverged ? "diverged" : "ok";
    j["diagnostic"] = diagnostic;

    ordered_json task_list = ordered_json::array();
    for (const ToyTask& t : tasks) {
        task_list.push_back(ordered_json{{"name", t.name},
                                         {"lower_is_better", t.lower_is_better},
                                         {"weight", t.weight},
                                         {"metric", "validation MSE"}});
    }
    j["tasks"] = task_list;

    j["parameter_counts"] = ordered_json{{"total", parameters.total},
                                         {"encoder_task_agnostic", parameters.encoder_ta},
                                         {"encoder_task_specific", parameters.encoder_ts},
                                         {"task_tokens", parameters.tokens},
                                         {"decoder", parameters.decoder},
                                         {"ts_layer_base", parameters.ts_layer_base},
                                         {"ts_layer_clock", parameters.ts_layer_clock}};

    ordered_json ep = ordered_json::array();
    for (const EpochRecord& e : epochs) {
        ep.push_back(ordered_json{{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_metric", e.val_metric}});
    }
    j["epochs"] = ep;
    j["final_val_metric"] = final_val_metric;
    j["single_task_baseline"] = baseline;
    if (delta_m) {
        j["delta_m"] = *delta_m;
        j["delta_m_text"] = format_delta_m(*delta_m);
    } else {
        j["delta_m"] = nullptr;
        j["delta_m_text"] = nullptr;
    }

    ordered_json sims = ordered_json::array();
    for (const GradSimMatrix& g : grad_sim) {
        ordered_json mean = ordered_json::array(), var = ordered_json::array();
        for (std::size_t i = 0; i < g.tasks; ++i) {
            ordered_json mr = ordered_json::array(), vr = ordered_json::array();
            for (std::size_t k = 0; k < g.tasks; ++k) {
                mr.push_back(g.mean_at(i, k));
                vr.push_back(g.variance_at(i, k));
            }
            mean.push_back(mr);
            var.push_back(vr);
        }
        sims.push_back(ordered_json{{"epoch", g.epoch}, {"mean", mean}, {"variance", var}, {"counts", g.counts}});
    }
    j["grad_sim"] = sims;

    ordered_json corr = ordered_json::array();
    for (const KernelCorrelation& k : kernel_correlations) {
        corr.push_back(ordered_json{{"layer", k.layer},
                                    {"task_i", k.task_i},
                                    {"task_j", k.task_j},
                                    {"omega_i", k.omega_i},
                                    {"omega_j", k.omega_j},
                                    {"correlation", k.correlation}});
    }
    j["kernel_correlations"] = corr;
    return j;
}

std::string RunReport::metrics_csv() const {
    std::string out = "epoch,task,train_loss,val_metric\n";
    for (const EpochRecord& e : epochs)
        for (std::size_t t = 0; t < e.train_loss.size(); ++t)
            out += std::to_string(e.epoch) + "," + std::to_string(t) + "," + num(e.train_loss[t]) + "," +
                   num(e.val_metric[t]) + "\n";
    return out;
}

std::string RunReport::grad_sim_csv() const {
    std::string out = "epoch,task_i,task_j,mean_sim,var_sim\n";
    for (const GradSimMatrix& g : grad_sim)
        for (std::size_t i = 0; i < g.tasks; ++i)
            for (std::size_t k = 0; k < g.tasks; ++k)
                out += std::to_string(g.epoch) + "," + std::to_string(i) + "," + std::to_string(k) + "," +
                       num(g.mean_at(i, k)) + "," + num(g.variance_at(i, k)) + "\n";
    return out;
}

}  // namespace sinewich
