#include "sinewich/model.hpp"

#include <algorithm>
#include <cmath>

#include "sinewich/numerics.hpp"
#include "sinewich/random.hpp"

namespace sinewich {

namespace {

constexpr double kNormEpsilon = 1e-5;

// Stream ids for parameter initialization; distinct ids keep draws independent.
constexpr std::uint64_t kBackboneStream = 1;
constexpr std::uint64_t kAdapterStream = 100;
constexpr std::uint64_t kDecoderStream = 10'000;

Tensor relu(const Tensor& x) {
    Tensor out = x;
    for (double& v : out.data()) v = std::max(0.0, v);
    return out;
}

/// g masked by (pre > 0)
Tensor relu_backward(const Tensor& g, const Tensor& pre) {
    Tensor out = g;
    for (std::size_t i = 0; i < out.size(); ++i)
        if (!(pre[i] > 0.0)) out[i] = 0.0;
    return out;
}

Tensor row_of(const Tensor& m, std::size_t row) {
    const std::size_t w = m.dim(1);
    return Tensor({w}, std::vector<double>(m.raw() + row * w, m.raw() + (row + 1) * w));
}

}  // namespace

std::string to_string(Modulation m) {
    switch (m) {
        case Modulation::Sine: return "sine";
        case Modulation::Linear: return "linear";
        case Modulation::None: return "none";
    }
    return "unknown";
}

Modulation modulation_from_string(const std::string& s) {
    if (s == "sine") return Modulation::Sine;
    if (s == "linear") return Modulation::Linear;
    if (s == "none") return Modulation::None;
    throw ContractViolation("unknown modulation '" + s + "'");
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ContractViolation("model config: " + msg); };
    if (in_channels == 0 || out_channels == 0 || tasks == 0 || token_width == 0) fail("sizes must be positive");
    if (image_size == 0 || image_size % 16 != 0) fail("image_size must be a positive multiple of 16");
    for (std::size_t c : stage_channels)
        if (c == 0) fail("stage channels must be positive");
    if (blocks_per_stage == 0) fail("blocks_per_stage must be positive");
    if (blocks_per_stage == 1) {
        std::size_t prev = in_channels;
        for (std::size_t c : stage_channels) {
            if (c != prev) fail("a stage with a single task-specific layer needs equal input and output channels");
            prev = c;
        }
    }
    if (ts_kernel % 2 == 0 || decoder_kernel % 2 == 0) fail("adapter kernel sizes must be odd");
    std::size_t prev = in_channels;
    for (std::size_t c : stage_channels) {
        if (ta_rank == 0 || ta_rank > std::min(prev, c)) fail("ta_rank must be in [1, min(channels)]");
        if (ts_rank == 0 || ts_rank > c) fail("ts_rank must be in [1, stage channels]");
        prev = c;
    }
    const std::size_t concat = 4 * proj_channels;
    if (proj_channels == 0 || decoder_channels == 0) fail("decoder widths must be positive");
    if (decoder_rank == 0 || decoder_rank > std::min(concat, decoder_channels)) {
        fail("decoder_rank must be in [1, min(4*proj_channels, decoder_channels)]");
    }
    if (filter && (filter->size < 1 || filter->size % 2 == 0 || !(filter->sigma > 0.0))) {
        fail("filter size must be odd and sigma positive");
    }
}

// ---------------------------------------------------------------------------
// ParameterSet / GradientBundle

std::size_t ParameterSet::add(std::string name, Tensor value, bool shared_encoder) {
    if (index_.contains(name)) throw ContractViolation("duplicate parameter name '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.push_back(Entry{std::move(name), std::move(value), shared_encoder});
    return entries_.size() - 1;
}

std::optional<std::size_t> ParameterSet::find(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

std::size_t ParameterSet::index_of(const std::string& name) const {
    const auto i = find(name);
    if (!i) throw ContractViolation("unknown parameter '" + name + "'");
    return *i;
}

std::size_t ParameterSet::scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
}

GradientBundle GradientBundle::zeros_like(const ParameterSet& params) {
    GradientBundle g;
    g.grads.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) g.grads.push_back(Tensor::zeros_like(params.value(i)));
    return g;
}

GradientBundle& GradientBundle::operator+=(const GradientBundle& other) {
    if (other.grads.size() != grads.size()) throw ContractViolation("gradient bundles do not align");
    for (std::size_t i = 0; i < grads.size(); ++i) grads[i] += other.grads[i];
    return *this;
}

void GradientBundle::scale(double factor) {
    for (Tensor& g : grads) g *= factor;
}

std::vector<double> GradientBundle::shared_encoder_flat(const ParameterSet& params) const {
    if (params.size() != grads.size()) throw ContractViolation("gradient bundle does not match parameters");
    std::vector<double> flat;
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (!params.shared_encoder(i)) continue;
        flat.insert(flat.end(), grads[i].data().begin(), grads[i].data().end());
    }
    return flat;
}

bool GradientBundle::all_finite() const {
    return std::all_of(grads.begin(), grads.end(), [](const Tensor& g) { return g.all_finite(); });
}

// ---------------------------------------------------------------------------
// Model construction

struct Model::TaskKernel {
    std::size_t base_index = 0;
    LowRankFactors factors;
    MidKernel mid;
    FusedKernel base;
    double omega = 1.0;
    ConvKernel final_kernel;
};

struct ForwardCache {
    struct Sample {
        std::vector<std::vector<Tensor>> layer_input;  // [stage][layer]
        std::vector<std::vector<Tensor>> layer_pre;    // frozen conv pre-activations
        std::vector<Tensor> stage_out;
        Tensor concat;
        Tensor xhat;
        Tensor z;    // normalized, scaled and shifted
        Tensor act;  // relu(z)
    };

    std::uint64_t generation = 0;
    std::size_t task = 0;
    Mode mode = Mode::Train;
    std::vector<std::vector<ConvKernel>> ta_kernels;  // fused 1x1 LoRA per [stage][layer]
    std::vector<Model::TaskKernel> ts_kernels;
    std::vector<ConvKernel> proj;  // per stage
    Model::TaskKernel decoder_kernel;
    ConvKernel tail;
    std::vector<double> mean, inv_std;       // per channel, as used for normalization
    std::vector<double> batch_mean, batch_var;  // unbiased variance, for running statistics
    std::vector<Sample> samples;
};

Model::Model(ModelConfig config) : config_(std::move(config)) {
    config_.validate();
    const ModelConfig& cfg = config_;
    const std::size_t T = cfg.tasks;

    RandomStream backbone_rng(cfg.seed, kBackboneStream);
    std::uint64_t stream = kAdapterStream;

    ta_layers_.resize(4);
    std::size_t prev = cfg.in_channels;
    for (std::size_t s = 0; s < 4; ++s) {
        const std::size_t ch = cfg.stage_channels[s];
        for (std::size_t l = 0; l < cfg.blocks_per_stage; ++l) {
            const std::size_t cin = (l == 0) ? prev : ch;
            const double he = std::sqrt(2.0 / static_cast<double>(cin * 9));
            backbone_.emplace_back(sample_gaussian(backbone_rng, {ch, cin, 3, 3}, he));
            const std::size_t frozen = backbone_.size() - 1;
            const std::string prefix = "encoder.stage" + std::to_string(s + 1) + ".layer" + std::to_string(l);
            if (l + 1 < cfg.blocks_per_stage) {
                RandomStream rng(cfg.seed, stream++);
                const std::size_t a = params_.add(
                    prefix + ".ta.A",
                    sample_gaussian(rng, {cin, cfg.ta_rank}, 1.0 / std::sqrt(static_cast<double>(cin))), true);
                const std::size_t b = params_.add(prefix + ".ta.B", Tensor({ch, cfg.ta_rank}), true);
                ta_layers_[s].push_back(TALayer{frozen, a, b});
            } else {
                SwitchedModule mod = make_module(prefix + ".ts", ch, ch, cfg.ts_rank, cfg.ts_kernel,
                                                 cfg.independent_base, true, stream);
                stream += T + 1;
                ts_layers_.push_back(TSLayer{frozen, std::move(mod)});
            }
        }
        prev = ch;
    }

    if (cfg.modulation != Modulation::None) {
        RandomStream rng(cfg.seed, stream++);
        tokens_ = params_.add("tokens", sample_gaussian(rng, {T, cfg.token_width}, 1.0));
        has_tokens_ = true;
    }

    // Decoder group.
    std::uint64_t dstream = kDecoderStream;
    decoder_.proj.assign(4, {});
    for (std::size_t s = 0; s < 4; ++s) {
        const std::size_t ch = cfg.stage_channels[s];
        for (std::size_t t = 0; t < T; ++t) {
            RandomStream rng(cfg.seed, dstream++);
            decoder_.proj[s].push_back(params_.add(
                "decoder.proj.stage" + std::to_string(s + 1) + ".task" + std::to_string(t),
                sample_gaussian(rng, {cfg.proj_channels, ch, 1, 1}, 1.0 / std::sqrt(static_cast<double>(ch)))));
        }
    }
    decoder_.module = make_module("decoder.main", 4 * cfg.proj_channels, cfg.decoder_channels, cfg.decoder_rank,
                                  cfg.decoder_kernel, cfg.independent_decoder, false, dstream);
    dstream += T + 1;
    decoder_.bias = params_.add("decoder.bias", Tensor({T, cfg.decoder_channels}));
    for (std::size_t t = 0; t < T; ++t) {
        const std::string p = "decoder.task" + std::to_string(t);
        decoder_.norm_scale.push_back(params_.add(p + ".norm.scale", Tensor({cfg.decoder_channels}, 1.0)));
        decoder_.norm_shift.push_back(params_.add(p + ".norm.shift", Tensor({cfg.decoder_channels})));
        RandomStream rng(cfg.seed, dstream++);
        decoder_.tail_weight.push_back(params_.add(
            p + ".tail.weight",
            sample_gaussian(rng, {cfg.out_channels, cfg.decoder_channels, 1, 1},
                            1.0 / std::sqrt(static_cast<double>(cfg.decoder_channels)))));
        decoder_.tail_bias.push_back(params_.add(p + ".tail.bias", Tensor({cfg.out_channels})));
        decoder_.running_mean.push_back(buffers_.add(p + ".norm.running_mean", Tensor({cfg.decoder_channels})));
        decoder_.running_var.push_back(buffers_.add(p + ".norm.running_var", Tensor({cfg.decoder_channels}, 1.0)));
    }
}

Model::SwitchedModule Model::make_module(const std::string& prefix, std::size_t m, std::size_t n, std::size_t r,
                                         std::size_t k, bool per_task, bool shared_encoder, std::uint64_t stream) {
    SwitchedModule mod;
    const std::size_t bases = per_task ? config_.tasks : 1;
    // Per-task bases belong to one task each, so they are not shared parameters.
    const bool shared = shared_encoder && !per_task;
    for (std::size_t i = 0; i < bases; ++i) {
        RandomStream rng(config_.seed, stream + i);
        const std::string p = prefix + ".base" + std::to_string(i);
        mod.a.push_back(params_.add(p + ".A", sample_gaussian(rng, {m, r}, 1.0), shared));
        mod.b.push_back(params_.add(p + ".B", sample_gaussian(rng, {n, r}, 1.0), shared));
        mod.w.push_back(params_.add(
            p + ".W", sample_gaussian(rng, {r, r, k, k}, 1.0 / std::sqrt(static_cast<double>(r * k * k))), shared));
    }
    if (config_.modulation != Modulation::None) {
        RandomStream rng(config_.seed, stream + bases);
        mod.has_clock = true;
        mod.wq = params_.add(prefix + ".clock.Wq", sample_gaussian(rng, {1, config_.token_width}, 0.02),
                             shared_encoder);
        mod.s = params_.add(prefix + ".clock.s", Tensor::scalar(1.0), shared_encoder);
        mod.c = params_.add(prefix + ".clock.c", Tensor::scalar(1.0), shared_encoder);
    }
    return mod;
}

ParameterSet& Model::parameters() noexcept {
    ++generation_;
    return params_;
}

void Model::check_task(std::size_t task) const {
    if (task >= config_.tasks) {
        throw ContractViolation("unknown task id " + std::to_string(task) + " (model has " +
                                std::to_string(config_.tasks) + " tasks)");
    }
}

Model::TaskKernel Model::build_task_kernel(const SwitchedModule& mod, std::size_t task) const {
    TaskKernel tk;
    tk.base_index = mod.a.size() == 1 ? 0 : task;
    tk.factors = LowRankFactors(params_.value(mod.a[tk.base_index]), params_.value(mod.b[tk.base_index]));
    tk.mid = MidKernel(ConvKernel(params_.value(mod.w[tk.base_index])));
    tk.base = fuse_awb(tk.factors, tk.mid);
    ModulatedKernel mk;
    switch (config_.modulation) {
        case Modulation::Sine:
        case Modulation::Linear: {
            const ClockNetParams clock(params_.value(mod.wq), params_.value(mod.s)[0], params_.value(mod.c)[0]);
            tk.omega = clocknet_forward(clock, TaskToken{row_of(params_.value(tokens_), task), task});
            mk = config_.modulation == Modulation::Sine ? sine_modulate(tk.base, tk.omega)
                                                        : linear_scale(tk.base, tk.omega);
            break;
        }
        case Modulation::None:
            mk = ModulatedKernel{tk.base.kernel4d, 1.0, std::nullopt};
            break;
    }
    if (config_.filter) mk = lowpass_filter(mk, config_.filter->size, config_.filter->sigma);
    tk.final_kernel = std::move(mk.kernel);
    return tk;
}

void Model::backprop_task_kernel(const SwitchedModule& mod, std::size_t task, const TaskKernel& tk,
                                 const Tensor& grad_kernel, GradientBundle& out) const {
    Tensor g = config_.filter ? lowpass_backward(grad_kernel, config_.filter->size, config_.filter->sigma)
                              : grad_kernel;
    SineGradients sg;
    switch (config_.modulation) {
        case Modulation::Sine: sg = sine_backward(tk.base, tk.omega, g); break;
        case Modulation::Linear: sg = linear_scale_backward(tk.base, tk.omega, g); break;
        case Modulation::None: sg = SineGradients{std::move(g), 0.0}; break;
    }
    const FuseGradients fg = fuse_backward(tk.factors, tk.mid, sg.base);
    out.grads[mod.a[tk.base_index]] += fg.A;
    out.grads[mod.b[tk.base_index]] += fg.B;
    out.grads[mod.w[tk.base_index]] += fg.W;
    if (mod.has_clock) {
        const ClockNetParams clock(params_.value(mod.wq), params_.value(mod.s)[0], params_.value(mod.c)[0]);
        const ClockNetGradients cg =
            clocknet_backward(clock, TaskToken{row_of(params_.value(tokens_), task), task}, sg.omega);
        out.grads[mod.wq] += cg.Wq;
        out.grads[mod.s][0] += cg.s;
        out.grads[mod.c][0] += cg.c;
        Tensor& tok = out.grads[tokens_];
        for (std::size_t i = 0; i < cg.p.size(); ++i) tok(task, i) += cg.p[i];
    }
}

double Model::task_frequency(std::size_t layer, std::size_t task) const {
    check_task(task);
    if (layer > ts_layers_.size()) throw ContractViolation("task_frequency: layer out of range");
    const SwitchedModule& mod = layer == ts_layers_.size() ? decoder_.module : ts_layers_[layer].module;
    return build_task_kernel(mod, task).omega;
}

ConvKernel Model::task_kernel(std::size_t layer, std::size_t task) const {
    check_task(task);
    if (layer > ts_layers_.size()) throw ContractViolation("task_kernel: layer out of range");
    const SwitchedModule& mod = layer == ts_layers_.size() ? decoder_.module : ts_layers_[layer].module;
    return build_task_kernel(mod, task).final_kernel;
}

// ---------------------------------------------------------------------------
// Forward

std::vector<Tensor> Model::backbone_features(const Tensor& input) const {
    std::vector<Tensor> out;
    Tensor x = input;
    std::size_t frozen = 0;
    for (std::size_t s = 0; s < 4; ++s) {
        x = avg_pool2(x);
        for (std::size_t l = 0; l < config_.blocks_per_stage; ++l) x = relu(conv2d(x, backbone_[frozen++]));
        out.push_back(x);
    }
    return out;
}

std::vector<Tensor> Model::encode(const Tensor& input, std::size_t task) const {
    const ForwardPass pass = forward(std::span<const Tensor>(&input, 1), task, Mode::Eval);
    return pass.cache->samples.front().stage_out;
}

ForwardPass Model::forward(std::span<const Tensor> batch, std::size_t task, Mode mode) const {
    check_task(task);
    if (batch.empty()) throw ContractViolation("forward: empty batch");
    const ModelConfig& cfg = config_;
    const Shape expected{cfg.in_channels, cfg.image_size, cfg.image_size};
    for (const Tensor& x : batch) {
        if (x.shape() != expected) {
            throw ContractViolation("forward: input " + shape_to_string(x.shape()) + " does not match configured " +
                                    shape_to_string(expected));
        }
    }

    auto cache = std::make_shared<ForwardCache>();
    cache->generation = generation_;
    cache->task = task;
    cache->mode = mode;

    cache->ta_kernels.resize(4);
    for (std::size_t s = 0; s < 4; ++s) {
        for (const TALayer& layer : ta_layers_[s]) {
            const LowRankFactors f(params_.value(layer.a), params_.value(layer.b));
            const MidKernel identity(ConvKernel(Tensor({f.r(), f.r(), 1, 1}, 0.0)));
            MidKernel mid = identity;
            for (std::size_t j = 0; j < f.r(); ++j) mid.W(j, j, 0, 0) = 1.0;
            cache->ta_kernels[s].push_back(fuse_awb(f, mid).kernel4d);
        }
        cache->ts_kernels.push_back(build_task_kernel(ts_layers_[s].module, task));
        cache->proj.emplace_back(params_.value(decoder_.proj[s][task]));
    }
    cache->decoder_kernel = build_task_kernel(decoder_.module, task);
    cache->tail = ConvKernel(params_.value(decoder_.tail_weight[task]));

    const std::size_t hw = cfg.image_size;
    const std::size_t dch = cfg.decoder_channels;
    const std::size_t pch = cfg.proj_channels;
    const Tensor& bias = params_.value(decoder_.bias);

    std::vector<Tensor> h_maps;
    h_maps.reserve(batch.size());
    cache->samples.resize(batch.size());
    for (std::size_t k = 0; k < batch.size(); ++k) {
        ForwardCache::Sample& sc = cache->samples[k];
        sc.layer_input.resize(4);
        sc.layer_pre.resize(4);
        Tensor x = batch[k];
        std::size_t frozen = 0;
        for (std::size_t s = 0; s < 4; ++s) {
            x = avg_pool2(x);
            for (std::size_t l = 0; l < ta_layers_[s].size(); ++l) {
                Tensor pre = conv2d(x, backbone_[frozen++]);
                Tensor y = relu(pre) + conv2d(x, cache->ta_kernels[s][l]);
                sc.layer_input[s].push_back(std::move(x));
                sc.layer_pre[s].push_back(std::move(pre));
                x = std::move(y);
            }
            Tensor pre = conv2d(x, backbone_[frozen++]);
            Tensor y = relu(pre) + conv2d(x, cache->ts_kernels[s].final_kernel);
            sc.layer_input[s].push_back(std::move(x));
            sc.layer_pre[s].push_back(std::move(pre));
            x = std::move(y);
            sc.stage_out.push_back(x);
        }

        sc.concat = Tensor({4 * pch, hw, hw});
        for (std::size_t s = 0; s < 4; ++s) {
            const Tensor up = upsample_nearest(conv2d(sc.stage_out[s], cache->proj[s]), hw, hw);
            std::copy(up.data().begin(), up.data().end(), sc.concat.raw() + s * pch * hw * hw);
        }
        Tensor h = conv2d(sc.concat, cache->decoder_kernel.final_kernel);
        for (std::size_t c = 0; c < dch; ++c)
            for (std::size_t p = 0; p < hw * hw; ++p) h[c * hw * hw + p] += bias(task, c);
        h_maps.push_back(std::move(h));
    }

    // Per-channel normalization over batch and spatial positions.
    const std::size_t plane = hw * hw;
    const double count = static_cast<double>(batch.size() * plane);
    cache->mean.assign(dch, 0.0);
    cache->inv_std.assign(dch, 0.0);
    cache->batch_mean.assign(dch, 0.0);
    cache->batch_var.assign(dch, 0.0);
    for (std::size_t c = 0; c < dch; ++c) {
        double sum = 0.0;
        for (const Tensor& h : h_maps)
            for (std::size_t p = 0; p < plane; ++p) sum += h[c * plane + p];
        const double mu = sum / count;
        double sq = 0.0;
        for (const Tensor& h : h_maps)
            for (std::size_t p = 0; p < plane; ++p) {
                const double d = h[c * plane + p] - mu;
                sq += d * d;
            }
        const double var = sq / count;
        cache->batch_mean[c] = mu;
        cache->batch_var[c] = count > 1.0 ? sq / (count - 1.0) : 0.0;
        if (mode == Mode::Train) {
            cache->mean[c] = mu;
            cache->inv_std[c] = 1.0 / std::sqrt(var + kNormEpsilon);
        } else {
            cache->mean[c] = buffers_.value(decoder_.running_mean[task])[c];
            cache->inv_std[c] = 1.0 / std::sqrt(buffers_.value(decoder_.running_var[task])[c] + kNormEpsilon);
        }
    }

    const Tensor& gamma = params_.value(decoder_.norm_scale[task]);
    const Tensor& beta = params_.value(decoder_.norm_shift[task]);
    const Tensor& tail_bias = params_.value(decoder_.tail_bias[task]);
    ForwardPass pass;
    for (std::size_t k = 0; k < batch.size(); ++k) {
        ForwardCache::Sample& sc = cache->samples[k];
        sc.xhat = Tensor({dch, hw, hw});
        sc.z = Tensor({dch, hw, hw});
        for (std::size_t c = 0; c < dch; ++c)
            for (std::size_t p = 0; p < plane; ++p) {
                const std::size_t i = c * plane + p;
                sc.xhat[i] = (h_maps[k][i] - cache->mean[c]) * cache->inv_std[c];
                sc.z[i] = gamma[c] * sc.xhat[i] + beta[c];
            }
        sc.act = relu(sc.z);
        Tensor pred = conv2d(sc.act, cache->tail);
        for (std::size_t o = 0; o < cfg.out_channels; ++o)
            for (std::size_t p = 0; p < plane; ++p) pred[o * plane + p] += tail_bias[o];
        pass.predictions.push_back(std::move(pred));
    }
    pass.cache = std::move(cache);
    return pass;
}

void Model::update_running_stats(const ForwardPass& pass, double momentum) {
    const ForwardCache& cache = *pass.cache;
    if (cache.mode != Mode::Train) throw ContractViolation("update_running_stats: needs a Train-mode pass");
    Tensor& rm = buffers_.value(decoder_.running_mean[cache.task]);
    Tensor& rv = buffers_.value(decoder_.running_var[cache.task]);
    for (std::size_t c = 0; c < rm.size(); ++c) {
        rm[c] = (1.0 - momentum) * rm[c] + momentum * cache.batch_mean[c];
        rv[c] = (1.0 - momentum) * rv[c] + momentum * cache.batch_var[c];
    }
}

// ---------------------------------------------------------------------------
// Backward

GradientBundle Model::backward(const ForwardPass& pass, std::span<const Tensor> grad_predictions) const {
    if (!pass.cache) throw StaleCache("backward: forward pass carries no cache");
    const ForwardCache& cache = *pass.cache;
    if (cache.generation != generation_) {
        throw StaleCache("backward: parameters changed since the forward pass");
    }
    if (grad_predictions.size() != cache.samples.size()) {
        throw ContractViolation("backward: expected " + std::to_string(cache.samples.size()) +
                                " prediction gradients, got " + std::to_string(grad_predictions.size()));
    }
    const ModelConfig& cfg = config_;
    const std::size_t task = cache.task;
    const std::size_t hw = cfg.image_size, plane = hw * hw;
    const std::size_t dch = cfg.decoder_channels, pch = cfg.proj_channels;
    const std::size_t batch = cache.samples.size();

    GradientBundle out = GradientBundle::zeros_like(params_);
    const Tensor& gamma = params_.value(decoder_.norm_scale[task]);
    Tensor& g_tail_w = out.grads[decoder_.tail_weight[task]];
    Tensor& g_tail_b = out.grads[decoder_.tail_bias[task]];
    Tensor& g_gamma = out.grads[decoder_.norm_scale[task]];
    Tensor& g_beta = out.grads[decoder_.norm_shift[task]];

    // Tail conv and ReLU, then d(xhat).
    std::vector<Tensor> g_xhat(batch);
    for (std::size_t k = 0; k < batch; ++k) {
        const ForwardCache::Sample& sc = cache.samples[k];
        const Tensor& gp = grad_predictions[k];
        require_same_shape(gp, pass.predictions[k], "backward: prediction gradient");
        conv2d_accumulate_kernel_grad(sc.act, gp, g_tail_w);
        for (std::size_t o = 0; o < cfg.out_channels; ++o)
            for (std::size_t p = 0; p < plane; ++p) g_tail_b[o] += gp[o * plane + p];
        const Tensor gz = relu_backward(conv2d_backward_input(gp, cache.tail), sc.z);
        g_xhat[k] = Tensor({dch, hw, hw});
        for (std::size_t c = 0; c < dch; ++c)
            for (std::size_t p = 0; p < plane; ++p) {
                const std::size_t i = c * plane + p;
                g_gamma[c] += gz[i] * sc.xhat[i];
                g_beta[c] += gz[i];
                g_xhat[k][i] = gz[i] * gamma[c];
            }
    }

    // Normalization backward to d(h).
    std::vector<Tensor> g_h(batch, Tensor({dch, hw, hw}));
    const double count = static_cast<double>(batch * plane);
    for (std::size_t c = 0; c < dch; ++c) {
        if (cache.mode == Mode::Train) {
            double sum_g = 0.0, sum_gx = 0.0;
            for (std::size_t k = 0; k < batch; ++k)
                for (std::size_t p = 0; p < plane; ++p) {
                    const std::size_t i = c * plane + p;
                    sum_g += g_xhat[k][i];
                    sum_gx += g_xhat[k][i] * cache.samples[k].xhat[i];
                }
            for (std::size_t k = 0; k < batch; ++k)
                for (std::size_t p = 0; p < plane; ++p) {
                    const std::size_t i = c * plane + p;
                    g_h[k][i] = cache.inv_std[c] / count *
                                (count * g_xhat[k][i] - sum_g - cache.samples[k].xhat[i] * sum_gx);
                }
        } else {
            for (std::size_t k = 0; k < batch; ++k)
                for (std::size_t p = 0; p < plane; ++p) g_h[k][c * plane + p] = g_xhat[k][c * plane + p] * cache.inv_std[c];
        }
    }

    Tensor g_dec_kernel = Tensor::zeros_like(cache.decoder_kernel.final_kernel.weights());
    Tensor& g_bias = out.grads[decoder_.bias];
    std::vector<Tensor> g_ts_kernel;
    for (const TaskKernel& tk : cache.ts_kernels) g_ts_kernel.push_back(Tensor::zeros_like(tk.final_kernel.weights()));
    std::vector<std::vector<Tensor>> g_ta_kernel(4);
    for (std::size_t s = 0; s < 4; ++s)
        for (const ConvKernel& kern : cache.ta_kernels[s]) g_ta_kernel[s].push_back(Tensor::zeros_like(kern.weights()));

    for (std::size_t k = 0; k < batch; ++k) {
        const ForwardCache::Sample& sc = cache.samples[k];
        const Tensor& gh = g_h[k];
        for (std::size_t c = 0; c < dch; ++c)
            for (std::size_t p = 0; p < plane; ++p) g_bias(task, c) += gh[c * plane + p];
        conv2d_accumulate_kernel_grad(sc.concat, gh, g_dec_kernel);
        const Tensor g_concat = conv2d_backward_input(gh, cache.decoder_kernel.final_kernel);

        // Projections back to stage outputs.
        std::vector<Tensor> g_stage(4);
        for (std::size_t s = 0; s < 4; ++s) {
            const Tensor part({pch, hw, hw}, std::vector<double>(g_concat.raw() + s * pch * plane,
                                                                 g_concat.raw() + (s + 1) * pch * plane));
            const Tensor& g_out = sc.stage_out[s];
            const Tensor g_proj_out = upsample_nearest_backward(part, g_out.dim(1), g_out.dim(2));
            conv2d_accumulate_kernel_grad(sc.stage_out[s], g_proj_out, out.grads[decoder_.proj[s][task]]);
            g_stage[s] = conv2d_backward_input(g_proj_out, cache.proj[s]);
        }

        // Encoder, last stage first.
        Tensor gy = g_stage[3];
        std::size_t frozen = backbone_.size();
        for (std::size_t si = 4; si-- > 0;) {
            const std::size_t layers = sc.layer_input[si].size();
            for (std::size_t li = layers; li-- > 0;) {
                const Tensor& x = sc.layer_input[si][li];
                const Tensor& pre = sc.layer_pre[si][li];
                --frozen;
                Tensor gx = conv2d_backward_input(relu_backward(gy, pre), backbone_[frozen]);
                if (li + 1 == layers) {
                    conv2d_accumulate_kernel_grad(x, gy, g_ts_kernel[si]);
                    gx += conv2d_backward_input(gy, cache.ts_kernels[si].final_kernel);
                } else {
                    conv2d_accumulate_kernel_grad(x, gy, g_ta_kernel[si][li]);
                    gx += conv2d_backward_input(gy, cache.ta_kernels[si][li]);
                }
                gy = std::move(gx);
            }
            gy = avg_pool2_backward(gy);
            if (si > 0) gy += g_stage[si - 1];
        }
    }

    // Kernel gradients back to adapter parameters.
    for (std::size_t s = 0; s < 4; ++s) {
        backprop_task_kernel(ts_layers_[s].module, task, cache.ts_kernels[s], g_ts_kernel[s], out);
        for (std::size_t l = 0; l < ta_layers_[s].size(); ++l) {
            const TALayer& layer = ta_layers_[s][l];
            const LowRankFactors f(params_.value(layer.a), params_.value(layer.b));
            MidKernel mid(ConvKernel(Tensor({f.r(), f.r(), 1, 1}, 0.0)));
            for (std::size_t j = 0; j < f.r(); ++j) mid.W(j, j, 0, 0) = 1.0;
            const FuseGradients fg = fuse_backward(f, mid, g_ta_kernel[s][l]);
            out.grads[layer.a] += fg.A;
            out.grads[layer.b] += fg.B;
        }
    }
    backprop_task_kernel(decoder_.module, task, cache.decoder_kernel, g_dec_kernel, out);
    return out;
}

ParameterCounts Model::parameter_counts() const {
    ParameterCounts pc;
    pc.total = params_.scalar_count();
    for (const auto& stage : ta_layers_)
        for (const TALayer& l : stage) pc.encoder_ta += params_.value(l.a).size() + params_.value(l.b).size();
    for (const TSLayer& l : ts_layers_) {
        std::size_t base = 0;
        for (std::size_t i = 0; i < l.module.a.size(); ++i)
            base += params_.value(l.module.a[i]).size() + params_.value(l.module.b[i]).size() +
                    params_.value(l.module.w[i]).size();
        const std::size_t clock =
            l.module.has_clock ? params_.value(l.module.wq).size() + 2 : 0;
        pc.ts_layer_base.push_back(base);
        pc.ts_layer_clock.push_back(clock);
        pc.encoder_ts += base + clock;
    }
    pc.tokens = has_tokens_ ? params_.value(tokens_).size() : 0;
    pc.decoder = pc.total - pc.encoder_ta - pc.encoder_ts - pc.tokens;
    return pc;
}

// ---------------------------------------------------------------------------
// Losses and gradient checking

double mse(const Tensor& prediction, const Tensor& target) {
    require_same_shape(prediction, target, "mse");
    double s = 0.0;
    for (std::size_t i = 0; i < prediction.size(); ++i) {
        const double d = prediction[i] - target[i];
        s += d * d;
    }
    return s / static_cast<double>(prediction.size());
}

Tensor mse_grad(const Tensor& prediction, const Tensor& target, double scale) {
    require_same_shape(prediction, target, "mse_grad");
    Tensor g = Tensor::zeros_like(prediction);
    const double f = 2.0 * scale / static_cast<double>(prediction.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = f * (prediction[i] - target[i]);
    return g;
}

double GradCheckReport::worst() const {
    double w = 0.0;
    for (const TensorCheck& t : tensors) w = std::max(w, t.max_rel_error);
    return w;
}

double gradient_relative_error(std::span<const double> analytic, std::span<const double> numeric, double floor) {
    if (analytic.size() != numeric.size()) throw ContractViolation("gradient_relative_error: length mismatch");
    double diff = 0.0, scale = floor;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
        scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
    }
    return diff / scale;
}

GradCheckReport check_gradients(ParameterSet& params, const std::function<double()>& loss,
                                const GradientBundle& analytic, double h, std::size_t max_parameters,
                                double floor) {
    if (params.scalar_count() > max_parameters) {
        throw GradCheckRefused("gradient check refused: " + std::to_string(params.scalar_count()) +
                               " parameters exceed the limit of " + std::to_string(max_parameters));
    }
    if (analytic.grads.size() != params.size()) throw ContractViolation("check_gradients: bundle does not align");
    GradCheckReport report;
    for (std::size_t t = 0; t < params.size(); ++t) {
        Tensor& value = params.value(t);
        std::vector<double> numeric(value.size());
        for (std::size_t i = 0; i < value.size(); ++i) {
            const double saved = value[i];
            value[i] = saved + h;
            const double plus = loss();
            value[i] = saved - h;
            const double minus = loss();
            value[i] = saved;
            numeric[i] = (plus - minus) / (2.0 * h);
        }
        report.tensors.push_back(
            TensorCheck{params.name(t), value.size(), gradient_relative_error(analytic.grads[t].data(), numeric, floor)});
    }
    return report;
}

double multitask_loss(const Model& model, std::span<const Tensor> inputs,
                      const std::vector<std::vector<Tensor>>& targets) {
    double total = 0.0;
    for (std::size_t t = 0; t < targets.size(); ++t) {
        const ForwardPass pass = model.forward(inputs, t, Mode::Train);
        double task_loss = 0.0;
        for (std::size_t k = 0; k < inputs.size(); ++k) task_loss += mse(pass.predictions[k], targets[t][k]);
        total += task_loss / static_cast<double>(inputs.size());
    }
    return total;
}

GradientBundle multitask_gradient(const Model& model, std::span<const Tensor> inputs,
                                  const std::vector<std::vector<Tensor>>& targets) {
    GradientBundle total = GradientBundle::zeros_like(model.parameters());
    for (std::size_t t = 0; t < targets.size(); ++t) {
        const ForwardPass pass = model.forward(inputs, t, Mode::Train);
        std::vector<Tensor> grads;
        for (std::size_t k = 0; k < inputs.size(); ++k)
            grads.push_back(mse_grad(pass.predictions[k], targets[t][k], 1.0 / static_cast<double>(inputs.size())));
        total += model.backward(pass, grads);
    }
    return total;
}

GradCheckReport finite_diff_check(Model& model, std::span<const Tensor> inputs,
                                  const std::vector<std::vector<Tensor>>& targets, double h) {
    const GradientBundle analytic = multitask_gradient(model, inputs, targets);
    double largest = 0.0;
    for (const Tensor& g : analytic.grads) largest = std::max(largest, g.max_abs());
    const Model& view = model;
    return check_gradients(
        model.parameters(), [&] { return multitask_loss(view, inputs, targets); }, analytic, h, 50'000,
        std::max(1e-8, 1e-4 * largest));
}

}  // namespace sinewich
