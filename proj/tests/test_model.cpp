#include <gtest/gtest.h>

#include <cmath>

#include "sinewich/model.hpp"
#include "test_support.hpp"

using namespace sinewich;
using sinewich::testing::random_tensor;

namespace {

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.in_channels = 4;
    cfg.image_size = 16;
    cfg.stage_channels = {4, 4, 6, 6};
    cfg.proj_channels = 2;
    cfg.decoder_channels = 4;
    cfg.decoder_rank = 2;
    return cfg;
}

// Moves every parameter off its initialization so zero-initialized factors carry gradient.
void perturb(Model& model, std::uint64_t seed) {
    ParameterSet& params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) params.value(i) += random_tensor(params.value(i).shape(), seed, i, 0.3);
}

struct Batch {
    std::vector<Tensor> inputs;
    std::vector<std::vector<Tensor>> targets;
};

Batch make_batch(const ModelConfig& cfg, std::size_t n, std::uint64_t seed) {
    Batch b;
    const Shape in{cfg.in_channels, cfg.image_size, cfg.image_size};
    const Shape out{cfg.out_channels, cfg.image_size, cfg.image_size};
    for (std::size_t k = 0; k < n; ++k) b.inputs.push_back(random_tensor(in, seed, 1000 + k));
    for (std::size_t t = 0; t < cfg.tasks; ++t) {
        b.targets.emplace_back();
        for (std::size_t k = 0; k < n; ++k) b.targets[t].push_back(random_tensor(out, seed, 2000 + t * 100 + k));
    }
    return b;
}

}  // namespace

TEST(Model, FullGradientMatchesFiniteDifferences) {
    const ModelConfig cfg = small_config();
    Model model(cfg);
    perturb(model, 7);
    const Batch b = make_batch(cfg, 2, 11);
    const GradCheckReport report = finite_diff_check(model, b.inputs, b.targets);
    for (const TensorCheck& t : report.tensors) EXPECT_LT(t.max_rel_error, 1e-4) << t.name;
}

TEST(Model, LinearAndUnmodulatedVariantsPassGradientCheck) {
    for (Modulation mod : {Modulation::Linear, Modulation::None}) {
        ModelConfig cfg = small_config();
        cfg.modulation = mod;
        cfg.independent_base = true;
        cfg.filter.reset();
        Model model(cfg);
        perturb(model, 3);
        const Batch b = make_batch(cfg, 2, 5);
        const GradCheckReport report = finite_diff_check(model, b.inputs, b.targets);
        for (const TensorCheck& t : report.tensors) EXPECT_LT(t.max_rel_error, 1e-4) << to_string(mod) << " " << t.name;
    }
}

TEST(Model, BackwardRejectsStaleCache) {
    const ModelConfig cfg = small_config();
    Model model(cfg);
    const Batch b = make_batch(cfg, 1, 2);
    const ForwardPass pass = model.forward(b.inputs, 0);
    model.parameters().value(0)[0] += 0.1;
    const std::vector<Tensor> grads{Tensor::zeros_like(pass.predictions[0])};
    EXPECT_THROW(model.backward(pass, grads), StaleCache);
    EXPECT_THROW(model.backward(ForwardPass{}, grads), StaleCache);
}

TEST(Model, ZeroUpstreamGivesZeroGradients) {
    const ModelConfig cfg = small_config();
    Model model(cfg);
    perturb(model, 1);
    const Batch b = make_batch(cfg, 2, 3);
    const ForwardPass pass = model.forward(b.inputs, 1);
    std::vector<Tensor> grads;
    for (const Tensor& p : pass.predictions) grads.push_back(Tensor::zeros_like(p));
    const GradientBundle g = model.backward(pass, grads);
    for (const Tensor& t : g.grads) EXPECT_EQ(t.max_abs(), 0.0);
}

TEST(Model, ForwardIsPureAndDeterministic) {
    const ModelConfig cfg = small_config();
    Model model(cfg);
    perturb(model, 4);
    const Batch b = make_batch(cfg, 2, 6);
    const ParameterSet before = model.parameters();
    const ForwardPass p1 = model.forward(b.inputs, 2);
    const ForwardPass p2 = model.forward(b.inputs, 2);
    EXPECT_EQ(p1.predictions, p2.predictions);
    for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before.value(i), model.parameters().value(i));
    Model twin(cfg);
    perturb(twin, 4);
    EXPECT_EQ(twin.forward(b.inputs, 2).predictions, p1.predictions);
}

TEST(Model, EvalModeUsesRunningStatistics) {
    const ModelConfig cfg = small_config();
    Model model(cfg);
    const Batch b = make_batch(cfg, 2, 8);
    const ForwardPass eval_before = model.forward(b.inputs, 0, Mode::Eval);
    model.update_running_stats(model.forward(b.inputs, 0, Mode::Train));
    EXPECT_NE(model.forward(b.inputs, 0, Mode::Eval).predictions, eval_before.predictions);
    EXPECT_EQ(model.forward(b.inputs, 1, Mode::Eval).predictions, model.forward(b.inputs, 1, Mode::Eval).predictions);
}

TEST(Model, EqualTokensGiveEqualEncoderFeatures) {
    ModelConfig cfg = small_config();
    Model model(cfg);
    perturb(model, 9);
    Tensor& tokens = model.parameters().value(model.parameters().index_of("tokens"));
    for (std::size_t c = 0; c < cfg.token_width; ++c) tokens(1, c) = tokens(0, c);
    const Tensor x = random_tensor({cfg.in_channels, cfg.image_size, cfg.image_size}, 9, 1);
    EXPECT_EQ(model.encode(x, 0), model.encode(x, 1));
    EXPECT_NE(model.encode(x, 0), model.encode(x, 2));
    for (std::size_t l = 0; l < model.ts_layer_count(); ++l)
        EXPECT_EQ(model.task_frequency(l, 0), model.task_frequency(l, 1));
}

TEST(Model, ZeroAdaptersRecoverBackbone) {
    ModelConfig cfg = small_config();
    cfg.modulation = Modulation::Sine;
    Model model(cfg);
    ParameterSet& p = model.parameters();
    for (std::size_t i = 0; i < p.size(); ++i)
        if (p.name(i).starts_with("encoder.") && (p.name(i).ends_with(".B"))) p.value(i).fill(0.0);
    const Tensor x = random_tensor({cfg.in_channels, cfg.image_size, cfg.image_size}, 3, 1);
    const std::vector<Tensor> adapted = model.encode(x, 0), frozen = model.backbone_features(x);
    ASSERT_EQ(adapted.size(), frozen.size());
    for (std::size_t s = 0; s < adapted.size(); ++s) EXPECT_LT(max_abs_diff(adapted[s], frozen[s]), 1e-14);
}

TEST(ModelParameters, SharedBaseAuditAgainstIndependentBase) {
    for (std::size_t tasks : {2u, 3u, 4u}) {
        ModelConfig shared = small_config();
        shared.tasks = tasks;
        ModelConfig independent = shared;
        independent.independent_base = true;
        const ParameterCounts a = Model(shared).parameter_counts();
        const ParameterCounts b = Model(independent).parameter_counts();
        ASSERT_EQ(a.ts_layer_base.size(), 4u);
        std::size_t expected_gap = 0;
        for (std::size_t s = 0; s < 4; ++s) {
            const std::size_t c = shared.stage_channels[s];
            const std::size_t base = fused_parameter_count(c, c, shared.ts_rank, shared.ts_kernel);
            EXPECT_EQ(a.ts_layer_base[s], base);
            EXPECT_EQ(b.ts_layer_base[s], tasks * base);
            EXPECT_EQ(a.ts_layer_clock[s], shared.token_width + 2);
            expected_gap += (tasks - 1) * base;
        }
        EXPECT_EQ(b.total - a.total, expected_gap);
        EXPECT_LT(a.total, b.total);
        EXPECT_EQ(a.total, Model(shared).parameters().scalar_count());
        EXPECT_EQ(a.tokens, tasks * shared.token_width);
    }
}

TEST(ModelParameters, DefaultConfigBudget) {
    const ParameterCounts pc = Model(ModelConfig{}).parameter_counts();
    EXPECT_EQ(pc.total, pc.encoder_ta + pc.encoder_ts + pc.tokens + pc.decoder);
    EXPECT_LT(pc.total, 50'000u);
}

TEST(GradientCheck, RefusesLargeModelsAndCatchesSignFlip) {
    const ModelConfig cfg = small_config();
    Model model(cfg);
    perturb(model, 12);
    const Batch b = make_batch(cfg, 1, 13);
    GradientBundle g = multitask_gradient(model, b.inputs, b.targets);
    auto loss = [&] { return multitask_loss(model, b.inputs, b.targets); };
    EXPECT_THROW(check_gradients(model.parameters(), loss, g, 1e-6, 10), GradCheckRefused);
    g.scale(-1.0);
    EXPECT_GT(check_gradients(model.parameters(), loss, g).worst(), 0.1);
}

TEST(ModelConfigValidation, RejectsBadLayouts) {
    ModelConfig cfg = small_config();
    cfg.tasks = 0;
    EXPECT_THROW(Model{cfg}, ContractViolation);
    cfg = small_config();
    cfg.image_size = 12;
    EXPECT_THROW(Model{cfg}, ContractViolation);
    cfg = small_config();
    cfg.ts_rank = 9;
    EXPECT_THROW(Model{cfg}, ContractViolation);
}
