// Acceptance run: one PASS/FAIL line per criterion. Exit status is nonzero when
// any criterion fails. Pass criterion numbers as arguments to run a subset.
#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sinewich/adapter.hpp"
#include "sinewich/analysis.hpp"
#include "sinewich/model.hpp"
#include "sinewich/numerics.hpp"
#include "sinewich/trainer.hpp"
#include "test_support.hpp"

using namespace sinewich;
using sinewich::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

// Tolerances and sizes.
constexpr double kDeltaMTolerance = 0.01;
constexpr double kProp2Tolerance = 1e-12;
constexpr std::size_t kProp1Trials = 100;
constexpr std::size_t kProp1Samples = 100'000;
constexpr std::size_t kProp1MinWithin = 95;
constexpr double kProp1OracleBound = 0.01;
constexpr double kFusionTolerance = 1e-10;
constexpr double kIsolatedGradTolerance = 1e-5;
constexpr double kModelGradTolerance = 1e-4;
constexpr std::size_t kFrequencyDraws = 10'000;
constexpr double kRankEpsilon = 1e-6;
constexpr double kRankExpandFraction = 0.8;
constexpr double kRankBelowFraction = 0.05;
constexpr double kLowpassConstantTolerance = 1e-12;
constexpr double kLowpassCheckerboardBound = 0.05;
constexpr std::size_t kAblationSeeds = 5;
constexpr std::size_t kAblationMinWins = 4;

struct Outcome {
    bool passed = false;
    std::string detail;
};

std::string fmt(double v, int digits = 3) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", digits, v);
    return buf;
}

struct Run {
    int status = -1;
    std::string out;
};

Run cli(const std::string& args) {
    const std::string cmd = std::string(SINEWICH_CLI) + " " + args + " 2>/dev/null";
    Run r;
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) return r;
    char buf[4096];
    std::size_t n;
    while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
    const int raw = pclose(pipe);
    r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

double corr_closed_form(double ws, double wt, double sigma) {
    const double s2 = sigma * sigma;
    const double cross = 0.5 * (std::exp(-(ws - wt) * (ws - wt) * s2 / 2) - std::exp(-(ws + wt) * (ws + wt) * s2 / 2));
    const double vs = 0.5 * (1 - std::exp(-2 * ws * ws * s2));
    const double vt = 0.5 * (1 - std::exp(-2 * wt * wt * s2));
    return cross / std::sqrt(vs * vt);
}

// Projection by A^T, direct convolution by W, expansion by B; every loop written out.
Tensor three_stage(const LowRankFactors& f, const MidKernel& mid, const Tensor& x) {
    const std::size_t h = x.dim(1), w = x.dim(2), r = f.r(), k = mid.size(), half = k / 2;
    Tensor z({r, h, w});
    for (std::size_t a = 0; a < r; ++a)
        for (std::size_t i = 0; i < f.m(); ++i)
            for (std::size_t p = 0; p < h * w; ++p) z[a * h * w + p] += f.A(i, a) * x[i * h * w + p];
    Tensor y({r, h, w});
    for (std::size_t a = 0; a < r; ++a)
        for (std::size_t yy = 0; yy < h; ++yy)
            for (std::size_t xx = 0; xx < w; ++xx) {
                double s = 0;
                for (std::size_t b = 0; b < r; ++b)
                    for (std::size_t u = 0; u < k; ++u)
                        for (std::size_t v = 0; v < k; ++v) {
                            const long sy = static_cast<long>(yy + u) - static_cast<long>(half);
                            const long sx = static_cast<long>(xx + v) - static_cast<long>(half);
                            if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(w)) continue;
                            s += mid.W(a, b, u, v) * z(b, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
                        }
                y(a, yy, xx) = s;
            }
    Tensor out({f.n(), h, w});
    for (std::size_t o = 0; o < f.n(); ++o)
        for (std::size_t a = 0; a < r; ++a)
            for (std::size_t p = 0; p < h * w; ++p) out[o * h * w + p] += f.B(o, a) * y[a * h * w + p];
    return out;
}

// ---------------------------------------------------------------------------

Outcome criterion_delta_m() {
    const Run t1 = cli("delta-m --st 67.21,61.93,62.35,17.97 --mtl 71.25,61.38,66.24,16.14 --signs 0,0,0,1");
    const Run t2 = cli("delta-m --st 42.59,66.08,59.80,22.58 --mtl 42.26,64.08,59.40,23.41 --signs 0,1,0,1");
    if (t1.status != 0 || t2.status != 0) return {false, "delta-m exited nonzero"};
    const double a = std::stod(t1.out), b = std::stod(t2.out);
    const bool ok = std::abs(a - 5.39) <= kDeltaMTolerance && std::abs(b + 0.52) <= kDeltaMTolerance;
    return {ok, "reference rows give " + t1.out.substr(0, t1.out.size() - 1) + " and " + t2.out.substr(0, t2.out.size() - 1) +
                    " (expected +5.39, -0.52, tol " + fmt(kDeltaMTolerance) + ")"};
}

Outcome criterion_prop2() {
    double worst = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        RandomStream rng(seed, 77);
        const std::size_t m = 2 + rng.below(14), n = 2 + rng.below(14), r = 1 + rng.below(std::min(m, n));
        const LowRankFactors f(random_tensor({m, r}, seed, 1), random_tensor({n, r}, seed, 2));
        const MidKernel mid(ConvKernel(random_tensor({r, r, 3, 3}, seed, 3)));
        const FusedKernel base = fuse_awb(f, mid);
        double ws = 0, wt = 0;
        while (ws == 0) ws = rng.uniform(-10, 10);
        while (wt == 0) wt = rng.uniform(-10, 10);
        const double c = vec_correlation(linear_scale(base, ws).kernel.weights(), linear_scale(base, wt).kernel.weights());
        worst = std::max(worst, std::abs(std::abs(c) - 1.0));
    }
    return {worst <= kProp2Tolerance, "max ||corr| - 1| = " + fmt(worst) + " over 100 bases (tol 1e-12)"};
}

Outcome criterion_prop1() {
    RandomStream rng(2024, 0);
    std::vector<CorrTrial> trials;
    while (trials.size() < kProp1Trials) {
        const double sigma = rng.uniform(0.25, 2.5), ws = rng.uniform(0.5, 12.0), wt = rng.uniform(0.5, 12.0);
        if (std::min(std::abs(ws - wt), std::abs(ws + wt)) * sigma >= 4.0) trials.push_back({ws, wt, sigma});
    }
    std::size_t within = 0;
    double max_oracle = 0, max_formula_gap = 0;
    for (std::size_t i = 0; i < trials.size(); ++i) {
        RandomStream stream(2024, 1000 + i);
        const CorrelationEstimate e = monte_carlo_corr(trials[i].omega_s, trials[i].omega_t, trials[i].sigma,
                                                       kProp1Samples, stream);
        const double oracle = corr_closed_form(trials[i].omega_s, trials[i].omega_t, trials[i].sigma);
        max_formula_gap = std::max(
            max_formula_gap, std::abs(oracle - gaussian_corr_oracle(trials[i].omega_s, trials[i].omega_t, trials[i].sigma)));
        if (std::abs(e.mean - oracle) <= 3 * e.std_error) ++within;
        max_oracle = std::max(max_oracle, std::abs(oracle));
    }
    const bool ok = within >= kProp1MinWithin && max_oracle < kProp1OracleBound && max_formula_gap < 1e-12;
    return {ok, std::to_string(within) + "/100 within 3 stderr, max |oracle| " + fmt(max_oracle) +
                    ", library vs test-side closed form " + fmt(max_formula_gap)};
}

Outcome criterion_fusion() {
    double worst = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        RandomStream rng(seed, 31);
        const std::size_t m = 1 + rng.below(8), n = 1 + rng.below(8), r = 1 + rng.below(std::min(m, n));
        const std::size_t k = 2 * rng.below(3) + 1, h = 3 + rng.below(8), w = 3 + rng.below(8);
        const LowRankFactors f(random_tensor({m, r}, seed, 1), random_tensor({n, r}, seed, 2));
        const MidKernel mid(ConvKernel(random_tensor({r, r, k, k}, seed, 3)));
        const Tensor x = random_tensor({m, h, w}, seed, 4);
        worst = std::max(worst, max_abs_diff(conv2d(x, fuse_awb(f, mid).kernel4d), three_stage(f, mid, x)));
    }
    return {worst <= kFusionTolerance, "max abs diff " + fmt(worst) + " over 100 instances (tol 1e-10)"};
}

Outcome criterion_gradients() {
    double isolated = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        ParameterSet p;
        p.add("A", random_tensor({5, 2}, seed, 0));
        p.add("B", random_tensor({4, 2}, seed, 1));
        p.add("W", random_tensor({2, 2, 3, 3}, seed, 2));
        p.add("Wq", random_tensor({1, 6}, seed, 3, 0.5));
        p.add("s", Tensor::scalar(1.2));
        p.add("c", Tensor::scalar(0.8));
        p.add("p", random_tensor({6}, seed, 4));
        const Tensor up = random_tensor({4, 5, 3, 3}, seed, 5);
        const FilterSpec filt{7, 1.0};
        for (int mode = 0; mode < 2; ++mode) {
            auto forward = [&](const ParameterSet& q) {
                const ClockNetParams cp(q.value(3), q.value(4)[0], q.value(5)[0]);
                const double omega = clocknet_forward(cp, {q.value(6), 0});
                const FusedKernel fk = fuse_awb(LowRankFactors(q.value(0), q.value(1)), MidKernel(ConvKernel(q.value(2))));
                const ModulatedKernel mk = mode == 0 ? sine_modulate(fk, omega) : linear_scale(fk, omega);
                return dot(up, lowpass_filter(mk, filt.size, filt.sigma).kernel.weights());
            };
            const ClockNetParams cp(p.value(3), p.value(4)[0], p.value(5)[0]);
            const TaskToken tok{p.value(6), 0};
            const LowRankFactors f(p.value(0), p.value(1));
            const MidKernel mid(ConvKernel(p.value(2)));
            const FusedKernel fk = fuse_awb(f, mid);
            const double omega = clocknet_forward(cp, tok);
            const Tensor g_mod = lowpass_backward(up, filt.size, filt.sigma);
            const SineGradients sg = mode == 0 ? sine_backward(fk, omega, g_mod) : linear_scale_backward(fk, omega, g_mod);
            const FuseGradients fg = fuse_backward(f, mid, sg.base);
            const ClockNetGradients cg = clocknet_backward(cp, tok, sg.omega);
            const GradientBundle g{{fg.A, fg.B, fg.W, cg.Wq, Tensor::scalar(cg.s), Tensor::scalar(cg.c), cg.p}};
            isolated = std::max(isolated, check_gradients(p, [&] { return forward(p); }, g).worst());
        }
        // Convolution with respect to input and kernel.
        ParameterSet cp;
        cp.add("x", random_tensor({3, 6, 5}, seed, 6));
        cp.add("k", random_tensor({2, 3, 3, 3}, seed, 7));
        const Tensor u = random_tensor({2, 6, 5}, seed, 8);
        GradientBundle cg{{conv2d_backward_input(u, ConvKernel(cp.value(1))), Tensor({2, 3, 3, 3})}};
        conv2d_accumulate_kernel_grad(cp.value(0), u, cg.grads[1]);
        isolated = std::max(
            isolated, check_gradients(cp, [&] { return dot(u, conv2d(cp.value(0), ConvKernel(cp.value(1)))); }, cg).worst());
    }

    ModelConfig cfg;
    Model model(cfg);
    ParameterSet& params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) params.value(i) += random_tensor(params.value(i).shape(), 99, i, 0.3);
    std::vector<Tensor> inputs;
    std::vector<std::vector<Tensor>> targets(cfg.tasks);
    for (std::size_t k = 0; k < 2; ++k) {
        inputs.push_back(random_tensor({cfg.in_channels, cfg.image_size, cfg.image_size}, 98, k));
        for (std::size_t t = 0; t < cfg.tasks; ++t)
            targets[t].push_back(random_tensor({cfg.out_channels, cfg.image_size, cfg.image_size}, 97, t * 10 + k));
    }
    const GradCheckReport report = finite_diff_check(model, inputs, targets);
    std::string worst_name;
    double full = 0;
    for (const TensorCheck& t : report.tensors)
        if (t.max_rel_error > full) {
            full = t.max_rel_error;
            worst_name = t.name;
        }
    const bool ok = isolated < kIsolatedGradTolerance && full < kModelGradTolerance;
    return {ok, "isolated ops " + fmt(isolated) + " (tol 1e-5), default model " + fmt(full) + " at " + worst_name +
                    " over " + std::to_string(report.tensors.size()) + " tensors (tol 1e-4)"};
}

Outcome criterion_frequency_bound() {
    RandomStream rng(4242, 0);
    double worst = 0;
    for (std::size_t i = 0; i < kFrequencyDraws; ++i) {
        const std::size_t c = 1 + rng.below(32);
        const double s = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.05, 20.0);
        const double offset = rng.uniform(-5.0, 5.0);
        const Tensor wq = sample_gaussian(rng, {1, c}, rng.uniform(0.01, 1.5) / std::sqrt(static_cast<double>(c)));
        const Tensor p = sample_gaussian(rng, {c}, rng.uniform(0.1, 4.0));
        const double omega = clocknet_forward(ClockNetParams(wq, s, offset), {p, 0});
        worst = std::max(worst, std::abs(omega - s * offset) / std::abs(s));
    }
    return {worst < 1.0, "max |omega - s c| / |s| = " + fmt(worst, 12) + " over 10^4 draws (must be < 1)"};
}

Outcome criterion_rank() {
    std::string detail;
    bool ok = true;
    for (std::size_t r : {1u, 2u, 4u}) {
        std::size_t expand = 0, below = 0;
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            RandomStream rng(seed, 500 + r);
            const double omega = rng.uniform(1.0, 8.0);
            const Tensor m = matmul(random_tensor({32, r}, seed, 10 * r), transpose(random_tensor({32, r}, seed, 10 * r + 1)));
            const std::size_t base = rank_report(m, kRankEpsilon).eps_rank;
            const std::size_t sine = rank_report(sine_map(m, omega), kRankEpsilon).eps_rank;
            if (sine > r) ++expand;
            if (sine < base) ++below;
        }
        ok = ok && expand >= kRankExpandFraction * 20 && below <= kRankBelowFraction * 20;
        detail += "r=" + std::to_string(r) + ": " + std::to_string(expand) + "/20 expand, " + std::to_string(below) +
                  " below; ";
    }
    return {ok, detail + "need >= 16 expand, <= 1 below"};
}

Outcome criterion_lowpass() {
    ConvKernel constant(16, 16, 5, 5);
    constant.weights().fill(-0.7);
    const Tensor cv = to_matrix_view(lowpass_filter({constant, 1.0, std::nullopt}, 7, 1.0).kernel);
    Tensor board({16, 16 * 25});
    for (std::size_t i = 0; i < board.dim(0); ++i)
        for (std::size_t j = 0; j < board.dim(1); ++j) board(i, j) = ((i + j) % 2 == 0) ? 1.0 : -1.0;
    const Tensor bv = to_matrix_view(lowpass_filter({from_matrix_view(board, 16, 5), 1.0, std::nullopt}, 7, 1.0).kernel);
    double const_err = 0, board_max = 0;
    for (std::size_t i = 3; i + 3 < cv.dim(0); ++i)
        for (std::size_t j = 3; j + 3 < cv.dim(1); ++j) {
            const_err = std::max(const_err, std::abs(cv(i, j) + 0.7));
            board_max = std::max(board_max, std::abs(bv(i, j)));
        }
    const bool ok = const_err <= kLowpassConstantTolerance && board_max < kLowpassCheckerboardBound;
    return {ok, "interior constant error " + fmt(const_err) + " (tol 1e-12), checkerboard max " + fmt(board_max) +
                    " (< 0.05)"};
}

Outcome criterion_ablation() {
    const std::size_t threads = default_thread_count();
    std::size_t wins = 0;
    std::string detail;
    bool recompute_ok = true;
    for (std::uint64_t seed = 0; seed < kAblationSeeds; ++seed) {
        TrainConfig cfg;
        cfg.seed = seed;
        TrainOptions opts;
        opts.threads = threads;
        opts.baseline = single_task_baselines(cfg, threads);
        std::vector<double> dm;
        for (Variant v : {Variant::Sinewich, Variant::NoModulation}) {
            cfg.variant = v;
            double value = -1e300;
            try {
                const RunReport r = train(cfg, opts);
                value = *r.delta_m;
                const std::vector<bool> lower(r.tasks.size(), true);
                double manual = 0;
                for (std::size_t t = 0; t < r.baseline.size(); ++t)
                    manual -= (r.final_val_metric[t] - r.baseline[t]) / r.baseline[t];
                manual *= 100.0 / static_cast<double>(r.baseline.size());
                recompute_ok = recompute_ok && std::abs(manual - value) < 1e-9 * std::max(1.0, std::abs(value));
            } catch (const TrainingDiverged&) {
            }
            dm.push_back(value);
        }
        if (dm[0] > dm[1]) ++wins;
        if (!detail.empty()) detail += "; ";
        detail += "seed " + std::to_string(seed) + " " + format_delta_m(dm[0]) + " vs " + format_delta_m(dm[1]);
    }
    bool audit = true;
    for (std::size_t tasks : {2u, 3u, 4u}) {
        TrainConfig shared;
        shared.tasks = tasks;
        TrainConfig independent = shared;
        independent.variant = Variant::IndependentBase;
        audit = audit && Model(shared.model_config()).parameter_counts().total <
                             Model(independent.model_config()).parameter_counts().total;
    }
    const bool ok = wins >= kAblationMinWins && audit && recompute_ok;
    return {ok, std::to_string(wins) + "/5 seeds sinewich > no-modulation (" + detail + "); shared < independent base: " +
                    (audit ? "yes" : "no") + "; report delta_m recomputed: " + (recompute_ok ? "yes" : "no")};
}

Outcome criterion_determinism() {
    const fs::path root = fs::temp_directory_path() / "sinewich_acceptance";
    fs::remove_all(root);
    fs::create_directories(root);
    struct Case {
        std::string name;
        std::string args;  // "{out}" is replaced by an output path per repetition
        std::vector<std::string> files;
        bool threaded = false;
    };
    const std::string small = " --config epochs=2 --config train_samples=8 --config val_samples=4 --config image_size=16";
    const std::vector<Case> cases = {
        {"delta-m", "delta-m --st 1,2,3 --mtl 1.5,1.8,3.3 --signs 0,1,0", {}},
        {"analyze-corr", "analyze-corr --omega-s 1:3 --omega-t 4,7 --samples 5000 --out {out}/corr.csv", {"corr.csv"}, true},
        {"analyze-rank", "analyze-rank --rank 1,2 --omega 2,5 --seeds 3 --out {out}/rank.csv", {"rank.csv"}},
        {"gradcheck", "gradcheck --config image_size=16 --batch 1 --out {out}/grad.csv", {"grad.csv"}},
        {"verify", "verify --suite prop2 --suite lowpass --suite fusion --out {out}/verify.json", {"verify.json"}, true},
        {"train", "train" + small + " --out {out} --checkpoint {out}/model.ckpt",
         {"resolved-config.json", "report.json", "metrics.csv", "gradsim.csv", "model.ckpt"}, true},
    };
    std::string failed;
    for (const Case& c : cases) {
        std::vector<std::string> outputs;
        for (int rep = 0; rep < 2; ++rep) {
            const fs::path dir = root / (c.name + std::to_string(rep));
            fs::create_directories(dir);
            std::string args = c.args;
            for (std::size_t pos; (pos = args.find("{out}")) != std::string::npos;) args.replace(pos, 5, dir.string());
            if (c.threaded && rep == 1) args += " --threads 2";
            const Run r = cli(args);
            std::string all = std::to_string(r.status) + "\n" + r.out;
            for (const std::string& f : c.files) all += "\n--" + f + "\n" + slurp(dir / f);
            outputs.push_back(all);
        }
        if (outputs[0] != outputs[1] || outputs[0].rfind("0\n", 0) != 0) failed += c.name + " ";
    }
    fs::remove_all(root);
    return {failed.empty(), failed.empty() ? "6 subcommands byte-identical across repeated runs"
                                           : "differing or failing: " + failed};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"delta-m arithmetic", criterion_delta_m},
        {"linear-scale correlation exactness", criterion_prop2},
        {"sine decorrelation against closed form", criterion_prop1},
        {"fusion equivalence", criterion_fusion},
        {"gradient correctness", criterion_gradients},
        {"frequency boundedness", criterion_frequency_bound},
        {"rank expansion", criterion_rank},
        {"low-pass behavior", criterion_lowpass},
        {"ablation direction and parameter audit", criterion_ablation},
        {"determinism", criterion_determinism},
    };
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::stoi(argv[i]));
    bool all = true;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i + 1);
        if (!only.empty() && !only.count(id)) continue;
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        all = all && o.passed;
        std::cout << (o.passed ? "PASS" : "FAIL") << " " << id << " " << criteria[i].first << ": " << o.detail << " ["
                  << fmt(secs) << " s]" << std::endl;
    }
    return all ? 0 : 1;
}
