// sinewich: verification, analysis, gradient checking, toy training and the delta-m metric.

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sinewich/analysis.hpp"
#include "sinewich/checkpoint.hpp"
#include "sinewich/model.hpp"
#include "sinewich/numerics.hpp"
#include "sinewich/trainer.hpp"
#include "sinewich/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;
using namespace sinewich;

namespace {

constexpr int kOk = 0;
constexpr int kCheckFailed = 1;
constexpr int kUsage = 2;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double parse_double(const std::string& text) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(text, &used);
    } catch (const std::exception&) {
        throw UsageError("not a number: '" + text + "'");
    }
    if (used != text.size() || !std::isfinite(v)) throw UsageError("not a finite number: '" + text + "'");
    return v;
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::string cur;
    std::istringstream is(s);
    while (std::getline(is, cur, sep)) parts.push_back(cur);
    if (!s.empty() && s.back() == sep) parts.emplace_back();
    return parts;
}

/// Values from repeated flags, each a comma list whose items may be ranges lo:hi[:step].
std::vector<double> expand_values(const std::vector<std::string>& flags) {
    std::vector<double> out;
    for (const std::string& flag : flags) {
        for (const std::string& item : split(flag, ',')) {
            const std::vector<std::string> r = split(item, ':');
            if (r.size() == 1) {
                out.push_back(parse_double(item));
                continue;
            }
            if (r.size() > 3) throw UsageError("bad range '" + item + "' (expected lo:hi[:step])");
            const double lo = parse_double(r[0]), hi = parse_double(r[1]);
            const double step = r.size() == 3 ? parse_double(r[2]) : 1.0;
            if (!(step > 0.0) || hi < lo) throw UsageError("bad range '" + item + "'");
            const auto count = static_cast<std::size_t>(std::floor((hi - lo) / step + 1e-9)) + 1;
            for (std::size_t i = 0; i < count; ++i) out.push_back(lo + static_cast<double>(i) * step);
        }
    }
    return out;
}

void write_file(const fs::path& path, const std::string& content) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << content;
}

void emit(const std::string& out_path, const std::string& content) {
    if (out_path.empty() || out_path == "-") {
        std::cout << content;
    } else {
        write_file(out_path, content);
    }
}

std::size_t resolve_threads(std::size_t flag) { return flag == 0 ? default_thread_count() : flag; }

struct ResolvedConfig {
    TrainConfig train;
    std::string out_dir;
};

/// Applies --config values left to right: a JSON file path or a key=value override.
ResolvedConfig resolve_config(const std::vector<std::string>& values) {
    ResolvedConfig rc;
    for (const std::string& value : values) {
        json j;
        const bool is_file = fs::is_regular_file(value);
        if (!is_file && value.find('=') != std::string::npos) {
            const std::string key = value.substr(0, value.find('='));
            if (key == "out_dir") {
                rc.out_dir = value.substr(value.find('=') + 1);
            } else {
                apply_override(rc.train, value);
            }
            continue;
        }
        std::ifstream is(value);
        if (!is) throw UsageError("cannot read config file '" + value + "'");
        j = json::parse(is, nullptr, false);
        if (j.is_discarded() || !j.is_object()) throw UsageError("config file '" + value + "' is not a JSON object");
        if (j.contains("out_dir")) {
            if (!j["out_dir"].is_string()) throw UsageError("config key 'out_dir' must be a string");
            rc.out_dir = j["out_dir"].get<std::string>();
            j.erase("out_dir");
        }
        rc.train = train_config_from_json(j, rc.train);
    }
    rc.train.validate();
    return rc;
}

// ---------------------------------------------------------------------------

int cmd_verify(const std::vector<std::string>& suites, std::uint64_t seed, std::size_t threads,
               const std::string& fault, const std::string& out) {
    std::vector<std::string> selected = suites.empty() ? verify_suite_names() : suites;
    for (const std::string& s : selected) {
        const auto& names = verify_suite_names();
        if (std::find(names.begin(), names.end(), s) == names.end()) throw UsageError("unknown suite '" + s + "'");
    }
    VerifyOptions opts{seed, resolve_threads(threads), fault};
    ordered_json summary;
    summary["seed"] = seed;
    ordered_json list = ordered_json::array();
    bool all = true;
    for (const std::string& s : selected) {
        const SuiteResult r = run_suite(s, opts);
        all = all && r.passed;
        list.push_back(r.to_json());
        std::cerr << (r.passed ? "pass " : "FAIL ") << r.name << ": " << r.metric << " = " << num(r.measured);
        if (r.failing_seed) std::cerr << " (replay with --seed " << *r.failing_seed << ")";
        std::cerr << "\n";
    }
    summary["suites"] = list;
    summary["passed"] = all;
    emit(out, summary.dump(2) + "\n");
    return all ? kOk : kCheckFailed;
}

int cmd_analyze_corr(const std::vector<std::string>& ws_flags, const std::vector<std::string>& wt_flags,
                     const std::vector<std::string>& sigma_flags, std::size_t samples, std::uint64_t seed,
                     std::size_t threads, const std::string& out) {
    const std::vector<double> ws = expand_values(ws_flags), wt = expand_values(wt_flags);
    const std::vector<double> sigmas = sigma_flags.empty() ? std::vector<double>{1.0} : expand_values(sigma_flags);
    if (ws.empty() || wt.empty()) throw UsageError("--omega-s and --omega-t need at least one value");
    if (samples < 1000) throw UsageError("--samples must be at least 1000");
    std::vector<CorrTrial> trials;
    std::vector<double> oracles;
    for (double a : ws)
        for (double b : wt)
            for (double s : sigmas) {
                if (a == 0.0 || b == 0.0) throw UsageError("frequencies must be nonzero");
                if (!(s > 0.0)) throw UsageError("--sigma must be positive");
                trials.push_back({a, b, s});
                oracles.push_back(gaussian_corr_oracle(a, b, s));
            }
    const std::vector<CorrelationEstimate> est = monte_carlo_sweep(trials, samples, seed, resolve_threads(threads));
    std::string csv = "omega_s,omega_t,sigma,mc_mean,mc_stderr,oracle,abs_gap\n";
    for (std::size_t i = 0; i < trials.size(); ++i) {
        csv += num(trials[i].omega_s) + "," + num(trials[i].omega_t) + "," + num(trials[i].sigma) + "," +
               num(est[i].mean) + "," + num(est[i].std_error) + "," + num(oracles[i]) + "," +
               num(std::abs(est[i].mean - oracles[i])) + "\n";
    }
    emit(out, csv);
    return kOk;
}

int cmd_analyze_rank(const std::vector<std::string>& rank_flags, const std::vector<std::string>& omega_flags,
                     std::size_t dim, std::size_t seeds, std::uint64_t seed, double epsilon, const std::string& out) {
    const std::vector<double> ranks = expand_values(rank_flags), omegas = expand_values(omega_flags);
    if (ranks.empty() || omegas.empty()) throw UsageError("--rank and --omega need at least one value");
    if (dim == 0 || seeds == 0) throw UsageError("--dim and --seeds must be positive");
    if (!(epsilon > 0.0 && epsilon < 1.0)) throw UsageError("--epsilon must lie in (0, 1)");
    std::string csv = "rank,omega,seed,eps_rank_base,eps_rank_sine,stable_rank_base,stable_rank_sine\n";
    for (double rv : ranks) {
        if (rv < 1.0 || rv != std::floor(rv) || rv > static_cast<double>(dim)) {
            throw UsageError("--rank values must be integers in [1, dim]");
        }
        const auto r = static_cast<std::size_t>(rv);
        for (double omega : omegas)
            for (std::size_t i = 0; i < seeds; ++i) {
                RandomStream rng(seed + i, r);
                const Tensor a = sample_gaussian(rng, {dim, r}, 1.0), b = sample_gaussian(rng, {dim, r}, 1.0);
                const Tensor lowrank = matmul(a, transpose(b));
                const RankReport base = rank_report(lowrank, epsilon);
                const RankReport sine = rank_report(sine_map(lowrank, omega), epsilon);
                csv += std::to_string(r) + "," + num(omega) + "," + std::to_string(seed + i) + "," +
                       std::to_string(base.eps_rank) + "," + std::to_string(sine.eps_rank) + "," +
                       num(base.stable_rank) + "," + num(sine.stable_rank) + "\n";
            }
    }
    emit(out, csv);
    return kOk;
}

int cmd_gradcheck(const std::vector<std::string>& configs, std::size_t batch, double h, double tolerance,
                  const std::string& out) {
    const ResolvedConfig rc = resolve_config(configs);
    if (batch == 0) throw UsageError("--batch must be positive");
    if (!(h > 0.0)) throw UsageError("--step must be positive");
    const ModelConfig mc = rc.train.model_config();
    Model model(mc);
    ParameterSet& params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
        RandomStream rng(mc.seed, 500 + i);
        params.value(i) += sample_gaussian(rng, params.value(i).shape(), 0.3);
    }
    RandomStream data(mc.seed, 900);
    std::vector<Tensor> inputs;
    std::vector<std::vector<Tensor>> targets(mc.tasks);
    for (std::size_t k = 0; k < batch; ++k)
        inputs.push_back(sample_gaussian(data, {mc.in_channels, mc.image_size, mc.image_size}, 1.0));
    for (auto& t : targets)
        for (std::size_t k = 0; k < batch; ++k)
            t.push_back(sample_gaussian(data, {mc.out_channels, mc.image_size, mc.image_size}, 1.0));
    GradCheckReport report;
    try {
        report = finite_diff_check(model, inputs, targets, h);
    } catch (const GradCheckRefused& e) {
        throw UsageError(e.what());
    }
    std::string csv = "tensor,coordinates,max_rel_error,passed\n";
    bool all = true;
    for (const TensorCheck& t : report.tensors) {
        const bool ok = t.max_rel_error < tolerance;
        all = all && ok;
        csv += t.name + "," + std::to_string(t.coordinates) + "," + num(t.max_rel_error) + "," + (ok ? "1" : "0") +
               "\n";
    }
    emit(out, csv);
    std::cerr << (all ? "pass" : "FAIL") << ": worst relative error " << num(report.worst()) << " (tolerance "
              << num(tolerance) << ")\n";
    return all ? kOk : kCheckFailed;
}

int cmd_train(const std::vector<std::string>& configs, const std::string& out_flag, std::size_t threads,
              const std::string& checkpoint, bool no_baseline) {
    ResolvedConfig rc = resolve_config(configs);
    if (!out_flag.empty()) rc.out_dir = out_flag;
    if (rc.out_dir.empty()) throw UsageError("no output directory (use --out or out_dir in the config)");
    const fs::path dir = rc.out_dir;
    fs::create_directories(dir);
    write_file(dir / "resolved-config.json", to_json(rc.train).dump(2) + "\n");

    TrainOptions opts;
    opts.threads = resolve_threads(threads);
    opts.skip_baseline = no_baseline;
    std::optional<Model> model;
    RunReport report;
    int code = kOk;
    try {
        report = train(rc.train, opts, model);
    } catch (const TrainingDiverged& e) {
        report = e.report;
        std::cerr << "error: " << e.what() << "\n";
        code = kCheckFailed;
    }
    write_file(dir / "report.json", report.to_json().dump(2) + "\n");
    write_file(dir / "metrics.csv", report.metrics_csv());
    write_file(dir / "gradsim.csv", report.grad_sim_csv());
    write_file(dir / "timing.json", ordered_json{{"wall_seconds", report.wall_seconds}}.dump(2) + "\n");
    if (code == kOk && !checkpoint.empty() && model) save_checkpoint(*model, checkpoint);
    if (code == kOk) {
        std::cerr << "trained " << to_string(rc.train.variant) << " (seed " << rc.train.seed << ")";
        if (report.delta_m) std::cerr << ", delta_m " << format_delta_m(*report.delta_m) << "%";
        std::cerr << "; outputs in " << dir.string() << "\n";
    }
    return code;
}

int cmd_delta_m(const std::string& st, const std::string& mtl, const std::string& signs) {
    std::vector<double> r_st, r_mtl;
    std::vector<bool> lower;
    for (const std::string& s : split(st, ',')) r_st.push_back(parse_double(s));
    for (const std::string& s : split(mtl, ',')) r_mtl.push_back(parse_double(s));
    for (const std::string& s : split(signs, ',')) {
        if (s != "0" && s != "1") throw UsageError("--signs entries must be 0 or 1, got '" + s + "'");
        lower.push_back(s == "1");
    }
    try {
        std::cout << format_delta_m(delta_m(r_mtl, r_st, lower)) << "\n";
    } catch (const ContractViolation& e) {
        throw UsageError(e.what());
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Frequency-switched low-rank adapters: checks, analyses and toy multi-task training"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "sinewich 1.0");

    std::vector<std::string> suites;
    std::uint64_t verify_seed = 0;
    std::size_t threads = 0;
    std::string fault, verify_out;
    auto* verify = app.add_subcommand("verify", "Run the verification suites; prints a JSON summary");
    verify->add_option("--suite", suites, "Suite to run (repeatable); default all")
        ->check(CLI::IsMember(verify_suite_names()));
    verify->add_option("--seed", verify_seed, "Base seed for suite instances");
    verify->add_option("--threads", threads, "Worker threads (default: SINEWICH_THREADS or hardware)");
    verify->add_option("--out", verify_out, "Write the JSON summary here instead of stdout");
    verify->add_option("--inject-fault", fault)->group("");

    std::vector<std::string> ws, wt, sigma;
    std::size_t samples = 100'000;
    std::uint64_t corr_seed = 0;
    std::string corr_out;
    auto* corr = app.add_subcommand("analyze-corr", "Monte Carlo vs closed-form correlation of sine-mapped kernels");
    corr->add_option("--omega-s", ws, "Source frequencies: values, comma lists or lo:hi[:step] ranges")->required();
    corr->add_option("--omega-t", wt, "Target frequencies, same syntax")->required();
    corr->add_option("--sigma", sigma, "Base entry standard deviations, same syntax (default 1)");
    corr->add_option("--samples", samples, "Monte Carlo samples per row (>= 1000)");
    corr->add_option("--seed", corr_seed, "Seed; row i uses stream i");
    corr->add_option("--threads", threads, "Worker threads");
    corr->add_option("--out", corr_out, "CSV output path (default stdout)");

    std::vector<std::string> ranks{"1,2,4"}, rank_omegas{"1:8"};
    std::size_t dim = 32, rank_seeds = 20;
    std::uint64_t rank_seed = 0;
    double epsilon = 1e-6;
    std::string rank_out;
    auto* rank = app.add_subcommand("analyze-rank", "Effective and stable rank of sin(omega A B^T) sweeps");
    rank->add_option("--rank", ranks, "LoRA ranks, same syntax as analyze-corr")->capture_default_str();
    rank->add_option("--omega", rank_omegas, "Frequencies")->capture_default_str();
    rank->add_option("--dim", dim, "Matrix size m = n")->capture_default_str();
    rank->add_option("--seeds", rank_seeds, "Seeds per setting")->capture_default_str();
    rank->add_option("--seed", rank_seed, "First seed");
    rank->add_option("--epsilon", epsilon, "Relative singular value threshold")->capture_default_str();
    rank->add_option("--out", rank_out, "CSV output path (default stdout)");

    std::vector<std::string> grad_configs;
    std::size_t batch = 2;
    double h = 1e-6, tolerance = 1e-4;
    std::string grad_out;
    auto* grad = app.add_subcommand("gradcheck", "Central finite differences against the model's backward pass");
    grad->add_option("--config", grad_configs, "Config JSON path or key=value override (repeatable)");
    grad->add_option("--batch", batch, "Samples per task")->capture_default_str();
    grad->add_option("--step", h, "Finite-difference step")->capture_default_str();
    grad->add_option("--tolerance", tolerance, "Maximum relative error per tensor")->capture_default_str();
    grad->add_option("--out", grad_out, "CSV output path (default stdout)");

    std::vector<std::string> train_configs;
    std::string train_out, checkpoint;
    bool no_baseline = false;
    auto* trn = app.add_subcommand("train", "Joint training on the toy suite; writes report.json and CSVs");
    trn->add_option("--config", train_configs, "Config JSON path or key=value override (repeatable)");
    trn->add_option("--out", train_out, "Output directory (overrides out_dir)");
    trn->add_option("--threads", threads, "Worker threads");
    trn->add_option("--checkpoint", checkpoint, "Also save the trained model here");
    trn->add_flag("--no-baseline", no_baseline, "Skip single-task baselines (no delta_m)");

    std::string st, mtl, signs;
    auto* dm = app.add_subcommand("delta-m", "Mean signed relative improvement over single-task baselines");
    dm->add_option("--st", st, "Single-task metrics, comma separated")->required();
    dm->add_option("--mtl", mtl, "Multi-task metrics, comma separated")->required();
    dm->add_option("--signs", signs, "Per task 1 if lower is better, else 0")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return kUsage;
    }

    try {
        if (*verify) return cmd_verify(suites, verify_seed, threads, fault, verify_out);
        if (*corr) return cmd_analyze_corr(ws, wt, sigma, samples, corr_seed, threads, corr_out);
        if (*rank) return cmd_analyze_rank(ranks, rank_omegas, dim, rank_seeds, rank_seed, epsilon, rank_out);
        if (*grad) return cmd_gradcheck(grad_configs, batch, h, tolerance, grad_out);
        if (*trn) return cmd_train(train_configs, train_out, threads, checkpoint, no_baseline);
        if (*dm) return cmd_delta_m(st, mtl, signs);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const ContractViolation& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kCheckFailed;
    }
    return kUsage;
}
