#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

struct CliRun {
    int status = -1;
    std::string out;
};

CliRun run(const std::string& args) {
    const std::string cmd = std::string(SINEWICH_CLI) + " " + args + " 2>/dev/null";
    CliRun r;
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

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("sinewich_cli_" + name);
    fs::remove_all(p);
    return p;
}

}  // namespace

TEST(Cli, DeltaMPrintsTwoDecimals) {
    const CliRun r = run("delta-m --st 67.21,61.93,62.35,17.97 --mtl 71.25,61.38,66.24,16.14 --signs 0,0,0,1");
    EXPECT_EQ(r.status, 0);
    EXPECT_EQ(r.out, "+5.39\n");
    EXPECT_EQ(run("delta-m --st 1,2 --mtl 1,2 --signs 0,1").out, "0.00\n");
}

TEST(Cli, DeltaMRejectsMalformedInput) {
    EXPECT_EQ(run("delta-m --st 1,2 --mtl 1 --signs 0,0").status, 2);
    EXPECT_EQ(run("delta-m --st 0,2 --mtl 1,1 --signs 0,0").status, 2);
    EXPECT_EQ(run("delta-m --st 1,2x --mtl 1,1 --signs 0,0").status, 2);
    EXPECT_EQ(run("delta-m --st 1,2 --mtl 1,1 --signs 0,2").status, 2);
    EXPECT_EQ(run("delta-m --st 1,2 --mtl 1,1").status, 2);
}

TEST(Cli, UsageErrorsAndHelp) {
    EXPECT_EQ(run("no-such-command").status, 2);
    EXPECT_EQ(run("verify --suite nope").status, 2);
    EXPECT_EQ(run("--help").status, 0);
    EXPECT_EQ(run("analyze-corr --omega-s 2 --omega-t 5 --samples 10").status, 2);
}

TEST(Cli, VerifySuitePassesAndInjectedFaultFails) {
    const CliRun ok = run("verify --suite prop2 --suite fusion");
    EXPECT_EQ(ok.status, 0);
    const auto j = nlohmann::json::parse(ok.out);
    EXPECT_TRUE(j.at("passed").get<bool>());
    EXPECT_EQ(j.at("suites").size(), 2u);
    EXPECT_EQ(run("verify --suite prop2 --inject-fault prop2").status, 1);
    EXPECT_EQ(run("verify --suite fusion --inject-fault fusion").status, 1);
}

TEST(Cli, AnalyzeCorrCsvIsStrictAndDeterministic) {
    const std::string args = "analyze-corr --omega-s 2,5 --omega-t 5:9:4 --samples 20000 --seed 4";
    const CliRun a = run(args);
    ASSERT_EQ(a.status, 0);
    EXPECT_EQ(a.out, run(args + " --threads 2").out);
    std::istringstream is(a.out);
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line, "omega_s,omega_t,sigma,mc_mean,mc_stderr,oracle,abs_gap");
    int rows = 0;
    while (std::getline(is, line)) {
        ++rows;
        std::istringstream fields(line);
        std::string f;
        int count = 0;
        while (std::getline(fields, f, ',')) {
            std::size_t used = 0;
            std::stod(f, &used);
            EXPECT_EQ(used, f.size()) << f;
            ++count;
        }
        EXPECT_EQ(count, 7);
    }
    EXPECT_EQ(rows, 4);
}

TEST(Cli, AnalyzeRankWritesFile) {
    const fs::path out = scratch("rank.csv");
    ASSERT_EQ(run("analyze-rank --rank 1,2 --omega 3 --seeds 2 --out " + out.string()).status, 0);
    const std::string csv = slurp(out);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "rank,omega,seed,eps_rank_base,eps_rank_sine,stable_rank_base,stable_rank_sine");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
    fs::remove(out);
}

TEST(Cli, GradcheckSmallConfigPasses) {
    const CliRun r = run("gradcheck --config image_size=16 --config ts_rank=1 --batch 1");
    EXPECT_EQ(r.status, 0);
    EXPECT_EQ(r.out.substr(0, r.out.find('\n')), "tensor,coordinates,max_rel_error,passed");
    EXPECT_EQ(r.out.find(",false"), std::string::npos);
}

TEST(Cli, TrainWritesReproducibleOutputs) {
    const fs::path a = scratch("train_a"), b = scratch("train_b");
    const std::string flags =
        "--config epochs=2 --config train_samples=8 --config val_samples=4 --config batch_size=4 --config image_size=16";
    ASSERT_EQ(run("train " + flags + " --out " + a.string()).status, 0);
    ASSERT_EQ(run("train " + flags + " --threads 2 --out " + b.string()).status, 0);
    for (const char* f : {"resolved-config.json", "report.json", "metrics.csv", "gradsim.csv"}) {
        ASSERT_TRUE(fs::exists(a / f)) << f;
        EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
    }
    EXPECT_TRUE(fs::exists(a / "timing.json"));
    const auto report = nlohmann::json::parse(slurp(a / "report.json"));
    EXPECT_TRUE(report.at("delta_m").is_number());
    // The resolved config reproduces the run on its own.
    const fs::path c = scratch("train_c");
    ASSERT_EQ(run("train --config " + (a / "resolved-config.json").string() + " --out " + c.string()).status, 0);
    EXPECT_EQ(slurp(a / "report.json"), slurp(c / "report.json"));
    fs::remove_all(a);
    fs::remove_all(b);
    fs::remove_all(c);
}

TEST(Cli, TrainRejectsBadConfig) {
    const fs::path a = scratch("train_bad");
    EXPECT_EQ(run("train --config epochz=2 --out " + a.string()).status, 2);
    EXPECT_EQ(run("train --config tasks=9 --out " + a.string()).status, 2);
    EXPECT_EQ(run("train --config /no/such/file.json --out " + a.string()).status, 2);
    fs::remove_all(a);
}
