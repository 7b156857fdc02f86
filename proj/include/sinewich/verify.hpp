#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace sinewich {

struct SuiteResult {
    std::string name;
    bool passed = false;
    std::string metric;    // what `measured` is
    double measured = 0.0; // worst value observed
    double threshold = 0.0;
    std::optional<std::uint64_t> failing_seed;  // replay with --seed <value>
    std::string detail;

    nlohmann::ordered_json to_json() const;
};

struct VerifyOptions {
    std::uint64_t seed = 0;
    std::size_t threads = 1;
    /// Name of a suite whose results are deliberately corrupted (harness use).
    std::string inject_fault;
};

/// fusion, sine-range, frequency-bound, prop1, prop2, lowpass, rank, gradcheck
const std::vector<std::string>& verify_suite_names();

/// Instance i of a suite draws from seed (options.seed + i); a failure reports that seed.
SuiteResult run_suite(const std::string& name, const VerifyOptions& options);

}  // namespace sinewich
