#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "sinewich/random.hpp"
#include "sinewich/tensor.hpp"

namespace sinewich {

/// Correlation (cosine similarity of vectorized forms) is undefined for a zero operand.
class UndefinedCorrelation : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

struct CorrelationEstimate {
    double mean = 0.0;
    double std_error = 0.0;
    std::size_t samples = 0;
};

struct RankReport {
    std::vector<double> singular_values;
    std::size_t eps_rank = 0;
    double stable_rank = 0.0;
    double epsilon = 0.0;
};

/// Per-entry mean and population variance of T x T similarity matrices over
/// one epoch. `counts` tracks how many iterations defined each entry; entries
/// never defined hold NaN.
struct GradSimMatrix {
    std::size_t tasks = 0;
    std::size_t epoch = 0;
    std::vector<double> mean;
    std::vector<double> variance;
    std::vector<std::size_t> counts;

    double mean_at(std::size_t i, std::size_t j) const { return mean[i * tasks + j]; }
    double variance_at(std::size_t i, std::size_t j) const { return variance[i * tasks + j]; }
};

/// One iteration's pairwise similarities; std::nullopt marks an undefined pair.
using SimSample = std::vector<std::optional<double>>;

double vec_correlation(const Tensor& a, const Tensor& b);

/// Closed-form corr(sin(wS X), sin(wT X)) for X ~ N(0, sigma^2), using
/// E[cos(kX)] = exp(-k^2 sigma^2 / 2).
double gaussian_corr_oracle(double omega_s, double omega_t, double sigma);

/// Samples n base entries X ~ N(0, sigma^2) from `stream`, correlates sin(wS X)
/// with sin(wT X), and attaches a delta-method standard error.
CorrelationEstimate monte_carlo_corr(double omega_s, double omega_t, double sigma, std::size_t n,
                                     RandomStream& stream);

struct CorrTrial {
    double omega_s;
    double omega_t;
    double sigma;
};

/// Runs monte_carlo_corr for every trial on stream (seed, trial index). Results
/// are independent of the worker count.
std::vector<CorrelationEstimate> monte_carlo_sweep(const std::vector<CorrTrial>& trials, std::size_t n,
                                                   std::uint64_t seed, std::size_t threads);

RankReport rank_report(const Tensor& matrix, double epsilon = 1e-6);

/// Cosine similarity of two flat gradients; std::nullopt when either is zero.
std::optional<double> grad_cosine(const Tensor& gi, const Tensor& gj);
std::optional<double> grad_cosine(const std::vector<double>& gi, const std::vector<double>& gj);

/// Pairwise cosine similarities of per-task gradients for one iteration.
SimSample pairwise_grad_cosine(const std::vector<std::vector<double>>& task_gradients);

GradSimMatrix epoch_grad_sim(const std::vector<SimSample>& samples, std::size_t tasks, std::size_t epoch = 0);

/// Elementwise sin(omega * M) for a plain matrix.
Tensor sine_map(const Tensor& m, double omega);

}  // namespace sinewich
