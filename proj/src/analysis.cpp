#include "sinewich/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "sinewich/numerics.hpp"

namespace sinewich {

namespace {

double cosine(const double* a, const double* b, std::size_t n, bool& defined) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    defined = aa > 0.0 && bb > 0.0;
    if (!defined) return 0.0;
    return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

}  // namespace

double vec_correlation(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "vec_correlation");
    bool defined = false;
    const double r = cosine(a.raw(), b.raw(), a.size(), defined);
    if (!defined) throw UndefinedCorrelation("vec_correlation: correlation with a zero matrix is undefined");
    return r;
}

double gaussian_corr_oracle(double omega_s, double omega_t, double sigma) {
    if (!(sigma > 0.0)) throw ContractViolation("gaussian_corr_oracle: sigma must be positive");
    if (omega_s == 0.0 || omega_t == 0.0) {
        throw UndefinedCorrelation("gaussian_corr_oracle: a zero frequency gives a degenerate zero-variance map");
    }
    if (omega_s == omega_t) return 1.0;
    const double s2 = sigma * sigma;
    auto char_fn = [s2](double k) { return std::exp(-k * k * s2 / 2.0); };
    const double cross = 0.5 * (char_fn(omega_s - omega_t) - char_fn(omega_s + omega_t));
    const double var_s = 0.5 * (1.0 - char_fn(2.0 * omega_s));
    const double var_t = 0.5 * (1.0 - char_fn(2.0 * omega_t));
    return cross / std::sqrt(var_s * var_t);
}

CorrelationEstimate monte_carlo_corr(double omega_s, double omega_t, double sigma, std::size_t n,
                                     RandomStream& stream) {
    if (n < 1000) throw ContractViolation("monte_carlo_corr: need at least 1000 samples, got " + std::to_string(n));
    if (!(sigma > 0.0)) throw ContractViolation("monte_carlo_corr: sigma must be positive");

    // Sample means of (y_s y_t, y_s^2, y_t^2) and their second moments for the delta method.
    double m_st = 0.0, m_ss = 0.0, m_tt = 0.0;
    double q_st_st = 0.0, q_ss_ss = 0.0, q_tt_tt = 0.0, q_st_ss = 0.0, q_st_tt = 0.0, q_ss_tt = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double x = sigma * stream.normal();
        const double ys = std::sin(omega_s * x);
        const double yt = std::sin(omega_t * x);
        const double st = ys * yt, ss = ys * ys, tt = yt * yt;
        m_st += st;
        m_ss += ss;
        m_tt += tt;
        q_st_st += st * st;
        q_ss_ss += ss * ss;
        q_tt_tt += tt * tt;
        q_st_ss += st * ss;
        q_st_tt += st * tt;
        q_ss_tt += ss * tt;
    }
    const auto nd = static_cast<double>(n);
    CorrelationEstimate est;
    est.samples = n;
    if (m_ss == 0.0 || m_tt == 0.0) {
        throw UndefinedCorrelation("monte_carlo_corr: a sine map produced an all-zero sample");
    }
    est.mean = std::clamp(m_st / std::sqrt(m_ss * m_tt), -1.0, 1.0);

    const double a = m_st / nd, b = m_ss / nd, c = m_tt / nd;
    const double cov_aa = q_st_st / nd - a * a, cov_bb = q_ss_ss / nd - b * b, cov_cc = q_tt_tt / nd - c * c;
    const double cov_ab = q_st_ss / nd - a * b, cov_ac = q_st_tt / nd - a * c, cov_bc = q_ss_tt / nd - b * c;
    const double r = a / std::sqrt(b * c);
    const double ga = 1.0 / std::sqrt(b * c), gb = -r / (2.0 * b), gc = -r / (2.0 * c);
    const double var = ga * ga * cov_aa + gb * gb * cov_bb + gc * gc * cov_cc + 2.0 * ga * gb * cov_ab +
                       2.0 * ga * gc * cov_ac + 2.0 * gb * gc * cov_bc;
    est.std_error = std::sqrt(std::max(0.0, var) / (nd - 1.0));
    return est;
}

std::vector<CorrelationEstimate> monte_carlo_sweep(const std::vector<CorrTrial>& trials, std::size_t n,
                                                   std::uint64_t seed, std::size_t threads) {
    std::vector<CorrelationEstimate> out(trials.size());
    parallel_for(trials.size(), threads, [&](std::size_t i) {
        RandomStream stream(seed, i);
        out[i] = monte_carlo_corr(trials[i].omega_s, trials[i].omega_t, trials[i].sigma, n, stream);
    });
    return out;
}

RankReport rank_report(const Tensor& matrix, double epsilon) {
    RankReport report;
    report.epsilon = epsilon;
    report.singular_values = singular_values(matrix);
    const double top = report.singular_values.front();
    if (!(top > 0.0)) throw ContractViolation("rank_report: matrix is zero");
    double frob2 = 0.0;
    for (double s : report.singular_values) {
        frob2 += s * s;
        if (s > epsilon * top) ++report.eps_rank;
    }
    report.stable_rank = frob2 / (top * top);
    return report;
}

std::optional<double> grad_cosine(const std::vector<double>& gi, const std::vector<double>& gj) {
    if (gi.size() != gj.size()) {
        throw ContractViolation("grad_cosine: gradient lengths differ (" + std::to_string(gi.size()) + " vs " +
                                std::to_string(gj.size()) + ")");
    }
    bool defined = false;
    const double r = cosine(gi.data(), gj.data(), gi.size(), defined);
    if (!defined) return std::nullopt;
    return r;
}

std::optional<double> grad_cosine(const Tensor& gi, const Tensor& gj) {
    if (gi.size() != gj.size()) throw ContractViolation("grad_cosine: gradient lengths differ");
    bool defined = false;
    const double r = cosine(gi.raw(), gj.raw(), gi.size(), defined);
    if (!defined) return std::nullopt;
    return r;
}

SimSample pairwise_grad_cosine(const std::vector<std::vector<double>>& g) {
    const std::size_t t = g.size();
    SimSample sample(t * t);
    for (std::size_t i = 0; i < t; ++i) {
        for (std::size_t j = i; j < t; ++j) {
            const auto s = grad_cosine(g[i], g[j]);
            sample[i * t + j] = s;
            sample[j * t + i] = s;
        }
    }
    return sample;
}

GradSimMatrix epoch_grad_sim(const std::vector<SimSample>& samples, std::size_t tasks, std::size_t epoch) {
    if (samples.empty()) throw ContractViolation("epoch_grad_sim: no similarity samples");
    const std::size_t cells = tasks * tasks;
    GradSimMatrix out{tasks, epoch, std::vector<double>(cells, 0.0), std::vector<double>(cells, 0.0),
                      std::vector<std::size_t>(cells, 0)};
    std::vector<double> m2(cells, 0.0);
    for (const SimSample& s : samples) {
        if (s.size() != cells) throw ContractViolation("epoch_grad_sim: sample is not " + std::to_string(tasks) + "x" +
                                                       std::to_string(tasks));
        for (std::size_t k = 0; k < cells; ++k) {
            if (!s[k]) continue;
            // Welford update
            const double x = *s[k];
            const double delta = x - out.mean[k];
            out.mean[k] += delta / static_cast<double>(++out.counts[k]);
            m2[k] += delta * (x - out.mean[k]);
        }
    }
    for (std::size_t k = 0; k < cells; ++k) {
        if (out.counts[k] == 0) {
            out.mean[k] = out.variance[k] = std::numeric_limits<double>::quiet_NaN();
        } else {
            out.variance[k] = m2[k] / static_cast<double>(out.counts[k]);
        }
    }
    return out;
}

Tensor sine_map(const Tensor& m, double omega) {
    Tensor out = m;
    for (double& v : out.data()) v = std::sin(omega * v);
    return out;
}

}  // namespace sinewich
