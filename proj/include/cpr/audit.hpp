#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "cpr/cpr.hpp"
#include "cpr/stats.hpp"

namespace cpr {

template <typename Scalar>
using LogDensityFn = std::function<Scalar(const Vector<Scalar>&)>;

/// Noise predictor -sigma_k * score, the MMSE denoiser when the score is exact.
template <typename Scalar>
ScoreFn<Scalar> denoiser_from_score(ScoreFn<Scalar> score, std::shared_ptr<const NoiseSchedule<Scalar>> schedule) {
    return [score = std::move(score), schedule = std::move(schedule)](const Vector<Scalar>& x, std::size_t level) {
        return Vector<Scalar>(-schedule->sigma(level) * score(x, level));
    };
}

/// Estimate of log p(x0) up to a constant shared by every call with the same
/// schedule and noise seed.
template <typename Scalar>
struct LogProbEstimate {
    Scalar value = 0;
    std::size_t draws = 0;
    Scalar stderr_ = 0;
};

/// MMSE log-likelihood estimate:
///   log p(x0) = 1/2 * int_{t_min}^{1} E_eps ||eps - pred(gamma x0 + sigma eps)||^2 alpha'(t) dt + const
/// with the trapezoid rule on the schedule grid and `draws` noise samples per
/// level. Noise at level k comes from stream (seed, k), so estimates made with
/// one seed share their draws across points and models.
///
/// Passing two predictors returns the estimate of log p_a(x0) - log p_b(x0)
/// from paired draws.
template <typename Scalar>
LogProbEstimate<Scalar> mmse_log_prob(const ScoreFn<Scalar>& predictor, const Vector<Scalar>& x0,
                                      const NoiseSchedule<Scalar>& schedule, std::size_t draws, std::uint64_t seed,
                                      const ScoreFn<Scalar>* baseline = nullptr) {
    if (draws == 0) throw ConfigError("mmse_log_prob: draws must be >= 1");
    if (!x0.allFinite()) throw DomainError("mmse_log_prob: x0 must be finite");
    const std::size_t T = schedule.num_steps();
    LogProbEstimate<Scalar> out;
    out.draws = draws;
    Scalar variance = 0;
    for (std::size_t k = 1; k <= T; ++k) {
        const Scalar left = k > 1 ? schedule.time(k) - schedule.time(k - 1) : Scalar(0);
        const Scalar right = k < T ? schedule.time(k + 1) - schedule.time(k) : Scalar(0);
        const Scalar weight = Scalar(0.5) * (left + right) * Scalar(0.5) * schedule.log_snr_slope(k);
        const Scalar g = schedule.gamma(k), s = schedule.sigma(k);
        auto rng = make_stream(seed, StreamTag::audit_noise, k);
        Scalar sum = 0, sum_sq = 0;
        for (std::size_t i = 0; i < draws; ++i) {
            const Vector<Scalar> eps = standard_normal<Scalar>(x0.size(), rng);
            const Vector<Scalar> xt = g * x0 + s * eps;
            Scalar term = (eps - predictor(xt, k)).squaredNorm();
            if (baseline) term -= (eps - (*baseline)(xt, k)).squaredNorm();
            sum += term;
            sum_sq += term * term;
        }
        const Scalar mean = sum / Scalar(draws);
        out.value += weight * mean;
        if (draws > 1) {
            const Scalar var = (sum_sq - Scalar(draws) * mean * mean) / Scalar(draws - 1);
            variance += weight * weight * std::max(var, Scalar(0)) / Scalar(draws);
        }
    }
    out.stderr_ = std::sqrt(variance);
    return out;
}

/// Per-sample log p(x) - log safe(x) from exact densities. Columns are samples.
template <typename Scalar>
std::vector<Scalar> delta_max_exact(const LogDensityFn<Scalar>& log_p, const LogDensityFn<Scalar>& log_safe,
                                    const Matrix<Scalar>& samples) {
    std::vector<Scalar> out(static_cast<std::size_t>(samples.cols()));
    for (Eigen::Index i = 0; i < samples.cols(); ++i) {
        const Vector<Scalar> x = samples.col(i);
        out[static_cast<std::size_t>(i)] = log_p(x) - log_safe(x);
    }
    return out;
}

/// Per-sample log-ratio estimates from MMSE predictors with shared noise.
template <typename Scalar>
std::vector<LogProbEstimate<Scalar>> delta_max_estimated(const ScoreFn<Scalar>& predictor_p,
                                                         const ScoreFn<Scalar>& predictor_safe,
                                                         const Matrix<Scalar>& samples,
                                                         const NoiseSchedule<Scalar>& schedule, std::size_t draws,
                                                         std::uint64_t seed) {
    std::vector<LogProbEstimate<Scalar>> out;
    out.reserve(static_cast<std::size_t>(samples.cols()));
    for (Eigen::Index i = 0; i < samples.cols(); ++i)
        out.push_back(mmse_log_prob<Scalar>(predictor_p, samples.col(i), schedule, draws, seed, &predictor_safe));
    return out;
}

enum class HellingerMethod { closed_form, quadrature };

template <typename Scalar>
struct HellingerResult {
    Scalar k_c;
    /// log of the Bhattacharyya coefficient int sqrt(q1 q2) = 1 - H^2
    Scalar log_affinity;
    HellingerMethod method;

    Scalar hellinger_sq() const { return -std::expm1(log_affinity); }
};

namespace detail {

template <typename Scalar>
Scalar log_affinity_quadrature(const GaussianMixture<Scalar>& q1, const GaussianMixture<Scalar>& q2) {
    const Eigen::Index d = q1.dim();
    Vector<Scalar> lo(d), hi(d);
    Scalar min_sd = std::numeric_limits<Scalar>::infinity();
    lo.setConstant(std::numeric_limits<Scalar>::infinity());
    hi.setConstant(-std::numeric_limits<Scalar>::infinity());
    for (const auto* q : {&q1, &q2}) {
        const Matrix<Scalar> sd = q->variances().array().sqrt();
        min_sd = std::min(min_sd, sd.minCoeff());
        lo = lo.cwiseMin((q->means() - Scalar(12) * sd).rowwise().minCoeff());
        hi = hi.cwiseMax((q->means() + Scalar(12) * sd).rowwise().maxCoeff());
    }
    const Scalar span = (hi - lo).maxCoeff();
    const std::size_t cap = d == 1 ? 400001 : 2001;
    const std::size_t floor = d == 1 ? 4001 : 401;
    const auto n = std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(span / (min_sd / 25))) + 1, floor, cap);

    auto log_half_sum = [&](const Vector<Scalar>& x) { return Scalar(0.5) * (q1.log_density(x) + q2.log_density(x)); };
    const Vector<Scalar> h = (hi - lo) / Scalar(n - 1);
    std::vector<Scalar> terms;
    terms.reserve(d == 1 ? n : n * n);
    Vector<Scalar> x(d);
    auto trap = [n](std::size_t i) { return (i == 0 || i + 1 == n) ? Scalar(0.5) : Scalar(1); };
    if (d == 1) {
        for (std::size_t i = 0; i < n; ++i) {
            x[0] = lo[0] + h[0] * Scalar(i);
            terms.push_back(log_half_sum(x) + std::log(trap(i)));
        }
    } else {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                x[0] = lo[0] + h[0] * Scalar(i);
                x[1] = lo[1] + h[1] * Scalar(j);
                terms.push_back(log_half_sum(x) + std::log(trap(i) * trap(j)));
            }
    }
    const Eigen::Map<const Vector<Scalar>> view(terms.data(), static_cast<Eigen::Index>(terms.size()));
    return log_sum_exp(view) + h.array().log().sum();
}

}  // namespace detail

/// NAF budget of the normalized geometric mean: k_c = -2 log(1 - H^2(q1, q2)).
/// Closed form for two single diagonal Gaussians; grid quadrature for
/// mixtures in one or two dimensions.
template <typename Scalar>
HellingerResult<Scalar> k_c_hellinger(const GaussianMixture<Scalar>& q1, const GaussianMixture<Scalar>& q2,
                                      bool force_quadrature = false) {
    if (q1.dim() != q2.dim()) throw ConfigError("k_c_hellinger: distributions differ in dimension");
    Scalar log_aff;
    HellingerMethod method;
    if (q1.size() == 1 && q2.size() == 1 && !force_quadrature) {
        const auto v1 = q1.variances().col(0).array(), v2 = q2.variances().col(0).array();
        const auto diff = (q1.means().col(0) - q2.means().col(0)).array();
        log_aff = (Scalar(0.5) * (Scalar(2) * (v1 * v2).sqrt() / (v1 + v2)).log() -
                   diff.square() / (Scalar(4) * (v1 + v2)))
                      .sum();
        method = HellingerMethod::closed_form;
    } else {
        if (q1.dim() > 2)
            throw DomainError("k_c_hellinger: quadrature supports dimension <= 2 (closed form needs single Gaussians)");
        log_aff = detail::log_affinity_quadrature(q1, q2);
        method = HellingerMethod::quadrature;
    }
    log_aff = std::min(log_aff, Scalar(0));
    return {Scalar(-2) * log_aff, log_aff, method};
}

/// Log density of sqrt(q1 q2) / Z with Z the Bhattacharyya coefficient.
template <typename Scalar>
LogDensityFn<Scalar> geometric_mean_log_density(GaussianMixture<Scalar> q1, GaussianMixture<Scalar> q2) {
    const Scalar log_z = k_c_hellinger(q1, q2).log_affinity;
    return [q1 = std::move(q1), q2 = std::move(q2), log_z](const Vector<Scalar>& x) {
        return Scalar(0.5) * (q1.log_density(x) + q2.log_density(x)) - log_z;
    };
}

/// Discrete CPR-Choose budget k_c = b * sum_{k in J} 1 / noise_var_k, where
/// noise_var_k is the injected variance of backward step k (indexed 0..T,
/// entry 0 unused). Step 0 performs no move and contributes nothing.
inline double k_c_choose_bound(const std::set<std::size_t>& private_steps, std::span<const double> noise_var,
                               double b) {
    if (!(b >= 0)) throw ConfigError("k_c_choose_bound: b must be >= 0");
    double total = 0;
    for (std::size_t k : private_steps) {
        if (k == 0) continue;
        if (k >= noise_var.size()) throw ConfigError("k_c_choose_bound: step outside the schedule");
        if (!(noise_var[k] > 0))
            throw DomainError("k_c_choose_bound: step " + std::to_string(k) +
                              " injects no noise (sigma below the t_min clamp); its transition has no density");
        total += 1.0 / noise_var[k];
    }
    return b * total;
}

template <typename Scalar>
std::vector<double> step_noise_variances(const SamplerConfig<Scalar>& config) {
    const auto table = coefficient_table(config);
    std::vector<double> out(table.size(), 0.0);
    for (std::size_t k = 1; k < table.size(); ++k)
        out[k] = static_cast<double>(table[k].noise_scale * table[k].noise_scale);
    return out;
}

template <typename Scalar>
double k_c_choose_bound(const std::set<std::size_t>& private_steps, const SamplerConfig<Scalar>& config, double b) {
    return k_c_choose_bound(private_steps, step_noise_variances(config), b);
}

struct TrajectoryLogRatio {
    /// log q~(trajectory) - log q1(trajectory) from the Gaussian kernels
    double log_ratio = 0;
    /// max over private steps of ||x' - m_safe||^2 - ||x' - m_private||^2
    double max_gap = 0;
};

/// Exact trajectory log-ratio of a CPR-Choose run against the safe-only
/// chain: only private steps contribute, each as a ratio of the two Gaussian
/// transition kernels N(x_{k-1}; a1 x_k + a2 s_q(x_k), noise_k^2 I).
template <typename Scalar>
TrajectoryLogRatio trajectory_log_ratio(const Trajectory<Scalar>& traj, const ScoreFn<Scalar>& safe,
                                        const ScoreFn<Scalar>& priv, const SamplerConfig<Scalar>& config) {
    const std::size_t T = config.num_steps();
    if (traj.states.size() != T + 1 || traj.used_private.size() != T)
        throw ConfigError("trajectory_log_ratio: needs a recorded CPR-Choose trajectory");
    TrajectoryLogRatio out;
    bool any = false;
    for (std::size_t i = 0; i < T; ++i) {
        if (!traj.used_private[i]) continue;
        const std::size_t k = T - i;
        const auto c = step_coefficients(*config.schedule, k, config.kind);
        const double var = static_cast<double>(c.noise_scale * c.noise_scale);
        if (!(var > 0)) throw DomainError("trajectory_log_ratio: private step " + std::to_string(k) + " has no noise");
        const Vector<Scalar>& x = traj.states[i];
        const Vector<Scalar>& next = traj.states[i + 1];
        const Vector<Scalar> m_safe = c.state_scale * x + c.score_scale * safe(x, k);
        const Vector<Scalar> m_priv = c.state_scale * x + c.score_scale * priv(x, k);
        const double gap = static_cast<double>((next - m_safe).squaredNorm() - (next - m_priv).squaredNorm());
        out.log_ratio += gap / (2.0 * var);
        out.max_gap = any ? std::max(out.max_gap, gap) : gap;
        any = true;
    }
    return out;
}

/// Monte-Carlo Delta_KL(p || safe) = E_p[log p - log safe] with a percentile
/// bootstrap interval.
template <typename Scalar>
stats::Interval delta_kl_estimate(const Matrix<Scalar>& p_samples, const LogDensityFn<Scalar>& log_p,
                                  const LogDensityFn<Scalar>& log_safe, double level = 0.95,
                                  std::size_t resamples = 1000, std::uint64_t seed = 0) {
    if (p_samples.cols() < 1000) throw DomainError("delta_kl_estimate: need at least 1000 samples");
    const auto ratios = delta_max_exact<Scalar>(log_p, log_safe, p_samples);
    std::vector<double> v(ratios.begin(), ratios.end());
    return stats::bootstrap_mean(v, level, resamples, seed);
}

struct AuditReport {
    std::string method;
    std::string mode;  ///< "exact" or "estimated"
    std::vector<double> per_sample_delta_max;
    std::optional<stats::Interval> delta_kl;
    std::optional<double> k_c_bound;
    std::optional<double> k_c_closed_form;
    stats::Histogram histogram;
    std::size_t samples = 0;
    std::size_t score_evaluations = 0;
};

}  // namespace cpr
