#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "cpr/errors.hpp"

namespace cpr {

enum class ScheduleKind { linear, cosine, constant, tabulated };

inline std::string_view to_string(ScheduleKind kind) {
    switch (kind) {
        case ScheduleKind::linear: return "linear";
        case ScheduleKind::cosine: return "cosine";
        case ScheduleKind::constant: return "constant";
        case ScheduleKind::tabulated: return "tabulated";
    }
    return "unknown";
}

inline ScheduleKind parse_schedule_kind(std::string_view name) {
    if (name == "linear") return ScheduleKind::linear;
    if (name == "cosine") return ScheduleKind::cosine;
    if (name == "constant") return ScheduleKind::constant;
    throw ConfigError("schedule.kind: unknown schedule kind '" + std::string(name) + "'");
}

struct ScheduleParams {
    ScheduleKind kind = ScheduleKind::linear;
    double beta_min = 0.1;
    double beta_max = 20.0;
    std::size_t num_steps = 500;
    double t_min = 1e-3;
    /// Trapezoid panels per grid interval when integrating beta.
    std::size_t substeps = 16;
};

/// Result of differentiating the log-SNR on the grid.
template <typename Scalar>
struct LogSnrSlope {
    Scalar value;
    bool one_sided;
};

/// Variance-preserving noise schedule tabulated on levels 0..T.
///
/// Level 0 is the clean-data level t = 0 (gamma = 1, sigma = 0). Levels
/// 1..T form a uniform grid of T points on [t_min, 1]; level T is t = 1.
/// The backward samplers start at level T and finish at level 0.
template <typename Scalar = double>
class NoiseSchedule {
public:
    static NoiseSchedule build(const ScheduleParams& p) {
        if (!(p.beta_min > 0.0) || !(p.beta_max >= p.beta_min) || !std::isfinite(p.beta_max))
            throw ConfigError("schedule: require 0 < beta_min <= beta_max");
        if (p.num_steps < 2) throw ConfigError("schedule.num_steps: require T >= 2");
        if (!(p.t_min > 0.0) || p.t_min * static_cast<double>(p.num_steps) > 1.0)
            throw ConfigError("schedule.t_min: require 0 < t_min <= 1/T");
        if (p.substeps == 0) throw ConfigError("schedule.substeps: must be positive");
        if (p.kind == ScheduleKind::tabulated)
            throw ConfigError("schedule.kind: tabulated schedules are built from_table");

        NoiseSchedule s;
        s.kind_ = p.kind;
        const std::size_t T = p.num_steps;
        s.times_.resize(T + 1);
        s.times_[0] = 0;
        const double h = (1.0 - p.t_min) / static_cast<double>(T - 1);
        for (std::size_t k = 1; k <= T; ++k)
            s.times_[k] = static_cast<Scalar>(k == T ? 1.0 : p.t_min + h * static_cast<double>(k - 1));

        s.betas_.resize(T + 1);
        std::vector<double> integral(T + 1, 0.0);
        for (std::size_t k = 0; k <= T; ++k) s.betas_[k] = static_cast<Scalar>(beta_at(p, s.times_[k]));
        for (std::size_t k = 1; k <= T; ++k) {
            const double a = static_cast<double>(s.times_[k - 1]);
            const double b = static_cast<double>(s.times_[k]);
            const double dt = (b - a) / static_cast<double>(p.substeps);
            double acc = 0.5 * (beta_at(p, a) + beta_at(p, b));
            for (std::size_t j = 1; j < p.substeps; ++j) acc += beta_at(p, a + dt * static_cast<double>(j));
            integral[k] = integral[k - 1] + acc * dt;
        }
        s.tabulate_from_integral(integral);
        return s;
    }

    /// Schedule from explicit times (strictly increasing, starting at 0) and
    /// gamma values; sigma follows from variance preservation.
    static NoiseSchedule from_table(std::vector<Scalar> times, const std::vector<Scalar>& gammas) {
        if (times.size() < 3 || times.size() != gammas.size())
            throw ConfigError("schedule table: need at least 3 matching (t, gamma) rows");
        if (times.front() != Scalar(0) || gammas.front() != Scalar(1))
            throw ConfigError("schedule table: level 0 must be t = 0 with gamma = 1");
        NoiseSchedule s;
        s.kind_ = ScheduleKind::tabulated;
        s.times_ = std::move(times);
        std::vector<double> integral(s.times_.size());
        for (std::size_t k = 0; k < s.times_.size(); ++k) {
            if (k > 0 && !(s.times_[k] > s.times_[k - 1]))
                throw ConfigError("schedule table: times must be strictly increasing");
            if (!(gammas[k] > 0) || gammas[k] > 1)
                throw ConfigError("schedule table: gamma must lie in (0, 1]");
            integral[k] = -2.0 * std::log(static_cast<double>(gammas[k]));
            if (k > 0 && !(integral[k] > 0.0))
                throw ConfigError("schedule table: gamma must be below 1 past level 0");
        }
        s.betas_.assign(s.times_.size(), std::numeric_limits<Scalar>::quiet_NaN());
        s.tabulate_from_integral(integral);
        return s;
    }

    ScheduleKind kind() const { return kind_; }
    /// Number of noisy levels T (levels 1..T).
    std::size_t num_steps() const { return times_.size() - 1; }
    std::size_t num_levels() const { return times_.size(); }

    Scalar time(std::size_t k) const { return times_.at(k); }
    Scalar beta(std::size_t k) const { return betas_.at(k); }
    Scalar gamma(std::size_t k) const { return gammas_.at(k); }
    Scalar sigma(std::size_t k) const { return sigmas_.at(k); }
    Scalar sigma_sq(std::size_t k) const { return sigma_sq_.at(k); }
    /// log(gamma^2 / sigma^2); +inf at level 0.
    Scalar log_snr(std::size_t k) const { return alphas_.at(k); }
    /// Tabulated finite-difference slope of the log-SNR (level >= 1).
    Scalar log_snr_slope(std::size_t k) const { return slopes_.at(k); }

    Scalar t_min() const { return times_[1]; }

    /// Finite-difference derivative of the log-SNR at level k. Central on
    /// the interior grid 2..T-1, one-sided (and flagged) at levels 1 and T.
    LogSnrSlope<Scalar> log_snr_derivative(std::size_t k) const {
        const std::size_t T = num_steps();
        if (k == 0 || k > T) throw DomainError("log_snr_derivative: level outside 1..T");
        if (k == 1)
            return {(alphas_[2] - alphas_[1]) / (times_[2] - times_[1]), true};
        if (k == T)
            return {(alphas_[T] - alphas_[T - 1]) / (times_[T] - times_[T - 1]), true};
        return {(alphas_[k + 1] - alphas_[k - 1]) / (times_[k + 1] - times_[k - 1]), false};
    }

private:
    NoiseSchedule() = default;

    static double beta_at(const ScheduleParams& p, double t) {
        switch (p.kind) {
            case ScheduleKind::linear: return p.beta_min + t * (p.beta_max - p.beta_min);
            case ScheduleKind::constant: return p.beta_max;
            case ScheduleKind::cosine: {
                // Continuous-time cosine schedule, clipped at beta_max near t = 1.
                constexpr double s = 0.008;
                const double phase = (t + s) / (1.0 + s) * std::numbers::pi / 2.0;
                const double b = std::numbers::pi / (1.0 + s) * std::tan(phase);
                return (b > p.beta_max || !std::isfinite(b)) ? p.beta_max : b;
            }
            case ScheduleKind::tabulated: break;
        }
        return std::numeric_limits<double>::quiet_NaN();
    }

    void tabulate_from_integral(const std::vector<double>& integral) {
        const std::size_t n = integral.size();
        gammas_.resize(n);
        sigmas_.resize(n);
        sigma_sq_.resize(n);
        alphas_.resize(n);
        for (std::size_t k = 0; k < n; ++k) {
            const double g2 = std::exp(-integral[k]);
            const double s2 = -std::expm1(-integral[k]);
            gammas_[k] = static_cast<Scalar>(std::exp(-0.5 * integral[k]));
            sigma_sq_[k] = static_cast<Scalar>(s2);
            sigmas_[k] = static_cast<Scalar>(std::sqrt(s2));
            alphas_[k] = k == 0 ? std::numeric_limits<Scalar>::infinity()
                                : static_cast<Scalar>(std::log(g2) - std::log(s2));
        }
        slopes_.assign(n, Scalar(0));
        slopes_[0] = std::numeric_limits<Scalar>::quiet_NaN();
        for (std::size_t k = 1; k < n; ++k) slopes_[k] = log_snr_derivative(k).value;
    }

    ScheduleKind kind_ = ScheduleKind::linear;
    std::vector<Scalar> times_, betas_, gammas_, sigmas_, sigma_sq_, alphas_, slopes_;
};

}  // namespace cpr
