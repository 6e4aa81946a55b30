#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cpr/parallel.hpp"
#include "cpr/rng.hpp"
#include "cpr/score_oracle.hpp"

namespace cpr {

enum class SamplerKind { ancestral_stochastic, ancestral_deterministic, langevin };

inline std::string_view to_string(SamplerKind kind) {
    switch (kind) {
        case SamplerKind::ancestral_stochastic: return "ancestral_stochastic";
        case SamplerKind::ancestral_deterministic: return "ancestral_deterministic";
        case SamplerKind::langevin: return "langevin";
    }
    return "unknown";
}

inline SamplerKind parse_sampler_kind(std::string_view name) {
    if (name == "ancestral_stochastic") return SamplerKind::ancestral_stochastic;
    if (name == "ancestral_deterministic") return SamplerKind::ancestral_deterministic;
    if (name == "langevin") return SamplerKind::langevin;
    throw ConfigError("sampler.kind: unknown sampler kind '" + std::string(name) + "'");
}

/// x_prev = state_scale * x + score_scale * score + noise_scale * z
template <typename Scalar>
struct StepCoefficients {
    Scalar state_scale;
    Scalar score_scale;
    Scalar noise_scale;
};

template <typename Scalar = double>
struct SamplerConfig {
    std::shared_ptr<const NoiseSchedule<Scalar>> schedule;
    SamplerKind kind = SamplerKind::ancestral_stochastic;
    /// Langevin steps per level.
    std::size_t langevin_steps = 20;
    /// Langevin step size at level k is eps0 * sigma_k^2 unless eps is given.
    Scalar eps0 = Scalar(0.05);
    std::vector<Scalar> eps;
    /// Re-noise between Langevin levels with the ancestral kernel instead of
    /// carrying the state over unchanged.
    bool ancestral_bridge = false;
    std::uint64_t seed = 0;
    bool record_states = true;
    std::size_t threads = 1;

    std::size_t num_steps() const { return schedule->num_steps(); }

    Scalar step_size(std::size_t level) const {
        if (!eps.empty()) return eps.at(level);
        return eps0 * schedule->sigma_sq(level);
    }

    void validate() const {
        if (!schedule) throw ConfigError("sampler: schedule is required");
        if (kind == SamplerKind::langevin) {
            if (langevin_steps == 0) throw ConfigError("sampler.langevin_steps: N must be >= 1");
            if (!eps.empty() && eps.size() != schedule->num_levels())
                throw ConfigError("sampler.eps: need one step size per level");
            for (std::size_t k = 1; k <= schedule->num_steps(); ++k)
                if (!(step_size(k) > 0)) throw ConfigError("sampler.eps: step sizes must be positive");
        }
    }
};

/// Coefficients of the backward transition from level k to level k - 1.
///
/// Ancestral steps use the Gaussian posterior q(x_{k-1} | x_k, x0) with x0
/// replaced by its Tweedie estimate (x_k + sigma_k^2 score) / gamma_k; the
/// deterministic variant is the noise-free DDIM map. Langevin coefficients
/// describe a single unadjusted Langevin move at level k.
template <typename Scalar>
StepCoefficients<Scalar> step_coefficients(const NoiseSchedule<Scalar>& schedule, std::size_t level,
                                           SamplerKind kind, Scalar langevin_eps = Scalar(0)) {
    if (level == 0 || level > schedule.num_steps())
        throw DomainError("step_coefficients: level must lie in 1..T");
    if (kind == SamplerKind::langevin)
        return {Scalar(1), langevin_eps / Scalar(2), std::sqrt(langevin_eps)};

    const Scalar g_t = schedule.gamma(level), g_s = schedule.gamma(level - 1);
    const Scalar s_t = schedule.sigma(level), s_s = schedule.sigma(level - 1);
    if (kind == SamplerKind::ancestral_deterministic)
        return {g_s / g_t, s_t * (g_s * s_t / g_t - s_s), Scalar(0)};

    const Scalar g_ts = g_t / g_s;
    const Scalar var_ts = Scalar(1) - g_ts * g_ts;  // sigma_t^2 - g_ts^2 sigma_s^2 under VP
    const Scalar noise_var = var_ts * schedule.sigma_sq(level - 1) / schedule.sigma_sq(level);
    return {Scalar(1) / g_ts, var_ts / g_ts, std::sqrt(noise_var)};
}

template <typename Scalar>
std::vector<StepCoefficients<Scalar>> coefficient_table(const SamplerConfig<Scalar>& config) {
    const std::size_t T = config.num_steps();
    std::vector<StepCoefficients<Scalar>> table(T + 1, {Scalar(1), Scalar(0), Scalar(0)});
    for (std::size_t k = 1; k <= T; ++k)
        table[k] = step_coefficients(*config.schedule, k, config.kind,
                                     config.kind == SamplerKind::langevin ? config.step_size(k) : Scalar(0));
    return table;
}

template <typename Scalar>
Vector<Scalar> reverse_update(const Vector<Scalar>& x, const Vector<Scalar>& score,
                              const StepCoefficients<Scalar>& c, const Vector<Scalar>& z) {
    Vector<Scalar> out = c.state_scale * x + c.score_scale * score;
    if (c.noise_scale != Scalar(0)) out += c.noise_scale * z;
    return out;
}

/// N unadjusted Langevin moves at a fixed level:
/// x <- x + (eps / 2) * score(x) + sqrt(eps) * z.
template <typename Scalar, typename Rng>
Vector<Scalar> langevin_level(Vector<Scalar> x, std::size_t level, const ScoreFn<Scalar>& score,
                              Scalar eps, std::size_t steps, Rng& rng) {
    if (steps == 0) throw ConfigError("langevin: N must be >= 1");
    if (!(eps > 0)) throw ConfigError("langevin: eps must be positive");
    const Scalar drift = eps / Scalar(2);
    const Scalar noise = std::sqrt(eps);
    for (std::size_t i = 0; i < steps; ++i) {
        const Vector<Scalar> s = score(x, level);
        x += drift * s + noise * standard_normal<Scalar>(x.size(), rng);
    }
    return x;
}

template <typename Scalar = double>
struct Trajectory {
    /// Levels in generation order: T, T-1, ..., 0 (only the last entry when
    /// states are not recorded).
    std::vector<std::size_t> levels;
    std::vector<Vector<Scalar>> states;
    /// Per backward step (levels T..1 in generation order), true where the
    /// private model was used. Empty unless a chooser filled it.
    std::vector<bool> used_private;
    std::uint64_t seed = 0;
    std::uint64_t index = 0;
    std::size_t score_evaluations = 0;

    const Vector<Scalar>& terminal() const { return states.back(); }
};

/// Wraps a score function and counts calls; safe to share across threads.
template <typename Scalar>
class CountingScore {
public:
    explicit CountingScore(ScoreFn<Scalar> inner)
        : inner_(std::move(inner)), calls_(std::make_shared<std::atomic<std::size_t>>(0)) {}

    Vector<Scalar> operator()(const Vector<Scalar>& x, std::size_t level) const {
        calls_->fetch_add(1, std::memory_order_relaxed);
        return inner_(x, level);
    }

    std::size_t calls() const { return calls_->load(); }
    void reset() { calls_->store(0); }

    ScoreFn<Scalar> fn() const { return *this; }

private:
    ScoreFn<Scalar> inner_;
    std::shared_ptr<std::atomic<std::size_t>> calls_;
};

namespace detail {

template <typename Scalar>
void require_finite(const Vector<Scalar>& x, std::size_t level, std::uint64_t index) {
    if (!x.allFinite())
        throw NumericError("sampler: non-finite state at level " + std::to_string(level) +
                               " (trajectory " + std::to_string(index) + ")",
                           level);
}

template <typename Scalar>
void record(Trajectory<Scalar>& traj, std::size_t level, const Vector<Scalar>& x, bool keep) {
    if (!keep && !traj.states.empty()) {
        traj.levels.back() = level;
        traj.states.back() = x;
        return;
    }
    traj.levels.push_back(level);
    traj.states.push_back(x);
}

}  // namespace detail

/// x_T drawn from N(0, I) on the trajectory's own stream.
template <typename Scalar>
Vector<Scalar> initial_state(Eigen::Index dim, std::uint64_t seed, std::uint64_t index) {
    auto rng = make_stream(seed, StreamTag::initial_noise, index);
    return standard_normal<Scalar>(dim, rng);
}

template <typename Scalar>
Vector<Scalar> step_noise(Eigen::Index dim, std::uint64_t seed, std::uint64_t index, std::size_t level) {
    auto rng = make_stream(seed, StreamTag::sampling, index, level);
    return standard_normal<Scalar>(dim, rng);
}

/// Backward diffusion from x_T ~ N(0, I) to level 0 with one score function.
/// The (config.seed, index) pair fixes every random draw.
template <typename Scalar>
Trajectory<Scalar> run_backward(const ScoreFn<Scalar>& score, const SamplerConfig<Scalar>& config,
                                Eigen::Index dim, std::uint64_t index = 0) {
    config.validate();
    const auto& schedule = *config.schedule;
    const std::size_t T = schedule.num_steps();
    Trajectory<Scalar> traj;
    traj.seed = config.seed;
    traj.index = index;
    Vector<Scalar> x = initial_state<Scalar>(dim, config.seed, index);
    detail::record(traj, T, x, config.record_states);

    for (std::size_t k = T; k >= 1; --k) {
        if (config.kind == SamplerKind::langevin) {
            auto rng = make_stream(config.seed, StreamTag::sampling, index, k);
            x = langevin_level<Scalar>(std::move(x), k, score, config.step_size(k), config.langevin_steps, rng);
            traj.score_evaluations += config.langevin_steps;
            if (config.ancestral_bridge) {
                const auto c = step_coefficients(schedule, k, SamplerKind::ancestral_stochastic);
                const Vector<Scalar> s = score(x, k);
                ++traj.score_evaluations;
                x = reverse_update<Scalar>(x, s, c, standard_normal<Scalar>(dim, rng));
            }
        } else {
            const auto c = step_coefficients(schedule, k, config.kind);
            const Vector<Scalar> s = score(x, k);
            ++traj.score_evaluations;
            x = reverse_update<Scalar>(x, s, c, step_noise<Scalar>(dim, config.seed, index, k));
        }
        detail::require_finite(x, k - 1, index);
        detail::record(traj, k - 1, x, config.record_states);
    }
    return traj;
}

/// Terminal samples of n independent trajectories (indices 0..n-1), one
/// column each.
template <typename Scalar, typename Runner>
Matrix<Scalar> terminal_samples(std::size_t n, Eigen::Index dim, Runner&& run_one, std::size_t threads = 1) {
    Matrix<Scalar> out(dim, static_cast<Eigen::Index>(n));
    parallel_for(n, [&](std::size_t i) { out.col(static_cast<Eigen::Index>(i)) = run_one(i).terminal(); },
                 threads);
    return out;
}

}  // namespace cpr
