#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "cpr/sampler.hpp"

namespace cpr {

/// Which backward steps use the private score (the set J).
class ChoicePlan {
public:
    enum class Kind { explicit_set, alternate, min_mse };

    static ChoicePlan none() { return explicit_steps({}); }

    static ChoicePlan all(std::size_t num_steps) {
        std::set<std::size_t> steps;
        for (std::size_t k = 0; k <= num_steps; ++k) steps.insert(k);
        return explicit_steps(std::move(steps));
    }

    static ChoicePlan explicit_steps(std::set<std::size_t> steps) {
        ChoicePlan p;
        p.kind_ = Kind::explicit_set;
        p.steps_ = std::move(steps);
        return p;
    }

    /// Step t is private iff t = phase (mod period).
    static ChoicePlan alternate(std::size_t period, std::size_t phase = 0) {
        if (period == 0) throw ConfigError("plan.period: must be >= 1");
        ChoicePlan p;
        p.kind_ = Kind::alternate;
        p.period_ = period;
        p.phase_ = phase % period;
        return p;
    }

    /// Picks the model with the larger Monte-Carlo MSE at every step.
    static ChoicePlan min_mse(std::size_t draws = 8) {
        if (draws == 0) throw ConfigError("plan.draws: need at least one noise draw");
        ChoicePlan p;
        p.kind_ = Kind::min_mse;
        p.draws_ = draws;
        return p;
    }

    Kind kind() const { return kind_; }
    std::size_t period() const { return period_; }
    std::size_t phase() const { return phase_; }
    std::size_t draws() const { return draws_; }
    const std::set<std::size_t>& steps() const { return steps_; }

    bool is_static() const { return kind_ != Kind::min_mse; }

    bool uses_private(std::size_t step) const {
        switch (kind_) {
            case Kind::explicit_set: return steps_.contains(step);
            case Kind::alternate: return step % period_ == phase_;
            case Kind::min_mse: break;
        }
        throw DomainError("plan: min_mse choices are only known after a run");
    }

    /// Indicator over step indices 0..T for a static plan.
    std::vector<bool> pattern(std::size_t num_steps) const {
        std::vector<bool> out(num_steps + 1);
        for (std::size_t k = 0; k <= num_steps; ++k) out[k] = uses_private(k);
        return out;
    }

    /// Private steps restricted to 0..T.
    std::set<std::size_t> materialize(std::size_t num_steps) const {
        std::set<std::size_t> out;
        for (std::size_t k = 0; k <= num_steps; ++k)
            if (uses_private(k)) out.insert(k);
        return out;
    }

    void validate(std::size_t num_steps) const {
        if (kind_ == Kind::explicit_set && !steps_.empty() && *steps_.rbegin() > num_steps)
            throw ConfigError("plan.steps: step index exceeds T = " + std::to_string(num_steps));
    }

private:
    Kind kind_ = Kind::explicit_set;
    std::set<std::size_t> steps_;
    std::size_t period_ = 1, phase_ = 0, draws_ = 8;
};

/// Private steps of a chooser trajectory (step k is the move k -> k-1).
template <typename Scalar>
std::set<std::size_t> private_steps(const Trajectory<Scalar>& traj) {
    std::set<std::size_t> out;
    const std::size_t T = traj.used_private.size();
    for (std::size_t i = 0; i < T; ++i)
        if (traj.used_private[i]) out.insert(T - i);
    return out;
}

enum class Divergence { kl, max };

struct NafBudget {
    double k_c = 0.0;
    Divergence divergence = Divergence::kl;
};

/// CPR-KL: annealed Langevin on the weighted score alpha s1 + (1 - alpha) s2.
/// With alpha = 1/2 the level targets sqrt(q1 q2) / Z.
template <typename Scalar>
Trajectory<Scalar> cpr_kl_sample(const ScoreFn<Scalar>& safe, const ScoreFn<Scalar>& priv,
                                 SamplerConfig<Scalar> config, Eigen::Index dim, std::uint64_t index = 0,
                                 Scalar alpha = Scalar(0.5)) {
    if (!(alpha >= 0 && alpha <= 1)) throw ConfigError("cpr-kl: alpha must lie in [0, 1]");
    config.kind = SamplerKind::langevin;
    const ScoreFn<Scalar> averaged = [&](const Vector<Scalar>& x, std::size_t level) -> Vector<Scalar> {
        return alpha * safe(x, level) + (Scalar(1) - alpha) * priv(x, level);
    };
    auto traj = run_backward<Scalar>(averaged, config, dim, index);
    traj.score_evaluations *= 2;
    return traj;
}

template <typename Scalar>
struct MseChoice {
    bool use_private = false;
    Scalar mse_safe = 0;
    Scalar mse_private = 0;
};

/// Monte-Carlo MSE comparison between the two models' noise predictions.
///
/// Both MSEs are E_eps ||eps - pred_q(gamma x0 + sigma eps)||^2 at a shared
/// anchor x0, the private model's Tweedie estimate from x, with the same
/// eps draws for both models. The larger MSE wins; ties go to the safe model.
template <typename Scalar, typename Rng>
MseChoice<Scalar> min_mse_selector(const ScoreFn<Scalar>& safe, const ScoreFn<Scalar>& priv,
                                   const Vector<Scalar>& x, std::size_t level,
                                   const NoiseSchedule<Scalar>& schedule, std::size_t draws, Rng& rng,
                                   const Vector<Scalar>* private_score_at_x = nullptr) {
    if (draws == 0) throw ConfigError("min_mse_selector: need at least one noise draw");
    const Scalar g = schedule.gamma(level), s = schedule.sigma(level);
    const Vector<Scalar> s_priv = private_score_at_x ? *private_score_at_x : priv(x, level);
    const Vector<Scalar> anchor = (x + schedule.sigma_sq(level) * s_priv) / g;

    MseChoice<Scalar> out;
    for (std::size_t i = 0; i < draws; ++i) {
        const Vector<Scalar> eps = standard_normal<Scalar>(x.size(), rng);
        const Vector<Scalar> xt = g * anchor + s * eps;
        // noise prediction = -sigma * score
        out.mse_safe += (eps + s * safe(xt, level)).squaredNorm();
        out.mse_private += (eps + s * priv(xt, level)).squaredNorm();
    }
    out.mse_safe /= Scalar(draws);
    out.mse_private /= Scalar(draws);
    out.use_private = out.mse_private > out.mse_safe;
    return out;
}

/// CPR-Choose: ancestral backward diffusion that uses the private score at
/// steps in J and the safe score elsewhere. Per-step choices are recorded.
///
/// For the min-MSE plan the final step into level 0, which carries no
/// injected noise, always uses the safe model.
template <typename Scalar>
Trajectory<Scalar> cpr_choose_sample(const ScoreFn<Scalar>& safe, const ScoreFn<Scalar>& priv,
                                     const ChoicePlan& plan, const SamplerConfig<Scalar>& config,
                                     Eigen::Index dim, std::uint64_t index = 0) {
    config.validate();
    if (config.kind == SamplerKind::langevin)
        throw ConfigError("cpr-choose: needs an ancestral sampler kind");
    const auto& schedule = *config.schedule;
    const std::size_t T = schedule.num_steps();
    plan.validate(T);

    Trajectory<Scalar> traj;
    traj.seed = config.seed;
    traj.index = index;
    traj.used_private.reserve(T);
    Vector<Scalar> x = initial_state<Scalar>(dim, config.seed, index);
    detail::record(traj, T, x, config.record_states);

    for (std::size_t k = T; k >= 1; --k) {
        Vector<Scalar> s;
        bool use_private;
        if (plan.kind() == ChoicePlan::Kind::min_mse) {
            const Vector<Scalar> s_safe = safe(x, k);
            const Vector<Scalar> s_priv = priv(x, k);
            auto rng = make_stream(config.seed, StreamTag::selector, index, k);
            const auto choice = min_mse_selector<Scalar>(safe, priv, x, k, schedule, plan.draws(), rng, &s_priv);
            traj.score_evaluations += 2 + 2 * plan.draws();
            use_private = choice.use_private && k > 1;
            s = use_private ? s_priv : s_safe;
        } else {
            use_private = plan.uses_private(k);
            s = use_private ? priv(x, k) : safe(x, k);
            ++traj.score_evaluations;
        }
        traj.used_private.push_back(use_private);
        const auto c = step_coefficients(schedule, k, config.kind);
        x = reverse_update<Scalar>(x, s, c, step_noise<Scalar>(dim, config.seed, index, k));
        detail::require_finite(x, k - 1, index);
        detail::record(traj, k - 1, x, config.record_states);
    }
    return traj;
}

template <typename Scalar>
struct RejectionResult {
    Vector<Scalar> sample;
    std::size_t attempts = 0;
    Scalar log_ratio = 0;
};

/// CP-k baseline: draw from the private model until
/// log p(x) - log safe(x) <= k. Draw j of sample i uses the private sampler
/// with key (seed, i, j).
template <typename Scalar>
RejectionResult<Scalar> cp_k_rejection_sample(
    const std::function<Vector<Scalar>(std::uint64_t)>& private_sampler,
    const std::function<Scalar(const Vector<Scalar>&)>& log_safe,
    const std::function<Scalar(const Vector<Scalar>&)>& log_private, Scalar k, std::size_t max_attempts,
    std::uint64_t seed, std::uint64_t index = 0) {
    if (!(k >= 0)) throw ConfigError("cp-k: k must be >= 0");
    if (max_attempts == 0) throw ConfigError("cp-k: max_attempts must be >= 1");
    RejectionResult<Scalar> out;
    for (std::size_t j = 0; j < max_attempts; ++j) {
        const std::uint64_t key = StreamRng(seed, {static_cast<std::uint64_t>(StreamTag::rejection), index, j})();
        out.sample = private_sampler(key);
        out.attempts = j + 1;
        out.log_ratio = log_private(out.sample) - log_safe(out.sample);
        if (out.log_ratio <= k || std::isinf(k)) return out;
    }
    throw RejectionTimeout("cp-k: no draw accepted within " + std::to_string(max_attempts) + " attempts",
                           max_attempts);
}

}  // namespace cpr
