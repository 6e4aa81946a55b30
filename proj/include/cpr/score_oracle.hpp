#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "cpr/gaussian_mixture.hpp"
#include "cpr/schedule.hpp"

namespace cpr {

/// Score (or noise-prediction) function evaluated at a schedule level.
template <typename Scalar>
using ScoreFn = std::function<Vector<Scalar>(const Vector<Scalar>&, std::size_t level)>;

/// Exact diffusion quantities for a conditional Gaussian-mixture family on a
/// shared noise schedule.
template <typename Scalar = double>
class ScoreOracle {
public:
    using VectorType = Vector<Scalar>;

    ScoreOracle(ConditionalFamily<Scalar> family,
                std::shared_ptr<const NoiseSchedule<Scalar>> schedule)
        : family_(std::move(family)), schedule_(std::move(schedule)) {
        if (!schedule_) throw ConfigError("score oracle: schedule is required");
    }

    const ConditionalFamily<Scalar>& family() const { return family_; }
    const NoiseSchedule<Scalar>& schedule() const { return *schedule_; }
    const std::shared_ptr<const NoiseSchedule<Scalar>>& schedule_ptr() const { return schedule_; }
    Eigen::Index dim() const { return family_.dim(); }

    /// The conditioned mixture pushed through the diffusion kernel to level k.
    GaussianMixture<Scalar> diffused(std::size_t level, const VectorType& c) const {
        return family_.conditioned(c).diffused(schedule_->gamma(level), schedule_->sigma_sq(level));
    }

    Scalar diffused_log_density(const VectorType& x, std::size_t level, const VectorType& c) const {
        return diffused(level, c).log_density(x);
    }

    VectorType score(const VectorType& x, std::size_t level, const VectorType& c) const {
        require_noisy(level, "score");
        return diffused(level, c).score(x);
    }

    /// Posterior mean of the injected noise, E[(x - gamma x0) / sigma | x, c],
    /// computed from the per-component Gaussian posteriors over x0.
    VectorType mmse_denoiser(const VectorType& x, std::size_t level, const VectorType& c) const {
        require_noisy(level, "mmse_denoiser");
        const Scalar g = schedule_->gamma(level);
        const Scalar s2 = schedule_->sigma_sq(level);
        const GaussianMixture<Scalar> prior = family_.conditioned(c);
        const VectorType r = prior.diffused(g, s2).responsibilities(x);
        VectorType x0_mean = VectorType::Zero(dim());
        for (Eigen::Index j = 0; j < prior.size(); ++j) {
            const auto mu = prior.means().col(j).array();
            const auto v = prior.variances().col(j).array();
            x0_mean.array() += r[j] * (mu + g * v / (g * g * v + s2) * (x.array() - g * mu));
        }
        return (x - g * x0_mean) / schedule_->sigma(level);
    }

    /// Exact law of x0 given the condition (no diffusion).
    Scalar log_density(const VectorType& x0, const VectorType& c) const {
        return family_.conditioned(c).log_density(x0);
    }

    ScoreFn<Scalar> bind(VectorType c) const {
        return [self = *this, c = std::move(c)](const VectorType& x, std::size_t level) {
            return self.score(x, level, c);
        };
    }

    ScoreFn<Scalar> bind_denoiser(VectorType c) const {
        return [self = *this, c = std::move(c)](const VectorType& x, std::size_t level) {
            return self.mmse_denoiser(x, level, c);
        };
    }

private:
    void require_noisy(std::size_t level, const char* what) const {
        if (level == 0 || level > schedule_->num_steps())
            throw DomainError(std::string(what) + ": level must lie on the noisy grid [t_min, 1]");
    }

    ConditionalFamily<Scalar> family_;
    std::shared_ptr<const NoiseSchedule<Scalar>> schedule_;
};

enum class MixtureWeighting {
    exact,  ///< posterior weights w_i p_t^i(x|c) / p_t(x|c)
    fixed,  ///< weights used as given
};

/// Score of sum_i w_i p^i pushed to level k, from the component scores.
template <typename Scalar>
Vector<Scalar> mixture_score(std::span<const ScoreOracle<Scalar>> oracles,
                             std::span<const Scalar> weights, MixtureWeighting mode,
                             const Vector<Scalar>& x, std::size_t level, const Vector<Scalar>& c) {
    if (oracles.empty() || oracles.size() != weights.size())
        throw ConfigError("mixture_score: need one weight per oracle");
    Scalar total = 0;
    for (std::size_t i = 0; i < oracles.size(); ++i) {
        if (oracles[i].dim() != oracles[0].dim())
            throw ConfigError("mixture_score: oracle dimensions differ");
        if (&oracles[i].schedule() != &oracles[0].schedule())
            throw ConfigError("mixture_score: oracles must share one schedule");
        if (weights[i] < 0) throw ConfigError("mixture_score: weights must be non-negative");
        total += weights[i];
    }
    if (std::abs(total - Scalar(1)) > Scalar(1e-12))
        throw ConfigError("mixture_score: weights must sum to 1");

    Vector<Scalar> effective(oracles.size());
    if (mode == MixtureWeighting::fixed) {
        for (std::size_t i = 0; i < oracles.size(); ++i) effective[i] = weights[i];
    } else {
        for (std::size_t i = 0; i < oracles.size(); ++i)
            effective[i] = std::log(weights[i]) + oracles[i].diffused_log_density(x, level, c);
        effective = (effective.array() - log_sum_exp(effective)).exp().matrix();
    }
    Vector<Scalar> out = Vector<Scalar>::Zero(x.size());
    for (std::size_t i = 0; i < oracles.size(); ++i)
        if (effective[i] > 0) out += effective[i] * oracles[i].score(x, level, c);
    return out;
}

/// Classifier-free guidance: s(x, t, null) + scale * (s(x, t, c) - s(x, t, null)).
template <typename Scalar>
Vector<Scalar> cfg_score(const ScoreOracle<Scalar>& oracle, const Vector<Scalar>& x, std::size_t level,
                         const Vector<Scalar>& c, Scalar guidance_scale) {
    const Vector<Scalar> uncond = oracle.score(x, level, oracle.family().null_condition());
    return uncond + guidance_scale * (oracle.score(x, level, c) - uncond);
}

}  // namespace cpr
