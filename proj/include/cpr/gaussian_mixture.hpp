#pragma once

#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cpr/errors.hpp"

namespace cpr {

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Derived>
typename Derived::Scalar log_sum_exp(const Eigen::MatrixBase<Derived>& v) {
    using Scalar = typename Derived::Scalar;
    const Scalar top = v.maxCoeff();
    if (!std::isfinite(top)) return top;
    return top + std::log((v.array() - top).exp().sum());
}

/// Gaussian mixture with diagonal covariances. Column j of means() and
/// variances() holds component j.
template <typename Scalar = double>
class GaussianMixture {
public:
    using VectorType = Vector<Scalar>;
    using MatrixType = Matrix<Scalar>;

    GaussianMixture() = default;

    GaussianMixture(VectorType weights, MatrixType means, MatrixType variances)
        : weights_(std::move(weights)), means_(std::move(means)), variances_(std::move(variances)) {
        validate();
    }

    static GaussianMixture isotropic(const VectorType& mean, Scalar variance) {
        return GaussianMixture(VectorType::Ones(1), mean,
                               MatrixType::Constant(mean.size(), 1, variance));
    }

    Eigen::Index dim() const { return means_.rows(); }
    Eigen::Index size() const { return means_.cols(); }
    const VectorType& weights() const { return weights_; }
    const MatrixType& means() const { return means_; }
    const MatrixType& variances() const { return variances_; }

    /// Per-component log(w_j N(x; mu_j, diag v_j)).
    VectorType component_log_terms(const VectorType& x) const {
        check_dim(x);
        const Scalar log_two_pi = std::log(Scalar(2) * std::numbers::pi_v<Scalar>);
        VectorType out(size());
        for (Eigen::Index j = 0; j < size(); ++j) {
            const auto var = variances_.col(j).array();
            const auto diff = x.array() - means_.col(j).array();
            out[j] = std::log(weights_[j]) -
                     Scalar(0.5) * ((diff.square() / var).sum() + var.log().sum() +
                                    Scalar(dim()) * log_two_pi);
        }
        return out;
    }

    Scalar log_density(const VectorType& x) const { return log_sum_exp(component_log_terms(x)); }

    /// Posterior component probabilities given x.
    VectorType responsibilities(const VectorType& x) const {
        VectorType terms = component_log_terms(x);
        const Scalar norm = log_sum_exp(terms);
        return (terms.array() - norm).exp().matrix();
    }

    VectorType score(const VectorType& x) const {
        const VectorType r = responsibilities(x);
        VectorType out = VectorType::Zero(dim());
        for (Eigen::Index j = 0; j < size(); ++j)
            out.array() -= r[j] * (x.array() - means_.col(j).array()) / variances_.col(j).array();
        return out;
    }

    /// Law of gamma * x0 + sigma * eps for x0 from this mixture.
    GaussianMixture diffused(Scalar gamma, Scalar sigma_sq) const {
        GaussianMixture out;
        out.weights_ = weights_;
        out.means_ = gamma * means_;
        out.variances_ = (gamma * gamma) * variances_.array() + sigma_sq;
        return out;
    }

    GaussianMixture shifted(const VectorType& offset) const {
        check_dim(offset);
        GaussianMixture out = *this;
        out.means_.colwise() += offset;
        return out;
    }

    template <typename Rng>
    VectorType sample(Rng& rng) const {
        std::discrete_distribution<Eigen::Index> pick(weights_.data(), weights_.data() + size());
        const Eigen::Index j = size() == 1 ? 0 : pick(rng);
        std::normal_distribution<Scalar> normal;
        VectorType x(dim());
        for (Eigen::Index i = 0; i < dim(); ++i)
            x[i] = means_(i, j) + std::sqrt(variances_(i, j)) * normal(rng);
        return x;
    }

    void check_dim(const VectorType& x) const {
        if (x.size() != dim())
            throw ConfigError("dimension mismatch: expected " + std::to_string(dim()) + ", got " +
                              std::to_string(x.size()));
    }

private:
    void validate() const {
        if (means_.cols() == 0 || means_.rows() == 0)
            throw ConfigError("mixture: need at least one component of positive dimension");
        if (weights_.size() != means_.cols() || variances_.rows() != means_.rows() ||
            variances_.cols() != means_.cols())
            throw ConfigError("mixture: weights/means/variances shapes disagree");
        if ((weights_.array() < 0).any() || std::abs(weights_.sum() - Scalar(1)) > Scalar(1e-12))
            throw ConfigError("mixture: weights must be non-negative and sum to 1");
        if (!(variances_.array() > 0).all() || !variances_.allFinite())
            throw ConfigError("mixture: covariances must be strictly positive");
        if (!means_.allFinite()) throw ConfigError("mixture: means must be finite");
    }

    VectorType weights_;
    MatrixType means_;
    MatrixType variances_;
};

/// A base mixture whose means are shifted by an affine function of a
/// condition embedding c: shift(c) = map * c + offset. The null condition is
/// the zero embedding.
template <typename Scalar = double>
class ConditionalFamily {
public:
    using VectorType = Vector<Scalar>;
    using MatrixType = Matrix<Scalar>;

    ConditionalFamily() = default;

    ConditionalFamily(GaussianMixture<Scalar> base, MatrixType map, VectorType offset)
        : base_(std::move(base)), map_(std::move(map)), offset_(std::move(offset)) {
        if (map_.rows() != base_.dim() || offset_.size() != base_.dim())
            throw ConfigError("condition_map: rows and offset must match the data dimension");
        if (!map_.allFinite() || !offset_.allFinite())
            throw ConfigError("condition_map: entries must be finite");
    }

    /// Unconditioned family: embedding dimension k with a zero map.
    static ConditionalFamily unconditional(GaussianMixture<Scalar> base, Eigen::Index k = 1) {
        const auto d = base.dim();
        return ConditionalFamily(std::move(base), MatrixType::Zero(d, k), VectorType::Zero(d));
    }

    Eigen::Index dim() const { return base_.dim(); }
    Eigen::Index condition_dim() const { return map_.cols(); }
    const GaussianMixture<Scalar>& base() const { return base_; }
    const MatrixType& map() const { return map_; }
    const VectorType& offset() const { return offset_; }

    VectorType shift(const VectorType& c) const {
        if (c.size() != condition_dim())
            throw ConfigError("condition dimension mismatch: expected " +
                              std::to_string(condition_dim()) + ", got " + std::to_string(c.size()));
        return map_ * c + offset_;
    }

    GaussianMixture<Scalar> conditioned(const VectorType& c) const { return base_.shifted(shift(c)); }

    VectorType null_condition() const { return VectorType::Zero(condition_dim()); }

private:
    GaussianMixture<Scalar> base_;
    MatrixType map_;
    VectorType offset_;
};

}  // namespace cpr
