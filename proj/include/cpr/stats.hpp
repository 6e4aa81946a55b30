#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "cpr/errors.hpp"
#include "cpr/rng.hpp"

namespace cpr::stats {

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

inline double mean(std::span<const double> v) {
    if (v.empty()) throw DomainError("mean: empty sample");
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

inline double variance(std::span<const double> v) {
    if (v.size() < 2) throw DomainError("variance: need at least two values");
    const double m = mean(v);
    double acc = 0;
    for (double x : v) acc += (x - m) * (x - m);
    return acc / static_cast<double>(v.size() - 1);
}

/// Linear-interpolation quantile (R type 7).
inline double quantile(std::vector<double> v, double q) {
    if (v.empty()) throw DomainError("quantile: empty sample");
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

struct Interval {
    double estimate;
    double lower;
    double upper;

    bool contains(double x) const { return lower <= x && x <= upper; }
};

/// Percentile bootstrap interval for the mean.
inline Interval bootstrap_mean(std::span<const double> v, double level, std::size_t resamples,
                               std::uint64_t seed) {
    if (v.empty()) throw DomainError("bootstrap: empty sample");
    auto rng = make_stream(seed, StreamTag::bootstrap);
    std::uniform_int_distribution<std::size_t> pick(0, v.size() - 1);
    std::vector<double> means(resamples);
    for (auto& m : means) {
        double acc = 0;
        for (std::size_t i = 0; i < v.size(); ++i) acc += v[pick(rng)];
        m = acc / static_cast<double>(v.size());
    }
    const double tail = (1.0 - level) / 2.0;
    return {mean(v), quantile(means, tail), quantile(means, 1.0 - tail)};
}

struct TwoSampleTest {
    double statistic;
    double p_value;
};

namespace detail {

// Sum over i<j of |z_i - z_j| within each label, for sorted z.
inline void within_group_sums(std::span<const double> sorted, std::span<const unsigned char> label, double& s0,
                              double& s1) {
    double sum[2] = {0, 0};
    double cnt[2] = {0, 0};
    double acc[2] = {0, 0};
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        const int g = label[i];
        acc[g] += cnt[g] * sorted[i] - sum[g];
        cnt[g] += 1;
        sum[g] += sorted[i];
    }
    s0 = acc[0];
    s1 = acc[1];
}

inline double energy_from_sums(double s_all, double s_xx, double s_yy, double n, double m) {
    const double s_xy = s_all - s_xx - s_yy;
    const double e = 2.0 * s_xy / (n * m) - 2.0 * s_xx / (n * n) - 2.0 * s_yy / (m * m);
    return n * m / (n + m) * e;
}

}  // namespace detail

/// Energy-distance two-sample permutation test. Columns are observations.
/// One-dimensional samples use an O(n log n) sorted formulation; higher
/// dimensions use the full pairwise distance matrix.
inline TwoSampleTest energy_test(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, std::size_t permutations,
                                 std::uint64_t seed) {
    if (x.rows() != y.rows()) throw ConfigError("energy_test: samples differ in dimension");
    const auto n = static_cast<std::size_t>(x.cols()), m = static_cast<std::size_t>(y.cols());
    if (n < 2 || m < 2) throw DomainError("energy_test: need at least two observations per sample");
    const std::size_t total = n + m;
    auto rng = make_stream(seed, StreamTag::bootstrap, 1);

    std::vector<unsigned char> label(total);
    std::size_t exceed = 0;
    double observed = 0;

    if (x.rows() == 1) {
        std::vector<std::pair<double, unsigned char>> pooled(total);
        for (std::size_t i = 0; i < n; ++i) pooled[i] = {x(0, static_cast<Eigen::Index>(i)), 0};
        for (std::size_t j = 0; j < m; ++j) pooled[n + j] = {y(0, static_cast<Eigen::Index>(j)), 1};
        std::sort(pooled.begin(), pooled.end());
        std::vector<double> z(total);
        for (std::size_t i = 0; i < total; ++i) {
            z[i] = pooled[i].first;
            label[i] = pooled[i].second;
        }
        double s_all = 0, prefix = 0;
        for (std::size_t i = 0; i < total; ++i) {
            s_all += static_cast<double>(i) * z[i] - prefix;
            prefix += z[i];
        }
        auto stat = [&] {
            double s0, s1;
            detail::within_group_sums(z, label, s0, s1);
            return detail::energy_from_sums(s_all, s0, s1, double(n), double(m));
        };
        observed = stat();
        for (std::size_t p = 0; p < permutations; ++p) {
            std::shuffle(label.begin(), label.end(), rng);
            if (stat() >= observed) ++exceed;
        }
    } else {
        Eigen::MatrixXd pooled(x.rows(), static_cast<Eigen::Index>(total));
        pooled << x, y;
        Eigen::MatrixXd dist(total, total);
        for (Eigen::Index i = 0; i < pooled.cols(); ++i)
            for (Eigen::Index j = i; j < pooled.cols(); ++j)
                dist(i, j) = dist(j, i) = (pooled.col(i) - pooled.col(j)).norm();
        double s_all = dist.sum() / 2.0;
        for (std::size_t i = 0; i < total; ++i) label[i] = i < n ? 0 : 1;
        auto stat = [&] {
            double s[2] = {0, 0};
            for (std::size_t i = 0; i < total; ++i)
                for (std::size_t j = i + 1; j < total; ++j)
                    if (label[i] == label[j]) s[label[i]] += dist(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
            return detail::energy_from_sums(s_all, s[0], s[1], double(n), double(m));
        };
        observed = stat();
        for (std::size_t p = 0; p < permutations; ++p) {
            std::shuffle(label.begin(), label.end(), rng);
            if (stat() >= observed) ++exceed;
        }
    }
    return {observed, static_cast<double>(exceed + 1) / static_cast<double>(permutations + 1)};
}

struct Histogram {
    std::vector<double> edges;
    std::vector<std::size_t> counts;
};

/// Uniform bins over the observed range; a degenerate range gets unit width.
inline Histogram histogram(std::span<const double> v, std::size_t bins = 50) {
    if (v.empty() || bins == 0) throw DomainError("histogram: need data and at least one bin");
    auto [lo_it, hi_it] = std::minmax_element(v.begin(), v.end());
    double lo = *lo_it, hi = *hi_it;
    if (!(hi > lo)) {
        lo -= 0.5;
        hi += 0.5;
    }
    Histogram h;
    h.edges.resize(bins + 1);
    for (std::size_t i = 0; i <= bins; ++i) h.edges[i] = lo + (hi - lo) * static_cast<double>(i) / double(bins);
    h.counts.assign(bins, 0);
    for (double x : v) {
        auto b = static_cast<std::size_t>((x - lo) / (hi - lo) * double(bins));
        h.counts[std::min(b, bins - 1)]++;
    }
    return h;
}

}  // namespace cpr::stats
