#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "cpr/rng.hpp"
#include "cpr/score_oracle.hpp"

using cpr::ConditionalFamily;
using cpr::GaussianMixture;
using cpr::NoiseSchedule;
using cpr::ScoreOracle;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

std::shared_ptr<const NoiseSchedule<double>> linear_schedule(std::size_t T = 100) {
    cpr::ScheduleParams p;
    p.num_steps = T;
    return std::make_shared<const NoiseSchedule<double>>(NoiseSchedule<double>::build(p));
}

VectorXd vec(std::initializer_list<double> v) {
    VectorXd out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) out[i++] = x;
    return out;
}

GaussianMixture<double> random_mixture(Eigen::Index d, Eigen::Index K, cpr::StreamRng& rng) {
    std::uniform_real_distribution<double> u(0.2, 1.0);
    VectorXd w(K);
    for (Eigen::Index j = 0; j < K; ++j) w[j] = u(rng);
    w /= w.sum();
    MatrixXd mu(d, K), var(d, K);
    for (Eigen::Index j = 0; j < K; ++j) {
        mu.col(j) = 2.0 * cpr::standard_normal<double>(d, rng);
        for (Eigen::Index i = 0; i < d; ++i) var(i, j) = 0.3 + u(rng);
    }
    return {w, mu, var};
}

ConditionalFamily<double> random_family(Eigen::Index d, Eigen::Index K, Eigen::Index k, cpr::StreamRng& rng) {
    MatrixXd map(d, k);
    for (Eigen::Index j = 0; j < k; ++j) map.col(j) = cpr::standard_normal<double>(d, rng);
    return {random_mixture(d, K, rng), map, cpr::standard_normal<double>(d, rng)};
}

VectorXd fd_gradient(const std::function<double(const VectorXd&)>& f, const VectorXd& x, double h = 1e-5) {
    VectorXd g(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        VectorXd a = x, b = x;
        a[i] += h;
        b[i] -= h;
        g[i] = (f(a) - f(b)) / (2 * h);
    }
    return g;
}

}  // namespace

TEST(GaussianMixture, ValidatesWeightsAndVariances) {
    EXPECT_THROW(GaussianMixture<double>(vec({0.5, 0.6}), MatrixXd::Zero(1, 2), MatrixXd::Ones(1, 2)),
                 cpr::ConfigError);
    EXPECT_THROW(GaussianMixture<double>(vec({1.0}), MatrixXd::Zero(1, 1), MatrixXd::Zero(1, 1)), cpr::ConfigError);
    EXPECT_NO_THROW(GaussianMixture<double>(vec({0.25, 0.75}), MatrixXd::Zero(2, 2), MatrixXd::Ones(2, 2)));
}

TEST(GaussianMixture, DiffusionIsClosedForm) {
    const GaussianMixture<double> q(vec({0.3, 0.7}), MatrixXd{{-1.0, 2.0}}, MatrixXd{{0.5, 1.5}});
    const auto d = q.diffused(0.6, 0.64);
    EXPECT_DOUBLE_EQ(d.means()(0, 0), -0.6);
    EXPECT_DOUBLE_EQ(d.means()(0, 1), 1.2);
    EXPECT_DOUBLE_EQ(d.variances()(0, 0), 0.36 * 0.5 + 0.64);
    EXPECT_DOUBLE_EQ(d.weights()[1], 0.7);
}

TEST(DiffusedLogDensity, UnitGaussianCollapses) {
    const auto q = GaussianMixture<double>::isotropic(vec({0.0}), 1.0);
    EXPECT_NEAR(q.diffused(0.6, 0.64).log_density(vec({0.0})), -0.5 * std::log(2 * std::numbers::pi), 1e-15);
}

TEST(DiffusedLogDensity, MatchesQuadratureOfTheKernel) {
    const GaussianMixture<double> q(vec({0.3, 0.7}), MatrixXd{{-1.0, 2.0}}, MatrixXd{{0.5, 1.5}});
    EXPECT_NEAR(q.diffused(0.6, 0.64).log_density(vec({0.3})), -1.3354226164313468195532935936, 1e-6);
}

TEST(DiffusedLogDensity, TranslationEquivariant) {
    auto rng = cpr::make_stream(3, cpr::StreamTag::data);
    const auto q = random_mixture(3, 3, rng);
    const VectorXd v = vec({0.7, -1.1, 2.5});
    const VectorXd x = vec({0.1, 0.2, -0.3});
    EXPECT_NEAR(q.log_density(x), q.shifted(v).log_density(x + v), 1e-12);
}

TEST(DiffusedLogDensity, NoUnderflowFarFromMass) {
    const auto q = GaussianMixture<double>::isotropic(vec({0.0}), 1e-4);
    const double lp = q.log_density(vec({50.0}));
    EXPECT_TRUE(std::isfinite(lp));
    EXPECT_LT(lp, -1e6);
    EXPECT_TRUE(q.score(vec({50.0})).allFinite());
}

TEST(Score, ZeroAtDiffusedMean) {
    const auto sched = linear_schedule();
    const auto fam = ConditionalFamily<double>::unconditional(GaussianMixture<double>::isotropic(vec({1.5, -2.0}), 0.7));
    const ScoreOracle<double> o(fam, sched);
    const std::size_t k = 40;
    const VectorXd x = sched->gamma(k) * vec({1.5, -2.0});
    EXPECT_LT(o.score(x, k, fam.null_condition()).norm(), 1e-14);
}

TEST(Score, MatchesFiniteDifferences) {
    const auto sched = linear_schedule();
    auto rng = cpr::make_stream(11, cpr::StreamTag::data);
    for (int trial = 0; trial < 30; ++trial) {
        const Eigen::Index d = 1 + trial % 3;
        const auto fam = random_family(d, 3, 2, rng);
        const ScoreOracle<double> o(fam, sched);
        const std::size_t k = 1 + static_cast<std::size_t>(trial * 7) % 100;
        const VectorXd c = cpr::standard_normal<double>(2, rng);
        const VectorXd x = cpr::standard_normal<double>(d, rng);
        const VectorXd fd = fd_gradient([&](const VectorXd& y) { return o.diffused_log_density(y, k, c); }, x);
        const VectorXd s = o.score(x, k, c);
        EXPECT_LT((s - fd).norm(), 1e-5 * std::max(1.0, fd.norm())) << "level " << k;
    }
}

TEST(Score, IsotropicUnitGaussianHandAlgebra) {
    const auto sched = linear_schedule();
    const VectorXd mu = vec({0.5, -1.0, 2.0});
    const ScoreOracle<double> o(ConditionalFamily<double>::unconditional(GaussianMixture<double>::isotropic(mu, 1.0)),
                                sched);
    const VectorXd x = vec({0.3, 0.1, -0.4});
    for (std::size_t k : {1, 50, 100}) {
        const VectorXd expected = -(x - sched->gamma(k) * mu);
        EXPECT_LT((o.score(x, k, VectorXd::Zero(1)) - expected).norm(), 1e-12);
    }
}

TEST(Score, RejectsCleanLevel) {
    const auto sched = linear_schedule();
    const ScoreOracle<double> o(
        ConditionalFamily<double>::unconditional(GaussianMixture<double>::isotropic(vec({0.0}), 1.0)), sched);
    EXPECT_THROW(o.score(vec({0.0}), 0, VectorXd::Zero(1)), cpr::DomainError);
    EXPECT_THROW(o.mmse_denoiser(vec({0.0}), 0, VectorXd::Zero(1)), cpr::DomainError);
}

TEST(Denoiser, ZeroAtDiffusedMean) {
    const auto sched = linear_schedule();
    const ScoreOracle<double> o(
        ConditionalFamily<double>::unconditional(GaussianMixture<double>::isotropic(vec({1.0, 2.0}), 0.5)), sched);
    const VectorXd x = sched->gamma(30) * vec({1.0, 2.0});
    EXPECT_LT(o.mmse_denoiser(x, 30, VectorXd::Zero(1)).norm(), 1e-13);
}

TEST(Denoiser, TweedieIdentity) {
    const auto sched = linear_schedule();
    auto rng = cpr::make_stream(12, cpr::StreamTag::data);
    for (int trial = 0; trial < 200; ++trial) {
        const auto fam = random_family(1 + trial % 4, 1 + trial % 3, 2, rng);
        const ScoreOracle<double> o(fam, sched);
        const std::size_t k = 1 + static_cast<std::size_t>(trial * 13) % 100;
        const VectorXd c = cpr::standard_normal<double>(2, rng);
        const VectorXd x = 2.0 * cpr::standard_normal<double>(fam.dim(), rng);
        const VectorXd lhs = o.mmse_denoiser(x, k, c);
        const VectorXd rhs = -sched->sigma(k) * o.score(x, k, c);
        EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-10);
    }
}

TEST(Denoiser, NarrowComponentsPickTheNearestMean) {
    const auto sched = linear_schedule();
    const GaussianMixture<double> q(vec({0.5, 0.5}), MatrixXd{{-2.0, 2.0}}, MatrixXd{{1e-6, 1e-6}});
    const ScoreOracle<double> o(ConditionalFamily<double>::unconditional(q), sched);
    const std::size_t k = 20;
    const double g = sched->gamma(k), s = sched->sigma(k);
    for (double x : {-2.5, -1.7, 1.9, 2.4}) {
        const double nearest = x < 0 ? -2.0 : 2.0;
        // posterior weights computed directly from the two kernels
        const double v = g * g * 1e-6 + s * s;
        const double l0 = -std::pow(x + 2.0 * g, 2) / (2 * v), l1 = -std::pow(x - 2.0 * g, 2) / (2 * v);
        const double r1 = 1.0 / (1.0 + std::exp(l0 - l1));
        EXPECT_NEAR(x < 0 ? 1.0 - r1 : r1, 1.0, 1e-6);
        EXPECT_NEAR(o.mmse_denoiser(vec({x}), k, VectorXd::Zero(1))[0], (x - g * nearest) / s, 1e-4);
    }
}

TEST(MixtureScore, DegenerateWeightsReturnFirstOracle) {
    const auto sched = linear_schedule();
    std::vector<ScoreOracle<double>> os{
        {ConditionalFamily<double>::unconditional(GaussianMixture<double>::isotropic(vec({-1.0}), 1.0)), sched},
        {ConditionalFamily<double>::unconditional(GaussianMixture<double>::isotropic(vec({2.0}), 0.5)), sched}};
    const std::vector<double> w{1.0, 0.0};
    const VectorXd x = vec({0.4}), c = VectorXd::Zero(1);
    const auto s = cpr::mixture_score<double>(os, w, cpr::MixtureWeighting::exact, x, 10, c);
    EXPECT_EQ(s[0], os[0].score(x, 10, c)[0]);
}

TEST(MixtureScore, ExactModeIsGradientOfMixtureDensity) {
    const auto sched = linear_schedule();
    std::vector<ScoreOracle<double>> os{
        {ConditionalFamily<double>::unconditional(GaussianMixture<double>::isotropic(vec({-1.0}), 1.0)), sched},
        {ConditionalFamily<double>::unconditional(GaussianMixture<double>::isotropic(vec({2.0}), 0.5)), sched}};
    const std::vector<double> w{0.3, 0.7};
    const VectorXd c = VectorXd::Zero(1);
    for (std::size_t k : {1, 10, 50, 90}) {
        for (double xv : {-2.0, 0.0, 0.7, 3.0}) {
            auto log_mix = [&](const VectorXd& y) {
                return std::log(w[0] * std::exp(os[0].diffused_log_density(y, k, c)) +
                                w[1] * std::exp(os[1].diffused_log_density(y, k, c)));
            };
            const VectorXd x = vec({xv});
            const double fd = fd_gradient(log_mix, x)[0];
            const double s = cpr::mixture_score<double>(os, w, cpr::MixtureWeighting::exact, x, k, c)[0];
            EXPECT_NEAR(s, fd, 1e-5 * std::max(1.0, std::abs(fd)));
        }
    }
}

TEST(MixtureScore, IdenticalOraclesGiveSingleScore) {
    const auto sched = linear_schedule();
    auto rng = cpr::make_stream(5, cpr::StreamTag::data);
    const auto fam = random_family(2, 2, 1, rng);
    std::vector<ScoreOracle<double>> os{{fam, sched}, {fam, sched}, {fam, sched}};
    const std::vector<double> w{0.2, 0.5, 0.3};
    const VectorXd x = vec({0.3, -0.2}), c = vec({0.5});
    const auto s = cpr::mixture_score<double>(os, w, cpr::MixtureWeighting::exact, x, 25, c);
    EXPECT_LT((s - os[0].score(x, 25, c)).norm(), 1e-12);
}

TEST(MixtureScore, FixedModeUsesGivenWeights) {
    const auto sched = linear_schedule();
    std::vector<ScoreOracle<double>> os{
        {ConditionalFamily<double>::unconditional(GaussianMixture<double>::isotropic(vec({-1.0}), 1.0)), sched},
        {ConditionalFamily<double>::unconditional(GaussianMixture<double>::isotropic(vec({2.0}), 0.5)), sched}};
    const std::vector<double> w{0.25, 0.75};
    const VectorXd x = vec({0.1}), c = VectorXd::Zero(1);
    const double expected = 0.25 * os[0].score(x, 7, c)[0] + 0.75 * os[1].score(x, 7, c)[0];
    EXPECT_NEAR(cpr::mixture_score<double>(os, w, cpr::MixtureWeighting::fixed, x, 7, c)[0], expected, 1e-15);
}

TEST(MixtureScore, RejectsMismatchedInputs) {
    const auto sched = linear_schedule();
    const auto other = linear_schedule(50);
    std::vector<ScoreOracle<double>> os{
        {ConditionalFamily<double>::unconditional(GaussianMixture<double>::isotropic(vec({0.0}), 1.0)), sched},
        {ConditionalFamily<double>::unconditional(GaussianMixture<double>::isotropic(vec({0.0, 1.0}), 1.0)), sched}};
    const std::vector<double> w{0.5, 0.5};
    EXPECT_THROW(cpr::mixture_score<double>(os, w, cpr::MixtureWeighting::exact, vec({0.0}), 3, VectorXd::Zero(1)),
                 cpr::ConfigError);
    std::vector<ScoreOracle<double>> os2{
        {ConditionalFamily<double>::unconditional(GaussianMixture<double>::isotropic(vec({0.0}), 1.0)), sched},
        {ConditionalFamily<double>::unconditional(GaussianMixture<double>::isotropic(vec({0.0}), 1.0)), other}};
    EXPECT_THROW(cpr::mixture_score<double>(os2, w, cpr::MixtureWeighting::exact, vec({0.0}), 3, VectorXd::Zero(1)),
                 cpr::ConfigError);
    const std::vector<double> bad{0.5, 0.6};
    EXPECT_THROW(cpr::mixture_score<double>(std::span(os.data(), 1), std::span(bad.data(), 1),
                                            cpr::MixtureWeighting::exact, vec({0.0}), 3, VectorXd::Zero(1)),
                 cpr::ConfigError);
}

TEST(GuidanceScore, EndpointsAndAffineCombination) {
    const auto sched = linear_schedule();
    const ConditionalFamily<double> fam(GaussianMixture<double>::isotropic(vec({0.0, 0.0}), 1.0),
                                        MatrixXd{{1.0, 0.0}, {0.5, 2.0}}, vec({0.1, -0.1}));
    const ScoreOracle<double> o(fam, sched);
    const VectorXd x = vec({0.4, -0.6}), c = vec({1.0, -0.5});
    const VectorXd cond = o.score(x, 20, c), uncond = o.score(x, 20, fam.null_condition());
    EXPECT_LT((cpr::cfg_score(o, x, 20, c, 1.0) - cond).norm(), 1e-15);
    EXPECT_LT((cpr::cfg_score(o, x, 20, c, 0.0) - uncond).norm(), 1e-15);
    // shifted unit Gaussian: score = -(x - gamma * shift) for both branches
    const double g = sched->gamma(20);
    const VectorXd by_hand = -(x - g * fam.shift(fam.null_condition())) -
                             7.5 * g * (fam.shift(fam.null_condition()) - fam.shift(c));
    EXPECT_LT((cpr::cfg_score(o, x, 20, c, 7.5) - by_hand).norm(), 1e-12);
}

TEST(ConditionalFamily, NullConditionIsZeroAndDimsChecked) {
    const ConditionalFamily<double> fam(GaussianMixture<double>::isotropic(vec({0.0}), 1.0), MatrixXd{{2.0, 3.0}},
                                        vec({1.0}));
    EXPECT_EQ(fam.null_condition().size(), 2);
    EXPECT_EQ(fam.null_condition().squaredNorm(), 0.0);
    EXPECT_DOUBLE_EQ(fam.conditioned(vec({1.0, 1.0})).means()(0, 0), 6.0);
    EXPECT_THROW(fam.shift(vec({1.0})), cpr::ConfigError);
    EXPECT_THROW(ConditionalFamily<double>(GaussianMixture<double>::isotropic(vec({0.0}), 1.0), MatrixXd::Zero(2, 1),
                                           vec({0.0})),
                 cpr::ConfigError);
}

TEST(DiffusedLogDensity, FullyNoisedIsStandardNormalInTotalVariation) {
    const auto sched = linear_schedule();
    const GaussianMixture<double> q(vec({0.4, 0.6}), MatrixXd{{-0.9, 0.6}}, MatrixXd{{0.5, 1.0}});
    const auto d = q.diffused(sched->gamma(100), sched->sigma_sq(100));
    const double h = 1e-3;
    double tv = 0;
    for (double x = -10; x <= 10; x += h) {
        const double p = std::exp(d.log_density(vec({x})));
        const double n = std::exp(-0.5 * x * x) / std::sqrt(2 * std::numbers::pi);
        tv += 0.5 * std::abs(p - n) * h;
    }
    EXPECT_LT(tv, 1e-3);
}

TEST(GaussianMixture, SamplesMatchWeights) {
    const GaussianMixture<double> q(vec({0.3, 0.7}), MatrixXd{{-5.0, 5.0}}, MatrixXd{{1.0, 1.0}});
    auto rng = cpr::make_stream(9, cpr::StreamTag::data);
    int right = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) right += q.sample(rng)[0] > 0;
    EXPECT_NEAR(right / double(n), 0.7, 4 * std::sqrt(0.21 / n));
}
