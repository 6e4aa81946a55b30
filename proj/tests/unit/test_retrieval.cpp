#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include <Eigen/SVD>

#include "cpr/retrieval.hpp"

using cpr::DataStore;
using cpr::EmbeddingRecord;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

VectorXd vec(std::initializer_list<double> v) {
    VectorXd out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) out[i++] = x;
    return out;
}

EmbeddingRecord record(std::string id, VectorXd caption, VectorXd item) {
    return EmbeddingRecord{std::move(id), std::move(item), std::move(caption), {}};
}

DataStore random_store(std::size_t n, Eigen::Index k, std::mt19937_64& gen) {
    std::normal_distribution<double> nd;
    DataStore store(k);
    for (std::size_t i = 0; i < n; ++i) {
        VectorXd item(k), cap(k);
        for (Eigen::Index j = 0; j < k; ++j) {
            item[j] = nd(gen);
            cap[j] = nd(gen);
        }
        store.add(record("r" + std::to_string(i), cap, item));
    }
    return store;
}

std::vector<std::string> brute_force(const DataStore& store, const VectorXd& q, std::size_t m) {
    auto recs = store.snapshot();
    std::sort(recs.begin(), recs.end(), [&](const EmbeddingRecord& a, const EmbeddingRecord& b) {
        const double da = (q - a.caption_embedding).norm() + (q - a.item_embedding).norm();
        const double db = (q - b.caption_embedding).norm() + (q - b.item_embedding).norm();
        return da != db ? da < db : a.id < b.id;
    });
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < std::min(m, recs.size()); ++i) ids.push_back(recs[i].id);
    return ids;
}

std::vector<std::string> ids_of(const cpr::RetrievalResult& r) {
    std::vector<std::string> ids;
    for (const auto& rec : r.records) ids.push_back(rec.id);
    return ids;
}

std::shared_ptr<const cpr::NoiseSchedule<double>> schedule() {
    cpr::ScheduleParams p;
    p.num_steps = 50;
    return std::make_shared<const cpr::NoiseSchedule<double>>(cpr::NoiseSchedule<double>::build(p));
}

cpr::ScoreOracle<double> affine_gaussian(double var) {
    MatrixXd A{{1.0, 0.5}, {-0.25, 2.0}};
    const cpr::ConditionalFamily<double> fam(cpr::GaussianMixture<double>::isotropic(vec({0.3, -0.2}), var), A,
                                             vec({0.1, 0.4}));
    return cpr::ScoreOracle<double>(fam, schedule());
}

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("cpr_retrieval_" + name + ".jsonl");
}

}  // namespace

TEST(Retrieve, ExactMatchScoresZero) {
    DataStore store(2);
    store.add(record("A", vec({1, 0}), vec({1, 0})));
    store.add(record("B", vec({0, 1}), vec({0, 1})));
    const auto r = store.retrieve(vec({1, 0}), 1);
    ASSERT_EQ(r.records.size(), 1u);
    EXPECT_EQ(r.records[0].id, "A");
    EXPECT_EQ(r.scores[0], 0.0);
    EXPECT_EQ(r.merged_prompts[0], vec({2, 0}));
    EXPECT_EQ(r.mean_item_embedding, vec({1, 0}));
}

TEST(Retrieve, MatchesBruteForce) {
    std::mt19937_64 gen(11);
    std::normal_distribution<double> nd;
    for (std::size_t n : {1u, 7u, 100u, 400u}) {
        const auto store = random_store(n, 3, gen);
        for (int rep = 0; rep < 20; ++rep) {
            const VectorXd q = vec({nd(gen), nd(gen), nd(gen)});
            for (std::size_t m : {1u, 5u, 20u}) EXPECT_EQ(ids_of(store.retrieve(q, m)), brute_force(store, q, m));
        }
    }
}

TEST(Retrieve, TiesBreakById) {
    DataStore store(1);
    store.add(record("c", vec({1}), vec({-1})));
    store.add(record("a", vec({-1}), vec({1})));
    store.add(record("b", vec({1}), vec({-1})));
    EXPECT_EQ(ids_of(store.retrieve(vec({0}), 2)), (std::vector<std::string>{"a", "b"}));
}

TEST(Retrieve, ResultSizeIsCappedByStore) {
    DataStore store(2);
    store.add(record("A", vec({1, 0}), vec({1, 0})));
    store.add(record("B", vec({0, 1}), vec({0, 1})));
    const auto r = store.retrieve(vec({0, 0}), 10);
    EXPECT_EQ(r.records.size(), 2u);
    EXPECT_EQ(r.mean_item_embedding, vec({0.5, 0.5}));
}

TEST(Retrieve, Errors) {
    DataStore store(2);
    EXPECT_THROW(store.retrieve(vec({0, 0}), 1), cpr::RetrievalError);
    store.add(record("A", vec({1, 0}), vec({1, 0})));
    EXPECT_THROW(store.retrieve(vec({0, 0}), 0), cpr::ConfigError);
    EXPECT_THROW(store.retrieve(vec({0, 0, 0}), 1), cpr::ConfigError);
    EXPECT_THROW(store.add(record("A", vec({1, 0}), vec({1, 0}))), cpr::ConfigError);
    EXPECT_THROW(store.add(record("C", vec({1}), vec({1, 0}))), cpr::ConfigError);
    EXPECT_THROW(store.add(record("D", vec({NAN, 0}), vec({1, 0}))), cpr::ConfigError);
}

TEST(MergePrompt, AddsVectors) {
    EXPECT_EQ(cpr::merge_prompt(vec({1, 2}), vec({3, 4})), vec({4, 6}));
    EXPECT_THROW(cpr::merge_prompt(vec({1}), vec({3, 4})), cpr::ConfigError);
}

TEST(RetrievalScore, ConditionsOnMeanItemEmbedding) {
    const auto base = affine_gaussian(0.7);
    DataStore store(2);
    store.add(record("A", vec({1, 0}), vec({1, 0})));
    store.add(record("B", vec({0, 1}), vec({0, 1})));
    const auto r = store.retrieve(vec({0.5, 0.5}), 2);
    const auto s = cpr::retrieval_score_fn(base, r);
    const VectorXd x = vec({0.2, -1.1});
    for (std::size_t k : {1u, 20u, 50u}) EXPECT_EQ(s(x, k), base.score(x, k, vec({0.5, 0.5})));

    const auto single = store.retrieve(vec({1, 0}), 1);
    EXPECT_EQ(cpr::retrieval_score_fn(base, single)(x, 10), base.score(x, 10, vec({1, 0})));
}

TEST(RetrievalScore, AffineShiftMatchesClosedForm) {
    const double v = 0.7;
    const auto base = affine_gaussian(v);
    DataStore store(2);
    store.add(record("A", vec({1, 0}), vec({2, -1})));
    store.add(record("B", vec({0, 1}), vec({0, 3})));
    const auto r = store.retrieve(vec({0, 0}), 2);
    const VectorXd c = vec({1, 1});
    const VectorXd mean = vec({0.3, -0.2}) + base.family().map() * c + vec({0.1, 0.4});
    const VectorXd x = vec({-0.4, 0.9});
    const auto& sched = base.schedule();
    for (std::size_t k : {1u, 25u, 50u}) {
        const double g = sched.gamma(k), s2 = sched.sigma_sq(k);
        const VectorXd expected = -(x - g * mean) / (g * g * v + s2);
        EXPECT_LT((cpr::retrieval_score_fn(base, r)(x, k) - expected).norm(), 1e-12);
    }
}

TEST(RetrievalMixture, Endpoints) {
    const auto base = affine_gaussian(1.2);
    DataStore store(2);
    store.add(record("A", vec({1, 0}), vec({2, -1})));
    const VectorXd q = vec({0.3, 0.3});
    const auto r = store.retrieve(q, 1);
    const VectorXd x = vec({0.5, 0.5});
    EXPECT_EQ(cpr::retrieval_mixture_score_fn(base, r, 1.0, 0.0)(x, 7), base.score(x, 7, q));
    EXPECT_EQ(cpr::retrieval_mixture_score_fn(base, r, 0.0, 1.0)(x, 7), cpr::retrieval_score_fn(base, r)(x, 7));
    EXPECT_THROW(cpr::retrieval_mixture_score_fn(base, r, 0.6, 0.6), cpr::ConfigError);
    EXPECT_THROW(cpr::retrieval_mixture_score_fn(base, r, -0.5, 1.5), cpr::ConfigError);
}

TEST(RetrievalMixture, HalfWeightsMatchHandCombination) {
    const double v = 1.2;
    const auto base = affine_gaussian(v);
    DataStore store(2);
    store.add(record("A", vec({1, 0}), vec({2, -1})));
    const VectorXd q = vec({0.3, 0.3});
    const auto s = cpr::retrieval_mixture_score_fn(base, store.retrieve(q, 1), 0.5, 0.5);
    const VectorXd x = vec({0.5, -0.5});
    const MatrixXd& A = base.family().map();
    const VectorXd mu_q = vec({0.4, 0.2}) + A * q;
    const VectorXd mu_r = vec({0.4, 0.2}) + A * vec({2, -1});
    for (std::size_t k : {1u, 30u, 50u}) {
        const double g = base.schedule().gamma(k), var = g * g * v + base.schedule().sigma_sq(k);
        const VectorXd expected = 0.5 * (-(x - g * mu_q) / var) + 0.5 * (-(x - g * mu_r) / var);
        EXPECT_LT((s(x, k) - expected).norm(), 1e-12);
    }
}

TEST(RetrievalScore, LipschitzInCondition) {
    // two-component family so the score is nonlinear in x
    MatrixXd A{{0.8, -0.3}, {0.2, 1.1}};
    const cpr::GaussianMixture<double> mix(vec({0.4, 0.6}), MatrixXd{{-1.0, 1.0}, {0.5, -0.5}},
                                           MatrixXd{{0.3, 0.6}, {0.3, 0.6}});
    const cpr::ScoreOracle<double> base(cpr::ConditionalFamily<double>(mix, A, VectorXd::Zero(2)), schedule());
    std::mt19937_64 gen(5);
    std::normal_distribution<double> nd;
    auto draw = [&] { return vec({nd(gen), nd(gen)}); };
    const std::vector<std::size_t> levels{1, 10, 25, 50};

    // s(x, c) = s(x - gamma A c, 0), so L = max gamma ||A|| ||Hessian|| over a dense grid
    const double normA = Eigen::JacobiSVD<MatrixXd>(A).singularValues()[0];
    const VectorXd zero = VectorXd::Zero(2);
    double L = 0.0;
    const double h = 1e-5;
    for (auto k : levels) {
        double hmax = 0.0;
        for (double u0 = -8.0; u0 <= 8.0; u0 += 0.1)
            for (double u1 = -8.0; u1 <= 8.0; u1 += 0.1) {
                MatrixXd H(2, 2);
                for (int j = 0; j < 2; ++j) {
                    VectorXd up = vec({u0, u1}), dn = up;
                    up[j] += h;
                    dn[j] -= h;
                    H.col(j) = (base.score(up, k, zero) - base.score(dn, k, zero)) / (2 * h);
                }
                hmax = std::max(hmax, Eigen::JacobiSVD<MatrixXd>(H).singularValues()[0]);
            }
        L = std::max(L, base.schedule().gamma(k) * normA * hmax);
    }
    EXPECT_GT(L, 0.0);

    const auto store = random_store(200, 2, gen);
    for (int i = 0; i < 200; ++i) {
        const VectorXd q = draw(), x = draw();
        const auto r = store.retrieve(q, 5);
        const auto s = cpr::retrieval_score_fn(base, r);
        for (auto k : levels) {
            const double gap = (s(x, k) - base.score(x, k, q)).norm();
            EXPECT_LE(gap, 1.01 * L * (q - r.mean_item_embedding).norm());
        }
    }
}

TEST(Unlearn, NearestNeighbourFallsBackToSecond) {
    std::mt19937_64 gen(3);
    std::normal_distribution<double> nd;
    auto store = random_store(300, 2, gen);
    const auto path = temp_path("nn");
    store.save(path);
    for (int rep = 0; rep < 20; ++rep) {
        const VectorXd q = vec({nd(gen), nd(gen)});
        const auto before = brute_force(store, q, 2);
        ASSERT_EQ(before.size(), 2u);
        cpr::unlearn(store, before[0], path);
        EXPECT_EQ(ids_of(store.retrieve(q, 1)), std::vector<std::string>{before[1]});
        EXPECT_FALSE(DataStore::load(path).contains(before[0]));
    }
    std::filesystem::remove(path);
}

TEST(Unlearn, FullRetrievalShrinks) {
    DataStore store(1);
    for (int i = 0; i < 5; ++i) store.add(record("id" + std::to_string(i), vec({double(i)}), vec({0.0})));
    const auto path = temp_path("shrink");
    std::filesystem::remove(path);
    EXPECT_THROW(cpr::unlearn(store, "id2", path), cpr::ConfigError);
    EXPECT_EQ(store.size(), 5u);
    store.save(path);
    cpr::unlearn(store, "id2", path);
    EXPECT_EQ(store.retrieve(vec({0}), 5).records.size(), 4u);
    EXPECT_THROW(cpr::unlearn(store, "id2", path), cpr::NotFoundError);
    for (auto id : {"id0", "id1", "id3", "id4"}) cpr::unlearn(store, id, path);
    EXPECT_THROW(store.retrieve(vec({0}), 1), cpr::RetrievalError);
    EXPECT_EQ(DataStore::load(path).size(), 0u);
    std::filesystem::remove(path);
}

TEST(Unlearn, RandomisedOperationsNeverReturnRemovedIds) {
    std::mt19937_64 gen(17);
    std::normal_distribution<double> nd;
    std::uniform_real_distribution<double> u;
    DataStore store(2);
    std::map<std::string, EmbeddingRecord> model;
    std::vector<std::string> removed;
    int next = 0;
    for (int op = 0; op < 3000; ++op) {
        if (model.empty() || u(gen) < 0.55) {
            auto rec = record("k" + std::to_string(next++), vec({nd(gen), nd(gen)}), vec({nd(gen), nd(gen)}));
            model.emplace(rec.id, rec);
            store.add(rec);
        } else {
            auto it = model.begin();
            std::advance(it, std::uniform_int_distribution<std::size_t>(0, model.size() - 1)(gen));
            store.remove(it->first);
            removed.push_back(it->first);
            model.erase(it);
        }
        ASSERT_EQ(store.size(), model.size());
        if (op % 10 == 0 && !model.empty()) {
            const VectorXd q = vec({nd(gen), nd(gen)});
            const auto got = ids_of(store.retrieve(q, 8));
            EXPECT_EQ(got, brute_force(store, q, 8));
            for (const auto& id : got) EXPECT_TRUE(model.contains(id));
        }
    }
    for (const auto& id : removed) EXPECT_FALSE(store.contains(id));
}

TEST(Persistence, TombstonesReplayAndCompact) {
    DataStore store(1);
    for (int i = 0; i < 4; ++i) store.add(record("t" + std::to_string(i), vec({double(i)}), vec({0.0})));
    const auto path = temp_path("tombstone");
    store.save(path);
    cpr::unlearn(store, "t1", path);
    cpr::unlearn(store, "t3", path);
    auto back = DataStore::load(path);
    EXPECT_EQ(back.size(), 2u);
    EXPECT_FALSE(back.contains("t1"));
    EXPECT_FALSE(back.contains("t3"));
    back.save(path);
    std::ifstream in(path);
    std::size_t lines = 0;
    for (std::string line; std::getline(in, line);) {
        ++lines;
        EXPECT_EQ(line.find("unlearn"), std::string::npos);
    }
    EXPECT_EQ(lines, 3u);
    std::ofstream(path, std::ios::app) << "{\"unlearn\":\"nobody\"}\n";
    EXPECT_THROW(DataStore::load(path), cpr::ConfigError);
    std::filesystem::remove(path);
}

TEST(Persistence, RoundTrip) {
    DataStore store(3);
    store.add(EmbeddingRecord{"x", vec({0.1, 1e-17, -3}), vec({1.0 / 3, 2, 4}), "payload \"quoted\""});
    store.add(EmbeddingRecord{"y", vec({5, 6, 7}), vec({8, 9, 10}), ""});
    const auto path = temp_path("roundtrip");
    store.save(path);
    const auto back = DataStore::load(path);
    ASSERT_EQ(back.size(), 2u);
    auto recs = back.snapshot();
    std::sort(recs.begin(), recs.end(), [](auto& a, auto& b) { return a.id < b.id; });
    EXPECT_EQ(recs[0].item_embedding, vec({0.1, 1e-17, -3}));
    EXPECT_EQ(recs[0].caption_embedding, vec({1.0 / 3, 2, 4}));
    EXPECT_EQ(recs[0].payload, "payload \"quoted\"");
    EXPECT_EQ(recs[1].id, "y");
    std::filesystem::remove(path);
    EXPECT_THROW(DataStore::load(path), cpr::ConfigError);
}
