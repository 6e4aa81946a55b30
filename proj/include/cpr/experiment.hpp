#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpr/audit.hpp"
#include "cpr/config.hpp"
#include "cpr/retrieval.hpp"

namespace cpr {

/// Score functions and, where closed forms exist, the data laws of the
/// safe and private models for one experiment.
struct Scenario {
    std::shared_ptr<const NoiseSchedule<double>> schedule;
    Eigen::Index dim = 0;
    ScoreFn<double> safe_score;
    ScoreFn<double> private_score;
    std::optional<GaussianMixture<double>> safe_law;
    std::optional<GaussianMixture<double>> private_law;
    std::optional<RetrievalResult> retrieval;
    /// "exact" or "fixed" mixture weighting of the private score
    std::string weighting = "exact";
};

Scenario build_scenario(const ExperimentConfig& config);

SamplerConfig<double> sampler_config(const ExperimentConfig& config, const Scenario& scenario);

struct SampleSet {
    Matrix<double> samples;  ///< one column per sample
    std::vector<std::size_t> score_evaluations;
    std::vector<std::size_t> attempts;  ///< CP-k only
    std::vector<Trajectory<double>> trajectories;
    double wall_seconds = 0;
};

SampleSet draw_samples(const ExperimentConfig& config, const Scenario& scenario);

/// Per-sample divergences and NAF budgets for a sample set. Chooser methods
/// are audited on whole trajectories.
AuditReport audit_samples(const ExperimentConfig& config, const Scenario& scenario, const SampleSet& set,
                          nlohmann::json* extra = nullptr);

struct RunManifest {
    std::string config_hash;
    std::string code_version;
    std::string started;
    std::string finished;
    std::vector<std::pair<std::string, std::string>> files;  ///< name, sha256

    nlohmann::json to_json() const;
};

/// Samples, audits and writes samples.csv, audit.json, histogram.csv,
/// histogram.svg (optional), trajectories.csv (optional) and manifest.json.
RunManifest run_experiment(const ExperimentConfig& config, bool with_audit = true);

struct BenchRow {
    std::string method;
    std::size_t samples = 0;
    double wall_seconds = 0;
    std::size_t score_evaluations = 0;
    std::size_t evaluations_min = 0;
    std::size_t evaluations_max = 0;
    std::optional<stats::Interval> mean_attempts;
    std::optional<double> analytic_attempts;
    std::vector<std::size_t> attempts;
};

/// Cost table across configs that share a sample count.
std::vector<BenchRow> bench_costs(const std::vector<ExperimentConfig>& configs);

void write_schedule_csv(const NoiseSchedule<double>& schedule, std::ostream& out);

/// Shortest round-trip decimal for a double; "inf", "-inf", "nan" otherwise.
std::string format_number(double v);

std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);

Matrix<double> read_samples_csv(const std::filesystem::path& path, Eigen::Index dim);

/// Exact acceptance probability P[log q2(x) - log q1(x) <= k] for x ~ q2 in
/// one dimension, by quadrature.
double cp_k_acceptance_probability(const GaussianMixture<double>& safe, const GaussianMixture<double>& priv, double k);

}  // namespace cpr
