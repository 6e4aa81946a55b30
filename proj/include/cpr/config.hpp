#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>

#include <json.hpp>

#include "cpr/cpr.hpp"
#include "cpr/gaussian_mixture.hpp"
#include "cpr/schedule.hpp"

namespace cpr {

enum class Method { safe, rag, cpr_kl, cpr_min, cpr_alt, cpr_choose, cp_k };

std::string_view to_string(Method method);
Method parse_method(std::string_view name);

struct RetrievalSpec {
    std::filesystem::path store;
    std::size_t m = 5;
    double w0 = 0.5;
    double w1 = 0.5;
};

struct PlanSpec {
    std::size_t period = 2;
    std::size_t phase = 0;
    std::size_t min_mse_draws = 8;
    std::set<std::size_t> steps;  ///< explicit J for method cpr-choose
};

struct RejectionSpec {
    double k = 0.5;
    std::size_t max_attempts = 10000;
    /// "exact": draw directly from the private law; "diffusion": run the
    /// backward sampler with the private score.
    std::string source = "exact";
};

struct AuditSpec {
    /// "auto", "exact" or "estimated"
    std::string mode = "auto";
    std::size_t mmse_draws = 256;
    std::size_t histogram_bins = 50;
    std::size_t bootstrap_resamples = 1000;
    double ci_level = 0.95;
    bool svg = true;
};

/// Everything a run needs, validated before any compute.
struct ExperimentConfig {
    ScheduleParams schedule;
    ConditionalFamily<double> safe;
    std::optional<ConditionalFamily<double>> private_family;
    std::optional<RetrievalSpec> retrieval;
    Eigen::VectorXd condition;

    Method method = Method::safe;
    SamplerKind sampler_kind = SamplerKind::ancestral_stochastic;
    std::size_t langevin_steps = 20;
    double eps0 = 0.05;
    bool ancestral_bridge = false;
    double kl_alpha = 0.5;
    std::optional<double> guidance_scale;
    PlanSpec plan;
    RejectionSpec rejection;
    AuditSpec audit;

    std::size_t samples = 1000;
    std::uint64_t seed = 0;
    std::size_t threads = 1;
    bool dump_trajectories = false;
    std::filesystem::path output_dir;

    /// Canonical JSON of the parsed document (output_dir removed), hashed
    /// into the run manifest.
    nlohmann::json canonical;
};

/// Parses and validates; errors are ConfigError naming the offending field.
/// Relative store paths resolve against `base_dir`.
ExperimentConfig parse_config(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);

/// Sets a dotted key (e.g. "sampler.langevin_steps") in a config document,
/// parsing the value as JSON when possible and as a string otherwise.
void apply_override(nlohmann::json& doc, const std::string& dotted_key, const std::string& value);

nlohmann::json mixture_to_json(const ConditionalFamily<double>& family);
ConditionalFamily<double> family_from_json(const nlohmann::json& j, const std::string& field);

}  // namespace cpr
