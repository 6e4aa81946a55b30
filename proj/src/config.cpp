#include "cpr/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace cpr {

namespace {

using nlohmann::json;

template <typename T>
T field(const json& obj, const std::string& key, const std::string& path, T fallback) {
    if (!obj.contains(key) || obj.at(key).is_null()) return fallback;
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(path + key + ": wrong type (" + obj.at(key).dump() + ")");
    }
}

std::size_t count_field(const json& obj, const std::string& key, const std::string& path, std::size_t fallback) {
    if (!obj.contains(key) || obj.at(key).is_null()) return fallback;
    const auto& v = obj.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0)
        throw ConfigError(path + key + ": must be a non-negative integer");
    return v.get<std::size_t>();
}

Eigen::VectorXd vector_field(const json& j, const std::string& path) {
    if (!j.is_array() || j.empty()) throw ConfigError(path + ": must be a non-empty array of numbers");
    Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) {
        if (!j[i].is_number()) throw ConfigError(path + ": entries must be numbers");
        v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
    }
    return v;
}

void check_keys(const json& obj, std::initializer_list<std::string_view> allowed, const std::string& path) {
    if (!obj.is_object()) return;
    for (const auto& [key, value] : obj.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            throw ConfigError(path + key + ": unknown key");
    }
}

json section(const json& doc, const std::string& key) {
    if (!doc.contains(key) || doc.at(key).is_null()) return json::object();
    if (!doc.at(key).is_object()) throw ConfigError(key + ": must be a table");
    return doc.at(key);
}

}  // namespace

std::string_view to_string(Method method) {
    switch (method) {
        case Method::safe: return "safe";
        case Method::rag: return "rag";
        case Method::cpr_kl: return "cpr-kl";
        case Method::cpr_min: return "cpr-min";
        case Method::cpr_alt: return "cpr-alt";
        case Method::cpr_choose: return "cpr-choose";
        case Method::cp_k: return "cp-k";
    }
    return "unknown";
}

Method parse_method(std::string_view name) {
    for (Method m : {Method::safe, Method::rag, Method::cpr_kl, Method::cpr_min, Method::cpr_alt, Method::cpr_choose,
                     Method::cp_k})
        if (to_string(m) == name) return m;
    throw ConfigError("method: unknown method '" + std::string(name) +
                      "' (expected safe|rag|cpr-kl|cpr-min|cpr-alt|cpr-choose|cp-k)");
}

ConditionalFamily<double> family_from_json(const json& j, const std::string& path) {
    if (!j.is_object()) throw ConfigError(path + ": must be a table");
    if (!j.contains("components") || !j.at("components").is_array() || j.at("components").empty())
        throw ConfigError(path + ".components: need at least one component");
    check_keys(j, {"components", "condition_map"}, path + ".");
    const auto& comps = j.at("components");
    const auto n = static_cast<Eigen::Index>(comps.size());
    Eigen::VectorXd weights(n);
    Eigen::MatrixXd means, vars;
    for (Eigen::Index c = 0; c < n; ++c) {
        const auto& comp = comps[static_cast<std::size_t>(c)];
        const std::string cpath = path + ".components[" + std::to_string(c) + "]";
        check_keys(comp, {"weight", "mean", "variance"}, cpath + ".");
        weights[c] = field<double>(comp, "weight", cpath + ".", n == 1 ? 1.0 : std::nan(""));
        if (!comp.contains("mean")) throw ConfigError(cpath + ".mean: missing");
        const Eigen::VectorXd mean = vector_field(comp.at("mean"), cpath + ".mean");
        Eigen::VectorXd var;
        if (comp.contains("variance")) {
            const auto& v = comp.at("variance");
            var = v.is_number() ? Eigen::VectorXd::Constant(mean.size(), v.get<double>())
                                : vector_field(v, cpath + ".variance");
        } else {
            var = Eigen::VectorXd::Ones(mean.size());
        }
        if (c == 0) {
            means.resize(mean.size(), n);
            vars.resize(mean.size(), n);
        }
        if (mean.size() != means.rows() || var.size() != means.rows())
            throw ConfigError(cpath + ": mean/variance dimension differs from the first component");
        means.col(c) = mean;
        vars.col(c) = var;
    }
    GaussianMixture<double> base;
    try {
        base = GaussianMixture<double>(weights, means, vars);
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
    }
    const Eigen::Index d = base.dim();
    if (!j.contains("condition_map")) return ConditionalFamily<double>::unconditional(std::move(base));
    const auto& cm = j.at("condition_map");
    const std::string mpath = path + ".condition_map";
    check_keys(cm, {"matrix", "offset"}, mpath + ".");
    if (!cm.contains("matrix") || !cm.at("matrix").is_array() ||
        cm.at("matrix").size() != static_cast<std::size_t>(d))
        throw ConfigError(mpath + ".matrix: need one row per data dimension (" + std::to_string(d) + ")");
    Eigen::MatrixXd map;
    for (Eigen::Index r = 0; r < d; ++r) {
        const Eigen::VectorXd row = vector_field(cm.at("matrix")[static_cast<std::size_t>(r)],
                                                 mpath + ".matrix[" + std::to_string(r) + "]");
        if (r == 0) map.resize(d, row.size());
        if (row.size() != map.cols()) throw ConfigError(mpath + ".matrix: rows differ in length");
        map.row(r) = row.transpose();
    }
    const Eigen::VectorXd offset =
        cm.contains("offset") ? vector_field(cm.at("offset"), mpath + ".offset") : Eigen::VectorXd::Zero(d);
    try {
        return ConditionalFamily<double>(std::move(base), map, offset);
    } catch (const ConfigError& e) {
        throw ConfigError(mpath + ": " + e.what());
    }
}

json mixture_to_json(const ConditionalFamily<double>& family) {
    const auto& b = family.base();
    json comps = json::array();
    for (Eigen::Index c = 0; c < b.size(); ++c) {
        const Eigen::VectorXd mean = b.means().col(c), var = b.variances().col(c);
        comps.push_back({{"weight", b.weights()[c]},
                         {"mean", std::vector<double>(mean.data(), mean.data() + mean.size())},
                         {"variance", std::vector<double>(var.data(), var.data() + var.size())}});
    }
    json rows = json::array();
    for (Eigen::Index r = 0; r < family.map().rows(); ++r) {
        const Eigen::VectorXd row = family.map().row(r).transpose();
        rows.push_back(std::vector<double>(row.data(), row.data() + row.size()));
    }
    const auto& off = family.offset();
    return {{"components", comps},
            {"condition_map", {{"matrix", rows}, {"offset", std::vector<double>(off.data(), off.data() + off.size())}}}};
}

ExperimentConfig parse_config(const json& doc, const std::filesystem::path& base_dir) {
    if (!doc.is_object()) throw ConfigError("config: top level must be a table");
    check_keys(doc,
               {"schedule", "safe", "private", "retrieval", "condition", "method", "sampler", "plan", "rejection",
                "audit", "samples", "seed", "threads", "dump_trajectories", "output_dir"},
               "");
    ExperimentConfig cfg;

    const json sched = section(doc, "schedule");
    check_keys(sched, {"kind", "beta_min", "beta_max", "num_steps", "t_min", "substeps"}, "schedule.");
    cfg.schedule.kind = parse_schedule_kind(field<std::string>(sched, "kind", "schedule.", "linear"));
    cfg.schedule.beta_min = field<double>(sched, "beta_min", "schedule.", cfg.schedule.beta_min);
    cfg.schedule.beta_max = field<double>(sched, "beta_max", "schedule.", cfg.schedule.beta_max);
    cfg.schedule.num_steps = count_field(sched, "num_steps", "schedule.", 100);
    cfg.schedule.t_min = field<double>(sched, "t_min", "schedule.", cfg.schedule.t_min);
    cfg.schedule.substeps = count_field(sched, "substeps", "schedule.", cfg.schedule.substeps);
    NoiseSchedule<double>::build(cfg.schedule);  // validates ranges

    if (!doc.contains("safe")) throw ConfigError("safe: missing safe distribution");
    cfg.safe = family_from_json(doc.at("safe"), "safe");

    if (doc.contains("private") && doc.contains("retrieval"))
        throw ConfigError("private: give either 'private' or 'retrieval', not both");
    if (doc.contains("private")) {
        cfg.private_family = family_from_json(doc.at("private"), "private");
        if (cfg.private_family->dim() != cfg.safe.dim())
            throw ConfigError("private: dimension differs from safe");
        if (cfg.private_family->condition_dim() != cfg.safe.condition_dim())
            throw ConfigError("private.condition_map: embedding dimension differs from safe");
    }
    if (doc.contains("retrieval")) {
        const json r = section(doc, "retrieval");
        check_keys(r, {"store", "m", "w0", "w1"}, "retrieval.");
        RetrievalSpec spec;
        const auto store = field<std::string>(r, "store", "retrieval.", "");
        if (store.empty()) throw ConfigError("retrieval.store: missing datastore path");
        spec.store = std::filesystem::path(store).is_absolute() ? std::filesystem::path(store) : base_dir / store;
        if (!std::filesystem::exists(spec.store))
            throw ConfigError("retrieval.store: file '" + spec.store.string() + "' does not exist");
        spec.m = count_field(r, "m", "retrieval.", spec.m);
        if (spec.m == 0) throw ConfigError("retrieval.m: must be >= 1");
        spec.w0 = field<double>(r, "w0", "retrieval.", spec.w0);
        spec.w1 = field<double>(r, "w1", "retrieval.", spec.w1);
        if (spec.w0 < 0 || spec.w1 < 0) throw ConfigError("retrieval.w0/w1: weights must be non-negative");
        if (std::abs(spec.w0 + spec.w1 - 1.0) > 1e-12)
            throw ConfigError("retrieval.w0/w1: weights must sum to 1 (got " + std::to_string(spec.w0 + spec.w1) + ")");
        cfg.retrieval = spec;
    }

    cfg.condition = doc.contains("condition") ? vector_field(doc.at("condition"), "condition")
                                              : cfg.safe.null_condition();
    if (cfg.condition.size() != cfg.safe.condition_dim())
        throw ConfigError("condition: length " + std::to_string(cfg.condition.size()) +
                          " differs from the condition map width " + std::to_string(cfg.safe.condition_dim()));

    cfg.method = parse_method(field<std::string>(doc, "method", "", "safe"));
    const bool needs_private = cfg.method != Method::safe;
    if (needs_private && !cfg.private_family && !cfg.retrieval)
        throw ConfigError("private: method '" + std::string(to_string(cfg.method)) +
                          "' needs a 'private' distribution or a 'retrieval' section");

    const json sampler = section(doc, "sampler");
    check_keys(sampler, {"kind", "langevin_steps", "eps0", "ancestral_bridge", "kl_alpha", "guidance_scale"},
               "sampler.");
    cfg.sampler_kind = parse_sampler_kind(field<std::string>(sampler, "kind", "sampler.", "ancestral_stochastic"));
    cfg.langevin_steps = count_field(sampler, "langevin_steps", "sampler.", cfg.langevin_steps);
    cfg.eps0 = field<double>(sampler, "eps0", "sampler.", cfg.eps0);
    cfg.ancestral_bridge = field<bool>(sampler, "ancestral_bridge", "sampler.", false);
    cfg.kl_alpha = field<double>(sampler, "kl_alpha", "sampler.", cfg.kl_alpha);
    if (sampler.contains("guidance_scale") && !sampler.at("guidance_scale").is_null())
        cfg.guidance_scale = field<double>(sampler, "guidance_scale", "sampler.", 1.0);
    if (cfg.langevin_steps == 0) throw ConfigError("sampler.langevin_steps: N must be >= 1");
    if (!(cfg.eps0 > 0)) throw ConfigError("sampler.eps0: must be positive");
    if (!(cfg.kl_alpha >= 0 && cfg.kl_alpha <= 1)) throw ConfigError("sampler.kl_alpha: must lie in [0, 1]");
    if ((cfg.method == Method::cpr_min || cfg.method == Method::cpr_alt || cfg.method == Method::cpr_choose) &&
        cfg.sampler_kind == SamplerKind::langevin)
        throw ConfigError("sampler.kind: CPR-Choose methods need an ancestral sampler");

    const json plan = section(doc, "plan");
    check_keys(plan, {"period", "phase", "min_mse_draws", "steps"}, "plan.");
    cfg.plan.period = count_field(plan, "period", "plan.", cfg.plan.period);
    cfg.plan.phase = count_field(plan, "phase", "plan.", cfg.plan.phase);
    cfg.plan.min_mse_draws = count_field(plan, "min_mse_draws", "plan.", cfg.plan.min_mse_draws);
    if (cfg.plan.period == 0) throw ConfigError("plan.period: must be >= 1");
    if (cfg.plan.min_mse_draws == 0) throw ConfigError("plan.min_mse_draws: must be >= 1");
    if (plan.contains("steps")) {
        if (!plan.at("steps").is_array()) throw ConfigError("plan.steps: must be an array of step indices");
        for (const auto& s : plan.at("steps")) {
            if (!s.is_number_integer() || s.get<long long>() < 0) throw ConfigError("plan.steps: entries must be >= 0");
            const auto k = s.get<std::size_t>();
            if (k > cfg.schedule.num_steps) throw ConfigError("plan.steps: step " + std::to_string(k) + " exceeds T");
            cfg.plan.steps.insert(k);
        }
    }

    const json rej = section(doc, "rejection");
    check_keys(rej, {"k", "max_attempts", "source"}, "rejection.");
    if (rej.contains("k") && rej.at("k").is_string() && rej.at("k").get<std::string>() == "inf")
        cfg.rejection.k = std::numeric_limits<double>::infinity();
    else
        cfg.rejection.k = field<double>(rej, "k", "rejection.", cfg.rejection.k);
    cfg.rejection.max_attempts = count_field(rej, "max_attempts", "rejection.", cfg.rejection.max_attempts);
    cfg.rejection.source = field<std::string>(rej, "source", "rejection.", cfg.rejection.source);
    if (!(cfg.rejection.k >= 0)) throw ConfigError("rejection.k: must be >= 0");
    if (cfg.rejection.max_attempts == 0) throw ConfigError("rejection.max_attempts: must be >= 1");
    if (cfg.rejection.source != "exact" && cfg.rejection.source != "diffusion")
        throw ConfigError("rejection.source: expected 'exact' or 'diffusion'");

    const json audit = section(doc, "audit");
    check_keys(audit, {"mode", "mmse_draws", "histogram_bins", "bootstrap_resamples", "ci_level", "svg"}, "audit.");
    cfg.audit.mode = field<std::string>(audit, "mode", "audit.", cfg.audit.mode);
    if (cfg.audit.mode != "auto" && cfg.audit.mode != "exact" && cfg.audit.mode != "estimated")
        throw ConfigError("audit.mode: expected auto|exact|estimated");
    cfg.audit.mmse_draws = count_field(audit, "mmse_draws", "audit.", cfg.audit.mmse_draws);
    cfg.audit.histogram_bins = count_field(audit, "histogram_bins", "audit.", cfg.audit.histogram_bins);
    cfg.audit.bootstrap_resamples = count_field(audit, "bootstrap_resamples", "audit.", cfg.audit.bootstrap_resamples);
    cfg.audit.ci_level = field<double>(audit, "ci_level", "audit.", cfg.audit.ci_level);
    cfg.audit.svg = field<bool>(audit, "svg", "audit.", cfg.audit.svg);
    if (cfg.audit.mmse_draws == 0) throw ConfigError("audit.mmse_draws: must be >= 1");
    if (cfg.audit.histogram_bins == 0) throw ConfigError("audit.histogram_bins: must be >= 1");
    if (!(cfg.audit.ci_level > 0 && cfg.audit.ci_level < 1)) throw ConfigError("audit.ci_level: must lie in (0, 1)");

    cfg.samples = count_field(doc, "samples", "", cfg.samples);
    if (cfg.samples == 0) throw ConfigError("samples: must be >= 1");
    cfg.seed = field<std::uint64_t>(doc, "seed", "", 0);
    cfg.threads = count_field(doc, "threads", "", 1);
    cfg.dump_trajectories = field<bool>(doc, "dump_trajectories", "", false);
    cfg.output_dir = field<std::string>(doc, "output_dir", "", "");

    cfg.canonical = doc;
    cfg.canonical.erase("output_dir");
    cfg.canonical.erase("threads");
    return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open '" + path.string() + "'");
    json doc;
    try {
        doc = json::parse(in, nullptr, true, true);
    } catch (const json::parse_error& e) {
        throw ConfigError("config: " + std::string(e.what()));
    }
    return parse_config(doc, path.parent_path());
}

void apply_override(json& doc, const std::string& dotted_key, const std::string& value) {
    json* node = &doc;
    std::size_t start = 0;
    while (true) {
        const auto dot = dotted_key.find('.', start);
        const std::string key = dotted_key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (key.empty()) throw ConfigError("override: malformed key '" + dotted_key + "'");
        if (dot == std::string::npos) {
            try {
                (*node)[key] = json::parse(value);
            } catch (const json::parse_error&) {
                (*node)[key] = value;
            }
            return;
        }
        if (!node->contains(key) || !(*node)[key].is_object()) (*node)[key] = json::object();
        node = &(*node)[key];
        start = dot + 1;
    }
}

}  // namespace cpr
