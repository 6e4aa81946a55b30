#include "cpr/experiment.hpp"

#include <charconv>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <openssl/evp.h>

#ifndef CPR_LAB_VERSION
#define CPR_LAB_VERSION "unknown"
#endif

namespace cpr {

using nlohmann::json;

namespace {

bool is_chooser(Method m) { return m == Method::cpr_min || m == Method::cpr_alt || m == Method::cpr_choose; }

template <typename F>
auto staged(const std::string& stage, F&& body) {
    const auto tag = [&](const std::exception& e) { return stage + ": " + e.what(); };
    try {
        return body();
    } catch (const ConfigError& e) {
        throw ConfigError(tag(e));
    } catch (const NumericError& e) {
        throw NumericError(tag(e), e.level());
    } catch (const RejectionTimeout& e) {
        throw RejectionTimeout(tag(e), e.attempts());
    } catch (const DomainError& e) {
        throw DomainError(tag(e));
    } catch (const RetrievalError& e) {
        throw RetrievalError(tag(e));
    } catch (const NotFoundError& e) {
        throw NotFoundError(tag(e));
    }
}

std::string utc_now() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

ChoicePlan plan_for(const ExperimentConfig& cfg) {
    switch (cfg.method) {
        case Method::cpr_min: return ChoicePlan::min_mse(cfg.plan.min_mse_draws);
        case Method::cpr_alt: return ChoicePlan::alternate(cfg.plan.period, cfg.plan.phase);
        case Method::cpr_choose: return ChoicePlan::explicit_steps(cfg.plan.steps);
        default: break;
    }
    throw ConfigError("plan: method '" + std::string(to_string(cfg.method)) + "' has no choice plan");
}

ScoreFn<double> output_score(const ExperimentConfig& cfg, const Scenario& sc) {
    switch (cfg.method) {
        case Method::safe: return sc.safe_score;
        case Method::rag:
        case Method::cp_k: return sc.private_score;
        case Method::cpr_kl: {
            const double a = cfg.kl_alpha;
            return [a, s1 = sc.safe_score, s2 = sc.private_score](const Eigen::VectorXd& x, std::size_t k) {
                return Eigen::VectorXd(a * s1(x, k) + (1.0 - a) * s2(x, k));
            };
        }
        default: break;
    }
    throw ConfigError("audit: method '" + std::string(to_string(cfg.method)) + "' has no single score");
}

/// Exact log density of the method's output law, minus the log of the CP-k
/// normalizer (applied by the caller).
std::optional<LogDensityFn<double>> exact_output_law(const ExperimentConfig& cfg, const Scenario& sc,
                                                     std::string& note) {
    if (!sc.safe_law || !sc.private_law) {
        note = "closed-form laws unavailable (guidance or multi-component retrieval base)";
        return std::nullopt;
    }
    switch (cfg.method) {
        case Method::safe: return [q = *sc.safe_law](const Eigen::VectorXd& x) { return q.log_density(x); };
        case Method::rag:
        case Method::cp_k: return [q = *sc.private_law](const Eigen::VectorXd& x) { return q.log_density(x); };
        case Method::cpr_kl:
            if (cfg.kl_alpha != 0.5) {
                note = "cpr-kl with alpha != 1/2 has no closed-form normalizer here";
                return std::nullopt;
            }
            try {
                return geometric_mean_log_density(*sc.safe_law, *sc.private_law);
            } catch (const DomainError& e) {
                note = e.what();
                return std::nullopt;
            }
        default: break;
    }
    return std::nullopt;
}

json interval_json(const stats::Interval& iv, double level) {
    return {{"estimate", iv.estimate}, {"lower", iv.lower}, {"upper", iv.upper}, {"level", level}};
}

std::string vector_csv(const Eigen::VectorXd& v) {
    std::string out;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        if (i) out += ',';
        out += format_number(v[i]);
    }
    return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("output_dir: cannot write '" + path.string() + "'");
    out << text;
}

std::string histogram_svg(const stats::Histogram& h, const std::string& title) {
    const double width = 640, height = 360, margin = 40;
    const std::size_t peak = h.counts.empty() ? 1 : std::max<std::size_t>(1, *std::max_element(h.counts.begin(), h.counts.end()));
    const double bar = (width - 2 * margin) / static_cast<double>(std::max<std::size_t>(1, h.counts.size()));
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << margin << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">" << title << "</text>\n";
    for (std::size_t i = 0; i < h.counts.size(); ++i) {
        const double hgt = (height - 2 * margin) * static_cast<double>(h.counts[i]) / static_cast<double>(peak);
        os << "<rect x=\"" << format_number(margin + bar * static_cast<double>(i)) << "\" y=\""
           << format_number(height - margin - hgt) << "\" width=\"" << format_number(bar * 0.9) << "\" height=\""
           << format_number(hgt) << "\" fill=\"steelblue\"/>\n";
    }
    if (!h.edges.empty()) {
        os << "<text x=\"" << margin << "\" y=\"" << height - 12 << "\" font-family=\"sans-serif\" font-size=\"11\">"
           << format_number(h.edges.front()) << "</text>\n";
        os << "<text x=\"" << width - margin << "\" y=\"" << height - 12
           << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << format_number(h.edges.back())
           << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

}  // namespace

std::string format_number(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::string sha256_hex(std::string_view data) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (!EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr))
        throw std::runtime_error("sha256: digest failed");
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 15];
    }
    return out;
}

std::string sha256_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("checksum: cannot read '" + path.string() + "'");
    std::ostringstream os;
    os << in.rdbuf();
    return sha256_hex(os.str());
}

Scenario build_scenario(const ExperimentConfig& cfg) {
    Scenario sc;
    sc.schedule = std::make_shared<const NoiseSchedule<double>>(NoiseSchedule<double>::build(cfg.schedule));
    sc.dim = cfg.safe.dim();
    const ScoreOracle<double> safe(cfg.safe, sc.schedule);
    const Eigen::VectorXd c = cfg.condition;

    auto bind = [&](const ScoreOracle<double>& o) -> ScoreFn<double> {
        if (!cfg.guidance_scale) return o.bind(c);
        const double lambda = *cfg.guidance_scale;
        return [o, c, lambda](const Eigen::VectorXd& x, std::size_t k) { return cfg_score(o, x, k, c, lambda); };
    };

    sc.safe_score = bind(safe);
    if (!cfg.guidance_scale) sc.safe_law = cfg.safe.conditioned(c);

    if (cfg.private_family) {
        const ScoreOracle<double> priv(*cfg.private_family, sc.schedule);
        sc.private_score = bind(priv);
        if (!cfg.guidance_scale) sc.private_law = cfg.private_family->conditioned(c);
    } else if (cfg.retrieval) {
        const auto store = DataStore::load(cfg.retrieval->store);
        if (store.dim() != cfg.safe.condition_dim())
            throw ConfigError("retrieval.store: embedding dimension " + std::to_string(store.dim()) +
                              " differs from the condition map width " + std::to_string(cfg.safe.condition_dim()));
        sc.retrieval = store.retrieve(c, cfg.retrieval->m);
        const double w0 = cfg.retrieval->w0, w1 = cfg.retrieval->w1;
        sc.private_score = retrieval_mixture_score_fn(safe, *sc.retrieval, w0, w1);
        sc.weighting = "fixed";
        if (!cfg.guidance_scale && cfg.safe.base().size() == 1)
            sc.private_law = cfg.safe.conditioned(w0 * c + w1 * sc.retrieval->mean_item_embedding);
    }
    return sc;
}

SamplerConfig<double> sampler_config(const ExperimentConfig& cfg, const Scenario& sc) {
    SamplerConfig<double> s;
    s.schedule = sc.schedule;
    s.kind = cfg.method == Method::cpr_kl ? SamplerKind::langevin : cfg.sampler_kind;
    s.langevin_steps = cfg.langevin_steps;
    s.eps0 = cfg.eps0;
    s.ancestral_bridge = cfg.ancestral_bridge;
    s.seed = cfg.seed;
    s.record_states = cfg.dump_trajectories || is_chooser(cfg.method);
    s.threads = cfg.threads;
    return s;
}

SampleSet draw_samples(const ExperimentConfig& cfg, const Scenario& sc) {
    const auto start = std::chrono::steady_clock::now();
    const SamplerConfig<double> scfg = sampler_config(cfg, sc);
    const std::size_t n = cfg.samples;
    SampleSet set;
    set.samples.resize(sc.dim, static_cast<Eigen::Index>(n));
    set.score_evaluations.assign(n, 0);
    const bool keep = scfg.record_states;
    if (keep) set.trajectories.resize(n);

    if (cfg.method == Method::cp_k) {
        if (!sc.private_score) throw ConfigError("private: cp-k needs a private model");
        set.attempts.assign(n, 0);
        std::function<Eigen::VectorXd(std::uint64_t)> draw;
        std::function<double(const Eigen::VectorXd&)> log_safe, log_priv;
        std::shared_ptr<std::atomic<std::size_t>> evals = std::make_shared<std::atomic<std::size_t>>(0);
        if (cfg.rejection.source == "exact") {
            if (!sc.private_law) throw ConfigError("rejection.source: 'exact' needs a closed-form private law");
            draw = [q = *sc.private_law](std::uint64_t key) {
                StreamRng rng(key, {static_cast<std::uint64_t>(StreamTag::data)});
                return q.sample(rng);
            };
        } else {
            auto base = scfg;
            base.record_states = false;
            draw = [base, score = sc.private_score, dim = sc.dim, evals](std::uint64_t key) {
                auto c = base;
                c.seed = key;
                auto traj = run_backward<double>(score, c, dim, 0);
                evals->fetch_add(traj.score_evaluations);
                return Eigen::VectorXd(traj.terminal());
            };
        }
        if (sc.safe_law && sc.private_law) {
            log_safe = [q = *sc.safe_law](const Eigen::VectorXd& x) { return q.log_density(x); };
            log_priv = [q = *sc.private_law](const Eigen::VectorXd& x) { return q.log_density(x); };
        } else {
            const auto safe_den = denoiser_from_score(sc.safe_score, sc.schedule);
            const auto priv_den = denoiser_from_score(sc.private_score, sc.schedule);
            log_safe = [](const Eigen::VectorXd&) { return 0.0; };
            log_priv = [=, sched = sc.schedule, draws = cfg.audit.mmse_draws, seed = cfg.seed](const Eigen::VectorXd& x) {
                return mmse_log_prob<double>(priv_den, x, *sched, draws, seed, &safe_den).value;
            };
        }
        parallel_for(
            n,
            [&](std::size_t i) {
                const auto r = cp_k_rejection_sample<double>(draw, log_safe, log_priv, cfg.rejection.k,
                                                             cfg.rejection.max_attempts, cfg.seed, i);
                set.samples.col(static_cast<Eigen::Index>(i)) = r.sample;
                set.attempts[i] = r.attempts;
            },
            cfg.threads);
        if (cfg.rejection.source != "exact") {
            const std::size_t total = evals->load();
            std::size_t att = 0;
            for (auto a : set.attempts) att += a;
            for (std::size_t i = 0; i < n; ++i) set.score_evaluations[i] = total / att * set.attempts[i];
        }
    } else {
        if (cfg.method != Method::safe && !sc.private_score)
            throw ConfigError("private: method '" + std::string(to_string(cfg.method)) + "' needs a private model");
        std::optional<ChoicePlan> plan;
        if (is_chooser(cfg.method)) plan = plan_for(cfg);
        parallel_for(
            n,
            [&](std::size_t i) {
                Trajectory<double> traj;
                switch (cfg.method) {
                    case Method::safe: traj = run_backward<double>(sc.safe_score, scfg, sc.dim, i); break;
                    case Method::rag: traj = run_backward<double>(sc.private_score, scfg, sc.dim, i); break;
                    case Method::cpr_kl:
                        traj = cpr_kl_sample<double>(sc.safe_score, sc.private_score, scfg, sc.dim, i, cfg.kl_alpha);
                        break;
                    default: traj = cpr_choose_sample<double>(sc.safe_score, sc.private_score, *plan, scfg, sc.dim, i);
                }
                set.samples.col(static_cast<Eigen::Index>(i)) = traj.terminal();
                set.score_evaluations[i] = traj.score_evaluations;
                if (keep) set.trajectories[i] = std::move(traj);
            },
            cfg.threads);
    }
    set.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return set;
}

AuditReport audit_samples(const ExperimentConfig& cfg, const Scenario& sc, const SampleSet& set, json* extra) {
    AuditReport report;
    report.method = std::string(to_string(cfg.method));
    report.samples = static_cast<std::size_t>(set.samples.cols());
    for (auto e : set.score_evaluations) report.score_evaluations += e;
    json info = json::object();
    json notes = json::array();
    const std::size_t n = report.samples;
    auto& delta = report.per_sample_delta_max;

    if (is_chooser(cfg.method)) {
        report.mode = "trajectory";
        const SamplerConfig<double> scfg = sampler_config(cfg, sc);
        if (set.trajectories.size() != n) throw ConfigError("audit: chooser audit needs recorded trajectories");
        if (scfg.kind == SamplerKind::ancestral_deterministic) {
            notes.push_back("deterministic kernels have no transition density; trajectory audit skipped");
        } else {
            delta.assign(n, 0.0);
            std::vector<double> gaps(n, 0.0);
            std::vector<char> any(n, 0);
            parallel_for(
                n,
                [&](std::size_t i) {
                    const auto r = trajectory_log_ratio<double>(set.trajectories[i], sc.safe_score, sc.private_score, scfg);
                    delta[i] = r.log_ratio;
                    gaps[i] = r.max_gap;
                    any[i] = private_steps(set.trajectories[i]).empty() ? 0 : 1;
                },
                cfg.threads);
            double b = 0;
            std::set<std::size_t> J;
            for (std::size_t i = 0; i < n; ++i) {
                if (any[i]) b = std::max(b, gaps[i]);
                const auto steps = private_steps(set.trajectories[i]);
                J.insert(steps.begin(), steps.end());
            }
            info["b"] = b;
            info["private_steps"] = std::vector<std::size_t>(J.begin(), J.end());
            try {
                report.k_c_bound = k_c_choose_bound(J, scfg, b);
            } catch (const DomainError& e) {
                notes.push_back(e.what());
            }
        }
    } else {
        std::string note;
        auto law = cfg.method == Method::safe ? std::nullopt : exact_output_law(cfg, sc, note);
        const bool exact_ok = cfg.method == Method::safe || law.has_value();
        if (cfg.audit.mode == "exact" && !exact_ok) throw ConfigError("audit.mode: exact densities unavailable: " + note);
        const bool exact = cfg.audit.mode == "exact" || (cfg.audit.mode == "auto" && exact_ok);
        report.mode = exact ? "exact" : "estimated";
        if (!note.empty() && !exact) notes.push_back(note);
        delta.assign(n, 0.0);
        if (cfg.method != Method::safe) {
            if (exact) {
                const GaussianMixture<double> q1 = *sc.safe_law;
                parallel_for(
                    n,
                    [&](std::size_t i) {
                        const Eigen::VectorXd x = set.samples.col(static_cast<Eigen::Index>(i));
                        delta[i] = (*law)(x)-q1.log_density(x);
                    },
                    cfg.threads);
            } else {
                const auto p_den = denoiser_from_score(output_score(cfg, sc), sc.schedule);
                const auto s_den = denoiser_from_score(sc.safe_score, sc.schedule);
                std::vector<double> se(n, 0.0);
                parallel_for(
                    n,
                    [&](std::size_t i) {
                        const auto est = mmse_log_prob<double>(p_den, set.samples.col(static_cast<Eigen::Index>(i)),
                                                               *sc.schedule, cfg.audit.mmse_draws, cfg.seed, &s_den);
                        delta[i] = est.value;
                        se[i] = est.stderr_;
                    },
                    cfg.threads);
                info["mmse_draws"] = cfg.audit.mmse_draws;
                info["max_stderr"] = *std::max_element(se.begin(), se.end());
            }
        }
        if (cfg.method == Method::cp_k) {
            std::size_t attempts = 0;
            for (auto a : set.attempts) attempts += a;
            const double acc = static_cast<double>(n) / static_cast<double>(attempts);
            for (auto& d : delta) d -= std::log(acc);
            info["k"] = cfg.rejection.k;
            info["acceptance_rate"] = acc;
            info["mean_attempts"] = 1.0 / acc;
            if (std::isfinite(cfg.rejection.k)) report.k_c_bound = cfg.rejection.k - std::log(acc);
            if (sc.safe_law && sc.private_law && sc.dim == 1) {
                const double p = cp_k_acceptance_probability(*sc.safe_law, *sc.private_law, cfg.rejection.k);
                info["analytic_acceptance_rate"] = p;
            }
        }
        if (cfg.method == Method::cpr_kl && sc.safe_law && sc.private_law) {
            try {
                report.k_c_closed_form = k_c_hellinger(*sc.safe_law, *sc.private_law).k_c;
            } catch (const DomainError& e) {
                notes.push_back(e.what());
            }
        }
    }

    if (!delta.empty()) {
        if (delta.size() >= 1000)
            report.delta_kl = stats::bootstrap_mean(delta, cfg.audit.ci_level, cfg.audit.bootstrap_resamples, cfg.seed);
        else
            notes.push_back("delta_kl needs at least 1000 samples");
        report.histogram = stats::histogram(delta, cfg.audit.histogram_bins);
    }
    info["notes"] = notes;
    if (extra) *extra = info;
    return report;
}

json RunManifest::to_json() const {
    json files_json = json::object();
    for (const auto& [name, hash] : files) files_json[name] = hash;
    return {{"config_hash", config_hash},
            {"code_version", code_version},
            {"started", started},
            {"finished", finished},
            {"files", files_json}};
}

RunManifest run_experiment(const ExperimentConfig& cfg, bool with_audit) {
    if (cfg.output_dir.empty()) throw ConfigError("output_dir: not set (use --out or CPR_LAB_OUT)");
    RunManifest manifest;
    manifest.started = utc_now();
    manifest.config_hash = sha256_hex(cfg.canonical.dump());
    manifest.code_version = CPR_LAB_VERSION;
    std::filesystem::create_directories(cfg.output_dir);

    const Scenario sc = staged("scenario", [&] { return build_scenario(cfg); });
    const SampleSet set = staged("sample", [&] { return draw_samples(cfg, sc); });
    std::vector<std::string> written;

    {
        std::string text = "index";
        for (Eigen::Index j = 0; j < sc.dim; ++j) text += ",x" + std::to_string(j);
        text += ",score_evaluations";
        if (!set.attempts.empty()) text += ",attempts";
        text += '\n';
        for (Eigen::Index i = 0; i < set.samples.cols(); ++i) {
            const auto u = static_cast<std::size_t>(i);
            text += std::to_string(i) + ',' + vector_csv(set.samples.col(i)) + ',' +
                    std::to_string(set.score_evaluations[u]);
            if (!set.attempts.empty()) text += ',' + std::to_string(set.attempts[u]);
            text += '\n';
        }
        write_text(cfg.output_dir / "samples.csv", text);
        written.push_back("samples.csv");
    }

    if (cfg.dump_trajectories && !set.trajectories.empty()) {
        std::string text = "sample,step,level,t";
        for (Eigen::Index j = 0; j < sc.dim; ++j) text += ",x" + std::to_string(j);
        text += ",private\n";
        for (std::size_t i = 0; i < set.trajectories.size(); ++i) {
            const auto& tr = set.trajectories[i];
            for (std::size_t s = 0; s < tr.states.size(); ++s) {
                const std::size_t level = tr.levels[s];
                const bool priv = s < tr.used_private.size() && tr.used_private[s];
                text += std::to_string(i) + ',' + std::to_string(s) + ',' + std::to_string(level) + ',' +
                        format_number(sc.schedule->time(level)) + ',' + vector_csv(tr.states[s]) + ',' +
                        (priv ? "1" : "0") + '\n';
            }
        }
        write_text(cfg.output_dir / "trajectories.csv", text);
        written.push_back("trajectories.csv");
    }

    if (with_audit) {
        json info;
        const AuditReport report = staged("audit", [&] { return audit_samples(cfg, sc, set, &info); });
        json doc = {{"method", report.method},
                    {"mode", report.mode},
                    {"weighting", sc.weighting},
                    {"samples", report.samples},
                    {"score_evaluations", report.score_evaluations},
                    {"k_c_bound", report.k_c_bound ? json(*report.k_c_bound) : json(nullptr)},
                    {"k_c_closed_form", report.k_c_closed_form ? json(*report.k_c_closed_form) : json(nullptr)},
                    {"delta_kl", report.delta_kl ? interval_json(*report.delta_kl, cfg.audit.ci_level) : json(nullptr)},
                    {"details", info}};
        if (!report.per_sample_delta_max.empty()) {
            const auto& d = report.per_sample_delta_max;
            doc["delta_max_summary"] = {{"min", *std::min_element(d.begin(), d.end())},
                                        {"max", *std::max_element(d.begin(), d.end())},
                                        {"mean", stats::mean(d)},
                                        {"q95", stats::quantile(d, 0.95)}};
        }
        doc["per_sample_delta_max"] = report.per_sample_delta_max;
        write_text(cfg.output_dir / "audit.json", doc.dump(2) + "\n");
        written.push_back("audit.json");

        std::string hist = "bin_left,bin_right,count\n";
        for (std::size_t b = 0; b < report.histogram.counts.size(); ++b)
            hist += format_number(report.histogram.edges[b]) + ',' + format_number(report.histogram.edges[b + 1]) + ',' +
                    std::to_string(report.histogram.counts[b]) + '\n';
        write_text(cfg.output_dir / "histogram.csv", hist);
        written.push_back("histogram.csv");
        if (cfg.audit.svg) {
            write_text(cfg.output_dir / "histogram.svg",
                       histogram_svg(report.histogram, "log p / safe, method " + report.method));
            written.push_back("histogram.svg");
        }
    }

    for (const auto& name : written) manifest.files.emplace_back(name, sha256_file(cfg.output_dir / name));
    manifest.finished = utc_now();
    write_text(cfg.output_dir / "manifest.json", manifest.to_json().dump(2) + "\n");
    return manifest;
}

double cp_k_acceptance_probability(const GaussianMixture<double>& safe, const GaussianMixture<double>& priv, double k) {
    if (safe.dim() != 1 || priv.dim() != 1) throw DomainError("cp-k acceptance: quadrature is one-dimensional");
    if (std::isinf(k)) return 1.0;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (Eigen::Index j = 0; j < priv.size(); ++j) {
        const double sd = std::sqrt(priv.variances()(0, j));
        lo = std::min(lo, priv.means()(0, j) - 14 * sd);
        hi = std::max(hi, priv.means()(0, j) + 14 * sd);
    }
    const std::size_t n = 400001;
    const double h = (hi - lo) / static_cast<double>(n - 1);
    double acc = 0;
    Eigen::VectorXd x(1);
    for (std::size_t i = 0; i < n; ++i) {
        x[0] = lo + h * static_cast<double>(i);
        const double lp = priv.log_density(x);
        if (lp - safe.log_density(x) <= k) acc += (i == 0 || i + 1 == n ? 0.5 : 1.0) * std::exp(lp);
    }
    return std::min(1.0, acc * h);
}

std::vector<BenchRow> bench_costs(const std::vector<ExperimentConfig>& configs) {
    std::vector<BenchRow> rows;
    if (configs.empty()) return rows;
    for (const auto& cfg : configs) {
        if (cfg.samples != configs.front().samples) throw ConfigError("samples: bench configs must share a sample count");
        const Scenario sc = staged("scenario", [&] { return build_scenario(cfg); });
        const SampleSet set = staged("sample", [&] { return draw_samples(cfg, sc); });
        BenchRow row;
        row.method = std::string(to_string(cfg.method));
        row.samples = cfg.samples;
        row.wall_seconds = set.wall_seconds;
        row.evaluations_min = *std::min_element(set.score_evaluations.begin(), set.score_evaluations.end());
        row.evaluations_max = *std::max_element(set.score_evaluations.begin(), set.score_evaluations.end());
        for (auto e : set.score_evaluations) row.score_evaluations += e;
        if (!set.attempts.empty()) {
            row.attempts = set.attempts;
            std::vector<double> a(set.attempts.begin(), set.attempts.end());
            row.mean_attempts = stats::bootstrap_mean(a, cfg.audit.ci_level, cfg.audit.bootstrap_resamples, cfg.seed);
            if (sc.safe_law && sc.private_law && sc.dim == 1)
                row.analytic_attempts = 1.0 / cp_k_acceptance_probability(*sc.safe_law, *sc.private_law, cfg.rejection.k);
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

void write_schedule_csv(const NoiseSchedule<double>& s, std::ostream& out) {
    out << "level,t,beta,gamma,sigma,alpha,alpha_prime\n";
    for (std::size_t k = 0; k <= s.num_steps(); ++k) {
        out << k << ',' << format_number(s.time(k)) << ',' << format_number(s.beta(k)) << ','
            << format_number(s.gamma(k)) << ',' << format_number(s.sigma(k)) << ',' << format_number(s.log_snr(k))
            << ',' << (k == 0 ? std::string("") : format_number(s.log_snr_slope(k))) << '\n';
    }
}

Matrix<double> read_samples_csv(const std::filesystem::path& path, Eigen::Index dim) {
    std::ifstream in(path);
    if (!in) throw ConfigError("samples: cannot open '" + path.string() + "'");
    std::string line;
    std::getline(in, line);
    std::vector<Eigen::VectorXd> cols;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::getline(ss, cell, ',');
        Eigen::VectorXd x(dim);
        for (Eigen::Index j = 0; j < dim; ++j) {
            if (!std::getline(ss, cell, ',')) throw ConfigError("samples: row has fewer than " + std::to_string(dim) + " coordinates");
            x[j] = std::stod(cell);
        }
        cols.push_back(x);
    }
    Matrix<double> out(dim, static_cast<Eigen::Index>(cols.size()));
    for (std::size_t i = 0; i < cols.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = cols[i];
    return out;
}

}  // namespace cpr
