// cpr-lab: copy-protected retrieval-augmented sampling experiments.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "cpr/experiment.hpp"

namespace {

using nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitTimeout = 4;

struct RunOptions {
    std::string config;
    std::string method;
    std::string out;
    std::vector<std::string> overrides;
    long long samples = -1;
    long long seed = -1;
    long long threads = -1;
    bool dump = false;
};

void add_run_options(CLI::App* cmd, RunOptions& o, bool config_required = true) {
    auto* c = cmd->add_option("-c,--config", o.config, "Experiment config (JSON, comments allowed)");
    if (config_required) c->required();
    cmd->add_option("-m,--method", o.method, "safe|rag|cpr-kl|cpr-min|cpr-alt|cpr-choose|cp-k");
    cmd->add_option("-o,--out", o.out, "Output directory (default: $CPR_LAB_OUT)");
    cmd->add_option("-n,--samples", o.samples, "Number of samples");
    cmd->add_option("--seed", o.seed, "Master seed");
    cmd->add_option("-j,--threads", o.threads, "Worker threads (0 = all cores)");
    cmd->add_flag("--dump-trajectories", o.dump, "Write trajectories.csv");
    cmd->add_option("--set", o.overrides, "Override a config key, e.g. --set sampler.eps0=0.02")->take_all();
}

json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw cpr::ConfigError("config: cannot open '" + path + "'");
    try {
        return json::parse(in, nullptr, true, true);
    } catch (const json::parse_error& e) {
        throw cpr::ConfigError("config: " + std::string(e.what()));
    }
}

std::string default_out() {
    if (const char* env = std::getenv("CPR_LAB_OUT"); env && *env) return env;
    return "cpr-lab-out";
}

cpr::ExperimentConfig load(const RunOptions& o, const std::string& path) {
    json doc = read_json(path);
    if (!o.method.empty()) doc["method"] = o.method;
    if (o.samples >= 0) doc["samples"] = o.samples;
    if (o.seed >= 0) doc["seed"] = o.seed;
    if (o.threads >= 0) doc["threads"] = o.threads;
    if (o.dump) doc["dump_trajectories"] = true;
    for (const auto& kv : o.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw cpr::ConfigError("--set: expected key=value, got '" + kv + "'");
        cpr::apply_override(doc, kv.substr(0, eq), kv.substr(eq + 1));
    }
    auto cfg = cpr::parse_config(doc, std::filesystem::path(path).parent_path());
    if (!o.out.empty())
        cfg.output_dir = o.out;
    else if (cfg.output_dir.empty())
        cfg.output_dir = default_out();
    return cfg;
}

Eigen::VectorXd parse_vector(const std::string& text, const std::string& field) {
    std::vector<double> values;
    std::stringstream ss(text);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        try {
            values.push_back(std::stod(cell));
        } catch (const std::exception&) {
            throw cpr::ConfigError(field + ": '" + cell + "' is not a number");
        }
    }
    if (values.empty()) throw cpr::ConfigError(field + ": empty vector");
    return Eigen::Map<Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
}

std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

int report(const std::string& what, int code) {
    std::cerr << "cpr-lab: " << what << '\n';
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cpr-lab: copy-protected retrieval-augmented diffusion sampling lab"};
    app.require_subcommand(1);

    auto* schedule_cmd = app.add_subcommand("schedule", "Noise schedule tools");
    auto* dump_cmd = schedule_cmd->add_subcommand("dump", "Write the schedule table as CSV");
    schedule_cmd->require_subcommand(1);
    std::string sched_config, sched_out = "-";
    cpr::ScheduleParams sched;
    sched.num_steps = 100;
    std::string sched_kind = "linear";
    dump_cmd->add_option("-c,--config", sched_config, "Take the schedule section from a config");
    dump_cmd->add_option("--kind", sched_kind, "linear|cosine|constant");
    dump_cmd->add_option("--beta-min", sched.beta_min);
    dump_cmd->add_option("--beta-max", sched.beta_max);
    dump_cmd->add_option("-T,--steps", sched.num_steps);
    dump_cmd->add_option("--t-min", sched.t_min);
    dump_cmd->add_option("-o,--out", sched_out, "CSV path, '-' for stdout");

    RunOptions sample_opts, audit_opts;
    auto* sample_cmd = app.add_subcommand("sample", "Draw samples (samples.csv, manifest.json)");
    add_run_options(sample_cmd, sample_opts);
    auto* audit_cmd = app.add_subcommand("audit", "Draw samples and audit them against the safe model");
    add_run_options(audit_cmd, audit_opts);

    std::string store_path, query_text, record_id;
    std::size_t top_m = 5;
    auto* retrieve_cmd = app.add_subcommand("retrieve", "Query a datastore");
    retrieve_cmd->add_option("-s,--store", store_path, "Datastore (JSONL)")->required();
    retrieve_cmd->add_option("-q,--query", query_text, "Query embedding, comma separated")->required();
    retrieve_cmd->add_option("-m", top_m, "Number of records");

    auto* unlearn_cmd = app.add_subcommand("unlearn", "Remove a record from a datastore");
    unlearn_cmd->add_option("-s,--store", store_path, "Datastore (JSONL)")->required();
    unlearn_cmd->add_option("--id", record_id, "Record id")->required();

    std::vector<std::string> bench_configs;
    RunOptions bench_opts;
    auto* bench_cmd = app.add_subcommand("bench", "Cost table across configs (bench.csv)");
    bench_cmd->add_option("configs", bench_configs, "Experiment configs")->required();
    bench_cmd->add_option("-o,--out", bench_opts.out, "Output directory (default: $CPR_LAB_OUT)");
    bench_cmd->add_option("-n,--samples", bench_opts.samples, "Sample count for every config");
    bench_cmd->add_option("--set", bench_opts.overrides, "Override a key in every config")->take_all();

    auto* store_cmd = app.add_subcommand("store", "Datastore helpers");
    auto* gen_cmd = store_cmd->add_subcommand("generate", "Write a random datastore");
    store_cmd->require_subcommand(1);
    std::size_t gen_records = 100;
    long long gen_dim = 2;
    std::uint64_t gen_seed = 0;
    double gen_spread = 1.0;
    gen_cmd->add_option("-o,--out", store_path, "Datastore path")->required();
    gen_cmd->add_option("-r,--records", gen_records);
    gen_cmd->add_option("-k,--dim", gen_dim);
    gen_cmd->add_option("--seed", gen_seed);
    gen_cmd->add_option("--spread", gen_spread, "Standard deviation of the embeddings");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (dump_cmd->parsed()) {
            cpr::ScheduleParams p = sched;
            if (!sched_config.empty()) {
                p = cpr::parse_config(read_json(sched_config), std::filesystem::path(sched_config).parent_path()).schedule;
            } else {
                p.kind = cpr::parse_schedule_kind(sched_kind);
            }
            const auto s = cpr::NoiseSchedule<double>::build(p);
            if (sched_out == "-") {
                cpr::write_schedule_csv(s, std::cout);
            } else {
                std::ofstream out(sched_out);
                if (!out) throw cpr::ConfigError("--out: cannot write '" + sched_out + "'");
                cpr::write_schedule_csv(s, out);
            }
        } else if (sample_cmd->parsed() || audit_cmd->parsed()) {
            const bool audit = audit_cmd->parsed();
            const auto& o = audit ? audit_opts : sample_opts;
            const auto cfg = load(o, o.config);
            const auto manifest = cpr::run_experiment(cfg, audit);
            std::cout << "wrote " << manifest.files.size() + 1 << " files to " << cfg.output_dir.string()
                      << " (config " << manifest.config_hash.substr(0, 12) << ")\n";
            if (audit) {
                const auto doc = read_json((cfg.output_dir / "audit.json").string());
                std::cout << "method " << doc["method"].get<std::string>() << ", mode " << doc["mode"].get<std::string>();
                if (!doc["k_c_bound"].is_null()) std::cout << ", k_c_bound " << doc["k_c_bound"].dump();
                if (!doc["k_c_closed_form"].is_null()) std::cout << ", k_c_closed_form " << doc["k_c_closed_form"].dump();
                if (!doc["delta_kl"].is_null()) std::cout << ", delta_kl " << doc["delta_kl"]["estimate"].dump();
                std::cout << '\n';
            }
        } else if (retrieve_cmd->parsed()) {
            const auto store = cpr::DataStore::load(store_path);
            const auto result = store.retrieve(parse_vector(query_text, "--query"), top_m);
            json records = json::array();
            for (std::size_t i = 0; i < result.records.size(); ++i)
                records.push_back({{"id", result.records[i].id},
                                   {"score", result.scores[i]},
                                   {"merged_prompt", to_std(result.merged_prompts[i])},
                                   {"payload", result.records[i].payload}});
            std::cout << json{{"query", to_std(result.query)},
                              {"records", records},
                              {"mean_item_embedding", to_std(result.mean_item_embedding)}}
                             .dump(2)
                      << '\n';
        } else if (unlearn_cmd->parsed()) {
            auto store = cpr::DataStore::load(store_path);
            cpr::unlearn(store, record_id, store_path);
            std::cout << "removed " << record_id << "; " << store.size() << " records remain\n";
        } else if (bench_cmd->parsed()) {
            std::vector<cpr::ExperimentConfig> configs;
            for (const auto& path : bench_configs) configs.push_back(load(bench_opts, path));
            const auto rows = cpr::bench_costs(configs);
            std::ostringstream csv;
            csv << "method,samples,wall_seconds,score_evaluations,evaluations_min,evaluations_max,"
                   "mean_attempts,attempts_lower,attempts_upper,analytic_attempts,max_attempts\n";
            for (const auto& r : rows) {
                csv << r.method << ',' << r.samples << ',' << cpr::format_number(r.wall_seconds) << ','
                    << r.score_evaluations << ',' << r.evaluations_min << ',' << r.evaluations_max << ',';
                if (r.mean_attempts)
                    csv << cpr::format_number(r.mean_attempts->estimate) << ','
                        << cpr::format_number(r.mean_attempts->lower) << ','
                        << cpr::format_number(r.mean_attempts->upper) << ',';
                else
                    csv << ",,,";
                if (r.analytic_attempts) csv << cpr::format_number(*r.analytic_attempts);
                csv << ',';
                if (!r.attempts.empty()) csv << *std::max_element(r.attempts.begin(), r.attempts.end());
                csv << '\n';
            }
            const std::filesystem::path out = bench_opts.out.empty() ? default_out() : bench_opts.out;
            std::filesystem::create_directories(out);
            std::ofstream(out / "bench.csv") << csv.str();
            std::cout << csv.str();
        } else if (gen_cmd->parsed()) {
            if (gen_dim < 1) throw cpr::ConfigError("--dim: must be >= 1");
            cpr::DataStore store(gen_dim);
            auto rng = cpr::make_stream(gen_seed, cpr::StreamTag::data);
            for (std::size_t i = 0; i < gen_records; ++i) {
                cpr::EmbeddingRecord r;
                std::ostringstream id;
                id << "rec" << std::setw(6) << std::setfill('0') << i;
                r.id = id.str();
                r.item_embedding = gen_spread * cpr::standard_normal<double>(gen_dim, rng);
                r.caption_embedding = r.item_embedding + 0.1 * gen_spread * cpr::standard_normal<double>(gen_dim, rng);
                store.add(std::move(r));
            }
            store.save(store_path);
            std::cout << "wrote " << gen_records << " records to " << store_path << '\n';
        }
    } catch (const cpr::ConfigError& e) {
        return report(e.what(), kExitConfig);
    } catch (const cpr::NotFoundError& e) {
        return report(e.what(), kExitConfig);
    } catch (const cpr::RetrievalError& e) {
        return report(e.what(), kExitConfig);
    } catch (const cpr::NumericError& e) {
        return report(e.what(), kExitNumeric);
    } catch (const cpr::DomainError& e) {
        return report(e.what(), kExitNumeric);
    } catch (const cpr::RejectionTimeout& e) {
        return report(std::string(e.what()) + " (attempts " + std::to_string(e.attempts()) + ")", kExitTimeout);
    } catch (const std::exception& e) {
        return report(e.what(), kExitOther);
    }
    return kExitOk;
}
