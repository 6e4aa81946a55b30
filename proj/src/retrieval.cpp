#include "cpr/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numeric>
#include <optional>

#include <json.hpp>

namespace cpr {

namespace {

Eigen::VectorXd to_vector(const nlohmann::json& j, const std::string& field, std::size_t line_no) {
    if (!j.is_array()) throw ConfigError("store line " + std::to_string(line_no) + ": '" + field + "' must be an array");
    Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
    return v;
}

nlohmann::json to_json(const Eigen::VectorXd& v) {
    return nlohmann::json(std::vector<double>(v.data(), v.data() + v.size()));
}

}  // namespace

DataStore::DataStore(Eigen::Index dim) : dim_(dim), mutex_(std::make_unique<std::shared_mutex>()) {
    if (dim <= 0) throw ConfigError("store: embedding dimension must be positive");
}

DataStore DataStore::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("store: cannot open '" + path.string() + "'");
    std::vector<std::optional<EmbeddingRecord>> parsed;
    std::unordered_map<std::string, std::size_t> live;
    std::optional<Eigen::Index> header_dim, first_dim;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ConfigError("store line " + std::to_string(line_no) + ": " + e.what());
        }
        if (j.is_object() && j.contains("dim") && !j.contains("id")) {
            header_dim = j.at("dim").get<Eigen::Index>();
            continue;
        }
        if (j.is_object() && j.contains("unlearn")) {
            const auto it = live.find(j.at("unlearn").get<std::string>());
            if (it == live.end())
                throw ConfigError("store line " + std::to_string(line_no) + ": unlearn of unknown id");
            parsed[it->second].reset();
            live.erase(it);
            continue;
        }
        EmbeddingRecord r;
        r.id = j.at("id").get<std::string>();
        r.item_embedding = to_vector(j.at("item"), "item", line_no);
        r.caption_embedding = to_vector(j.at("caption"), "caption", line_no);
        r.payload = j.value("payload", std::string{});
        if (!first_dim) first_dim = r.item_embedding.size();
        if (live.contains(r.id)) throw ConfigError("store line " + std::to_string(line_no) + ": duplicate id '" + r.id + "'");
        live.emplace(r.id, parsed.size());
        parsed.emplace_back(std::move(r));
    }
    if (!header_dim && !first_dim) throw ConfigError("store: '" + path.string() + "' holds no records");
    DataStore store(header_dim ? *header_dim : *first_dim);
    for (auto& r : parsed)
        if (r) store.add(std::move(*r));
    return store;
}

void DataStore::save(const std::filesystem::path& path) const {
    std::shared_lock lock(*mutex_);
    // Sorted by id so the file is stable under swap-with-last removals.
    std::vector<const EmbeddingRecord*> order;
    order.reserve(records_.size());
    for (const auto& r : records_) order.push_back(&r);
    std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->id < b->id; });

    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw ConfigError("store: cannot write '" + tmp.string() + "'");
        out << nlohmann::json{{"dim", dim_}}.dump() << '\n';
        for (const auto* r : order) {
            nlohmann::json j{{"id", r->id},
                             {"item", to_json(r->item_embedding)},
                             {"caption", to_json(r->caption_embedding)}};
            if (!r->payload.empty()) j["payload"] = r->payload;
            out << j.dump() << '\n';
        }
        if (!out) throw ConfigError("store: write failed for '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, path);
}

void DataStore::add(EmbeddingRecord record) {
    if (record.id.empty()) throw ConfigError("store: record id must be non-empty");
    if (record.item_embedding.size() != dim_ || record.caption_embedding.size() != dim_)
        throw ConfigError("store: record '" + record.id + "' has embedding dimension != " + std::to_string(dim_));
    if (!record.item_embedding.allFinite() || !record.caption_embedding.allFinite())
        throw ConfigError("store: record '" + record.id + "' has non-finite embeddings");
    std::unique_lock lock(*mutex_);
    if (slot_.contains(record.id)) throw ConfigError("store: duplicate id '" + record.id + "'");
    slot_.emplace(record.id, records_.size());
    records_.push_back(std::move(record));
}

void DataStore::remove(const std::string& id) {
    std::unique_lock lock(*mutex_);
    const auto it = slot_.find(id);
    if (it == slot_.end()) throw NotFoundError("store: unknown id '" + id + "'");
    const std::size_t slot = it->second;
    slot_.erase(it);
    if (slot + 1 != records_.size()) {
        records_[slot] = std::move(records_.back());
        slot_[records_[slot].id] = slot;
    }
    records_.pop_back();
}

bool DataStore::contains(const std::string& id) const {
    std::shared_lock lock(*mutex_);
    return slot_.contains(id);
}

std::size_t DataStore::size() const {
    std::shared_lock lock(*mutex_);
    return records_.size();
}

std::vector<EmbeddingRecord> DataStore::snapshot() const {
    std::shared_lock lock(*mutex_);
    return records_;
}

double retrieval_distance(const EmbeddingRecord& record, const Eigen::VectorXd& query) {
    return (query - record.caption_embedding).norm() + (query - record.item_embedding).norm();
}

Eigen::VectorXd merge_prompt(const Eigen::VectorXd& caption, const Eigen::VectorXd& query) {
    if (caption.size() != query.size()) throw ConfigError("merge_prompt: dimension mismatch");
    return caption + query;
}

RetrievalResult DataStore::retrieve(const Eigen::VectorXd& query, std::size_t m) const {
    if (m == 0) throw ConfigError("retrieve: m must be >= 1");
    if (query.size() != dim_)
        throw ConfigError("retrieve: query dimension " + std::to_string(query.size()) + " != store dimension " +
                          std::to_string(dim_));
    std::shared_lock lock(*mutex_);
    if (records_.empty()) throw RetrievalError("retrieve: the datastore is empty");

    std::vector<double> dist(records_.size());
    for (std::size_t i = 0; i < records_.size(); ++i) dist[i] = retrieval_distance(records_[i], query);
    std::vector<std::size_t> order(records_.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t take = std::min(m, records_.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (dist[a] != dist[b]) return dist[a] < dist[b];
                          return records_[a].id < records_[b].id;
                      });

    RetrievalResult result;
    result.query = query;
    result.mean_item_embedding = Eigen::VectorXd::Zero(dim_);
    for (std::size_t i = 0; i < take; ++i) {
        const auto& r = records_[order[i]];
        result.records.push_back(r);
        result.scores.push_back(dist[order[i]]);
        result.merged_prompts.push_back(merge_prompt(r.caption_embedding, query));
        result.mean_item_embedding += r.item_embedding;
    }
    result.mean_item_embedding /= static_cast<double>(take);
    return result;
}

ScoreFn<double> retrieval_score_fn(const ScoreOracle<double>& base, const RetrievalResult& result) {
    if (result.records.empty()) throw RetrievalError("retrieval score: no retrieved records");
    if (result.mean_item_embedding.size() != base.family().condition_dim())
        throw ConfigError("retrieval score: embedding dimension does not match the condition map");
    return base.bind(result.mean_item_embedding);
}

ScoreFn<double> retrieval_mixture_score_fn(const ScoreOracle<double>& base, const RetrievalResult& result,
                                           double w0, double w1) {
    if (w0 < 0 || w1 < 0 || std::abs(w0 + w1 - 1.0) > 1e-12)
        throw ConfigError("retrieval mixture: require w0, w1 >= 0 and w0 + w1 = 1");
    if (result.query.size() != base.family().condition_dim())
        throw ConfigError("retrieval mixture: query dimension does not match the condition map");
    const ScoreFn<double> query_score = base.bind(result.query);
    if (w1 == 0.0) return query_score;
    const ScoreFn<double> retrieved_score = retrieval_score_fn(base, result);
    if (w0 == 0.0) return retrieved_score;
    return [=](const Eigen::VectorXd& x, std::size_t level) -> Eigen::VectorXd {
        return w0 * query_score(x, level) + w1 * retrieved_score(x, level);
    };
}

void unlearn(DataStore& store, const std::string& id, const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw ConfigError("store: '" + path.string() + "' does not exist");
    store.remove(id);
    std::ofstream out(path, std::ios::app);
    if (!out) throw ConfigError("store: cannot append to '" + path.string() + "'");
    out << nlohmann::json{{"unlearn", id}}.dump() << '\n';
    out.flush();
    if (!out) throw ConfigError("store: write failed for '" + path.string() + "'");
}

}  // namespace cpr
