#pragma once

#include <cstddef>
#include <filesystem>
#include <memory>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

#include "cpr/score_oracle.hpp"

namespace cpr {

struct EmbeddingRecord {
    std::string id;
    Eigen::VectorXd item_embedding;     ///< stands in for the image embedding
    Eigen::VectorXd caption_embedding;  ///< stands in for the caption embedding
    std::string payload;
};

struct RetrievalResult {
    Eigen::VectorXd query;
    std::vector<EmbeddingRecord> records;
    std::vector<double> scores;
    /// query + caption of each retrieved record
    std::vector<Eigen::VectorXd> merged_prompts;
    Eigen::VectorXd mean_item_embedding;
};

/// Private datastore of embedding records with exact linear-scan retrieval.
/// Records live in a dense array indexed through an id map, so removal is a
/// swap-with-last in O(1). Readers share a lock; add/remove are exclusive.
class DataStore {
public:
    explicit DataStore(Eigen::Index dim);

    DataStore(DataStore&&) noexcept = default;
    DataStore& operator=(DataStore&&) noexcept = default;

    /// One JSON object per line: {"id", "item", "caption", "payload"}, after an
    /// optional {"dim"} header line. {"unlearn": id} lines remove earlier records.
    static DataStore load(const std::filesystem::path& path);
    /// Writes a compacted copy to a sibling temp file then renames over `path`.
    void save(const std::filesystem::path& path) const;

    void add(EmbeddingRecord record);
    /// Removes the record; NotFoundError for unknown ids.
    void remove(const std::string& id);

    bool contains(const std::string& id) const;
    std::size_t size() const;
    bool empty() const { return size() == 0; }
    Eigen::Index dim() const { return dim_; }
    std::vector<EmbeddingRecord> snapshot() const;

    /// The m records minimising ||q - caption|| + ||q - item||, ties by id.
    RetrievalResult retrieve(const Eigen::VectorXd& query, std::size_t m) const;

private:
    Eigen::Index dim_;
    std::vector<EmbeddingRecord> records_;
    std::unordered_map<std::string, std::size_t> slot_;
    std::unique_ptr<std::shared_mutex> mutex_;
};

double retrieval_distance(const EmbeddingRecord& record, const Eigen::VectorXd& query);

/// Prompt merge phi(c_i, c_test) = c_i + c_test.
Eigen::VectorXd merge_prompt(const Eigen::VectorXd& caption, const Eigen::VectorXd& query);

/// Score of the base family conditioned on the mean retrieved item embedding.
ScoreFn<double> retrieval_score_fn(const ScoreOracle<double>& base, const RetrievalResult& result);

/// w0 * s(x, t, query) + w1 * s(x, t, mean item embedding).
ScoreFn<double> retrieval_mixture_score_fn(const ScoreOracle<double>& base, const RetrievalResult& result,
                                           double w0, double w1);

/// Removes `id` from the store and appends a tombstone for it to `path`.
void unlearn(DataStore& store, const std::string& id, const std::filesystem::path& path);

}  // namespace cpr
