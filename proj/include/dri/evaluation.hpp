#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dri/tensor.hpp"

namespace dri {

/// Features [N, D] with parallel per-row labels.
struct EmbeddingSet {
    Tensor<float> features;
    std::vector<std::int64_t> ids;        // -1 marks a distractor
    std::vector<std::string> modalities;
    std::vector<std::string> keys;        // sample identity used for self-match exclusion

    std::size_t size() const { return ids.size(); }
    void validate() const;
    EmbeddingSet subset(const std::vector<std::size_t>& rows) const;
};

struct RetrievalProtocol {
    std::string name = "all";
    std::string query_modality;    // empty = every modality
    std::string gallery_modality;  // empty = every modality
    bool exclude_self = true;

    /// "all", or "A->B" / "A→B" for queries of modality A against gallery B.
    static RetrievalProtocol parse(const std::string& spec);
};

inline constexpr int kCmcRanks[] = {1, 5, 10};

struct MetricsReport {
    double mAP = 0;              // percent
    std::map<int, double> cmc;   // rank -> percent
    std::vector<double> ap;      // per retained query, in [0, 1]
    std::vector<std::size_t> query_rows;    // row in the query set of each retained query
    std::vector<std::size_t> ranked_sizes;  // gallery candidates per retained query
    std::size_t dropped = 0;     // queries with no relevant gallery item
};

/// Euclidean distances [q, g], accumulated in double.
Tensor<double> pairwise_euclidean(const Tensor<float>& Q, const Tensor<float>& G);

/// Ranks by ascending distance with ties broken by gallery index. Distractors
/// are ranked but never relevant; queries without relevants are dropped.
/// Uses DRI_THREADS worker threads for the per-query work when set.
MetricsReport evaluate(const EmbeddingSet& query, const EmbeddingSet& gallery, const RetrievalProtocol& protocol);

/// Quadratic reference implementation for sets of at most 200 rows.
MetricsReport oracle_evaluate(const EmbeddingSet& query, const EmbeddingSet& gallery,
                              const RetrievalProtocol& protocol);

inline constexpr std::size_t kOracleLimit = 200;

/// Worker count from DRI_THREADS (default 1).
std::size_t eval_threads();

}  // namespace dri
