#include "dri/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <thread>

#include "dri/errors.hpp"

namespace dri {

void EmbeddingSet::validate() const {
    if (features.rank() != 2) throw DimensionError("embedding features must be [N, D], got " + shape_str(features.shape));
    const std::size_t n = features.dim(0);
    if (ids.size() != n || modalities.size() != n || keys.size() != n) {
        throw DimensionError("embedding set has " + std::to_string(n) + " rows but " + std::to_string(ids.size()) +
                             " ids, " + std::to_string(modalities.size()) + " modalities, " +
                             std::to_string(keys.size()) + " keys");
    }
}

EmbeddingSet EmbeddingSet::subset(const std::vector<std::size_t>& rows) const {
    const std::size_t D = features.dim(1);
    EmbeddingSet out;
    if (rows.empty()) throw ContractError("EmbeddingSet::subset: empty row selection");
    out.features = Tensor<float>(Shape{rows.size(), D});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy_n(features.data.begin() + static_cast<std::ptrdiff_t>(rows[i] * D), D,
                    out.features.data.begin() + static_cast<std::ptrdiff_t>(i * D));
        out.ids.push_back(ids[rows[i]]);
        out.modalities.push_back(modalities[rows[i]]);
        out.keys.push_back(keys[rows[i]]);
    }
    return out;
}

RetrievalProtocol RetrievalProtocol::parse(const std::string& spec) {
    if (spec == "all") return RetrievalProtocol{};
    for (const std::string arrow : {"->", "\xE2\x86\x92"}) {
        const auto at = spec.find(arrow);
        if (at == std::string::npos) continue;
        RetrievalProtocol p;
        p.query_modality = spec.substr(0, at);
        p.gallery_modality = spec.substr(at + arrow.size());
        if (p.query_modality.empty() || p.gallery_modality.empty()) break;
        p.name = p.query_modality + "->" + p.gallery_modality;
        return p;
    }
    throw ProtocolError("unknown retrieval protocol '" + spec + "' (use 'all' or 'A->B')");
}

std::size_t eval_threads() {
    const char* env = std::getenv("DRI_THREADS");
    if (!env || !*env) return 1;
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1) throw ConfigError(std::string("DRI_THREADS must be a positive integer, got '") + env + "'");
    return static_cast<std::size_t>(v);
}

Tensor<double> pairwise_euclidean(const Tensor<float>& Q, const Tensor<float>& G) {
    if (Q.rank() != 2 || G.rank() != 2 || Q.dim(1) != G.dim(1)) {
        throw DimensionError("pairwise_euclidean: feature dims differ (" + shape_str(Q.shape) + " vs " +
                             shape_str(G.shape) + ")");
    }
    const std::size_t q = Q.dim(0), g = G.dim(0), D = Q.dim(1);
    Tensor<double> out(Shape{q, g});
    for (std::size_t i = 0; i < q; ++i)
        for (std::size_t j = 0; j < g; ++j) {
            double acc = 0;
            for (std::size_t d = 0; d < D; ++d) {
                const double diff = static_cast<double>(Q.data[i * D + d]) - static_cast<double>(G.data[j * D + d]);
                acc += diff * diff;
            }
            out.data[i * g + j] = std::sqrt(acc);
        }
    return out;
}

namespace {

struct Filtered {
    std::vector<std::size_t> queries;
    std::vector<std::size_t> gallery;
};

Filtered filter(const EmbeddingSet& query, const EmbeddingSet& gallery, const RetrievalProtocol& p) {
    query.validate();
    gallery.validate();
    if (query.features.dim(1) != gallery.features.dim(1)) {
        throw DimensionError("query features are " + shape_str(query.features.shape) + " but gallery features are " +
                             shape_str(gallery.features.shape));
    }
    Filtered f;
    for (std::size_t i = 0; i < query.size(); ++i)
        if (p.query_modality.empty() || query.modalities[i] == p.query_modality) f.queries.push_back(i);
    for (std::size_t j = 0; j < gallery.size(); ++j)
        if (p.gallery_modality.empty() || gallery.modalities[j] == p.gallery_modality) f.gallery.push_back(j);
    if (f.queries.empty()) throw ProtocolError("protocol " + p.name + ": no query rows match the filter");
    if (f.gallery.empty()) throw ProtocolError("protocol " + p.name + ": no gallery rows match the filter");
    return f;
}

struct QueryResult {
    bool retained = false;
    double ap = 0;
    std::size_t first_hit = 0;  // 1-based rank of the first relevant item
    std::size_t candidates = 0;
};

MetricsReport assemble(const std::vector<QueryResult>& results, const std::vector<std::size_t>& query_rows,
                       const RetrievalProtocol& p) {
    MetricsReport r;
    std::size_t hits[3] = {0, 0, 0};
    double ap_sum = 0;
    for (std::size_t i = 0; i < results.size(); ++i) {
        const auto& q = results[i];
        if (!q.retained) {
            ++r.dropped;
            continue;
        }
        r.ap.push_back(q.ap);
        r.query_rows.push_back(query_rows[i]);
        r.ranked_sizes.push_back(q.candidates);
        ap_sum += q.ap;
        for (std::size_t k = 0; k < 3; ++k)
            if (q.first_hit <= static_cast<std::size_t>(kCmcRanks[k])) ++hits[k];
    }
    if (r.ap.empty()) throw ProtocolError("protocol " + p.name + ": no query has a relevant gallery item");
    const double n = static_cast<double>(r.ap.size());
    r.mAP = 100.0 * ap_sum / n;
    for (std::size_t k = 0; k < 3; ++k) r.cmc[kCmcRanks[k]] = 100.0 * static_cast<double>(hits[k]) / n;
    return r;
}

}  // namespace

MetricsReport evaluate(const EmbeddingSet& query, const EmbeddingSet& gallery, const RetrievalProtocol& protocol) {
    const Filtered f = filter(query, gallery, protocol);
    const EmbeddingSet Q = query.subset(f.queries);
    const EmbeddingSet G = gallery.subset(f.gallery);
    const Tensor<double> dist = pairwise_euclidean(Q.features, G.features);
    const std::size_t nq = Q.size(), ng = G.size();
    std::vector<QueryResult> results(nq);

    auto work = [&](std::size_t begin, std::size_t end) {
        std::vector<std::size_t> order;
        for (std::size_t i = begin; i < end; ++i) {
            order.clear();
            for (std::size_t j = 0; j < ng; ++j)
                if (!(protocol.exclude_self && G.keys[j] == Q.keys[i])) order.push_back(j);
            const double* row = dist.data.data() + i * ng;
            std::stable_sort(order.begin(), order.end(), [row](std::size_t a, std::size_t b) { return row[a] < row[b]; });
            QueryResult& res = results[i];
            res.candidates = order.size();
            const std::int64_t id = Q.ids[i];
            if (id == -1) continue;
            std::size_t hits = 0;
            double precision_sum = 0;
            for (std::size_t rank = 0; rank < order.size(); ++rank) {
                if (G.ids[order[rank]] != id) continue;
                if (hits == 0) res.first_hit = rank + 1;
                ++hits;
                precision_sum += static_cast<double>(hits) / static_cast<double>(rank + 1);
            }
            if (hits > 0) {
                res.retained = true;
                res.ap = precision_sum / static_cast<double>(hits);
            }
        }
    };

    const std::size_t threads = std::min(eval_threads(), nq);
    if (threads <= 1) {
        work(0, nq);
    } else {
        std::vector<std::jthread> pool;
        const std::size_t chunk = (nq + threads - 1) / threads;
        for (std::size_t t = 0; t < threads; ++t) {
            const std::size_t b = t * chunk, e = std::min(nq, b + chunk);
            if (b < e) pool.emplace_back(work, b, e);
        }
    }
    return assemble(results, f.queries, protocol);
}

MetricsReport oracle_evaluate(const EmbeddingSet& query, const EmbeddingSet& gallery,
                              const RetrievalProtocol& protocol) {
    if (query.size() > kOracleLimit || gallery.size() > kOracleLimit) {
        throw ContractError("oracle_evaluate is limited to " + std::to_string(kOracleLimit) + " rows per set (got " +
                            std::to_string(query.size()) + " x " + std::to_string(gallery.size()) + ")");
    }
    const Filtered f = filter(query, gallery, protocol);
    const std::size_t D = query.features.dim(1);
    std::vector<QueryResult> results;
    for (std::size_t qi : f.queries) {
        // candidate list with distances recomputed from scratch
        std::vector<std::pair<double, std::size_t>> cand;
        for (std::size_t gj : f.gallery) {
            if (protocol.exclude_self && gallery.keys[gj] == query.keys[qi]) continue;
            double s = 0;
            for (std::size_t d = 0; d < D; ++d) {
                const double diff = static_cast<double>(query.features.data[qi * D + d]) -
                                    static_cast<double>(gallery.features.data[gj * D + d]);
                s += diff * diff;
            }
            cand.emplace_back(std::sqrt(s), gj);
        }
        // selection sort: smallest distance first, lower gallery index on ties
        std::vector<std::size_t> ranked;
        std::vector<bool> used(cand.size(), false);
        for (std::size_t r = 0; r < cand.size(); ++r) {
            std::size_t best = cand.size();
            for (std::size_t c = 0; c < cand.size(); ++c) {
                if (used[c]) continue;
                if (best == cand.size() || cand[c].first < cand[best].first ||
                    (cand[c].first == cand[best].first && cand[c].second < cand[best].second))
                    best = c;
            }
            used[best] = true;
            ranked.push_back(cand[best].second);
        }
        auto relevant = [&](std::size_t gj) {
            return query.ids[qi] != -1 && gallery.ids[gj] == query.ids[qi];
        };
        QueryResult res;
        res.candidates = ranked.size();
        std::size_t total_relevant = 0;
        for (std::size_t gj : ranked) total_relevant += relevant(gj) ? 1 : 0;
        if (total_relevant > 0) {
            res.retained = true;
            double sum = 0;
            for (std::size_t pos = 0; pos < ranked.size(); ++pos) {
                if (!relevant(ranked[pos])) continue;
                std::size_t above = 0;
                for (std::size_t p2 = 0; p2 <= pos; ++p2) above += relevant(ranked[p2]) ? 1 : 0;
                sum += static_cast<double>(above) / static_cast<double>(pos + 1);
            }
            res.ap = sum / static_cast<double>(total_relevant);
            res.first_hit = ranked.size() + 1;
            for (std::size_t pos = ranked.size(); pos-- > 0;)
                if (relevant(ranked[pos])) res.first_hit = pos + 1;
        }
        results.push_back(res);
    }
    return assemble(results, f.queries, protocol);
}

}  // namespace dri
