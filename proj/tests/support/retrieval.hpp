#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "dri/evaluation.hpp"
#include "support/testing.hpp"

namespace dri::testing {

inline EmbeddingSet make_set(std::vector<float> feats, std::size_t D, std::vector<std::int64_t> ids,
                             std::vector<std::string> mods = {}, const std::string& key_prefix = "k") {
    EmbeddingSet s;
    const std::size_t n = ids.size();
    s.features = Tensor<float>(Shape{n, D}, std::move(feats));
    s.ids = std::move(ids);
    s.modalities = mods.empty() ? std::vector<std::string>(n, "opt") : std::move(mods);
    for (std::size_t i = 0; i < n; ++i) s.keys.push_back(key_prefix + std::to_string(i));
    return s;
}

/// Random instance with distractors, ties (quantized features) and shared keys.
inline std::pair<EmbeddingSet, EmbeddingSet> random_instance(Gen& g) {
    const std::size_t D = pick(g, 1, 4), nq = pick(g, 1, 30), ng = pick(g, 1, 60), ids = pick(g, 1, 6);
    const bool quantize = pick(g, 0, 1);
    auto feats = [&](std::size_t n) {
        auto t = random_tensor<float>({n, D}, g, -1, 1).data;
        if (quantize)
            for (auto& v : t) v = std::round(v * 2) / 2;
        return t;
    };
    auto labels = [&](std::size_t n, bool distractors) {
        std::vector<std::int64_t> l;
        for (std::size_t i = 0; i < n; ++i)
            l.push_back(distractors && pick(g, 0, 4) == 0 ? -1 : static_cast<std::int64_t>(pick(g, 0, ids - 1)));
        return l;
    };
    auto mods = [&](std::size_t n) {
        std::vector<std::string> m;
        for (std::size_t i = 0; i < n; ++i) m.push_back(pick(g, 0, 1) ? "sar" : "opt");
        return m;
    };
    auto q = make_set(feats(nq), D, labels(nq, false), mods(nq), "q");
    auto gal = make_set(feats(ng), D, labels(ng, true), mods(ng), "g");
    // Some queries are also gallery samples, to exercise self-exclusion.
    for (std::size_t i = 0; i < std::min(nq, ng); ++i)
        if (pick(g, 0, 2) == 0) {
            gal.keys[i] = q.keys[i];
            gal.ids[i] = q.ids[i];
            std::copy_n(q.features.data.begin() + i * D, D, gal.features.data.begin() + i * D);
        }
    return {q, gal};
}

}  // namespace dri::testing
