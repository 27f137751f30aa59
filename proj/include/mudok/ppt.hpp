#pragma once

#include <cstring>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mudok/encoder.hpp"
#include "mudok/tensor.hpp"

namespace mudok {

// Per-item trainable prefix tokens plus their projection into the encoder's
// representation space; the only KG-side state that moves during tuning.
// Tokens start at zero so tuning begins exactly at the pre-trained
// representation.
template <class T>
struct PrefixTable {
    TensorPtr<T> tokens;  // |items| x d_p
    TensorPtr<T> W_p;     // d_p x d_model
    std::vector<std::size_t> item_entities;
    std::unordered_map<std::size_t, std::size_t> row_of_entity;

    static PrefixTable init(const std::vector<std::size_t>& items, std::size_t d_p,
                            std::size_t d_model, RngStream& rng) {
        if (d_p == 0) throw ConfigError("prefix table: d_p must be positive");
        PrefixTable p;
        p.tokens = zeros<T>({items.size(), d_p}, true);
        p.W_p = randn<T>({d_p, d_model}, T(0.02), rng);
        p.item_entities = items;
        for (std::size_t r = 0; r < items.size(); ++r) p.row_of_entity.emplace(items[r], r);
        return p;
    }

    std::size_t row_for(std::size_t entity) const {
        auto it = row_of_entity.find(entity);
        if (it == row_of_entity.end())
            throw ConfigError("item " + std::to_string(entity) +
                              " has no prefix row; the table must cover the tuning domain");
        return it->second;
    }

    std::vector<std::pair<std::string, TensorPtr<T>>> named_tensors() const {
        return {{"ppt.tokens", tokens}, {"ppt.W_p", W_p}};
    }
};

// Batched prompted encoding: head tokens get p_item W_p added, tails are
// untouched, and position-0 outputs come back as an (m x d_model) node.
template <class T>
TensorPtr<T> prompted_representations(const EncoderParams<T>& backbone,
                                      const PrefixTable<T>& prefix, const MultiDomainKG& kg,
                                      const FeatureTable& features,
                                      const std::vector<std::size_t>& item_idxs, RngStream& rng,
                                      bool train) {
    std::vector<NeighborhoodSample> samples;
    samples.reserve(item_idxs.size());
    for (auto item : item_idxs)
        samples.push_back(sample_item_neighborhood(kg, item, backbone.cfg.n_triples, rng));
    auto sb = build_sequence_batch<T>(kg, features, backbone.cfg, item_idxs, samples);
    PrefixInjection<T> inject;
    inject.tokens = prefix.tokens;
    inject.W_p = prefix.W_p;
    for (auto item : item_idxs) inject.rows.push_back(prefix.row_for(item));
    auto out = encode_batch(backbone, sb, rng, train, &inject);
    return embedding_lookup(out, sb.head_positions);
}

template <class T>
TensorPtr<T> prompted_item_representation(const EncoderParams<T>& backbone,
                                          const PrefixTable<T>& prefix, const MultiDomainKG& kg,
                                          const FeatureTable& features, std::size_t item_idx,
                                          RngStream& rng, bool train) {
    return prompted_representations(backbone, prefix, kg, features, {item_idx}, rng, train);
}

// ---------------------------------------------------------------------------
// freeze verification
// ---------------------------------------------------------------------------

template <class T>
struct TensorSnapshot {
    std::vector<std::pair<std::string, std::vector<T>>> values;

    static TensorSnapshot take(const std::vector<std::pair<std::string, TensorPtr<T>>>& tensors) {
        TensorSnapshot s;
        for (const auto& [name, t] : tensors) s.values.emplace_back(name, t->data);
        return s;
    }
};

struct FreezeReport {
    std::vector<std::string> changed;
    std::vector<std::string> unchanged;
    std::vector<std::string> missing;

    bool backbone_frozen(const std::vector<std::string>& allowed_changed) const {
        if (!missing.empty()) return false;
        for (const auto& name : changed) {
            bool ok = false;
            for (const auto& a : allowed_changed)
                if (a == name) ok = true;
            if (!ok) return false;
        }
        return true;
    }
};

// Bit-exact diff of a tensor set against a snapshot taken before tuning.
template <class T>
FreezeReport verify_frozen_backbone(
    const TensorSnapshot<T>& before,
    const std::vector<std::pair<std::string, TensorPtr<T>>>& after) {
    FreezeReport report;
    for (const auto& [name, saved] : before.values) {
        const TensorPtr<T>* now = nullptr;
        for (const auto& [n, t] : after)
            if (n == name) now = &t;
        if (!now) {
            report.missing.push_back(name);
            continue;
        }
        const auto& cur = (*now)->data;
        const bool same = cur.size() == saved.size() &&
                          std::memcmp(cur.data(), saved.data(), cur.size() * sizeof(T)) == 0;
        (same ? report.unchanged : report.changed).push_back(name);
    }
    return report;
}

}  // namespace mudok
