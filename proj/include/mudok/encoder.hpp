#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mudok/features.hpp"
#include "mudok/kg.hpp"
#include "mudok/rng.hpp"
#include "mudok/tensor.hpp"

namespace mudok {

struct EncoderConfig {
    std::size_t d_feat = 768;
    std::size_t d_model = 128;
    std::size_t d_ff = 0;  // 0 -> 4 * d_model
    std::size_t heads = 4;
    std::size_t layers = 2;
    std::size_t n_triples = 8;  // tail slots per input sequence
    double dropout = 0.1;
    double ln_eps = 1e-5;
    double init_std = 0.02;
    std::uint64_t feature_seed = kDefaultFeatureSeed;

    std::size_t ff_dim() const { return d_ff == 0 ? 4 * d_model : d_ff; }
    std::size_t seq_len() const { return n_triples + 1; }

    void validate() const {
        if (d_model == 0 || d_feat == 0 || heads == 0 || n_triples == 0)
            throw ConfigError("encoder config: dimensions must be positive");
        if (d_model % heads != 0)
            throw ConfigError("encoder config: d_model (" + std::to_string(d_model) +
                              ") not divisible by heads (" + std::to_string(heads) + ")");
        if (dropout < 0.0 || dropout >= 1.0)
            throw ConfigError("encoder config: dropout must be in [0,1)");
    }

    nlohmann::json to_json() const {
        return {{"d_feat", d_feat},   {"d_model", d_model},   {"d_ff", ff_dim()},
                {"heads", heads},     {"layers", layers},     {"n_triples", n_triples},
                {"dropout", dropout}, {"ln_eps", ln_eps},     {"init_std", init_std},
                {"feature_seed", feature_seed}};
    }

    static EncoderConfig from_json(const nlohmann::json& j) {
        EncoderConfig c;
        c.d_feat = j.value("d_feat", c.d_feat);
        c.d_model = j.value("d_model", c.d_model);
        c.d_ff = j.value("d_ff", std::size_t(0));
        c.heads = j.value("heads", c.heads);
        c.layers = j.value("layers", c.layers);
        c.n_triples = j.value("n_triples", c.n_triples);
        c.dropout = j.value("dropout", c.dropout);
        c.ln_eps = j.value("ln_eps", c.ln_eps);
        c.init_std = j.value("init_std", c.init_std);
        c.feature_seed = j.value("feature_seed", c.feature_seed);
        return c;
    }
};

template <class T>
struct EncoderLayer {
    TensorPtr<T> Wq, Wk, Wv, Wo;
    TensorPtr<T> W1, b1, W2, b2;
    TensorPtr<T> ln1_g, ln1_b, ln2_g, ln2_b;
};

// The pre-trainable state: feature projection, relation embeddings, and the
// transformer stack. Frozen entity features live outside, in FeatureTable.
template <class T>
struct EncoderParams {
    EncoderConfig cfg;
    TensorPtr<T> W_proj;     // d_feat x d_model
    TensorPtr<T> relations;  // |R| x d_model
    std::vector<EncoderLayer<T>> layers;

    static EncoderParams init(const EncoderConfig& cfg, std::size_t n_relations, RngStream& rng) {
        cfg.validate();
        const T std_dev = static_cast<T>(cfg.init_std);
        EncoderParams p;
        p.cfg = cfg;
        p.W_proj = randn<T>({cfg.d_feat, cfg.d_model}, std_dev, rng);
        p.relations = randn<T>({n_relations, cfg.d_model}, std_dev, rng);
        for (std::size_t l = 0; l < cfg.layers; ++l) {
            EncoderLayer<T> layer;
            layer.Wq = randn<T>({cfg.d_model, cfg.d_model}, std_dev, rng);
            layer.Wk = randn<T>({cfg.d_model, cfg.d_model}, std_dev, rng);
            layer.Wv = randn<T>({cfg.d_model, cfg.d_model}, std_dev, rng);
            layer.Wo = randn<T>({cfg.d_model, cfg.d_model}, std_dev, rng);
            layer.W1 = randn<T>({cfg.d_model, cfg.ff_dim()}, std_dev, rng);
            layer.b1 = zeros<T>({cfg.ff_dim()}, true);
            layer.W2 = randn<T>({cfg.ff_dim(), cfg.d_model}, std_dev, rng);
            layer.b2 = zeros<T>({cfg.d_model}, true);
            layer.ln1_g = full<T>({cfg.d_model}, T(1), true);
            layer.ln1_b = zeros<T>({cfg.d_model}, true);
            layer.ln2_g = full<T>({cfg.d_model}, T(1), true);
            layer.ln2_b = zeros<T>({cfg.d_model}, true);
            p.layers.push_back(std::move(layer));
        }
        return p;
    }

    std::vector<std::pair<std::string, TensorPtr<T>>> named_tensors() const {
        std::vector<std::pair<std::string, TensorPtr<T>>> out;
        out.emplace_back("encoder.W_proj", W_proj);
        out.emplace_back("encoder.relations", relations);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "encoder.layer" + std::to_string(l) + ".";
            const auto& lay = layers[l];
            out.emplace_back(p + "Wq", lay.Wq);
            out.emplace_back(p + "Wk", lay.Wk);
            out.emplace_back(p + "Wv", lay.Wv);
            out.emplace_back(p + "Wo", lay.Wo);
            out.emplace_back(p + "ffn.W1", lay.W1);
            out.emplace_back(p + "ffn.b1", lay.b1);
            out.emplace_back(p + "ffn.W2", lay.W2);
            out.emplace_back(p + "ffn.b2", lay.b2);
            out.emplace_back(p + "ln1.gamma", lay.ln1_g);
            out.emplace_back(p + "ln1.beta", lay.ln1_b);
            out.emplace_back(p + "ln2.gamma", lay.ln2_g);
            out.emplace_back(p + "ln2.beta", lay.ln2_b);
        }
        return out;
    }

    std::vector<TensorPtr<T>> tensors() const {
        std::vector<TensorPtr<T>> out;
        for (auto& [name, t] : named_tensors()) out.push_back(t);
        return out;
    }

    void set_trainable(bool trainable) {
        for (auto& t : tensors()) {
            t->requires_grad = trainable;
            t->needs_grad = trainable;
        }
    }
};

// Constant inputs for a batch of item-centric sequences: gathered entity
// features, relation ids at their token positions, and the validity mask.
// Token layout is row b*seq_len for item b's head, then its tail slots.
template <class T>
struct SequenceBatch {
    std::size_t batch = 0;
    std::size_t seq_len = 0;
    TensorPtr<T> features;                   // (batch*seq_len) x d_feat, constant
    TensorPtr<T> row_mask;                   // (batch*seq_len) x d_model, 0/1 rows
    std::vector<std::uint8_t> valid;         // batch*seq_len
    std::vector<std::size_t> head_positions;                // batch
    std::vector<std::size_t> rel_ids, rel_positions;        // valid tails, flattened
    std::vector<std::vector<std::size_t>> tail_positions;   // per item
    std::vector<std::vector<std::size_t>> tail_rel_ids;     // per item
    std::vector<std::size_t> item_entities;  // batch
};

template <class T>
SequenceBatch<T> build_sequence_batch(const MultiDomainKG& kg, const FeatureTable& features,
                                      const EncoderConfig& cfg,
                                      const std::vector<std::size_t>& item_idxs,
                                      const std::vector<NeighborhoodSample>& samples) {
    if (features.dim != cfg.d_feat)
        throw ConfigError("feature dim " + std::to_string(features.dim) +
                          " does not match encoder d_feat " + std::to_string(cfg.d_feat));
    if (item_idxs.size() != samples.size())
        throw ConfigError("build_sequence_batch: item/sample count mismatch");
    SequenceBatch<T> sb;
    sb.batch = item_idxs.size();
    sb.seq_len = cfg.seq_len();
    const std::size_t rows = sb.batch * sb.seq_len;
    std::vector<T> feat(rows * cfg.d_feat, T(0));
    std::vector<T> mask(rows * cfg.d_model, T(0));
    sb.valid.assign(rows, 0);
    sb.tail_positions.resize(sb.batch);
    sb.tail_rel_ids.resize(sb.batch);
    sb.item_entities = item_idxs;

    auto copy_feat = [&](std::size_t row, std::size_t entity) {
        const float* src = features.row(entity);
        T* dst = feat.data() + row * cfg.d_feat;
        for (std::size_t j = 0; j < cfg.d_feat; ++j) dst[j] = static_cast<T>(src[j]);
    };
    for (std::size_t b = 0; b < sb.batch; ++b) {
        const std::size_t base = b * sb.seq_len;
        copy_feat(base, item_idxs[b]);
        sb.valid[base] = 1;
        sb.head_positions.push_back(base);
        const auto& ns = samples[b];
        if (ns.valid.size() != cfg.n_triples)
            throw ConfigError("neighborhood size does not match encoder n_triples");
        for (std::size_t s = 0; s < cfg.n_triples; ++s) {
            if (!ns.valid[s]) continue;
            const std::size_t row = base + 1 + s;
            copy_feat(row, ns.pairs[s].second);
            sb.valid[row] = 1;
            sb.rel_ids.push_back(ns.pairs[s].first);
            sb.rel_positions.push_back(row);
            sb.tail_positions[b].push_back(row);
            sb.tail_rel_ids[b].push_back(ns.pairs[s].first);
        }
    }
    for (std::size_t r = 0; r < rows; ++r)
        if (sb.valid[r])
            for (std::size_t j = 0; j < cfg.d_model; ++j) mask[r * cfg.d_model + j] = T(1);
    sb.features = make_tensor<T>({rows, cfg.d_feat}, std::move(feat));
    sb.row_mask = make_tensor<T>({rows, cfg.d_model}, std::move(mask));
    return sb;
}

// Optional prefix injection: token rows[b] of the prefix table, projected by
// W_p, are added to item b's head token.
template <class T>
struct PrefixInjection {
    TensorPtr<T> tokens;  // |items| x d_p
    TensorPtr<T> W_p;     // d_p x d_model
    std::vector<std::size_t> rows;
};

// Eq-style input assembly: head = feat(h) W_proj (+ p W_p), tail_i =
// feat(t_i) W_proj + r_i. No positional term anywhere; padded rows zeroed.
template <class T>
TensorPtr<T> assemble_tokens(const EncoderParams<T>& params, const SequenceBatch<T>& sb,
                             const PrefixInjection<T>* prefix = nullptr) {
    auto x = matmul(sb.features, params.W_proj);
    if (!sb.rel_ids.empty()) {
        auto rels = embedding_lookup(params.relations, sb.rel_ids);
        x = row_scatter_add(x, rels, sb.rel_positions);
    }
    if (prefix) {
        if (prefix->rows.size() != sb.batch)
            throw ConfigError("prefix rows do not cover the batch");
        auto p = embedding_lookup(prefix->tokens, prefix->rows);
        auto proj = matmul(p, prefix->W_p);
        x = row_scatter_add(x, proj, sb.head_positions);
    }
    return mul(x, sb.row_mask);
}

// L transformer layers of [masked MHA -> residual+LN -> FFN -> residual+LN].
// Masked positions are excluded from every softmax and zeroed after each layer.
template <class T>
TensorPtr<T> encode(const EncoderParams<T>& params, TensorPtr<T> x, const SequenceBatch<T>& sb,
                    RngStream& rng, bool train) {
    const auto& cfg = params.cfg;
    const T drop = static_cast<T>(cfg.dropout);
    for (const auto& layer : params.layers) {
        auto q = matmul(x, layer.Wq);
        auto k = matmul(x, layer.Wk);
        auto v = matmul(x, layer.Wv);
        auto attn = masked_attention(q, k, v, sb.valid, sb.batch, sb.seq_len, cfg.heads, drop,
                                     &rng, train);
        attn = matmul(attn, layer.Wo);
        x = layer_norm(add(x, attn), layer.ln1_g, layer.ln1_b, static_cast<T>(cfg.ln_eps));
        auto h = relu(add_rowvec(matmul(x, layer.W1), layer.b1));
        h = dropout(h, drop, rng, train);
        auto f = add_rowvec(matmul(h, layer.W2), layer.b2);
        x = layer_norm(add(x, f), layer.ln2_g, layer.ln2_b, static_cast<T>(cfg.ln_eps));
        x = mul(x, sb.row_mask);
    }
    return x;
}

template <class T>
TensorPtr<T> encode_batch(const EncoderParams<T>& params, const SequenceBatch<T>& sb,
                          RngStream& rng, bool train, const PrefixInjection<T>* prefix = nullptr) {
    return encode(params, assemble_tokens(params, sb, prefix), sb, rng, train);
}

// Single-item input sequence ((n+1) x d_model), mostly a testing convenience.
template <class T>
TensorPtr<T> build_input_sequence(const EncoderParams<T>& params, const MultiDomainKG& kg,
                                  const FeatureTable& features, std::size_t item_idx,
                                  const NeighborhoodSample& sample) {
    auto sb = build_sequence_batch<T>(kg, features, params.cfg, {item_idx}, {sample});
    return assemble_tokens(params, sb);
}

// Position-0 output of sample + build + encode for one item.
template <class T>
TensorPtr<T> item_representation(const EncoderParams<T>& params, const MultiDomainKG& kg,
                                 const FeatureTable& features, std::size_t item_idx,
                                 RngStream& rng, bool train) {
    auto sample = sample_item_neighborhood(kg, item_idx, params.cfg.n_triples, rng);
    auto sb = build_sequence_batch<T>(kg, features, params.cfg, {item_idx}, {sample});
    auto out = encode_batch(params, sb, rng, train);
    return embedding_lookup(out, sb.head_positions);
}

}  // namespace mudok
