#pragma once

#include <chrono>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mudok/checkpoint.hpp"
#include "mudok/encoder.hpp"
#include "mudok/features.hpp"
#include "mudok/kg.hpp"
#include "mudok/optim.hpp"
#include "mudok/tensor.hpp"

namespace mudok {

// In-batch contrastive loss over two encodings of the same items: positives
// are the paired rows, negatives the rest of the batch. Returned as the batch
// sum; callers divide by B when stepping.
template <class T>
TensorPtr<T> contrastive_loss(const TensorPtr<T>& h, const TensorPtr<T>& h_prime, T tau) {
    if (h->shape != h_prime->shape || h->rank() != 2)
        throw ShapeError("contrastive_loss: representation shape mismatch");
    if (tau <= T(0)) throw ConfigError("contrastive_loss: tau must be positive");
    auto sim = matmul(l2_normalize_rows(h), l2_normalize_rows(h_prime), false, true);
    std::vector<std::size_t> diag(h->rows());
    std::iota(diag.begin(), diag.end(), std::size_t(0));
    return sum_all(cross_entropy_rows(scale(sim, T(1) / tau), diag));
}

// Triple plausibility S(h, r, t) = (h ⊙ r) · t.
template <class T>
T triple_score(const std::vector<T>& h, const std::vector<T>& r, const std::vector<T>& t) {
    if (h.size() != r.size() || h.size() != t.size())
        throw ShapeError("triple_score: dimension mismatch");
    T s = T(0);
    for (std::size_t i = 0; i < h.size(); ++i) s += h[i] * r[i] * t[i];
    return s;
}

// Knowledge triple loss: for every valid triple of every item, cross-entropy
// of its score against the scores obtained by swapping the tail with the other
// tails of the same item's sequence. Items with fewer than two valid tails
// contribute nothing. Returned as the batch sum.
template <class T>
TensorPtr<T> kg_triple_loss(const TensorPtr<T>& encoded, const TensorPtr<T>& relation_table,
                            const SequenceBatch<T>& sb) {
    TensorPtr<T> total = zeros<T>({1});
    for (std::size_t b = 0; b < sb.batch; ++b) {
        const auto& tails = sb.tail_positions[b];
        const std::size_t n = tails.size();
        if (n < 2) continue;
        auto t_hat = embedding_lookup(encoded, tails);  // n x d
        std::vector<std::size_t> head_rep(n, sb.head_positions[b]);
        auto h_rep = embedding_lookup(encoded, head_rep);           // n x d
        auto rels = embedding_lookup(relation_table, sb.tail_rel_ids[b]);
        auto scores = matmul(mul(h_rep, rels), t_hat, false, true);  // n x n
        std::vector<std::size_t> diag(n);
        std::iota(diag.begin(), diag.end(), std::size_t(0));
        total = add(total, sum_all(cross_entropy_rows(scores, diag)));
    }
    return total;
}

// Builds the combined pre-training objective on one batch: contrastive loss
// over two dropout-noised passes plus lambda-weighted triple loss, all as
// batch sums. Streams are taken by value so a caller can replay the exact
// masks (gradient checking needs that).
template <class T>
struct CoptLosses {
    TensorPtr<T> total_sum;
    T contrastive_value = T(0);
    T kg_value = T(0);
};

template <class T>
CoptLosses<T> copt_losses(const EncoderParams<T>& params, const SequenceBatch<T>& sb, T tau,
                          T lambda, bool contrastive_enabled, RngStream drop1, RngStream drop2,
                          bool train = true) {
    CoptLosses<T> out;
    auto pass1 = encode_batch(params, sb, drop1, train);
    TensorPtr<T> l_con, l_kg;
    if (contrastive_enabled) {
        auto pass2 = encode_batch(params, sb, drop2, train);
        auto h1 = embedding_lookup(pass1, sb.head_positions);
        auto h2 = embedding_lookup(pass2, sb.head_positions);
        l_con = contrastive_loss(h1, h2, tau);
        out.contrastive_value = l_con->data[0];
    }
    if (lambda > T(0)) {
        l_kg = kg_triple_loss(pass1, params.relations, sb);
        out.kg_value = l_kg->data[0];
    }
    if (l_con && l_kg)
        out.total_sum = add(l_con, scale(l_kg, lambda));
    else if (l_con)
        out.total_sum = l_con;
    else if (l_kg)
        out.total_sum = scale(l_kg, lambda);
    else
        throw ConfigError("copt_losses: both objectives disabled");
    return out;
}

struct PretrainConfig {
    EncoderConfig encoder;
    std::size_t batch_size = 1024;
    double tau = 0.1;
    double lambda = 0.1;
    std::size_t epochs = 5;
    double learning_rate = 5e-4;
    std::uint64_t seed = 0;
    bool contrastive_enabled = true;  // disabled for the no-L_con ablation
    bool cross_batch_negatives = false;  // reserved; in-sequence negatives by default

    void validate() const {
        encoder.validate();
        if (batch_size < 1 || epochs < 1) throw ConfigError("pretrain config: counts must be >= 1");
        if (tau <= 0.0) throw ConfigError("pretrain config: tau must be positive");
        if (lambda < 0.0) throw ConfigError("pretrain config: lambda must be non-negative");
    }

    nlohmann::json to_json() const {
        return {{"encoder", encoder.to_json()},
                {"batch_size", batch_size},
                {"tau", tau},
                {"lambda", lambda},
                {"epochs", epochs},
                {"learning_rate", learning_rate},
                {"seed", seed},
                {"contrastive_enabled", contrastive_enabled}};
    }

    static PretrainConfig from_json(const nlohmann::json& j) {
        PretrainConfig c;
        if (j.contains("encoder")) c.encoder = EncoderConfig::from_json(j["encoder"]);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.tau = j.value("tau", c.tau);
        c.lambda = j.value("lambda", c.lambda);
        c.epochs = j.value("epochs", c.epochs);
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.seed = j.value("seed", c.seed);
        c.contrastive_enabled = j.value("contrastive_enabled", c.contrastive_enabled);
        return c;
    }
};

template <class T>
struct PretrainStepReport {
    T total_sum = T(0);
    T contrastive_sum = T(0);
    T kg_sum = T(0);
    std::size_t batch = 0;
};

struct PretrainEpochLog {
    double total = 0, contrastive = 0, kg = 0;
    double seconds = 0;
    std::size_t steps = 0;
};

// CoPT driver: owns the encoder parameters and optimizer, steps on mean
// losses, leaves the feature table untouched.
template <class T>
class Pretrainer {
public:
    Pretrainer(const MultiDomainKG& kg, const FeatureTable& features, PretrainConfig cfg,
               std::vector<std::size_t> train_items)
        : kg_(kg), features_(features), cfg_(std::move(cfg)), items_(std::move(train_items)) {
        cfg_.validate();
        if (items_.empty()) throw ConfigError("pretrain: empty training item set");
        RngStream init_rng = RngStream(cfg_.seed).fork(1);
        params_ = EncoderParams<T>::init(cfg_.encoder, kg_.relations.size(), init_rng);
        optimizer_ = std::make_unique<AdamOptimizer<T>>(params_.tensors(),
                                                        static_cast<T>(cfg_.learning_rate));
    }

    EncoderParams<T>& params() { return params_; }
    const EncoderParams<T>& params() const { return params_; }

    PretrainStepReport<T> step(const std::vector<std::size_t>& batch_items) {
        const std::uint64_t tag = step_counter_++;
        RngStream sample_rng = RngStream(cfg_.seed).fork(2).fork(tag);
        RngStream drop1 = RngStream(cfg_.seed).fork(3).fork(tag);
        RngStream drop2 = RngStream(cfg_.seed).fork(4).fork(tag);

        std::vector<NeighborhoodSample> samples;
        samples.reserve(batch_items.size());
        for (auto item : batch_items)
            samples.push_back(
                sample_item_neighborhood(kg_, item, cfg_.encoder.n_triples, sample_rng));
        auto sb = build_sequence_batch<T>(kg_, features_, cfg_.encoder, batch_items, samples);

        PretrainStepReport<T> report;
        report.batch = batch_items.size();
        try {
            auto losses = copt_losses(params_, sb, static_cast<T>(cfg_.tau),
                                      static_cast<T>(cfg_.lambda), cfg_.contrastive_enabled,
                                      drop1, drop2);
            report.contrastive_sum = losses.contrastive_value;
            report.kg_sum = losses.kg_value;
            report.total_sum = losses.total_sum->data[0];
            auto step_loss =
                scale(losses.total_sum, T(1) / static_cast<T>(batch_items.size()));
            backward(step_loss);
        } catch (const NumericError& e) {
            std::string ids;
            for (auto i : batch_items) ids += (ids.empty() ? "" : ",") + std::to_string(i);
            throw NumericError(std::string(e.what()) + " [pretrain step " + std::to_string(tag) +
                               ", batch items " + ids + "]");
        }
        optimizer_->step();
        optimizer_->zero_grad();
        return report;
    }

    std::vector<PretrainEpochLog> train() {
        std::vector<PretrainEpochLog> logs;
        for (std::size_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
            const auto start = std::chrono::steady_clock::now();
            PretrainEpochLog log;
            std::vector<std::size_t> order = items_;
            RngStream shuffle_rng = RngStream(cfg_.seed).fork(5).fork(epoch);
            shuffle_rng.shuffle(order.begin(), order.end());
            for (std::size_t off = 0; off < order.size(); off += cfg_.batch_size) {
                const std::size_t end = std::min(order.size(), off + cfg_.batch_size);
                std::vector<std::size_t> batch(order.begin() + off, order.begin() + end);
                auto rep = step(batch);
                log.total += static_cast<double>(rep.total_sum);
                log.contrastive += static_cast<double>(rep.contrastive_sum);
                log.kg += static_cast<double>(rep.kg_sum);
                ++log.steps;
            }
            log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
                              .count();
            logs.push_back(log);
        }
        return logs;
    }

private:
    const MultiDomainKG& kg_;
    const FeatureTable& features_;
    PretrainConfig cfg_;
    std::vector<std::size_t> items_;
    EncoderParams<T> params_;
    std::unique_ptr<AdamOptimizer<T>> optimizer_;
    std::uint64_t step_counter_ = 0;
};

// ---------------------------------------------------------------------------
// parameter census
// ---------------------------------------------------------------------------

struct CensusEntry {
    std::string name;
    std::size_t count = 0;
    bool trainable = false;
};

struct CensusReport {
    std::vector<CensusEntry> entries;
    std::size_t total = 0;
    std::size_t trainable = 0;
    double ratio = 0.0;

    nlohmann::json to_json() const {
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& e : entries)
            rows.push_back({{"name", e.name}, {"count", e.count}, {"trainable", e.trainable}});
        return {{"total", total}, {"trainable", trainable}, {"ratio", ratio}, {"tensors", rows}};
    }
};

inline CensusReport make_census(std::vector<CensusEntry> entries) {
    CensusReport r;
    r.entries = std::move(entries);
    for (const auto& e : r.entries) {
        r.total += e.count;
        if (e.trainable) r.trainable += e.count;
    }
    r.ratio = r.total == 0 ? 0.0 : static_cast<double>(r.trainable) / static_cast<double>(r.total);
    return r;
}

// Census over live model tensors plus the frozen feature table.
template <class T>
CensusReport parameter_census(const EncoderParams<T>& params, const FeatureTable& features,
                              const std::vector<std::pair<std::string, TensorPtr<T>>>& extra = {}) {
    std::vector<CensusEntry> entries;
    entries.push_back({"features", features.values.size(), false});
    for (const auto& [name, t] : params.named_tensors())
        entries.push_back({name, t->numel(), t->requires_grad});
    for (const auto& [name, t] : extra) entries.push_back({name, t->numel(), t->requires_grad});
    return make_census(std::move(entries));
}

// Shape-only census for configurations too large to materialize. Walks the
// same tensor list the live model would carry.
inline CensusReport census_from_shapes(std::size_t n_entities, std::size_t n_relations,
                                       const EncoderConfig& cfg, bool backbone_trainable,
                                       std::size_t prefix_items = 0, std::size_t d_p = 0,
                                       std::vector<CensusEntry> adapter = {}) {
    std::vector<CensusEntry> entries;
    entries.push_back({"features", n_entities * cfg.d_feat, false});
    entries.push_back({"encoder.W_proj", cfg.d_feat * cfg.d_model, backbone_trainable});
    entries.push_back({"encoder.relations", n_relations * cfg.d_model, backbone_trainable});
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const std::string p = "encoder.layer" + std::to_string(l) + ".";
        const std::size_t d = cfg.d_model, ff = cfg.ff_dim();
        entries.push_back({p + "Wq", d * d, backbone_trainable});
        entries.push_back({p + "Wk", d * d, backbone_trainable});
        entries.push_back({p + "Wv", d * d, backbone_trainable});
        entries.push_back({p + "Wo", d * d, backbone_trainable});
        entries.push_back({p + "ffn.W1", d * ff, backbone_trainable});
        entries.push_back({p + "ffn.b1", ff, backbone_trainable});
        entries.push_back({p + "ffn.W2", ff * d, backbone_trainable});
        entries.push_back({p + "ffn.b2", d, backbone_trainable});
        entries.push_back({p + "ln1.gamma", d, backbone_trainable});
        entries.push_back({p + "ln1.beta", d, backbone_trainable});
        entries.push_back({p + "ln2.gamma", d, backbone_trainable});
        entries.push_back({p + "ln2.beta", d, backbone_trainable});
    }
    if (prefix_items > 0 && d_p > 0) {
        entries.push_back({"ppt.tokens", prefix_items * d_p, true});
        entries.push_back({"ppt.W_p", d_p * cfg.d_model, true});
    }
    for (auto& e : adapter) entries.push_back(std::move(e));
    return make_census(std::move(entries));
}

// ---------------------------------------------------------------------------
// checkpointing of the pre-trained backbone
// ---------------------------------------------------------------------------

template <class T>
void save_pretrained(const EncoderParams<T>& params, const std::string& path,
                     nlohmann::json extra_config = {}) {
    Checkpoint ckpt;
    for (const auto& [name, t] : params.named_tensors()) ckpt.add_tensor(name, t);
    ckpt.config["format_version"] = 1;
    ckpt.config["encoder"] = params.cfg.to_json();
    ckpt.config["n_relations"] = params.relations->rows();
    if (!extra_config.is_null())
        for (auto& [k, v] : extra_config.items()) ckpt.config[k] = v;
    save_checkpoint(ckpt, path);
}

template <class T>
EncoderParams<T> load_pretrained(const std::string& path) {
    Checkpoint ckpt = load_checkpoint(path);
    if (!ckpt.config.contains("encoder"))
        throw CheckpointError("checkpoint '" + path + "': sidecar missing encoder config");
    EncoderConfig cfg = EncoderConfig::from_json(ckpt.config["encoder"]);
    const std::size_t n_rel = ckpt.config.value("n_relations", std::size_t(0));
    RngStream dummy(0);
    auto params = EncoderParams<T>::init(cfg, n_rel, dummy);
    for (const auto& [name, t] : params.named_tensors()) ckpt.load_into(name, t);
    return params;
}

}  // namespace mudok
