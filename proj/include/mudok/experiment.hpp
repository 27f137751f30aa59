#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mudok/checkpoint.hpp"
#include "mudok/encoder.hpp"
#include "mudok/features.hpp"
#include "mudok/kg.hpp"
#include "mudok/ppt.hpp"
#include "mudok/pretrain.hpp"
#include "mudok/rec.hpp"
#include "mudok/report.hpp"
#include "mudok/text.hpp"

namespace mudok {

struct Benchmark {
    Manifest manifest;
    MultiDomainKG kg;
    FeatureTable features;
};

inline Benchmark load_benchmark(const std::string& manifest_path, std::size_t d_feat,
                                std::uint64_t feature_seed = kDefaultFeatureSeed) {
    Benchmark b;
    b.manifest = load_manifest(manifest_path);
    b.kg = load_kg(b.manifest);
    b.features = load_features(b.manifest, b.kg, d_feat, feature_seed);
    return b;
}

// Resolves --include-domains / --exclude-domains into domain ids.
inline std::vector<std::size_t> select_domains(const MultiDomainKG& kg,
                                               const std::vector<std::string>& include,
                                               const std::vector<std::string>& exclude) {
    std::vector<std::size_t> out;
    for (std::size_t d = 0; d < kg.domains.size(); ++d) {
        const auto& name = kg.domains[d];
        if (!include.empty() &&
            std::find(include.begin(), include.end(), name) == include.end())
            continue;
        if (std::find(exclude.begin(), exclude.end(), name) != exclude.end()) continue;
        out.push_back(d);
    }
    if (out.empty()) throw ConfigError("domain selection is empty");
    return out;
}

// ---------------------------------------------------------------------------
// pre-training run
// ---------------------------------------------------------------------------

template <class T = float>
struct PretrainRun {
    EncoderParams<T> params;
    std::vector<PretrainEpochLog> epochs;
    CensusReport census;
};

template <class T = float>
PretrainRun<T> run_pretrain(const Benchmark& bench, const PretrainConfig& cfg,
                            const std::vector<std::size_t>& domain_ids) {
    auto items = bench.kg.items_of_domains(domain_ids);
    if (items.empty()) throw ConfigError("selected domains contain no items");
    Pretrainer<T> trainer(bench.kg, bench.features, cfg, items);
    auto logs = trainer.train();
    auto census = parameter_census(trainer.params(), bench.features);
    PretrainRun<T> run{std::move(trainer.params()), std::move(logs), std::move(census)};
    return run;
}

// ---------------------------------------------------------------------------
// recommendation tuning
// ---------------------------------------------------------------------------

template <class T = float>
class RecTuner {
public:
    RecTuner(const Benchmark& bench, EncoderParams<T> backbone, InteractionGraph graph,
             const RecConfig& cfg)
        : bench_(bench), backbone_(std::move(backbone)), graph_(std::move(graph)), cfg_(cfg) {
        backbone_.set_trainable(false);
        RngStream init_rng = RngStream(cfg_.seed).fork(11);
        model_ = RecModel<T>::init(cfg_, graph_.n_users(), graph_.n_items(),
                                   backbone_.cfg.d_model, init_rng);
        std::vector<TensorPtr<T>> trainable = {model_.user_emb, model_.item_emb};
        if (cfg_.enhancement) {
            RngStream prng = RngStream(cfg_.seed).fork(12);
            prefix_ = PrefixTable<T>::init(graph_.item_entities, cfg_.d_p, backbone_.cfg.d_model,
                                           prng);
            trainable.push_back(model_.proj);
            trainable.push_back(prefix_->tokens);
            trainable.push_back(prefix_->W_p);
            refresh_cache(0);
        }
        optimizer_ = std::make_unique<AdamOptimizer<T>>(trainable,
                                                        static_cast<T>(cfg_.learning_rate));
    }

    const RecModel<T>& model() const { return model_; }
    RecModel<T>& model() { return model_; }
    const EncoderParams<T>& backbone() const { return backbone_; }
    const PrefixTable<T>* prefix() const { return prefix_ ? &*prefix_ : nullptr; }

    std::vector<std::pair<std::string, TensorPtr<T>>> all_named_tensors() const {
        auto out = backbone_.named_tensors();
        if (prefix_)
            for (auto& nt : prefix_->named_tensors()) out.push_back(nt);
        for (auto& nt : model_.named_tensors()) out.push_back(nt);
        return out;
    }

    // One BPR step over (user, positive) pairs; negatives sampled uniformly
    // outside each user's train positives.
    T step(const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
        const std::uint64_t tag = step_counter_++;
        RngStream neg_rng = RngStream(cfg_.seed).fork(13).fork(tag);
        std::vector<std::size_t> users, pos;
        users.reserve(pairs.size());
        pos.reserve(pairs.size());
        for (const auto& [u, i] : pairs) {
            users.push_back(u);
            pos.push_back(i);
        }
        auto neg = sample_bpr_negatives(graph_, users, neg_rng, cfg_.negative_attempts);

        auto prompted = prompted_matrix_for_step(pos, neg, tag);
        auto [uf, vf] = propagate_embeddings(model_, graph_, prompted);
        auto losses = bpr_loss(model_, uf, vf, users, pos, neg);
        backward(losses.step_loss);
        optimizer_->step();
        optimizer_->zero_grad();
        return losses.report_sum;
    }

    struct Result {
        RankingMetrics test, valid;
        std::vector<double> epoch_loss_sums;
    };

    Result train() {
        Result res;
        for (std::size_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
            if (prefix_ && cfg_.prompt_refresh_epochs > 0 &&
                epoch % cfg_.prompt_refresh_epochs == 0)
                refresh_cache(epoch);
            auto order = graph_.train;
            RngStream shuffle_rng = RngStream(cfg_.seed).fork(14).fork(epoch);
            shuffle_rng.shuffle(order.begin(), order.end());
            double loss_sum = 0;
            for (std::size_t off = 0; off < order.size(); off += cfg_.batch_size) {
                const std::size_t end = std::min(order.size(), off + cfg_.batch_size);
                loss_sum += static_cast<double>(
                    step({order.begin() + off, order.begin() + end}));
            }
            res.epoch_loss_sums.push_back(loss_sum);
        }
        res.test = evaluate(false);
        res.valid = evaluate(true);
        return res;
    }

    // Fresh eval-mode prompted representations for every item, then the
    // standard full-ranking protocol.
    RankingMetrics evaluate(bool use_valid = false) {
        TensorPtr<T> prompted;
        if (prefix_) {
            RngStream rng = RngStream(cfg_.seed).fork(15);
            auto h = prompted_representations(backbone_, *prefix_, bench_.kg, bench_.features,
                                              graph_.item_entities, rng, false);
            prompted = matmul(h, model_.proj);
        }
        return evaluate_ranking(model_, graph_, prompted, use_valid);
    }

private:
    void refresh_cache(std::size_t epoch) {
        RngStream rng = RngStream(cfg_.seed).fork(16).fork(epoch);
        auto h = prompted_representations(backbone_, *prefix_, bench_.kg, bench_.features,
                                          graph_.item_entities, rng, cfg_.tune_dropout);
        cache_ = h->data;
    }

    // Live subgraph rows for the step's items, cached constants elsewhere.
    TensorPtr<T> prompted_matrix_for_step(const std::vector<std::size_t>& pos,
                                          const std::vector<std::size_t>& neg,
                                          std::uint64_t tag) {
        if (!prefix_) return nullptr;
        std::vector<std::size_t> rows = pos;
        rows.insert(rows.end(), neg.begin(), neg.end());
        std::sort(rows.begin(), rows.end());
        rows.erase(std::unique(rows.begin(), rows.end()), rows.end());

        std::vector<T> base = cache_;
        const std::size_t d = backbone_.cfg.d_model;
        for (auto r : rows) std::fill_n(base.data() + r * d, d, T(0));
        auto base_node = make_tensor<T>({graph_.n_items(), d}, std::move(base));

        std::vector<std::size_t> entities;
        entities.reserve(rows.size());
        for (auto r : rows) entities.push_back(graph_.item_entities[r]);
        RngStream rng = RngStream(cfg_.seed).fork(17).fork(tag);
        auto live = prompted_representations(backbone_, *prefix_, bench_.kg, bench_.features,
                                             entities, rng, cfg_.tune_dropout);
        auto mixed = row_scatter_add(base_node, live, rows);
        return matmul(mixed, model_.proj);
    }

    const Benchmark& bench_;
    EncoderParams<T> backbone_;
    InteractionGraph graph_;
    RecConfig cfg_;
    RecModel<T> model_;
    std::optional<PrefixTable<T>> prefix_;
    std::unique_ptr<AdamOptimizer<T>> optimizer_;
    std::vector<T> cache_;
    std::uint64_t step_counter_ = 0;
};

// ---------------------------------------------------------------------------
// text tuning
// ---------------------------------------------------------------------------

template <class T = float>
class TextTuner {
public:
    TextTuner(const Benchmark& bench, EncoderParams<T> backbone, TextDataset data,
              const TextConfig& cfg, const FeatureTable* pooled_file = nullptr)
        : bench_(bench),
          backbone_(std::move(backbone)),
          data_(std::move(data)),
          cfg_(cfg),
          pooled_file_(pooled_file) {
        backbone_.set_trainable(false);
        RngStream init_rng = RngStream(cfg_.seed).fork(21);
        head_ = TextHead<T>::init(cfg_, data_.n_labels, backbone_.cfg.d_model, init_rng);
        auto trainable = head_.trainable();
        if (cfg_.enhancement) {
            // prefix rows cover every item referenced by the dataset's domain
            std::vector<std::size_t> items;
            std::unordered_map<std::size_t, std::uint8_t> seen;
            for (const auto* split : {&data_.train, &data_.valid, &data_.test})
                for (const auto& x : *split)
                    if (!seen[x.item_entity]++) items.push_back(x.item_entity);
            std::sort(items.begin(), items.end());
            RngStream prng = RngStream(cfg_.seed).fork(22);
            prefix_ = PrefixTable<T>::init(items, cfg_.d_p, backbone_.cfg.d_model, prng);
            trainable.push_back(prefix_->tokens);
            trainable.push_back(prefix_->W_p);
        }
        optimizer_ = std::make_unique<AdamOptimizer<T>>(trainable,
                                                        static_cast<T>(cfg_.learning_rate));
    }

    const TextHead<T>& head() const { return head_; }
    const PrefixTable<T>* prefix() const { return prefix_ ? &*prefix_ : nullptr; }
    const EncoderParams<T>& backbone() const { return backbone_; }

    std::vector<std::pair<std::string, TensorPtr<T>>> all_named_tensors() const {
        auto out = backbone_.named_tensors();
        if (prefix_)
            for (auto& nt : prefix_->named_tensors()) out.push_back(nt);
        for (auto& nt : head_.named_tensors()) out.push_back(nt);
        return out;
    }

    T step(const std::vector<std::size_t>& batch_idx) {
        const std::uint64_t tag = step_counter_++;
        auto pooled = make_tensor<T>({batch_idx.size(), cfg_.d_text},
                                     pooled_input_rows<T>(cfg_, data_.train, batch_idx, bench_.kg,
                                                          pooled_file_));
        auto o = encode_text_batch(head_, pooled);
        TensorPtr<T> prompted;
        if (prefix_) {
            std::vector<std::size_t> entities;
            for (auto i : batch_idx) entities.push_back(data_.train[i].item_entity);
            RngStream rng = RngStream(cfg_.seed).fork(23).fork(tag);
            prompted = prompted_representations(backbone_, *prefix_, bench_.kg, bench_.features,
                                                entities, rng, cfg_.tune_dropout);
        }
        std::vector<std::size_t> labels;
        for (auto i : batch_idx) labels.push_back(data_.train[i].label);
        auto logits = classify_logits(head_, o, prompted);
        auto loss = mean_all(cross_entropy_rows(logits, labels));
        const T value = loss->data[0];
        backward(loss);
        optimizer_->step();
        optimizer_->zero_grad();
        return value;
    }

    struct Result {
        ClassificationMetrics test, valid;
        std::vector<double> epoch_loss_means;
    };

    Result train() {
        Result res;
        for (std::size_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
            std::vector<std::size_t> order(data_.train.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            RngStream shuffle_rng = RngStream(cfg_.seed).fork(24).fork(epoch);
            shuffle_rng.shuffle(order.begin(), order.end());
            double loss_sum = 0;
            std::size_t steps = 0;
            for (std::size_t off = 0; off < order.size(); off += cfg_.batch_size) {
                const std::size_t end = std::min(order.size(), off + cfg_.batch_size);
                loss_sum += static_cast<double>(
                    step({order.begin() + off, order.begin() + end}));
                ++steps;
            }
            res.epoch_loss_means.push_back(steps ? loss_sum / static_cast<double>(steps) : 0.0);
        }
        res.test = evaluate(data_.test);
        res.valid = evaluate(data_.valid);
        return res;
    }

    ClassificationMetrics evaluate(const std::vector<TextItem>& split) {
        std::vector<std::size_t> predicted, actual;
        const std::size_t bs = std::max<std::size_t>(1, cfg_.batch_size);
        for (std::size_t off = 0; off < split.size(); off += bs) {
            const std::size_t end = std::min(split.size(), off + bs);
            std::vector<std::size_t> idx(end - off);
            for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = off + i;
            auto pooled = make_tensor<T>(
                {idx.size(), cfg_.d_text},
                pooled_input_rows<T>(cfg_, split, idx, bench_.kg, pooled_file_));
            auto o = encode_text_batch(head_, pooled);
            TensorPtr<T> prompted;
            if (prefix_) {
                std::vector<std::size_t> entities;
                for (auto i : idx) entities.push_back(split[i].item_entity);
                RngStream rng = RngStream(cfg_.seed).fork(25);
                prompted = prompted_representations(backbone_, *prefix_, bench_.kg,
                                                    bench_.features, entities, rng, false);
            }
            auto probs = classify(head_, o, prompted);
            for (std::size_t b = 0; b < idx.size(); ++b) {
                const T* row = probs->data.data() + b * data_.n_labels;
                std::size_t arg = 0;
                for (std::size_t c = 1; c < data_.n_labels; ++c)
                    if (row[c] > row[arg]) arg = c;
                predicted.push_back(arg);
                actual.push_back(split[idx[b]].label);
            }
        }
        return classification_metrics(predicted, actual, data_.n_labels);
    }

private:
    const Benchmark& bench_;
    EncoderParams<T> backbone_;
    TextDataset data_;
    TextConfig cfg_;
    const FeatureTable* pooled_file_;
    TextHead<T> head_;
    std::optional<PrefixTable<T>> prefix_;
    std::unique_ptr<AdamOptimizer<T>> optimizer_;
    std::uint64_t step_counter_ = 0;
};

// ---------------------------------------------------------------------------
// protocol drivers (transfer, ablation)
// ---------------------------------------------------------------------------

enum class Ablation { Full, G3NoPretrain, G4NoLcon, G5NoLkg };

inline PretrainConfig apply_ablation(PretrainConfig cfg, Ablation mode) {
    switch (mode) {
        case Ablation::G4NoLcon:
            cfg.contrastive_enabled = false;
            break;
        case Ablation::G5NoLkg:
            cfg.lambda = 0.0;
            break;
        default:
            break;
    }
    return cfg;
}

// Backbone for an experiment arm: pre-trained on the given domains, or random
// init when `pretrain` is false (the no-pretrain / G3 arm).
template <class T = float>
EncoderParams<T> make_backbone(const Benchmark& bench, const PretrainConfig& cfg, bool pretrain,
                               const std::vector<std::size_t>& domain_ids) {
    if (pretrain) return run_pretrain<T>(bench, cfg, domain_ids).params;
    RngStream rng = RngStream(cfg.seed).fork(31);
    return EncoderParams<T>::init(cfg.encoder, bench.kg.relations.size(), rng);
}

inline InteractionGraph domain_interactions(const Benchmark& bench, std::size_t domain_id) {
    const auto& md = bench.manifest.domains.at(domain_id);
    if (!md.interactions)
        throw ConfigError("domain '" + md.name + "' has no interaction files in the manifest");
    return load_interactions(*md.interactions, bench.kg, bench.kg.domain_items.at(domain_id));
}

inline TextDataset domain_text(const Benchmark& bench, std::size_t domain_id) {
    const auto& md = bench.manifest.domains.at(domain_id);
    if (!md.text) throw ConfigError("domain '" + md.name + "' has no text files in the manifest");
    return load_text_dataset(*md.text, bench.kg);
}

template <class T = float>
RankingMetrics tune_rec_once(const Benchmark& bench, EncoderParams<T> backbone,
                             std::size_t domain_id, const RecConfig& cfg) {
    RecTuner<T> tuner(bench, std::move(backbone), domain_interactions(bench, domain_id), cfg);
    return tuner.train().test;
}

// RQ2-style protocol: pre-train without the target domain, tune on it, and
// compare against the no-pretrain control and the full-data upper bound.
template <class T = float>
Report run_transfer(const Benchmark& bench, const std::string& target_domain,
                    const PretrainConfig& pre_cfg, const RecConfig& rec_cfg,
                    const std::vector<std::uint64_t>& seeds) {
    const std::size_t target = bench.kg.domain_id(target_domain);
    std::vector<std::size_t> ood_domains, all_domains;
    for (std::size_t d = 0; d < bench.kg.domains.size(); ++d) {
        all_domains.push_back(d);
        if (d != target) ood_domains.push_back(d);
    }
    if (ood_domains.size() < 2)
        throw ConfigError("transfer needs at least two domains besides the target");

    std::map<std::string, std::map<std::string, double>> sums;
    for (auto seed : seeds) {
        PretrainConfig pc = pre_cfg;
        pc.seed = seed;
        RecConfig rc = rec_cfg;
        rc.seed = seed;
        const std::vector<std::pair<std::string, std::pair<bool, std::vector<std::size_t>*>>>
            arms = {{"OOD-pretrained", {true, &ood_domains}},
                    {"no-pretrain", {false, &all_domains}},
                    {"full-pretrain", {true, &all_domains}}};
        for (const auto& [name, arm] : arms) {
            auto backbone = make_backbone<T>(bench, pc, arm.first, *arm.second);
            auto metrics = tune_rec_once<T>(bench, std::move(backbone), target, rc).as_map();
            for (const auto& [k, v] : metrics) sums[name][k] += v;
        }
    }
    Report rep;
    rep.command = "transfer";
    rep.seed = seeds.empty() ? 0 : seeds.front();
    for (const auto& name : {"OOD-pretrained", "no-pretrain", "full-pretrain"}) {
        std::map<std::string, double> avg;
        for (const auto& [k, v] : sums[name]) avg[k] = v / static_cast<double>(seeds.size());
        rep.add_row(name, avg);
    }
    rep.extra = {{"target_domain", target_domain}, {"seeds", seeds}};
    return rep;
}

// RQ3 groups over a shared seed set: full, G3 (no pretrain), G4 (no L_con),
// G5 (no L_kg); each arm pre-trains (except G3) and tunes the same task.
template <class T = float>
Report run_ablation(const Benchmark& bench, const std::string& domain,
                    const PretrainConfig& pre_cfg, const RecConfig& rec_cfg,
                    const std::vector<std::uint64_t>& seeds) {
    const std::size_t target = bench.kg.domain_id(domain);
    std::vector<std::size_t> all_domains(bench.kg.domains.size());
    for (std::size_t d = 0; d < all_domains.size(); ++d) all_domains[d] = d;

    const std::vector<std::pair<std::string, Ablation>> groups = {
        {"full", Ablation::Full},
        {"G3-no-pretrain", Ablation::G3NoPretrain},
        {"G4-no-Lcon", Ablation::G4NoLcon},
        {"G5-no-Lkg", Ablation::G5NoLkg}};

    std::map<std::string, std::map<std::string, double>> sums;
    for (auto seed : seeds) {
        for (const auto& [name, mode] : groups) {
            PretrainConfig pc = apply_ablation(pre_cfg, mode);
            pc.seed = seed;
            RecConfig rc = rec_cfg;
            rc.seed = seed;
            auto backbone =
                make_backbone<T>(bench, pc, mode != Ablation::G3NoPretrain, all_domains);
            auto metrics = tune_rec_once<T>(bench, std::move(backbone), target, rc).as_map();
            for (const auto& [k, v] : metrics) sums[name][k] += v;
        }
    }
    Report rep;
    rep.command = "ablate";
    rep.seed = seeds.empty() ? 0 : seeds.front();
    for (const auto& [name, mode] : groups) {
        std::map<std::string, double> avg;
        for (const auto& [k, v] : sums[name]) avg[k] = v / static_cast<double>(seeds.size());
        rep.add_row(name, avg);
    }
    rep.extra = {{"domain", domain}, {"seeds", seeds}};
    return rep;
}

}  // namespace mudok
