#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mudok/encoder.hpp"
#include "mudok/kg.hpp"
#include "mudok/optim.hpp"
#include "mudok/parallel.hpp"
#include "mudok/ppt.hpp"
#include "mudok/tensor.hpp"

namespace mudok {

// User-item interactions for one domain with disjoint train/valid/test edges.
// Item rows are the domain's KG items in declaration order, so every item is
// rankable whether or not it was interacted with.
struct InteractionGraph {
    std::vector<std::string> users;
    std::unordered_map<std::string, std::size_t> user_index;
    std::vector<std::size_t> item_entities;  // row -> KG entity index
    std::unordered_map<std::size_t, std::size_t> item_row;
    std::vector<std::pair<std::size_t, std::size_t>> train, valid, test;
    std::vector<std::vector<std::size_t>> user_train_positives;  // sorted per user

    std::size_t n_users() const { return users.size(); }
    std::size_t n_items() const { return item_entities.size(); }

    void finalize() {
        user_train_positives.assign(n_users(), {});
        for (const auto& [u, i] : train) user_train_positives[u].push_back(i);
        for (auto& v : user_train_positives) std::sort(v.begin(), v.end());

        std::unordered_set<std::uint64_t> seen;
        auto check = [&seen, this](const std::vector<std::pair<std::size_t, std::size_t>>& edges) {
            for (const auto& [u, i] : edges) {
                const std::uint64_t key = static_cast<std::uint64_t>(u) * n_items() + i;
                if (!seen.insert(key).second)
                    throw ConfigError("interaction splits are not disjoint: user " + users[u] +
                                      " repeats an item across splits");
            }
        };
        check(train);
        check(valid);
        check(test);
    }

    bool is_train_positive(std::size_t user, std::size_t item) const {
        const auto& v = user_train_positives[user];
        return std::binary_search(v.begin(), v.end(), item);
    }
};

inline std::vector<std::pair<std::string, std::string>> parse_interaction_file(
    const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open interaction file '" + path + "'");
    std::vector<std::pair<std::string, std::string>> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos)
            throw ParseError(path + ":" + std::to_string(lineno) +
                             ": expected 2 tab-separated fields");
        out.emplace_back(line.substr(0, tab), line.substr(tab + 1));
    }
    return out;
}

inline InteractionGraph load_interactions(const SplitPaths& paths, const MultiDomainKG& kg,
                                          const std::vector<std::size_t>& domain_items) {
    InteractionGraph g;
    g.item_entities = domain_items;
    for (std::size_t r = 0; r < domain_items.size(); ++r) g.item_row.emplace(domain_items[r], r);
    auto intern_user = [&g](const std::string& u) {
        auto it = g.user_index.find(u);
        if (it != g.user_index.end()) return it->second;
        const std::size_t id = g.users.size();
        g.users.push_back(u);
        g.user_index.emplace(u, id);
        return id;
    };
    auto load_split = [&](const std::string& path,
                          std::vector<std::pair<std::size_t, std::size_t>>& out) {
        for (const auto& [user, item] : parse_interaction_file(path)) {
            auto ent = kg.find_entity(item);
            if (!ent || !g.item_row.count(*ent))
                throw ConfigError("interaction references unknown item '" + item + "' in " + path);
            out.emplace_back(intern_user(user), g.item_row.at(*ent));
        }
    };
    load_split(paths.train, g.train);
    load_split(paths.valid, g.valid);
    load_split(paths.test, g.test);
    g.finalize();
    return g;
}

enum class RecBackbone { MF, GraphProp };

struct RecConfig {
    RecBackbone backbone = RecBackbone::MF;
    std::size_t d_rec = 32;
    std::size_t prop_layers = 2;  // GraphProp only
    double learning_rate = 1e-3;
    double mu = 1e-4;  // L2 weight on user/item embeddings
    std::size_t epochs = 30;
    std::size_t batch_size = 256;
    std::size_t d_p = 16;
    std::size_t prompt_refresh_epochs = 1;
    std::size_t negative_attempts = 200;
    bool enhancement = true;        // add projected prompted representations
    bool tune_dropout = false;      // train-mode encodes during tuning
    std::uint64_t seed = 0;
};

template <class T>
struct RecModel {
    RecConfig cfg;
    TensorPtr<T> user_emb;  // n_users x d_rec
    TensorPtr<T> item_emb;  // n_items x d_rec
    TensorPtr<T> proj;      // d_model x d_rec, zero-init so step 0 matches the plain backbone

    static RecModel init(const RecConfig& cfg, std::size_t n_users, std::size_t n_items,
                         std::size_t d_model, RngStream& rng) {
        RecModel m;
        m.cfg = cfg;
        m.user_emb = randn<T>({n_users, cfg.d_rec}, T(0.1), rng);
        m.item_emb = randn<T>({n_items, cfg.d_rec}, T(0.1), rng);
        m.proj = zeros<T>({d_model, cfg.d_rec}, true);
        return m;
    }

    std::vector<std::pair<std::string, TensorPtr<T>>> named_tensors() const {
        return {{"rec.user_emb", user_emb}, {"rec.item_emb", item_emb}, {"rec.proj", proj}};
    }
};

// Symmetric-normalized bipartite propagation edges: coefficient
// 1/sqrt(deg_u * deg_i) per train edge, zero rows for isolated nodes.
template <class T>
struct PropagationPlan {
    std::vector<std::size_t> users, items;
    std::vector<T> coef;

    static PropagationPlan build(const InteractionGraph& g) {
        PropagationPlan p;
        std::vector<std::size_t> du(g.n_users(), 0), di(g.n_items(), 0);
        for (const auto& [u, i] : g.train) {
            ++du[u];
            ++di[i];
        }
        for (const auto& [u, i] : g.train) {
            p.users.push_back(u);
            p.items.push_back(i);
            p.coef.push_back(T(1) / std::sqrt(static_cast<T>(du[u]) * static_cast<T>(di[i])));
        }
        return p;
    }
};

// Runs the configured backbone over item inputs (item embeddings plus the
// projected prompted matrix, when given). MF passes inputs through; GraphProp
// averages K propagation layers LightGCN-style.
template <class T>
std::pair<TensorPtr<T>, TensorPtr<T>> propagate_embeddings(const RecModel<T>& model,
                                                           const InteractionGraph& graph,
                                                           const TensorPtr<T>& prompted_items) {
    TensorPtr<T> item_input = model.item_emb;
    if (prompted_items) {
        if (prompted_items->shape != model.item_emb->shape)
            throw ShapeError("propagate_embeddings: prompted matrix must be n_items x d_rec");
        item_input = add(model.item_emb, prompted_items);
    }
    if (model.cfg.backbone == RecBackbone::MF || model.cfg.prop_layers == 0)
        return {model.user_emb, item_input};

    auto plan = PropagationPlan<T>::build(graph);
    TensorPtr<T> eu = model.user_emb;
    TensorPtr<T> ev = item_input;
    TensorPtr<T> sum_u = eu;
    TensorPtr<T> sum_v = ev;
    for (std::size_t k = 0; k < model.cfg.prop_layers; ++k) {
        auto next_u = edge_propagate(ev, graph.n_users(), plan.users, plan.items, plan.coef);
        auto next_v = edge_propagate(eu, graph.n_items(), plan.items, plan.users, plan.coef);
        eu = next_u;
        ev = next_v;
        sum_u = add(sum_u, eu);
        sum_v = add(sum_v, ev);
    }
    const T inv = T(1) / static_cast<T>(model.cfg.prop_layers + 1);
    return {scale(sum_u, inv), scale(sum_v, inv)};
}

// One BPR batch: -log sigmoid(y_uv - y_uw) per pair plus mu * ||embeddings||^2.
// Returns the Eq-style batch sum for reporting and the mean-reduced step loss.
template <class T>
struct BprLosses {
    TensorPtr<T> step_loss;  // mean pair loss + regularizer
    T report_sum;            // summed pair losses + regularizer
};

template <class T>
BprLosses<T> bpr_loss(const RecModel<T>& model, const TensorPtr<T>& users_final,
                      const TensorPtr<T>& items_final,
                      const std::vector<std::size_t>& batch_users,
                      const std::vector<std::size_t>& batch_pos,
                      const std::vector<std::size_t>& batch_neg) {
    auto u = embedding_lookup(users_final, batch_users);
    auto vp = embedding_lookup(items_final, batch_pos);
    auto vn = embedding_lookup(items_final, batch_neg);
    auto diff = add(row_dot(u, vp), scale(row_dot(u, vn), T(-1)));
    auto pair_losses = softplus(scale(diff, T(-1)));
    auto reg = scale(add(sum_all(mul(model.user_emb, model.user_emb)),
                         sum_all(mul(model.item_emb, model.item_emb))),
                     static_cast<T>(model.cfg.mu));
    BprLosses<T> out;
    out.report_sum = sum_all(pair_losses)->data[0] + reg->data[0];
    out.step_loss = add(mean_all(pair_losses), reg);
    return out;
}

inline std::vector<std::size_t> sample_bpr_negatives(const InteractionGraph& graph,
                                              const std::vector<std::size_t>& batch_users,
                                              RngStream& rng, std::size_t max_attempts) {
    std::vector<std::size_t> negs;
    negs.reserve(batch_users.size());
    for (auto u : batch_users) {
        bool found = false;
        for (std::size_t a = 0; a < max_attempts && !found; ++a) {
            const std::size_t w = rng.uniform_int(graph.n_items());
            if (!graph.is_train_positive(u, w)) {
                negs.push_back(w);
                found = true;
            }
        }
        if (!found)
            throw ConfigError("negative sampling failed for user " + std::to_string(u) +
                              " after " + std::to_string(max_attempts) +
                              " attempts (all items positive?)");
    }
    return negs;
}

// ---------------------------------------------------------------------------
// ranking + metrics
// ---------------------------------------------------------------------------

// Descending score order, ties broken by lower item index; train positives of
// the user never appear.
inline std::vector<std::size_t> rank_items_by_score(const std::vector<double>& scores,
                                                    const std::vector<std::size_t>& exclude_sorted) {
    std::vector<std::size_t> order;
    order.reserve(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i)
        if (!std::binary_search(exclude_sorted.begin(), exclude_sorted.end(), i))
            order.push_back(i);
    std::stable_sort(order.begin(), order.end(), [&scores](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    return order;
}

struct RankingMetrics {
    double recall5 = 0, recall20 = 0, ndcg5 = 0;
    std::size_t evaluated_users = 0;

    std::map<std::string, double> as_map() const {
        return {{"Recall@5", recall5}, {"Recall@20", recall20}, {"NDCG@5", ndcg5}};
    }
};

inline double recall_at_k(const std::vector<std::size_t>& ranked,
                          const std::unordered_set<std::size_t>& positives, std::size_t k) {
    if (positives.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < ranked.size() && i < k; ++i)
        if (positives.count(ranked[i])) ++hits;
    return static_cast<double>(hits) / static_cast<double>(positives.size());
}

inline double ndcg_at_k(const std::vector<std::size_t>& ranked,
                        const std::unordered_set<std::size_t>& positives, std::size_t k) {
    if (positives.empty()) return 0.0;
    double dcg = 0;
    for (std::size_t i = 0; i < ranked.size() && i < k; ++i)
        if (positives.count(ranked[i])) dcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
    double idcg = 0;
    const std::size_t ideal = std::min(k, positives.size());
    for (std::size_t i = 0; i < ideal; ++i) idcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
    return idcg == 0 ? 0.0 : dcg / idcg;
}

// Full-ranking evaluation over users that have at least one positive in the
// requested split ("test" or "valid").
template <class T>
RankingMetrics evaluate_ranking(const RecModel<T>& model, const InteractionGraph& graph,
                                const TensorPtr<T>& prompted_items, bool use_valid = false) {
    auto [uf, vf] = propagate_embeddings(model, graph, prompted_items);
    std::vector<std::vector<std::size_t>> positives(graph.n_users());
    for (const auto& [u, i] : (use_valid ? graph.valid : graph.test)) positives[u].push_back(i);

    // users shard across read-only workers; per-user slots keep the
    // sequential reduction deterministic
    const std::size_t d = model.cfg.d_rec;
    std::vector<double> r5(graph.n_users(), 0), r20(graph.n_users(), 0), n5(graph.n_users(), 0);
    std::vector<std::uint8_t> counted(graph.n_users(), 0);
    const TensorPtr<T> uf_local = uf;
    const TensorPtr<T> vf_local = vf;
    parallel_for(graph.n_users(), [&](std::size_t u) {
        if (positives[u].empty()) return;
        std::vector<double> scores(graph.n_items());
        const T* urow = uf_local->data.data() + u * d;
        for (std::size_t i = 0; i < graph.n_items(); ++i) {
            const T* irow = vf_local->data.data() + i * d;
            double s = 0;
            for (std::size_t j = 0; j < d; ++j)
                s += static_cast<double>(urow[j]) * static_cast<double>(irow[j]);
            scores[i] = s;
        }
        auto ranked = rank_items_by_score(scores, graph.user_train_positives[u]);
        std::unordered_set<std::size_t> pos(positives[u].begin(), positives[u].end());
        r5[u] = recall_at_k(ranked, pos, 5);
        r20[u] = recall_at_k(ranked, pos, 20);
        n5[u] = ndcg_at_k(ranked, pos, 5);
        counted[u] = 1;
    });
    RankingMetrics m;
    for (std::size_t u = 0; u < graph.n_users(); ++u) {
        if (!counted[u]) continue;
        m.recall5 += r5[u];
        m.recall20 += r20[u];
        m.ndcg5 += n5[u];
        ++m.evaluated_users;
    }
    if (m.evaluated_users > 0) {
        m.recall5 /= static_cast<double>(m.evaluated_users);
        m.recall20 /= static_cast<double>(m.evaluated_users);
        m.ndcg5 /= static_cast<double>(m.evaluated_users);
    }
    return m;
}

}  // namespace mudok
