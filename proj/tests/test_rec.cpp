#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <unordered_set>

#include "mudok/experiment.hpp"
#include "mudok/grad_check.hpp"
#include "mudok/rec.hpp"
#include "fixtures.hpp"
#include "testutil.hpp"

using namespace mudok;
using Catch::Approx;
using testutil::TempDir;

namespace {

InteractionGraph tiny_graph(std::size_t n_users, std::size_t n_items,
                            std::vector<std::pair<std::size_t, std::size_t>> train,
                            std::vector<std::pair<std::size_t, std::size_t>> test = {}) {
    InteractionGraph g;
    for (std::size_t u = 0; u < n_users; ++u) {
        g.users.push_back("u" + std::to_string(u));
        g.user_index.emplace(g.users.back(), u);
    }
    for (std::size_t i = 0; i < n_items; ++i) {
        g.item_entities.push_back(1000 + i);
        g.item_row.emplace(1000 + i, i);
    }
    g.train = std::move(train);
    g.test = std::move(test);
    g.finalize();
    return g;
}

template <class T>
RecModel<T> model_with(const RecConfig& cfg, std::vector<std::vector<T>> users,
                       std::vector<std::vector<T>> items) {
    RecModel<T> m;
    m.cfg = cfg;
    std::vector<T> u, v;
    for (auto& r : users) u.insert(u.end(), r.begin(), r.end());
    for (auto& r : items) v.insert(v.end(), r.begin(), r.end());
    m.user_emb = make_tensor<T>({users.size(), users[0].size()}, std::move(u), true);
    m.item_emb = make_tensor<T>({items.size(), items[0].size()}, std::move(v), true);
    m.proj = zeros<T>({8, cfg.d_rec}, true);
    return m;
}

}  // namespace

TEST_CASE("zero propagation layers return the inputs unchanged", "[rec]") {
    RecConfig cfg;
    cfg.backbone = RecBackbone::GraphProp;
    cfg.prop_layers = 0;
    cfg.d_rec = 2;
    auto model = model_with<double>(cfg, {{1, 2}, {3, 4}}, {{5, 6}, {7, 8}});
    auto g = tiny_graph(2, 2, {{0, 0}, {1, 1}});
    auto [u, v] = propagate_embeddings(model, g, nullptr);
    REQUIRE(u->data == model.user_emb->data);
    REQUIRE(v->data == model.item_emb->data);
}

TEST_CASE("one edge propagates the hand-computed average", "[rec]") {
    RecConfig cfg;
    cfg.backbone = RecBackbone::GraphProp;
    cfg.prop_layers = 1;
    cfg.d_rec = 2;
    auto model = model_with<double>(cfg, {{1.0, 2.0}}, {{3.0, 5.0}});
    auto g = tiny_graph(1, 1, {{0, 0}});
    auto [u, v] = propagate_embeddings(model, g, nullptr);
    // coefficient 1/sqrt(1*1) = 1; final = mean(layer0, layer1)
    REQUIRE(u->data[0] == Approx((1.0 + 3.0) / 2));
    REQUIRE(u->data[1] == Approx((2.0 + 5.0) / 2));
    REQUIRE(v->data[0] == Approx((3.0 + 1.0) / 2));
    REQUIRE(v->data[1] == Approx((5.0 + 2.0) / 2));
}

TEST_CASE("isolated nodes receive zero from propagation", "[rec]") {
    RecConfig cfg;
    cfg.backbone = RecBackbone::GraphProp;
    cfg.prop_layers = 1;
    cfg.d_rec = 1;
    auto model = model_with<double>(cfg, {{2.0}, {4.0}}, {{6.0}, {8.0}});
    auto g = tiny_graph(2, 2, {{0, 0}});  // user 1 and item 1 isolated
    auto [u, v] = propagate_embeddings(model, g, nullptr);
    REQUIRE(u->data[1] == Approx(4.0 / 2));  // mean(own, 0)
    REQUIRE(v->data[1] == Approx(8.0 / 2));
}

TEST_CASE("a zero prompted matrix is exactly the plain backbone", "[rec]") {
    RecConfig cfg;
    cfg.d_rec = 2;
    auto model = model_with<double>(cfg, {{1, 2}}, {{3, 4}});
    auto g = tiny_graph(1, 1, {{0, 0}});
    auto zeroes = zeros<double>({1, 2});
    auto [u1, v1] = propagate_embeddings(model, g, nullptr);
    auto [u2, v2] = propagate_embeddings(model, g, zeroes);
    REQUIRE(v1->data == v2->data);
}

TEST_CASE("bpr pair losses hit the closed-form values", "[rec]") {
    RecConfig cfg;
    cfg.d_rec = 2;
    cfg.mu = 0.0;
    // y_uv == y_uw -> ln 2
    auto model = model_with<double>(cfg, {{1, 0}}, {{2, 0}, {2, 0}});
    auto g = tiny_graph(1, 2, {{0, 0}});
    auto [u, v] = propagate_embeddings(model, g, nullptr);
    auto losses = bpr_loss(model, u, v, {0}, {0}, {1});
    REQUIRE(losses.report_sum == Approx(std::log(2.0)).epsilon(1e-12));

    // a huge positive margin drives the loss to zero
    auto model2 = model_with<double>(cfg, {{1, 0}}, {{50, 0}, {-50, 0}});
    auto [u2, v2] = propagate_embeddings(model2, g, nullptr);
    auto big = bpr_loss(model2, u2, v2, {0}, {0}, {1});
    REQUIRE(big.report_sum < 1e-12);
}

TEST_CASE("bpr matches an independent evaluation on a random batch", "[rec]") {
    RngStream rng(3);
    RecConfig cfg;
    cfg.d_rec = 4;
    cfg.mu = 1e-4;
    std::vector<std::vector<double>> users(3, std::vector<double>(4));
    std::vector<std::vector<double>> items(5, std::vector<double>(4));
    for (auto& r : users)
        for (auto& x : r) x = rng.normal();
    for (auto& r : items)
        for (auto& x : r) x = rng.normal();
    auto model = model_with<double>(cfg, users, items);
    auto g = tiny_graph(3, 5, {{0, 0}, {1, 1}, {2, 2}});
    auto [uf, vf] = propagate_embeddings(model, g, nullptr);

    std::vector<std::size_t> bu{0, 1, 2, 0, 1, 2, 0, 2};
    std::vector<std::size_t> bp{0, 1, 2, 0, 1, 2, 0, 2};
    std::vector<std::size_t> bn{1, 3, 4, 2, 0, 3, 4, 1};
    auto losses = bpr_loss(model, uf, vf, bu, bp, bn);

    auto dot = [&](const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0;
        for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
        return s;
    };
    double expect = 0;
    for (std::size_t p = 0; p < bu.size(); ++p) {
        const double margin = dot(users[bu[p]], items[bp[p]]) - dot(users[bu[p]], items[bn[p]]);
        expect += -std::log(1.0 / (1.0 + std::exp(-margin)));
    }
    double reg = 0;
    for (const auto& r : users) reg += dot(r, r);
    for (const auto& r : items) reg += dot(r, r);
    expect += cfg.mu * reg;
    REQUIRE(std::abs(losses.report_sum - expect) <= 1e-10);
}

TEST_CASE("bpr through propagation passes a gradient check", "[rec]") {
    RngStream rng(4);
    RecConfig cfg;
    cfg.backbone = RecBackbone::GraphProp;
    cfg.prop_layers = 2;
    cfg.d_rec = 3;
    cfg.mu = 1e-3;
    std::vector<std::vector<double>> users(3, std::vector<double>(3));
    std::vector<std::vector<double>> items(4, std::vector<double>(3));
    for (auto& r : users)
        for (auto& x : r) x = rng.normal();
    for (auto& r : items)
        for (auto& x : r) x = rng.normal();
    auto model = model_with<double>(cfg, users, items);
    auto g = tiny_graph(3, 4, {{0, 0}, {0, 1}, {1, 1}, {2, 3}});

    auto forward = [&]() {
        auto [uf, vf] = propagate_embeddings(model, g, nullptr);
        return bpr_loss(model, uf, vf, {0, 1, 2}, {0, 1, 3}, {2, 3, 0}).step_loss;
    };
    const double err =
        grad_check<double>(forward, {model.user_emb, model.item_emb}, 1e-5);
    REQUIRE(err <= 1e-4);
}

TEST_CASE("negative sampling avoids train positives and detects saturation", "[rec]") {
    auto g = tiny_graph(2, 3, {{0, 0}, {0, 1}, {1, 0}, {1, 1}, {1, 2}});
    RngStream rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        auto negs = sample_bpr_negatives(g, {0}, rng, 100);
        REQUIRE(negs[0] == 2);  // the only non-positive of user 0
    }
    REQUIRE_THROWS_AS(sample_bpr_negatives(g, {1}, rng, 100), ConfigError);
}

TEST_CASE("ranking excludes train positives and breaks ties by index", "[rec]") {
    std::vector<double> scores{0.5, 0.9, 0.5, 0.1, 0.9};
    auto ranked = rank_items_by_score(scores, {3});
    REQUIRE(ranked == std::vector<std::size_t>{1, 4, 0, 2});

    // brute-force argsort oracle on random scores
    RngStream rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> s(30);
        for (auto& x : s) x = std::floor(rng.uniform() * 8) / 8.0;  // force ties
        auto order = rank_items_by_score(s, {});
        REQUIRE(order.size() == s.size());
        for (std::size_t i = 1; i < order.size(); ++i) {
            const bool strictly_lower = s[order[i]] < s[order[i - 1]];
            const bool tie_by_index = s[order[i]] == s[order[i - 1]] && order[i] > order[i - 1];
            REQUIRE((strictly_lower || tie_by_index));
        }
    }
}

TEST_CASE("scaling a user's scores by a positive constant keeps the order", "[rec]") {
    RngStream rng(9);
    std::vector<double> s(25);
    for (auto& x : s) x = rng.normal();
    auto base = rank_items_by_score(s, {});
    for (double alpha : {0.5, 2.0, 17.0}) {
        auto scaled = s;
        for (auto& x : scaled) x *= alpha;
        REQUIRE(rank_items_by_score(scaled, {}) == base);
    }
}

TEST_CASE("metric closed forms: perfect hit and rank-3 discount", "[rec]") {
    std::unordered_set<std::size_t> pos{4};
    std::vector<std::size_t> first{4, 1, 2, 3, 0};
    REQUIRE(recall_at_k(first, pos, 5) == 1.0);
    REQUIRE(ndcg_at_k(first, pos, 5) == 1.0);

    std::vector<std::size_t> third{1, 2, 4, 3, 0};
    REQUIRE(ndcg_at_k(third, pos, 5) == Approx(1.0 / std::log2(4.0)));
    REQUIRE(ndcg_at_k(third, pos, 5) == Approx(0.5));
}

TEST_CASE("recall is non-decreasing in K", "[rec]") {
    RngStream rng(10);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<std::size_t> ranked(40);
        for (std::size_t i = 0; i < 40; ++i) ranked[i] = i;
        rng.shuffle(ranked.begin(), ranked.end());
        std::unordered_set<std::size_t> pos;
        while (pos.size() < 6) pos.insert(rng.uniform_int(40));
        double prev = 0;
        for (std::size_t k = 1; k <= 40; ++k) {
            const double r = recall_at_k(ranked, pos, k);
            REQUIRE(r >= prev);
            prev = r;
        }
    }
}

TEST_CASE("full evaluation agrees with a brute-force scorer", "[rec]") {
    RngStream rng(12);
    RecConfig cfg;
    cfg.d_rec = 4;
    const std::size_t n_users = 20, n_items = 30;
    std::vector<std::vector<double>> users(n_users, std::vector<double>(4));
    std::vector<std::vector<double>> items(n_items, std::vector<double>(4));
    for (auto& r : users)
        for (auto& x : r) x = rng.normal();
    for (auto& r : items)
        for (auto& x : r) x = rng.normal();

    std::vector<std::pair<std::size_t, std::size_t>> train, test;
    for (std::size_t u = 0; u < n_users; ++u) {
        std::vector<std::size_t> order(n_items);
        for (std::size_t i = 0; i < n_items; ++i) order[i] = i;
        rng.shuffle(order.begin(), order.end());
        for (int k = 0; k < 4; ++k) train.emplace_back(u, order[k]);
        for (int k = 4; k < 4 + 2 + (u % 2); ++k) test.emplace_back(u, order[k]);
    }
    auto model = model_with<double>(cfg, users, items);
    auto g = tiny_graph(n_users, n_items, train, test);
    auto metrics = evaluate_ranking(model, g, nullptr);

    // independent implementation
    auto dot = [&](std::size_t u, std::size_t i) {
        double s = 0;
        for (std::size_t j = 0; j < 4; ++j) s += users[u][j] * items[i][j];
        return s;
    };
    std::vector<std::vector<std::size_t>> test_pos(n_users);
    for (auto& [u, i] : test) test_pos[u].push_back(i);
    double r5 = 0, r20 = 0, n5 = 0;
    std::size_t counted = 0;
    for (std::size_t u = 0; u < n_users; ++u) {
        if (test_pos[u].empty()) continue;
        std::vector<std::pair<double, std::size_t>> scored;
        for (std::size_t i = 0; i < n_items; ++i) {
            if (g.is_train_positive(u, i)) continue;
            scored.emplace_back(-dot(u, i), i);
        }
        std::sort(scored.begin(), scored.end());
        std::unordered_set<std::size_t> pos(test_pos[u].begin(), test_pos[u].end());
        std::size_t h5 = 0, h20 = 0;
        double dcg = 0;
        for (std::size_t r = 0; r < scored.size(); ++r) {
            if (!pos.count(scored[r].second)) continue;
            if (r < 5) {
                ++h5;
                dcg += 1.0 / std::log2(double(r) + 2.0);
            }
            if (r < 20) ++h20;
        }
        double idcg = 0;
        for (std::size_t r = 0; r < std::min<std::size_t>(5, pos.size()); ++r)
            idcg += 1.0 / std::log2(double(r) + 2.0);
        r5 += double(h5) / double(pos.size());
        r20 += double(h20) / double(pos.size());
        n5 += dcg / idcg;
        ++counted;
    }
    REQUIRE(metrics.evaluated_users == counted);
    REQUIRE(metrics.recall5 == Approx(r5 / counted).margin(1e-10));
    REQUIRE(metrics.recall20 == Approx(r20 / counted).margin(1e-10));
    REQUIRE(metrics.ndcg5 == Approx(n5 / counted).margin(1e-10));
}

TEST_CASE("interaction files load and validate against the KG", "[rec]") {
    auto world = fixtures::toy_world(8);
    TempDir tmp;
    testutil::write_file(tmp.file("train.tsv"), "u0\ta_item0\nu0\ta_item1\nu1\ta_item2\n");
    testutil::write_file(tmp.file("valid.tsv"), "u0\ta_item2\n");
    testutil::write_file(tmp.file("test.tsv"), "u1\ta_item3\n");
    SplitPaths paths{tmp.file("train.tsv"), tmp.file("valid.tsv"), tmp.file("test.tsv")};
    auto g = load_interactions(paths, world.kg, world.kg.domain_items[0]);
    REQUIRE(g.n_users() == 2);
    REQUIRE(g.train.size() == 3);
    REQUIRE(g.is_train_positive(0, g.item_row.at(*world.kg.find_entity("a_item1"))));

    testutil::write_file(tmp.file("test.tsv"), "u1\tno_such_item\n");
    REQUIRE_THROWS_AS(load_interactions(paths, world.kg, world.kg.domain_items[0]), ConfigError);

    // overlapping splits violate disjointness
    testutil::write_file(tmp.file("test.tsv"), "u0\ta_item0\n");
    REQUIRE_THROWS_WITH(load_interactions(paths, world.kg, world.kg.domain_items[0]),
                        Catch::Matchers::ContainsSubstring("disjoint"));
}

TEST_CASE("with zero-initialized prompts, step-0 metrics equal the plain backbone", "[rec]") {
    auto world = fixtures::toy_world(8);
    Benchmark bench;
    bench.kg = world.kg;
    bench.features = world.features;
    EncoderConfig ec;
    ec.d_feat = 8;
    ec.d_model = 8;
    ec.d_ff = 16;
    ec.heads = 2;
    ec.layers = 1;
    ec.n_triples = 4;
    RngStream brng(4);
    auto backbone = EncoderParams<float>::init(ec, bench.kg.relations.size(), brng);

    TempDir tmp;
    testutil::write_file(tmp.file("train.tsv"),
                         "u0\ta_item0\nu0\ta_item1\nu1\ta_item2\nu1\ta_item4\nu2\ta_item5\n");
    testutil::write_file(tmp.file("valid.tsv"), "u0\ta_item6\n");
    testutil::write_file(tmp.file("test.tsv"), "u0\ta_item2\nu1\ta_item0\nu2\ta_item1\n");
    SplitPaths paths{tmp.file("train.tsv"), tmp.file("valid.tsv"), tmp.file("test.tsv")};
    auto graph = load_interactions(paths, world.kg, world.kg.domain_items[0]);

    RecConfig enhanced;
    enhanced.d_rec = 8;
    enhanced.seed = 21;
    RecConfig plain = enhanced;
    plain.enhancement = false;

    RecTuner<float> t1(bench, backbone, graph, enhanced);
    RecTuner<float> t2(bench, backbone, graph, plain);
    auto m1 = t1.evaluate();
    auto m2 = t2.evaluate();
    REQUIRE(m1.recall5 == m2.recall5);
    REQUIRE(m1.recall20 == m2.recall20);
    REQUIRE(m1.ndcg5 == m2.ndcg5);
}
