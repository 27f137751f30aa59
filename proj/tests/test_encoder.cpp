#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "mudok/encoder.hpp"
#include "mudok/grad_check.hpp"
#include "fixtures.hpp"

using namespace mudok;
using Catch::Approx;

namespace {

EncoderConfig small_cfg(std::size_t d_feat, std::size_t d_model, std::size_t layers,
                        std::size_t n) {
    EncoderConfig cfg;
    cfg.d_feat = d_feat;
    cfg.d_model = d_model;
    cfg.d_ff = 2 * d_model;
    cfg.heads = 2;
    cfg.layers = layers;
    cfg.n_triples = n;
    cfg.dropout = 0.1;
    return cfg;
}

template <class T>
void set_identity(const TensorPtr<T>& m) {
    std::fill(m->data.begin(), m->data.end(), T(0));
    for (std::size_t i = 0; i < m->rows() && i < m->cols(); ++i)
        m->data[i * m->cols() + i] = T(1);
}

std::vector<double> row_of(const TensorPtr<double>& t, std::size_t r) {
    return {t->data.begin() + r * t->cols(), t->data.begin() + (r + 1) * t->cols()};
}

}  // namespace

TEST_CASE("identity projection with zero relations reproduces raw features", "[encoder]") {
    auto world = fixtures::toy_world(6);
    auto cfg = small_cfg(6, 6, 1, 4);
    RngStream rng(1);
    auto params = EncoderParams<double>::init(cfg, world.kg.relations.size(), rng);
    set_identity(params.W_proj);
    std::fill(params.relations->data.begin(), params.relations->data.end(), 0.0);

    const std::size_t item = world.kg.items[0];
    RngStream srng(2);
    auto sample = sample_item_neighborhood(world.kg, item, cfg.n_triples, srng);
    auto seq = build_input_sequence(params, world.kg, world.features, item, sample);

    auto head = row_of(seq, 0);
    for (std::size_t j = 0; j < 6; ++j)
        REQUIRE(head[j] == Approx(world.features.row(item)[j]).margin(1e-12));
    for (std::size_t s = 0; s < cfg.n_triples; ++s) {
        if (!sample.valid[s]) continue;
        auto tok = row_of(seq, 1 + s);
        const float* feat = world.features.row(sample.pairs[s].second);
        for (std::size_t j = 0; j < 6; ++j) REQUIRE(tok[j] == Approx(feat[j]).margin(1e-12));
    }
}

TEST_CASE("relation embeddings are added to tail tokens only", "[encoder]") {
    auto world = fixtures::toy_world(6);
    auto cfg = small_cfg(6, 6, 1, 4);
    RngStream rng(1);
    auto params = EncoderParams<double>::init(cfg, world.kg.relations.size(), rng);
    set_identity(params.W_proj);

    const std::size_t item = world.kg.items[1];
    RngStream srng(2);
    auto sample = sample_item_neighborhood(world.kg, item, cfg.n_triples, srng);
    auto seq = build_input_sequence(params, world.kg, world.features, item, sample);

    auto head = row_of(seq, 0);
    for (std::size_t j = 0; j < 6; ++j)
        REQUIRE(head[j] == Approx(world.features.row(item)[j]).margin(1e-12));
    for (std::size_t s = 0; s < cfg.n_triples; ++s) {
        if (!sample.valid[s]) continue;
        auto tok = row_of(seq, 1 + s);
        const auto [rel, tail] = sample.pairs[s];
        for (std::size_t j = 0; j < 6; ++j)
            REQUIRE(tok[j] == Approx(world.features.row(tail)[j] +
                                     params.relations->data[rel * 6 + j])
                                  .margin(1e-12));
    }
}

TEST_CASE("zero-degree items produce a head-only sequence", "[encoder]") {
    DomainData d;
    d.name = "solo";
    d.triples = {{"hub", "links_to", "orphan"}};
    d.items = {"hub", "orphan"};
    auto kg = build_multidomain_kg({d});
    FeatureTable ft;
    ft.dim = 6;
    ft.values.assign(kg.entities.size() * 6, 0.25f);
    auto cfg = small_cfg(6, 6, 1, 4);
    RngStream rng(1);
    auto params = EncoderParams<double>::init(cfg, kg.relations.size(), rng);

    RngStream srng(5);
    auto sample = sample_item_neighborhood(kg, *kg.find_entity("orphan"), cfg.n_triples, srng);
    auto sb = build_sequence_batch<double>(kg, ft, cfg, {*kg.find_entity("orphan")}, {sample});
    REQUIRE(sb.valid[0] == 1);
    for (std::size_t s = 1; s < sb.seq_len; ++s) REQUIRE(sb.valid[s] == 0);
}

TEST_CASE("paper-scale shapes come out as (n+1) x d_model", "[encoder]") {
    DomainData d;
    d.name = "big";
    for (int i = 0; i < 10; ++i)
        d.triples.push_back({"item0", "rel" + std::to_string(i), "val" + std::to_string(i)});
    d.items = {"item0"};
    auto kg = build_multidomain_kg({d});
    FeatureTable ft;
    ft.dim = 768;
    RngStream frng(2);
    ft.values.resize(kg.entities.size() * 768);
    for (auto& v : ft.values) v = static_cast<float>(frng.normal());

    EncoderConfig cfg;  // defaults: d_feat 768, d_model 128, n 8
    RngStream rng(1);
    auto params = EncoderParams<float>::init(cfg, kg.relations.size(), rng);
    RngStream srng(3);
    auto sample = sample_item_neighborhood(kg, kg.items[0], cfg.n_triples, srng);
    auto seq = build_input_sequence(params, kg, ft, kg.items[0], sample);
    REQUIRE(seq->shape == Shape{9, 128});

    auto sb = build_sequence_batch<float>(kg, ft, cfg, {kg.items[0]}, {sample});
    RngStream erng(4);
    auto out = encode_batch(params, sb, erng, false);
    REQUIRE(out->shape == Shape{9, 128});
}

TEST_CASE("zero layers leave the input sequence unchanged", "[encoder]") {
    auto world = fixtures::toy_world(6);
    auto cfg = small_cfg(6, 6, 0, 4);
    RngStream rng(1);
    auto params = EncoderParams<double>::init(cfg, world.kg.relations.size(), rng);
    RngStream srng(2);
    const std::size_t item = world.kg.items[2];
    auto sample = sample_item_neighborhood(world.kg, item, cfg.n_triples, srng);
    auto sb = build_sequence_batch<double>(world.kg, world.features, cfg, {item}, {sample});
    auto assembled = assemble_tokens(params, sb);
    RngStream erng(3);
    auto out = encode(params, assembled, sb, erng, true);
    REQUIRE(out->data == assembled->data);
}

TEST_CASE("mismatched feature dimensionality is rejected", "[encoder]") {
    auto world = fixtures::toy_world(5);
    auto cfg = small_cfg(6, 6, 1, 4);
    RngStream rng(1);
    auto params = EncoderParams<double>::init(cfg, world.kg.relations.size(), rng);
    RngStream srng(2);
    auto sample = sample_item_neighborhood(world.kg, world.kg.items[0], cfg.n_triples, srng);
    REQUIRE_THROWS_AS(
        build_sequence_batch<double>(world.kg, world.features, cfg, {world.kg.items[0]}, {sample}),
        ConfigError);
}

TEST_CASE("permuting valid tails permutes outputs and fixes the head", "[encoder]") {
    auto world = fixtures::toy_world(8);
    auto cfg = small_cfg(8, 8, 2, 4);
    RngStream rng(1);
    auto params = EncoderParams<double>::init(cfg, world.kg.relations.size(), rng);
    RngStream srng(2);

    for (auto item : world.kg.items) {
        auto sample = sample_item_neighborhood(world.kg, item, cfg.n_triples, srng);
        const std::size_t k =
            static_cast<std::size_t>(std::count(sample.valid.begin(), sample.valid.end(), 1));
        if (k < 2) continue;

        NeighborhoodSample permuted = sample;
        std::rotate(permuted.pairs.begin(), permuted.pairs.begin() + 1, permuted.pairs.begin() + k);

        auto sb1 = build_sequence_batch<double>(world.kg, world.features, cfg, {item}, {sample});
        auto sb2 = build_sequence_batch<double>(world.kg, world.features, cfg, {item}, {permuted});
        RngStream e1(9), e2(9);
        auto out1 = encode_batch(params, sb1, e1, false);
        auto out2 = encode_batch(params, sb2, e2, false);

        for (std::size_t j = 0; j < cfg.d_model; ++j)
            REQUIRE(out1->data[j] == Approx(out2->data[j]).margin(1e-6));
        // tail outputs follow the same rotation
        for (std::size_t s = 0; s < k; ++s) {
            const std::size_t src = 1 + (s + 1) % k;
            for (std::size_t j = 0; j < cfg.d_model; ++j)
                REQUIRE(out2->data[(1 + s) * cfg.d_model + j] ==
                        Approx(out1->data[src * cfg.d_model + j]).margin(1e-6));
        }
    }
}

TEST_CASE("garbage at masked positions never reaches the item output", "[encoder]") {
    auto world = fixtures::toy_world(8);
    auto cfg = small_cfg(8, 8, 2, 6);  // degrees < 6, so padding exists
    RngStream rng(1);
    auto params = EncoderParams<double>::init(cfg, world.kg.relations.size(), rng);
    const std::size_t item = world.kg.items[4];
    RngStream srng(2);
    auto sample = sample_item_neighborhood(world.kg, item, cfg.n_triples, srng);
    auto sb1 = build_sequence_batch<double>(world.kg, world.features, cfg, {item}, {sample});
    auto sb2 = build_sequence_batch<double>(world.kg, world.features, cfg, {item}, {sample});
    bool poisoned = false;
    for (std::size_t r = 0; r < sb2.valid.size(); ++r) {
        if (sb2.valid[r]) continue;
        for (std::size_t j = 0; j < cfg.d_feat; ++j)
            sb2.features->data[r * cfg.d_feat + j] = 1e3 + static_cast<double>(j);
        poisoned = true;
    }
    REQUIRE(poisoned);
    RngStream e1(4), e2(4);
    auto out1 = encode_batch(params, sb1, e1, false);
    auto out2 = encode_batch(params, sb2, e2, false);
    for (std::size_t j = 0; j < cfg.d_model; ++j)
        REQUIRE(out1->data[j] == Approx(out2->data[j]).margin(1e-6));
}

TEST_CASE("dropout streams make training stochastic but replayable", "[encoder]") {
    auto world = fixtures::toy_world(8);
    auto cfg = small_cfg(8, 8, 2, 4);
    RngStream rng(1);
    auto params = EncoderParams<double>::init(cfg, world.kg.relations.size(), rng);
    const std::size_t item = world.kg.items[0];
    RngStream srng(2);
    auto sample = sample_item_neighborhood(world.kg, item, cfg.n_triples, srng);
    auto sb = build_sequence_batch<double>(world.kg, world.features, cfg, {item}, {sample});

    RngStream d1(77), d2(77), d3(78);
    auto a = encode_batch(params, sb, d1, true);
    auto b = encode_batch(params, sb, d2, true);
    auto c = encode_batch(params, sb, d3, true);
    REQUIRE(a->data == b->data);
    REQUIRE(a->data != c->data);
}

TEST_CASE("eval-mode item representations are deterministic", "[encoder]") {
    auto world = fixtures::toy_world(8);
    auto cfg = small_cfg(8, 8, 2, 4);
    RngStream rng(1);
    auto params = EncoderParams<double>::init(cfg, world.kg.relations.size(), rng);
    RngStream r1(5), r2(5);
    auto h1 = item_representation(params, world.kg, world.features, world.kg.items[3], r1, false);
    auto h2 = item_representation(params, world.kg, world.features, world.kg.items[3], r2, false);
    REQUIRE(h1->data == h2->data);
}

TEST_CASE("zero features and zero relations collapse all items together", "[encoder]") {
    auto world = fixtures::toy_world(8);
    std::fill(world.features.values.begin(), world.features.values.end(), 0.0f);
    auto cfg = small_cfg(8, 8, 2, 4);
    RngStream rng(1);
    auto params = EncoderParams<double>::init(cfg, world.kg.relations.size(), rng);
    std::fill(params.relations->data.begin(), params.relations->data.end(), 0.0);

    RngStream r1(5), r2(5);
    auto h1 = item_representation(params, world.kg, world.features, world.kg.items[0], r1, false);
    auto h2 = item_representation(params, world.kg, world.features, world.kg.items[5], r2, false);
    for (std::size_t j = 0; j < cfg.d_model; ++j)
        REQUIRE(h1->data[j] == Approx(h2->data[j]).margin(1e-9));
}

TEST_CASE("the full encoder passes a gradient check", "[encoder]") {
    auto world = fixtures::toy_world(5);
    auto cfg = small_cfg(5, 4, 2, 3);
    cfg.dropout = 0.0;
    cfg.init_std = 0.5;  // O(1) activations keep finite differences off the relu kinks
    RngStream rng(1);
    auto params = EncoderParams<double>::init(cfg, world.kg.relations.size(), rng);
    std::vector<std::size_t> items = {world.kg.items[0], world.kg.items[1]};
    RngStream srng(2);
    std::vector<NeighborhoodSample> samples;
    for (auto i : items) samples.push_back(sample_item_neighborhood(world.kg, i, 3, srng));
    auto sb = build_sequence_batch<double>(world.kg, world.features, cfg, items, samples);

    RngStream wrng(7);
    auto probe = randn<double>({sb.batch * sb.seq_len, cfg.d_model}, 1.0, wrng,
                               /*requires_grad=*/false);
    auto forward = [&]() {
        RngStream erng(11);
        auto out = encode_batch(params, sb, erng, false);
        return mean_all(mul(out, probe));
    };
    const double err = grad_check<double>(forward, params.tensors(), 1e-5);
    REQUIRE(err < 1e-4);
}
