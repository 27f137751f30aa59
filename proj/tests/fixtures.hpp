#pragma once

#include <string>
#include <vector>

#include "mudok/encoder.hpp"
#include "mudok/features.hpp"
#include "mudok/kg.hpp"
#include "mudok/synthetic.hpp"

namespace fixtures {

// Tiny two-domain KG with varied item degrees, plus random unit features.
struct ToyWorld {
    mudok::MultiDomainKG kg;
    mudok::FeatureTable features;
};

inline ToyWorld toy_world(std::size_t d_feat, std::uint64_t seed = 3) {
    mudok::DomainData a;
    a.name = "alpha";
    const std::vector<std::string> genres = {"jazz", "rock", "folk", "ambient"};
    for (int i = 0; i < 8; ++i) {
        const std::string item = "a_item" + std::to_string(i);
        a.items.push_back(item);
        a.triples.push_back({item, "genre", genres[i % genres.size()]});
        a.triples.push_back({item, "era", i % 2 ? "old" : "new"});
        if (i % 3 == 0) a.triples.push_back({item, "mood", "calm"});
        if (i % 4 == 0) a.triples.push_back({item, "mood", "loud"});
    }
    mudok::DomainData b;
    b.name = "beta";
    for (int i = 0; i < 6; ++i) {
        const std::string item = "b_item" + std::to_string(i);
        b.items.push_back(item);
        b.triples.push_back({item, "genre", genres[(i + 1) % genres.size()]});
        b.triples.push_back({item, "studio", "studio" + std::to_string(i % 2)});
    }

    ToyWorld w;
    w.kg = mudok::build_multidomain_kg({a, b});
    w.features.dim = d_feat;
    mudok::RngStream rng(seed);
    w.features.values.resize(w.kg.entities.size() * d_feat);
    for (auto& v : w.features.values) v = static_cast<float>(rng.normal() * 0.5);
    return w;
}

// Paper-shaped synthetic benchmark at desk scale for learning smoke tests.
inline mudok::SyntheticSpec smoke_spec(std::uint64_t seed = 7, double shared = 0.3) {
    mudok::SyntheticSpec spec;
    spec.n_domains = 3;
    spec.items_per_domain = 100;
    spec.attrs_per_domain = 20;
    spec.shared_attr_fraction = shared;
    spec.triples_per_item = 6;
    spec.n_users = 50;
    spec.interactions_per_user = 20;
    spec.text_examples_per_domain = 200;
    spec.n_labels = 5;
    spec.seed = seed;
    return spec;
}

}  // namespace fixtures
