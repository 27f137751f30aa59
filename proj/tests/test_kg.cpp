#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <set>
#include <string>

#include "mudok/kg.hpp"
#include "mudok/synthetic.hpp"
#include "testutil.hpp"

using namespace mudok;
using testutil::TempDir;

namespace {

DomainData music_domain() {
    DomainData d;
    d.name = "music";
    d.triples = {{"i1", "has_genre", "jazz"},
                 {"i1", "has_artist", "artistA"},
                 {"i1", "has_year", "1959"},
                 {"i2", "has_genre", "rock"},
                 {"i2", "has_artist", "artistB"},
                 {"i2", "has_year", "1971"}};
    d.items = {"i1", "i2"};
    return d;
}

}  // namespace

TEST_CASE("triple files parse fields, comments, and report bad lines", "[kg]") {
    TempDir tmp;
    const auto path = tmp.file("triples.tsv");
    testutil::write_file(path, "i1\thas_genre\tjazz\n# comment line\ni2\thas_genre\trock\n");
    auto triples = parse_triple_file(path, "music");
    REQUIRE(triples.size() == 2);
    REQUIRE(triples[0].head == "i1");
    REQUIRE(triples[0].rel == "has_genre");
    REQUIRE(triples[0].tail == "jazz");

    testutil::write_file(path, "a\tr\tb\nc\tr\td\ne\tr\tf\ng\tonly_two\n");
    REQUIRE_THROWS_WITH(parse_triple_file(path, "music"),
                        Catch::Matchers::ContainsSubstring(":4"));

    testutil::write_file(path, "a\t\tb\n");
    REQUIRE_THROWS_WITH(parse_triple_file(path, "music"),
                        Catch::Matchers::ContainsSubstring("empty field"));
}

TEST_CASE("merging dedupes shared strings into one index", "[kg]") {
    DomainData a = music_domain();
    DomainData b;
    b.name = "movies";
    b.triples = {{"m1", "has_genre", "jazz"}, {"m1", "has_studio", "studioX"}};
    b.items = {"m1"};
    auto kg = build_multidomain_kg({a, b});

    const auto jazz = kg.find_entity("jazz");
    REQUIRE(jazz.has_value());
    REQUIRE(kg.domain_entity_mask[0][*jazz] == 1);
    REQUIRE(kg.domain_entity_mask[1][*jazz] == 1);
    const auto jazz_count = std::count(kg.entities.begin(), kg.entities.end(), "jazz");
    REQUIRE(jazz_count == 1);
}

TEST_CASE("adjacency groups triples by head in order", "[kg]") {
    auto kg = build_multidomain_kg({music_domain()});
    REQUIRE(kg.triples.size() == 6);
    REQUIRE(kg.items.size() == 2);
    for (auto item : kg.items) {
        REQUIRE(kg.degree(item) == 3);
        const auto& adj = kg.item_adjacency.at(item);
        REQUIRE(adj[0].first == kg.relation_index.at("has_genre"));
    }
}

TEST_CASE("declared item that never appears is an error", "[kg]") {
    DomainData d = music_domain();
    d.items.push_back("ghost_item");
    REQUIRE_THROWS_WITH(build_multidomain_kg({d}),
                        Catch::Matchers::ContainsSubstring("ghost_item"));
}

TEST_CASE("disjoint synthetic domains merge to the union size", "[kg]") {
    SyntheticSpec spec;
    spec.n_domains = 2;
    spec.items_per_domain = 12;
    spec.attrs_per_domain = 8;
    spec.shared_attr_fraction = 0.0;
    spec.triples_per_item = 4;
    spec.n_users = 3;
    spec.interactions_per_user = 4;
    spec.text_examples_per_domain = 5;
    auto bench = generate_synthetic_benchmark(spec);
    auto kg = build_multidomain_kg(bench.domains);

    // set-union oracle over surface strings
    std::set<std::string> ea, eb, all;
    for (const auto& t : bench.domains[0].triples) {
        ea.insert(t.head);
        ea.insert(t.tail);
    }
    for (const auto& t : bench.domains[1].triples) {
        eb.insert(t.head);
        eb.insert(t.tail);
    }
    all.insert(ea.begin(), ea.end());
    all.insert(eb.begin(), eb.end());
    REQUIRE(kg.entities.size() == all.size());
    REQUIRE(all.size() == ea.size() + eb.size());  // nothing shared at fraction 0
}

TEST_CASE("neighborhood sampling honors degree and masks", "[kg]") {
    DomainData d;
    d.name = "x";
    for (int i = 0; i < 12; ++i)
        d.triples.push_back({"rich", "rel" + std::to_string(i), "val" + std::to_string(i)});
    d.triples.push_back({"poor", "relA", "v1"});
    d.triples.push_back({"poor", "relB", "v2"});
    d.triples.push_back({"poor", "relC", "v3"});
    d.triples.push_back({"other", "has_part", "lonely"});
    d.items = {"rich", "poor", "lonely"};  // lonely appears only as a tail
    auto kg = build_multidomain_kg({d});

    RngStream rng(4);
    auto rich = sample_item_neighborhood(kg, *kg.find_entity("rich"), 8, rng);
    REQUIRE(std::count(rich.valid.begin(), rich.valid.end(), 1) == 8);
    std::set<std::pair<std::size_t, std::size_t>> uniq(rich.pairs.begin(), rich.pairs.end());
    REQUIRE(uniq.size() == 8);

    auto poor = sample_item_neighborhood(kg, *kg.find_entity("poor"), 8, rng);
    REQUIRE(poor.valid == std::vector<std::uint8_t>{1, 1, 1, 0, 0, 0, 0, 0});

    auto lonely = sample_item_neighborhood(kg, *kg.find_entity("lonely"), 8, rng);
    REQUIRE(std::count(lonely.valid.begin(), lonely.valid.end(), 1) == 0);

    RngStream r1(99), r2(99);
    auto s1 = sample_item_neighborhood(kg, *kg.find_entity("rich"), 8, r1);
    auto s2 = sample_item_neighborhood(kg, *kg.find_entity("rich"), 8, r2);
    REQUIRE(s1.pairs == s2.pairs);
}

TEST_CASE("sampled mask always has min(n, degree) valid entries", "[kg]") {
    SyntheticSpec spec;
    spec.n_domains = 2;
    spec.items_per_domain = 20;
    spec.triples_per_item = 5;
    spec.n_users = 2;
    spec.interactions_per_user = 3;
    spec.text_examples_per_domain = 4;
    auto kg = build_multidomain_kg(generate_synthetic_benchmark(spec).domains);
    RngStream rng(8);
    for (std::size_t n : {std::size_t(2), std::size_t(5), std::size_t(9)}) {
        for (auto item : kg.items) {
            auto s = sample_item_neighborhood(kg, item, n, rng);
            const auto valid =
                static_cast<std::size_t>(std::count(s.valid.begin(), s.valid.end(), 1));
            REQUIRE(valid == std::min(n, kg.degree(item)));
        }
    }
}

TEST_CASE("save and reload reproduce indices and adjacency", "[kg]") {
    SyntheticSpec spec;
    spec.n_domains = 3;
    spec.items_per_domain = 15;
    spec.n_users = 4;
    spec.interactions_per_user = 5;
    spec.text_examples_per_domain = 6;
    auto kg = build_multidomain_kg(generate_synthetic_benchmark(spec).domains);

    TempDir tmp;
    save_kg(kg, tmp.path.string());
    auto reloaded = load_kg(load_manifest(tmp.file("manifest.json")));

    REQUIRE(reloaded.entities == kg.entities);
    REQUIRE(reloaded.relations == kg.relations);
    REQUIRE(reloaded.items == kg.items);
    REQUIRE(reloaded.triples.size() == kg.triples.size());
    for (std::size_t i = 0; i < kg.triples.size(); ++i) {
        REQUIRE(reloaded.triples[i].head == kg.triples[i].head);
        REQUIRE(reloaded.triples[i].rel == kg.triples[i].rel);
        REQUIRE(reloaded.triples[i].tail == kg.triples[i].tail);
        REQUIRE(reloaded.triples[i].domain == kg.triples[i].domain);
    }
    for (auto item : kg.items)
        REQUIRE(reloaded.item_adjacency.at(item) == kg.item_adjacency.at(item));
}

TEST_CASE("domain partition covers every triple and rebuilds the merge", "[kg]") {
    SyntheticSpec spec;
    spec.n_domains = 3;
    spec.items_per_domain = 10;
    spec.shared_attr_fraction = 0.5;
    spec.n_users = 2;
    spec.interactions_per_user = 3;
    spec.text_examples_per_domain = 4;
    auto domains = generate_synthetic_benchmark(spec).domains;
    auto kg = build_multidomain_kg(domains);

    for (const auto& t : kg.triples) {
        REQUIRE(t.head < kg.entities.size());
        REQUIRE(t.tail < kg.entities.size());
        REQUIRE(t.rel < kg.relations.size());
        REQUIRE(kg.domain_entity_mask[t.domain][t.head] == 1);
        REQUIRE(kg.domain_entity_mask[t.domain][t.tail] == 1);
        REQUIRE(kg.domain_relation_mask[t.domain][t.rel] == 1);
    }
    for (std::size_t e = 0; e < kg.entities.size(); ++e) {
        bool covered = false;
        for (std::size_t d = 0; d < kg.domains.size(); ++d)
            covered = covered || kg.domain_entity_mask[d][e];
        REQUIRE(covered);
    }
    auto again = build_multidomain_kg(domains);
    REQUIRE(again.entities == kg.entities);
    REQUIRE(again.relations == kg.relations);
}

TEST_CASE("items are a subset of entities", "[kg]") {
    auto kg = build_multidomain_kg({music_domain()});
    for (auto item : kg.items) {
        REQUIRE(item < kg.entities.size());
        REQUIRE(kg.is_item[item] == 1);
    }
}
