#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mudok/rng.hpp"

namespace mudok {

struct ParseError : std::runtime_error {
    explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct RawTriple {
    std::string head, rel, tail;
};

// One triple per line, three tab-separated fields; '#' lines and blank lines
// are ignored. Vocabulary order downstream is first-appearance order.
inline std::vector<RawTriple> parse_triple_file(const std::string& path,
                                                const std::string& domain_name) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open triple file '" + path + "' for domain " + domain_name);
    std::vector<RawTriple> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        const auto t1 = line.find('\t');
        const auto t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
        if (t1 == std::string::npos || t2 == std::string::npos ||
            line.find('\t', t2 + 1) != std::string::npos)
            throw ParseError(path + ":" + std::to_string(lineno) +
                             ": expected 3 tab-separated fields");
        RawTriple t{line.substr(0, t1), line.substr(t1 + 1, t2 - t1 - 1), line.substr(t2 + 1)};
        if (t.head.empty() || t.rel.empty() || t.tail.empty())
            throw ParseError(path + ":" + std::to_string(lineno) + ": empty field");
        out.push_back(std::move(t));
    }
    return out;
}

inline std::vector<std::string> parse_items_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open items file '" + path + "'");
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        out.push_back(line);
    }
    return out;
}

struct DomainData {
    std::string name;
    std::vector<RawTriple> triples;
    std::vector<std::string> items;
};

struct MultiDomainKG {
    struct Triple {
        std::size_t head, rel, tail, domain;
    };

    std::vector<std::string> entities;
    std::vector<std::string> relations;
    std::unordered_map<std::string, std::size_t> entity_index;
    std::unordered_map<std::string, std::size_t> relation_index;
    std::vector<Triple> triples;
    std::vector<std::string> domains;
    std::vector<std::size_t> items;  // item entity indices, first-appearance order
    std::vector<std::uint8_t> is_item;
    // triples grouped by head, in global triple order
    std::unordered_map<std::size_t, std::vector<std::pair<std::size_t, std::size_t>>> item_adjacency;
    // declared membership per domain (for restriction and partition checks)
    std::vector<std::vector<std::size_t>> domain_items;
    std::vector<std::vector<std::uint8_t>> domain_entity_mask;
    std::vector<std::vector<std::uint8_t>> domain_relation_mask;

    std::size_t degree(std::size_t item_idx) const {
        auto it = item_adjacency.find(item_idx);
        return it == item_adjacency.end() ? 0 : it->second.size();
    }

    std::optional<std::size_t> find_entity(const std::string& name) const {
        auto it = entity_index.find(name);
        if (it == entity_index.end()) return std::nullopt;
        return it->second;
    }

    std::size_t domain_id(const std::string& name) const {
        for (std::size_t d = 0; d < domains.size(); ++d)
            if (domains[d] == name) return d;
        throw ConfigError("unknown domain '" + name + "'");
    }

    // Item indices belonging to any of the listed domains, stable order.
    std::vector<std::size_t> items_of_domains(const std::vector<std::size_t>& ds) const {
        std::vector<std::uint8_t> take(entities.size(), 0);
        for (auto d : ds)
            for (auto i : domain_items.at(d)) take[i] = 1;
        std::vector<std::size_t> out;
        for (auto i : items)
            if (take[i]) out.push_back(i);
        return out;
    }
};

// Merges per-domain triple lists into one KG. Entities and relations dedupe by
// exact string identity; indices follow first appearance across the domain
// list in order.
inline MultiDomainKG build_multidomain_kg(const std::vector<DomainData>& domains) {
    if (domains.empty()) throw ConfigError("build_multidomain_kg: need at least one domain");
    MultiDomainKG kg;
    auto intern = [](std::vector<std::string>& names,
                     std::unordered_map<std::string, std::size_t>& index,
                     const std::string& s) -> std::size_t {
        auto it = index.find(s);
        if (it != index.end()) return it->second;
        const std::size_t id = names.size();
        names.push_back(s);
        index.emplace(s, id);
        return id;
    };

    for (const auto& dom : domains) kg.domains.push_back(dom.name);
    kg.domain_items.resize(domains.size());

    for (std::size_t d = 0; d < domains.size(); ++d) {
        for (const auto& t : domains[d].triples) {
            const std::size_t h = intern(kg.entities, kg.entity_index, t.head);
            const std::size_t r = intern(kg.relations, kg.relation_index, t.rel);
            const std::size_t tl = intern(kg.entities, kg.entity_index, t.tail);
            kg.triples.push_back({h, r, tl, d});
        }
    }

    kg.is_item.assign(kg.entities.size(), 0);
    for (std::size_t d = 0; d < domains.size(); ++d) {
        for (const auto& name : domains[d].items) {
            auto it = kg.entity_index.find(name);
            if (it == kg.entity_index.end())
                throw ConfigError("declared item '" + name + "' of domain " + domains[d].name +
                                  " never appears as an entity");
            kg.domain_items[d].push_back(it->second);
            if (!kg.is_item[it->second]) {
                kg.is_item[it->second] = 1;
                kg.items.push_back(it->second);
            }
        }
    }

    for (std::size_t ti = 0; ti < kg.triples.size(); ++ti) {
        const auto& t = kg.triples[ti];
        if (kg.is_item[t.head]) kg.item_adjacency[t.head].emplace_back(t.rel, t.tail);
    }

    kg.domain_entity_mask.assign(domains.size(),
                                 std::vector<std::uint8_t>(kg.entities.size(), 0));
    kg.domain_relation_mask.assign(domains.size(),
                                   std::vector<std::uint8_t>(kg.relations.size(), 0));
    for (const auto& t : kg.triples) {
        kg.domain_entity_mask[t.domain][t.head] = 1;
        kg.domain_entity_mask[t.domain][t.tail] = 1;
        kg.domain_relation_mask[t.domain][t.rel] = 1;
    }
    for (std::size_t d = 0; d < domains.size(); ++d)
        for (auto i : kg.domain_items[d]) kg.domain_entity_mask[d][i] = 1;

    return kg;
}

struct NeighborhoodSample {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (rel, tail); padding undefined
    std::vector<std::uint8_t> valid;
};

constexpr std::size_t kPadNeighbor = static_cast<std::size_t>(-1);

// Samples up to n of the item's (rel, tail) pairs without replacement;
// shortfall is padded and masked invalid. Deterministic given the stream.
inline NeighborhoodSample sample_item_neighborhood(const MultiDomainKG& kg, std::size_t item_idx,
                                                   std::size_t n, RngStream& rng) {
    if (item_idx >= kg.is_item.size() || !kg.is_item[item_idx])
        throw ConfigError("sample_item_neighborhood: entity " + std::to_string(item_idx) +
                          " is not an item");
    NeighborhoodSample out;
    out.pairs.assign(n, {kPadNeighbor, kPadNeighbor});
    out.valid.assign(n, 0);
    auto it = kg.item_adjacency.find(item_idx);
    if (it == kg.item_adjacency.end()) return out;
    const auto& adj = it->second;
    if (adj.size() <= n) {
        for (std::size_t i = 0; i < adj.size(); ++i) {
            out.pairs[i] = adj[i];
            out.valid[i] = 1;
        }
        return out;
    }
    auto idx = rng.sample_without_replacement(n, adj);
    for (std::size_t i = 0; i < n; ++i) {
        out.pairs[i] = adj[idx[i]];
        out.valid[i] = 1;
    }
    return out;
}

// ---------------------------------------------------------------------------
// manifest
// ---------------------------------------------------------------------------

struct SplitPaths {
    std::string train, valid, test;
};

struct ManifestDomain {
    std::string name;
    std::string triples_path;
    std::string items_path;
    std::optional<SplitPaths> interactions;
    std::optional<SplitPaths> text;
};

struct Manifest {
    std::vector<ManifestDomain> domains;
    std::string features_path;  // empty when features are hashed on load
    std::string base_dir;
};

inline Manifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open manifest '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw ParseError("manifest '" + path + "': " + e.what());
    }
    Manifest m;
    m.base_dir = std::filesystem::path(path).parent_path().string();
    if (!j.contains("domains") || !j["domains"].is_array() || j["domains"].empty())
        throw ConfigError("manifest '" + path + "': missing non-empty 'domains' array");
    auto resolve = [&m](const std::string& p) {
        std::filesystem::path fp(p);
        if (fp.is_absolute() || m.base_dir.empty()) return p;
        return (std::filesystem::path(m.base_dir) / fp).string();
    };
    for (const auto& dj : j["domains"]) {
        ManifestDomain d;
        d.name = dj.at("name").get<std::string>();
        d.triples_path = resolve(dj.at("triples_path").get<std::string>());
        d.items_path = resolve(dj.at("items_path").get<std::string>());
        for (auto [key, slot] : {std::pair{std::string("interactions"), &d.interactions},
                                 std::pair{std::string("text"), &d.text}}) {
            if (dj.contains(key)) {
                SplitPaths sp;
                sp.train = resolve(dj[key].at("train").get<std::string>());
                sp.valid = resolve(dj[key].at("valid").get<std::string>());
                sp.test = resolve(dj[key].at("test").get<std::string>());
                *slot = sp;
            }
        }
        m.domains.push_back(std::move(d));
    }
    if (j.contains("features_path")) m.features_path = resolve(j["features_path"].get<std::string>());
    return m;
}

inline MultiDomainKG load_kg(const Manifest& m) {
    std::vector<DomainData> doms;
    for (const auto& d : m.domains) {
        DomainData dd;
        dd.name = d.name;
        dd.triples = parse_triple_file(d.triples_path, d.name);
        dd.items = parse_items_file(d.items_path);
        doms.push_back(std::move(dd));
    }
    return build_multidomain_kg(doms);
}

// Writes the KG back out as canonical per-domain triple/item files plus a
// manifest; rebuilding from these reproduces indices and adjacency exactly.
inline void save_kg(const MultiDomainKG& kg, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json j;
    j["domains"] = nlohmann::json::array();
    for (std::size_t d = 0; d < kg.domains.size(); ++d) {
        const std::string ddir = "domains/" + kg.domains[d];
        fs::create_directories(fs::path(dir) / ddir);
        const std::string tp = ddir + "/triples.tsv";
        const std::string ip = ddir + "/items.txt";
        std::ofstream tf(fs::path(dir) / tp, std::ios::binary);
        for (const auto& t : kg.triples)
            if (t.domain == d)
                tf << kg.entities[t.head] << '\t' << kg.relations[t.rel] << '\t'
                   << kg.entities[t.tail] << '\n';
        std::ofstream itf(fs::path(dir) / ip, std::ios::binary);
        for (auto i : kg.domain_items[d]) itf << kg.entities[i] << '\n';
        j["domains"].push_back({{"name", kg.domains[d]}, {"triples_path", tp}, {"items_path", ip}});
    }
    std::ofstream mf(fs::path(dir) / "manifest.json", std::ios::binary);
    mf << j.dump(2) << '\n';
}

}  // namespace mudok
