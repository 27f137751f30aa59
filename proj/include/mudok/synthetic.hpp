#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mudok/kg.hpp"
#include "mudok/rng.hpp"

namespace mudok {

// Desk-scale benchmark with planted structure: every user prefers a couple of
// category values, interactions lean toward items carrying them, and text
// labels derive from the same category slot. Identical spec+seed reproduces
// identical bytes on disk.
struct SyntheticSpec {
    std::size_t n_domains = 3;
    std::size_t items_per_domain = 100;
    std::size_t attrs_per_domain = 20;
    double shared_attr_fraction = 0.3;
    std::size_t triples_per_item = 6;
    std::size_t n_users = 50;
    std::size_t interactions_per_user = 20;
    std::size_t text_examples_per_domain = 200;
    std::size_t n_labels = 5;
    std::uint64_t seed = 7;

    void validate() const {
        if (n_domains < 1 || items_per_domain < 1 || attrs_per_domain < 1 ||
            triples_per_item < 1 || n_users < 1 || interactions_per_user < 1 ||
            text_examples_per_domain < 1 || n_labels < 1)
            throw ConfigError("synthetic spec: all counts must be >= 1");
        if (shared_attr_fraction < 0.0 || shared_attr_fraction > 1.0)
            throw ConfigError("synthetic spec: shared_attr_fraction must be in [0,1]");
        if (interactions_per_user > items_per_domain)
            throw ConfigError("synthetic spec: interactions_per_user (" +
                              std::to_string(interactions_per_user) +
                              ") exceeds items_per_domain (" + std::to_string(items_per_domain) +
                              ")");
    }

    nlohmann::json to_json() const {
        return {{"n_domains", n_domains},
                {"items_per_domain", items_per_domain},
                {"attrs_per_domain", attrs_per_domain},
                {"shared_attr_fraction", shared_attr_fraction},
                {"triples_per_item", triples_per_item},
                {"n_users", n_users},
                {"interactions_per_user", interactions_per_user},
                {"text_examples_per_domain", text_examples_per_domain},
                {"n_labels", n_labels},
                {"seed", seed}};
    }

    static SyntheticSpec from_json(const nlohmann::json& j) {
        SyntheticSpec s;
        s.n_domains = j.value("n_domains", s.n_domains);
        s.items_per_domain = j.value("items_per_domain", s.items_per_domain);
        s.attrs_per_domain = j.value("attrs_per_domain", s.attrs_per_domain);
        s.shared_attr_fraction = j.value("shared_attr_fraction", s.shared_attr_fraction);
        s.triples_per_item = j.value("triples_per_item", s.triples_per_item);
        s.n_users = j.value("n_users", s.n_users);
        s.interactions_per_user = j.value("interactions_per_user", s.interactions_per_user);
        s.text_examples_per_domain = j.value("text_examples_per_domain", s.text_examples_per_domain);
        s.n_labels = j.value("n_labels", s.n_labels);
        s.seed = j.value("seed", s.seed);
        return s;
    }
};

struct Interaction {
    std::string user, item;
};

struct TextExample {
    std::size_t label;
    std::string item;
    std::string text;
};

struct SyntheticBenchmark {
    SyntheticSpec spec;
    std::vector<DomainData> domains;
    struct RecSplits {
        std::vector<Interaction> train, valid, test;
    };
    struct TextSplits {
        std::vector<TextExample> train, valid, test;
    };
    std::vector<RecSplits> interactions;  // per domain
    std::vector<TextSplits> texts;        // per domain
};

namespace detail {

// Slot r of domain d draws its values from the domain's attribute vocabulary
// partitioned round-robin across relation slots.
struct DomainVocab {
    std::vector<std::string> attrs;                     // all attribute values of the domain
    std::vector<std::vector<std::size_t>> slot_values;  // attr indices usable per slot
};

inline DomainVocab make_domain_vocab(const SyntheticSpec& spec, std::size_t d) {
    DomainVocab v;
    const auto shared = static_cast<std::size_t>(
        std::llround(spec.shared_attr_fraction * static_cast<double>(spec.attrs_per_domain)));
    for (std::size_t a = 0; a < spec.attrs_per_domain; ++a) {
        if (a < shared)
            v.attrs.push_back("val_shared_" + std::to_string(a));
        else
            v.attrs.push_back("val_d" + std::to_string(d) + "_" + std::to_string(a));
    }
    v.slot_values.resize(spec.triples_per_item);
    for (std::size_t a = 0; a < v.attrs.size(); ++a)
        v.slot_values[a % spec.triples_per_item].push_back(a);
    return v;
}

}  // namespace detail

inline SyntheticBenchmark generate_synthetic_benchmark(const SyntheticSpec& spec) {
    spec.validate();
    SyntheticBenchmark bench;
    bench.spec = spec;
    RngStream master(spec.seed);

    // category slot (slot 0) of each item, per domain; drives preferences and labels
    std::vector<std::vector<std::size_t>> item_category(spec.n_domains);

    for (std::size_t d = 0; d < spec.n_domains; ++d) {
        auto vocab = detail::make_domain_vocab(spec, d);
        RngStream rng = master.fork(1000 + d);
        DomainData dom;
        dom.name = "dom" + std::to_string(d);
        item_category[d].resize(spec.items_per_domain, 0);
        for (std::size_t i = 0; i < spec.items_per_domain; ++i) {
            const std::string item = "item_d" + std::to_string(d) + "_" + std::to_string(i);
            dom.items.push_back(item);
            for (std::size_t s = 0; s < spec.triples_per_item; ++s) {
                const auto& pool = vocab.slot_values[s];
                const std::size_t pick = pool.empty() ? 0 : pool[rng.uniform_int(pool.size())];
                if (s == 0) item_category[d][i] = pick;
                dom.triples.push_back(
                    {item, "rel_" + std::to_string(s), vocab.attrs[pick]});
            }
        }
        bench.domains.push_back(std::move(dom));
    }

    // interactions: biased toward items whose category the user prefers
    bench.interactions.resize(spec.n_domains);
    for (std::size_t d = 0; d < spec.n_domains; ++d) {
        auto vocab = detail::make_domain_vocab(spec, d);
        const auto& cat_pool = vocab.slot_values[0];
        RngStream rng = master.fork(2000 + d);
        auto& splits = bench.interactions[d];
        for (std::size_t u = 0; u < spec.n_users; ++u) {
            const std::string user = "user_d" + std::to_string(d) + "_" + std::to_string(u);
            // two preferred categories per user
            std::size_t c1 = cat_pool.empty() ? 0 : cat_pool[rng.uniform_int(cat_pool.size())];
            std::size_t c2 = cat_pool.empty() ? 0 : cat_pool[rng.uniform_int(cat_pool.size())];
            std::vector<std::size_t> preferred, rest;
            for (std::size_t i = 0; i < spec.items_per_domain; ++i) {
                if (item_category[d][i] == c1 || item_category[d][i] == c2)
                    preferred.push_back(i);
                else
                    rest.push_back(i);
            }
            rng.shuffle(preferred.begin(), preferred.end());
            rng.shuffle(rest.begin(), rest.end());
            const std::size_t want = spec.interactions_per_user;
            std::size_t want_pref = static_cast<std::size_t>(
                std::llround(0.85 * static_cast<double>(want)));
            want_pref = std::min(want_pref, preferred.size());
            std::vector<std::size_t> chosen(preferred.begin(), preferred.begin() + want_pref);
            for (std::size_t i = 0; chosen.size() < want && i < rest.size(); ++i)
                chosen.push_back(rest[i]);
            for (std::size_t i = want_pref; chosen.size() < want && i < preferred.size(); ++i)
                chosen.push_back(preferred[i]);
            rng.shuffle(chosen.begin(), chosen.end());

            const std::size_t k = chosen.size();
            std::size_t n_test = std::max<std::size_t>(1, k / 10);
            std::size_t n_valid = std::max<std::size_t>(1, k / 10);
            if (n_test + n_valid >= k) {  // tiny k: keep at least one train edge
                n_test = k > 1 ? 1 : 0;
                n_valid = k > 2 ? 1 : 0;
            }
            const std::size_t n_train = k - n_test - n_valid;
            auto item_name = [&](std::size_t i) {
                return "item_d" + std::to_string(d) + "_" + std::to_string(i);
            };
            for (std::size_t i = 0; i < k; ++i) {
                Interaction e{user, item_name(chosen[i])};
                if (i < n_train)
                    splits.train.push_back(std::move(e));
                else if (i < n_train + n_valid)
                    splits.valid.push_back(std::move(e));
                else
                    splits.test.push_back(std::move(e));
            }
        }
    }

    // text: label = item category mod n_labels; cue words carry the signal
    bench.texts.resize(spec.n_domains);
    for (std::size_t d = 0; d < spec.n_domains; ++d) {
        RngStream rng = master.fork(3000 + d);
        auto& splits = bench.texts[d];
        std::vector<TextExample> all;
        for (std::size_t x = 0; x < spec.text_examples_per_domain; ++x) {
            const std::size_t i = rng.uniform_int(spec.items_per_domain);
            const std::size_t label = item_category[d][i] % spec.n_labels;
            std::string text;
            const double cue_roll = rng.uniform();
            std::size_t cue_label = label;
            bool with_cue = true;
            if (cue_roll < 0.65) {
                cue_label = label;
            } else if (cue_roll < 0.75) {
                cue_label = rng.uniform_int(spec.n_labels);  // noisy cue
            } else {
                with_cue = false;
            }
            if (with_cue)
                text += "cue_" + std::to_string(cue_label) + "_" +
                        std::to_string(rng.uniform_int(3));
            const std::size_t fillers = 2 + rng.uniform_int(3);
            for (std::size_t f = 0; f < fillers; ++f) {
                if (!text.empty()) text += ' ';
                text += "filler_" + std::to_string(rng.uniform_int(20));
            }
            all.push_back({label, "item_d" + std::to_string(d) + "_" + std::to_string(i), text});
        }
        rng.shuffle(all.begin(), all.end());
        const std::size_t k = all.size();
        const std::size_t n_test = std::max<std::size_t>(1, k / 10);
        const std::size_t n_valid = std::max<std::size_t>(1, k / 10);
        for (std::size_t i = 0; i < k; ++i) {
            if (i + n_test >= k)
                splits.test.push_back(all[i]);
            else if (i + n_test + n_valid >= k)
                splits.valid.push_back(all[i]);
            else
                splits.train.push_back(all[i]);
        }
    }

    return bench;
}

// Writes triples/items/interaction/text files plus manifest.json; output is a
// pure function of the spec.
inline std::string write_benchmark(const SyntheticBenchmark& bench, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json manifest;
    manifest["domains"] = nlohmann::json::array();
    for (std::size_t d = 0; d < bench.domains.size(); ++d) {
        const auto& dom = bench.domains[d];
        const std::string ddir = "domains/" + dom.name;
        fs::create_directories(fs::path(dir) / ddir);
        {
            std::ofstream f(fs::path(dir) / ddir / "triples.tsv", std::ios::binary);
            for (const auto& t : dom.triples) f << t.head << '\t' << t.rel << '\t' << t.tail << '\n';
        }
        {
            std::ofstream f(fs::path(dir) / ddir / "items.txt", std::ios::binary);
            for (const auto& i : dom.items) f << i << '\n';
        }
        auto write_rec = [&](const std::vector<Interaction>& edges, const std::string& name) {
            std::ofstream f(fs::path(dir) / ddir / name, std::ios::binary);
            for (const auto& e : edges) f << e.user << '\t' << e.item << '\n';
        };
        write_rec(bench.interactions[d].train, "interactions_train.tsv");
        write_rec(bench.interactions[d].valid, "interactions_valid.tsv");
        write_rec(bench.interactions[d].test, "interactions_test.tsv");
        auto write_text = [&](const std::vector<TextExample>& xs, const std::string& name) {
            std::ofstream f(fs::path(dir) / ddir / name, std::ios::binary);
            for (const auto& x : xs) f << x.label << '\t' << x.item << '\t' << x.text << '\n';
        };
        write_text(bench.texts[d].train, "text_train.tsv");
        write_text(bench.texts[d].valid, "text_valid.tsv");
        write_text(bench.texts[d].test, "text_test.tsv");

        manifest["domains"].push_back(
            {{"name", dom.name},
             {"triples_path", ddir + "/triples.tsv"},
             {"items_path", ddir + "/items.txt"},
             {"interactions",
              {{"train", ddir + "/interactions_train.tsv"},
               {"valid", ddir + "/interactions_valid.tsv"},
               {"test", ddir + "/interactions_test.tsv"}}},
             {"text",
              {{"train", ddir + "/text_train.tsv"},
               {"valid", ddir + "/text_valid.tsv"},
               {"test", ddir + "/text_test.tsv"}}}});
    }
    manifest["synthetic_spec"] = bench.spec.to_json();
    const std::string mpath = (fs::path(dir) / "manifest.json").string();
    std::ofstream mf(mpath, std::ios::binary);
    mf << manifest.dump(2) << '\n';
    return mpath;
}

}  // namespace mudok
