#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "mudok/kg.hpp"
#include "mudok/rng.hpp"

namespace mudok {

// Entity surface text is hashed once at load time; the resulting table never
// changes during training.
constexpr std::uint64_t kDefaultFeatureSeed = 0x6D646B66ULL;  // "mdkf"

struct FeatureTable {
    std::size_t dim = 0;
    std::vector<float> values;  // n_rows x dim, row-major

    std::size_t row_count() const { return dim == 0 ? 0 : values.size() / dim; }
    const float* row(std::size_t i) const { return values.data() + i * dim; }

    std::uint64_t checksum() const {
        std::uint64_t h = 0xCBF29CE484222325ULL;
        const auto* bytes = reinterpret_cast<const unsigned char*>(values.data());
        for (std::size_t i = 0; i < values.size() * sizeof(float); ++i) {
            h ^= bytes[i];
            h *= 0x100000001B3ULL;
        }
        return h ^ (dim * 0x9E3779B97F4A7C15ULL);
    }
};

// Signed feature hashing of whitespace-tokenized lowercase text: each token
// adds +-1 to one of dim buckets, then the vector is L2-normalized. Empty
// token streams map to the zero vector.
inline std::vector<float> hash_featurize(std::string_view text, std::size_t dim,
                                         std::uint64_t seed) {
    if (dim < 1) throw ConfigError("hash_featurize: dim must be >= 1");
    std::vector<float> v(dim, 0.0f);
    std::size_t pos = 0;
    bool any = false;
    std::string token;
    while (pos <= text.size()) {
        if (pos == text.size() || text[pos] == ' ' || text[pos] == '\t' || text[pos] == '\n') {
            if (!token.empty()) {
                const std::uint64_t h = hash64(token, seed);
                const std::uint64_t sign_bit = RngStream::mix(h) & 1ULL;
                v[h % dim] += sign_bit ? 1.0f : -1.0f;
                any = true;
                token.clear();
            }
        } else {
            char c = text[pos];
            if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
            token.push_back(c);
        }
        ++pos;
    }
    if (!any) return v;
    double norm = 0.0;
    for (float x : v) norm += static_cast<double>(x) * x;
    norm = std::sqrt(norm);
    if (norm > 0.0)
        for (float& x : v) x = static_cast<float>(x / norm);
    return v;
}

inline FeatureTable build_feature_table(const MultiDomainKG& kg, std::size_t dim,
                                        std::uint64_t seed = kDefaultFeatureSeed) {
    FeatureTable ft;
    ft.dim = dim;
    ft.values.reserve(kg.entities.size() * dim);
    for (const auto& name : kg.entities) {
        auto row = hash_featurize(name, dim, seed);
        ft.values.insert(ft.values.end(), row.begin(), row.end());
    }
    return ft;
}

// Binary feature file: magic "MDKF", u32 version=1, u64 n_rows, u32 dim,
// then n_rows*dim little-endian f32, row-major.
inline void save_feature_file(const FeatureTable& ft, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write feature file '" + path + "'");
    out.write("MDKF", 4);
    const std::uint32_t version = 1;
    const std::uint64_t n_rows = ft.row_count();
    const std::uint32_t dim = static_cast<std::uint32_t>(ft.dim);
    out.write(reinterpret_cast<const char*>(&version), 4);
    out.write(reinterpret_cast<const char*>(&n_rows), 8);
    out.write(reinterpret_cast<const char*>(&dim), 4);
    out.write(reinterpret_cast<const char*>(ft.values.data()),
              static_cast<std::streamsize>(ft.values.size() * sizeof(float)));
}

inline FeatureTable load_feature_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open feature file '" + path + "'");
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "MDKF", 4) != 0)
        throw ParseError("feature file '" + path + "': bad magic");
    std::uint32_t version = 0, dim = 0;
    std::uint64_t n_rows = 0;
    in.read(reinterpret_cast<char*>(&version), 4);
    in.read(reinterpret_cast<char*>(&n_rows), 8);
    in.read(reinterpret_cast<char*>(&dim), 4);
    if (!in || version != 1)
        throw ParseError("feature file '" + path + "': unsupported version");
    FeatureTable ft;
    ft.dim = dim;
    ft.values.resize(static_cast<std::size_t>(n_rows) * dim);
    in.read(reinterpret_cast<char*>(ft.values.data()),
            static_cast<std::streamsize>(ft.values.size() * sizeof(float)));
    if (!in) throw ParseError("feature file '" + path + "': truncated payload");
    for (float v : ft.values)
        if (!std::isfinite(v)) throw ParseError("feature file '" + path + "': non-finite value");
    return ft;
}

// Loads features from the manifest's file when present, otherwise hashes
// entity surface text at the requested dimensionality.
inline FeatureTable load_features(const Manifest& m, const MultiDomainKG& kg, std::size_t dim,
                                  std::uint64_t seed = kDefaultFeatureSeed) {
    if (!m.features_path.empty()) {
        FeatureTable ft = load_feature_file(m.features_path);
        if (ft.row_count() != kg.entities.size())
            throw ConfigError("feature file rows (" + std::to_string(ft.row_count()) +
                              ") do not match entity count (" + std::to_string(kg.entities.size()) +
                              ")");
        return ft;
    }
    return build_feature_table(kg, dim, seed);
}

}  // namespace mudok
