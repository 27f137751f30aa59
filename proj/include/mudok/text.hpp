#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mudok/encoder.hpp"
#include "mudok/features.hpp"
#include "mudok/kg.hpp"
#include "mudok/optim.hpp"
#include "mudok/ppt.hpp"
#include "mudok/tensor.hpp"

namespace mudok {

struct TextItem {
    std::size_t label;
    std::size_t item_entity;
    std::string text;
};

struct TextDataset {
    std::vector<TextItem> train, valid, test;
    std::size_t n_labels = 0;
};

inline std::vector<TextItem> parse_text_file(const std::string& path, const MultiDomainKG& kg) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open text file '" + path + "'");
    std::vector<TextItem> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        const auto t1 = line.find('\t');
        const auto t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
        if (t1 == std::string::npos || t2 == std::string::npos)
            throw ParseError(path + ":" + std::to_string(lineno) +
                             ": expected 3 tab-separated fields (label, item, text)");
        TextItem x;
        try {
            x.label = static_cast<std::size_t>(std::stoul(line.substr(0, t1)));
        } catch (const std::exception&) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": label is not an integer");
        }
        const std::string item = line.substr(t1 + 1, t2 - t1 - 1);
        auto ent = kg.find_entity(item);
        if (!ent || !kg.is_item[*ent])
            throw ConfigError(path + ":" + std::to_string(lineno) + ": unknown item '" + item +
                              "'");
        x.item_entity = *ent;
        x.text = line.substr(t2 + 1);
        out.push_back(std::move(x));
    }
    return out;
}

inline TextDataset load_text_dataset(const SplitPaths& paths, const MultiDomainKG& kg) {
    TextDataset d;
    d.train = parse_text_file(paths.train, kg);
    d.valid = parse_text_file(paths.valid, kg);
    d.test = parse_text_file(paths.test, kg);
    std::size_t max_label = 0;
    for (const auto* split : {&d.train, &d.valid, &d.test})
        for (const auto& x : *split) max_label = std::max(max_label, x.label);
    d.n_labels = max_label + 1;
    if (d.n_labels < 2) d.n_labels = 2;
    return d;
}

enum class TextEncoderKind { Hashed, File };

struct TextConfig {
    TextEncoderKind encoder = TextEncoderKind::Hashed;
    std::size_t d_text = 64;
    double learning_rate = 1e-3;
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    std::size_t d_p = 16;
    std::size_t prompt_refresh_epochs = 1;
    bool enhancement = true;
    bool tune_dropout = false;
    std::uint64_t text_hash_seed = 0x7478746DULL;  // "txtm"
    std::uint64_t seed = 0;
};

// Pooled-output head. The hashed encoder passes token-hashed features through
// one trainable layer with ReLU; the file encoder uses precomputed pooled rows
// directly. A zero-initialized fusion projection folds the prompted item
// representation into the pooled vector, so step 0 reproduces the base model.
template <class T>
struct TextHead {
    TextConfig cfg;
    std::size_t n_labels = 0;
    TensorPtr<T> W_enc, b_enc;  // hashed encoder only
    TensorPtr<T> fusion;        // d_model x d_text
    TensorPtr<T> W_c, b_c;

    static TextHead init(const TextConfig& cfg, std::size_t n_labels, std::size_t d_model,
                         RngStream& rng) {
        if (n_labels < 2) throw ConfigError("text head: need at least two labels");
        TextHead h;
        h.cfg = cfg;
        h.n_labels = n_labels;
        if (cfg.encoder == TextEncoderKind::Hashed) {
            h.W_enc = randn<T>({cfg.d_text, cfg.d_text}, T(0.1), rng);
            h.b_enc = zeros<T>({cfg.d_text}, true);
        }
        h.fusion = zeros<T>({d_model, cfg.d_text}, true);
        h.W_c = randn<T>({cfg.d_text, n_labels}, T(0.1), rng);
        h.b_c = zeros<T>({n_labels}, true);
        return h;
    }

    std::vector<std::pair<std::string, TensorPtr<T>>> named_tensors() const {
        std::vector<std::pair<std::string, TensorPtr<T>>> out;
        if (W_enc) {
            out.emplace_back("text.W_enc", W_enc);
            out.emplace_back("text.b_enc", b_enc);
        }
        out.emplace_back("text.fusion", fusion);
        out.emplace_back("text.W_c", W_c);
        out.emplace_back("text.b_c", b_c);
        return out;
    }

    std::vector<TensorPtr<T>> trainable() const {
        std::vector<TensorPtr<T>> out;
        for (auto& [n, t] : named_tensors()) out.push_back(t);
        return out;
    }
};

// Pooled input rows for a list of examples. Hashed mode vectorizes
// "text <sp> item-text"; file mode returns the stored row per example index.
template <class T>
std::vector<T> pooled_input_rows(const TextConfig& cfg, const std::vector<TextItem>& examples,
                                 const std::vector<std::size_t>& idxs, const MultiDomainKG& kg,
                                 const FeatureTable* pooled_file) {
    std::vector<T> rows(idxs.size() * cfg.d_text);
    for (std::size_t b = 0; b < idxs.size(); ++b) {
        const auto& x = examples[idxs[b]];
        if (cfg.encoder == TextEncoderKind::File) {
            if (!pooled_file) throw ConfigError("file text encoder requires a pooled-vector file");
            if (idxs[b] >= pooled_file->row_count())
                throw ConfigError("pooled-vector file has no row for example " +
                                  std::to_string(idxs[b]));
            const float* src = pooled_file->row(idxs[b]);
            for (std::size_t j = 0; j < cfg.d_text; ++j)
                rows[b * cfg.d_text + j] = static_cast<T>(src[j]);
        } else {
            auto v = hash_featurize(x.text + " " + kg.entities[x.item_entity], cfg.d_text,
                                    cfg.text_hash_seed);
            for (std::size_t j = 0; j < cfg.d_text; ++j)
                rows[b * cfg.d_text + j] = static_cast<T>(v[j]);
        }
    }
    return rows;
}

// O = pooled encoder output for a batch (B x d_text node).
template <class T>
TensorPtr<T> encode_text_batch(const TextHead<T>& head, const TensorPtr<T>& pooled_rows) {
    if (head.cfg.encoder == TextEncoderKind::File) return pooled_rows;
    return relu(add_rowvec(matmul(pooled_rows, head.W_enc), head.b_enc));
}

// Logits z = (O + fused prompted representation) W_c + b_c; probabilities by
// row softmax. Pass a null prompted node for the plain path.
template <class T>
TensorPtr<T> classify_logits(const TextHead<T>& head, const TensorPtr<T>& pooled,
                             const TensorPtr<T>& prompted) {
    TensorPtr<T> fused = pooled;
    if (prompted) fused = add(pooled, matmul(prompted, head.fusion));
    return add_rowvec(matmul(fused, head.W_c), head.b_c);
}

template <class T>
TensorPtr<T> classify(const TextHead<T>& head, const TensorPtr<T>& pooled,
                      const TensorPtr<T>& prompted) {
    return softmax_rows(classify_logits(head, pooled, prompted));
}

// ---------------------------------------------------------------------------
// classification metrics
// ---------------------------------------------------------------------------

struct ClassificationMetrics {
    double accuracy = 0;
    double precision = 0, recall = 0, f1 = 0;  // binary, positive class = 1
    double macro_f1 = 0, micro_f1 = 0;
    std::size_t n_labels = 0;

    std::map<std::string, double> as_map() const {
        if (n_labels == 2)
            return {{"Acc", accuracy}, {"P", precision}, {"R", recall}, {"F1", f1}};
        return {{"Acc", accuracy}, {"macro-F1", macro_f1}, {"micro-F1", micro_f1}};
    }
};

// Confusion-matrix metrics; degenerate denominators are defined as 0, absent
// classes contribute 0 to macro-F1.
inline ClassificationMetrics classification_metrics(const std::vector<std::size_t>& predicted,
                                                    const std::vector<std::size_t>& actual,
                                                    std::size_t n_labels) {
    if (predicted.size() != actual.size())
        throw ConfigError("classification_metrics: size mismatch");
    ClassificationMetrics m;
    m.n_labels = n_labels;
    if (predicted.empty()) return m;
    std::vector<std::size_t> tp(n_labels, 0), fp(n_labels, 0), fn(n_labels, 0);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        if (predicted[i] == actual[i]) {
            ++correct;
            ++tp[actual[i]];
        } else {
            ++fp[predicted[i]];
            ++fn[actual[i]];
        }
    }
    m.accuracy = static_cast<double>(correct) / static_cast<double>(predicted.size());

    auto safe_div = [](double num, double den) { return den == 0.0 ? 0.0 : num / den; };
    double macro = 0;
    std::size_t tp_sum = 0, fp_sum = 0, fn_sum = 0;
    for (std::size_t c = 0; c < n_labels; ++c) {
        const double p = safe_div(static_cast<double>(tp[c]), static_cast<double>(tp[c] + fp[c]));
        const double r = safe_div(static_cast<double>(tp[c]), static_cast<double>(tp[c] + fn[c]));
        const double f = safe_div(2 * p * r, p + r);
        macro += f;
        tp_sum += tp[c];
        fp_sum += fp[c];
        fn_sum += fn[c];
        if (c == 1) {
            m.precision = p;
            m.recall = r;
            m.f1 = f;
        }
    }
    m.macro_f1 = macro / static_cast<double>(n_labels);
    const double micro_p = safe_div(static_cast<double>(tp_sum), static_cast<double>(tp_sum + fp_sum));
    const double micro_r = safe_div(static_cast<double>(tp_sum), static_cast<double>(tp_sum + fn_sum));
    m.micro_f1 = safe_div(2 * micro_p * micro_r, micro_p + micro_r);
    return m;
}

// Pooled-vector file: magic "MDKP", u32 version=1, u64 n_rows, u32 dim,
// then f32 rows; row i pairs with example i.
inline void save_pooled_file(const FeatureTable& ft, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write pooled-vector file '" + path + "'");
    out.write("MDKP", 4);
    const std::uint32_t version = 1;
    const std::uint64_t n_rows = ft.row_count();
    const std::uint32_t dim = static_cast<std::uint32_t>(ft.dim);
    out.write(reinterpret_cast<const char*>(&version), 4);
    out.write(reinterpret_cast<const char*>(&n_rows), 8);
    out.write(reinterpret_cast<const char*>(&dim), 4);
    out.write(reinterpret_cast<const char*>(ft.values.data()),
              static_cast<std::streamsize>(ft.values.size() * sizeof(float)));
}

inline FeatureTable load_pooled_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open pooled-vector file '" + path + "'");
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "MDKP", 4) != 0)
        throw ParseError("pooled-vector file '" + path + "': bad magic");
    std::uint32_t version = 0, dim = 0;
    std::uint64_t n_rows = 0;
    in.read(reinterpret_cast<char*>(&version), 4);
    in.read(reinterpret_cast<char*>(&n_rows), 8);
    in.read(reinterpret_cast<char*>(&dim), 4);
    if (!in || version != 1) throw ParseError("pooled-vector file '" + path + "': bad header");
    FeatureTable ft;
    ft.dim = dim;
    ft.values.resize(static_cast<std::size_t>(n_rows) * dim);
    in.read(reinterpret_cast<char*>(ft.values.data()),
            static_cast<std::streamsize>(ft.values.size() * sizeof(float)));
    if (!in) throw ParseError("pooled-vector file '" + path + "': truncated payload");
    return ft;
}

}  // namespace mudok
