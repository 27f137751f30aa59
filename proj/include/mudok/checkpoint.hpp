#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mudok/tensor.hpp"

namespace mudok {

struct CheckpointError : std::runtime_error {
    explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

// Named-tensor container. Layout: magic "MDKC", u32 version=1, u32 tensor
// count, then per tensor u16 name length, name bytes, u8 dtype (0 = f32),
// u8 rank, rank x u64 dims, row-major little-endian f32 payload. A JSON config
// sidecar sits next to it with the same basename plus ".json".
struct Checkpoint {
    std::vector<std::pair<std::string, std::vector<float>>> tensors;
    std::vector<Shape> shapes;
    nlohmann::json config;

    void add(const std::string& name, const Shape& shape, const std::vector<float>& data) {
        for (const auto& [n, d] : tensors)
            if (n == name) throw CheckpointError("duplicate tensor name '" + name + "'");
        if (shape_numel(shape) != data.size())
            throw CheckpointError("tensor '" + name + "' data does not match shape");
        tensors.emplace_back(name, data);
        shapes.push_back(shape);
    }

    template <class T>
    void add_tensor(const std::string& name, const TensorPtr<T>& t) {
        std::vector<float> data(t->data.size());
        for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(t->data[i]);
        add(name, t->shape, data);
    }

    const std::vector<float>* find(const std::string& name, Shape* shape_out = nullptr) const {
        for (std::size_t i = 0; i < tensors.size(); ++i)
            if (tensors[i].first == name) {
                if (shape_out) *shape_out = shapes[i];
                return &tensors[i].second;
            }
        return nullptr;
    }

    // Copies a stored tensor into an existing node, which must already have
    // the right shape; mismatches name the offending tensor.
    template <class T>
    void load_into(const std::string& name, const TensorPtr<T>& t) const {
        Shape shape;
        const auto* data = find(name, &shape);
        if (!data) throw CheckpointError("checkpoint is missing tensor '" + name + "'");
        if (shape != t->shape)
            throw CheckpointError("tensor '" + name + "' has shape " + shape_str(shape) +
                                  " but the model expects " + shape_str(t->shape));
        for (std::size_t i = 0; i < data->size(); ++i) t->data[i] = static_cast<T>((*data)[i]);
    }
};

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("cannot write checkpoint '" + path + "'");
    out.write("MDKC", 4);
    const std::uint32_t version = 1;
    out.write(reinterpret_cast<const char*>(&version), 4);
    const std::uint32_t count = static_cast<std::uint32_t>(ckpt.tensors.size());
    out.write(reinterpret_cast<const char*>(&count), 4);
    for (std::size_t i = 0; i < ckpt.tensors.size(); ++i) {
        const auto& [name, data] = ckpt.tensors[i];
        const std::uint16_t name_len = static_cast<std::uint16_t>(name.size());
        out.write(reinterpret_cast<const char*>(&name_len), 2);
        out.write(name.data(), name_len);
        const std::uint8_t dtype = 0;
        const std::uint8_t rank = static_cast<std::uint8_t>(ckpt.shapes[i].size());
        out.write(reinterpret_cast<const char*>(&dtype), 1);
        out.write(reinterpret_cast<const char*>(&rank), 1);
        for (std::size_t d = 0; d < rank; ++d) {
            const std::uint64_t dim = ckpt.shapes[i][d];
            out.write(reinterpret_cast<const char*>(&dim), 8);
        }
        out.write(reinterpret_cast<const char*>(data.data()),
                  static_cast<std::streamsize>(data.size() * sizeof(float)));
    }
    std::ofstream side(path + ".json", std::ios::binary);
    side << ckpt.config.dump(2) << '\n';
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "MDKC", 4) != 0)
        throw CheckpointError("checkpoint '" + path + "': bad magic");
    std::uint32_t version = 0, count = 0;
    in.read(reinterpret_cast<char*>(&version), 4);
    in.read(reinterpret_cast<char*>(&count), 4);
    if (!in || version != 1)
        throw CheckpointError("checkpoint '" + path + "': unsupported version " +
                              std::to_string(version));
    Checkpoint ckpt;
    std::unordered_set<std::string> seen;
    for (std::uint32_t t = 0; t < count; ++t) {
        std::uint16_t name_len = 0;
        in.read(reinterpret_cast<char*>(&name_len), 2);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        std::uint8_t dtype = 0, rank = 0;
        in.read(reinterpret_cast<char*>(&dtype), 1);
        in.read(reinterpret_cast<char*>(&rank), 1);
        if (!in) throw CheckpointError("checkpoint '" + path + "': truncated header");
        if (dtype != 0)
            throw CheckpointError("checkpoint '" + path + "': unknown dtype for '" + name + "'");
        if (!seen.insert(name).second)
            throw CheckpointError("checkpoint '" + path + "': duplicate tensor '" + name + "'");
        Shape shape(rank);
        for (auto& d : shape) {
            std::uint64_t dim = 0;
            in.read(reinterpret_cast<char*>(&dim), 8);
            d = static_cast<std::size_t>(dim);
        }
        std::vector<float> data(shape_numel(shape));
        in.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(data.size() * sizeof(float)));
        if (!in)
            throw CheckpointError("checkpoint '" + path + "': truncated payload for '" + name +
                                  "'");
        ckpt.tensors.emplace_back(std::move(name), std::move(data));
        ckpt.shapes.push_back(std::move(shape));
    }
    std::ifstream side(path + ".json");
    if (side) {
        try {
            side >> ckpt.config;
        } catch (const std::exception& e) {
            throw CheckpointError("checkpoint sidecar '" + path + ".json': " + e.what());
        }
    }
    return ckpt;
}

}  // namespace mudok
