#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace mudok {

// Uniform result container: every command emits one of these, both as JSON
// ({"command", "seed", "rows": [{"name", "metrics"}]}) and as an aligned
// plain-text table.
struct Report {
    struct Row {
        std::string name;
        std::map<std::string, double> metrics;
    };

    std::string command;
    std::uint64_t seed = 0;
    std::vector<Row> rows;
    nlohmann::json extra;  // command-specific payload (census, timings, paths)

    void add_row(const std::string& name, const std::map<std::string, double>& metrics) {
        rows.push_back({name, metrics});
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["command"] = command;
        j["seed"] = seed;
        j["rows"] = nlohmann::json::array();
        for (const auto& r : rows) {
            nlohmann::json row;
            row["name"] = r.name;
            row["metrics"] = r.metrics;
            j["rows"].push_back(row);
        }
        if (!extra.is_null()) j["extra"] = extra;
        return j;
    }

    std::string to_table() const {
        // union of metric names, in first-seen order
        std::vector<std::string> cols;
        for (const auto& r : rows)
            for (const auto& [k, v] : r.metrics)
                if (std::find(cols.begin(), cols.end(), k) == cols.end()) cols.push_back(k);
        std::size_t name_w = 4;
        for (const auto& r : rows) name_w = std::max(name_w, r.name.size());

        auto fmt = [](double v) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%.4f", v);
            return std::string(buf);
        };
        std::vector<std::size_t> col_w(cols.size());
        for (std::size_t c = 0; c < cols.size(); ++c) {
            col_w[c] = cols[c].size();
            for (const auto& r : rows) {
                auto it = r.metrics.find(cols[c]);
                if (it != r.metrics.end()) col_w[c] = std::max(col_w[c], fmt(it->second).size());
            }
        }
        std::string out;
        auto pad = [&out](const std::string& s, std::size_t w) {
            out += s;
            out.append(w > s.size() ? w - s.size() : 0, ' ');
        };
        pad("name", name_w);
        for (std::size_t c = 0; c < cols.size(); ++c) {
            out += "  ";
            pad(cols[c], col_w[c]);
        }
        out += '\n';
        for (const auto& r : rows) {
            pad(r.name, name_w);
            for (std::size_t c = 0; c < cols.size(); ++c) {
                out += "  ";
                auto it = r.metrics.find(cols[c]);
                pad(it == r.metrics.end() ? "-" : fmt(it->second), col_w[c]);
            }
            out += '\n';
        }
        return out;
    }

    void write(const std::string& json_path) const {
        std::ofstream f(json_path, std::ios::binary);
        f << to_json().dump(2) << '\n';
    }
};

}  // namespace mudok
