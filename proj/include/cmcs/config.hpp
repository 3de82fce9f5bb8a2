#pragma once

// Flat INI-style run configuration with dotted command-line overrides,
// schema validation, and a content hash recorded in every output artifact.

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cmcs/errors.hpp"

namespace cmcs::cfg {

// known keys per section; unknown keys are rejected
inline const std::map<std::string, std::set<std::string>>& schema() {
    static const std::map<std::string, std::set<std::string>> s = {
        {"data", {"dir", "num_classes", "target_frames", "center_joint", "topology"}},
        {"aug", {"shear_amplitude", "padding_ratio", "order"}},
        {"model", {"encoder", "feature_dim", "channel_scale", "hidden_dim", "out_dim"}},
        {"train", {"batch_size", "total_epochs", "stage1_epochs", "lr", "momentum",
                   "weight_decay", "tau", "alpha", "beta", "lambda", "gamma", "top_k",
                   "streams", "seed", "checkpoint_every", "strict_vote", "use_predictor",
                   "loss"}},
        {"eval", {"knn_k", "linear_lr", "linear_epochs", "linear_drop_epoch",
                  "linear_drop_factor", "semi_lr", "semi_epochs", "semi_drop_epoch",
                  "semi_drop_factor", "batch_size", "fraction", "ensemble", "seed"}},
    };
    return s;
}

inline const std::map<std::string, std::string>& defaults() {
    static const std::map<std::string, std::string> d = {
        {"data.num_classes", "4"},
        {"data.target_frames", "50"},
        {"data.center_joint", "1"},
        {"aug.shear_amplitude", "0.5"},
        {"aug.padding_ratio", "6"},
        {"aug.order", "crop_then_shear"},
        {"model.encoder", "graph_conv"},
        {"model.feature_dim", "128"},
        {"model.channel_scale", "0.25"},
        {"model.hidden_dim", "512"},
        {"model.out_dim", "128"},
        {"train.batch_size", "32"},
        {"train.total_epochs", "30"},
        {"train.stage1_epochs", "20"},
        {"train.lr", "0.1"},
        {"train.momentum", "0.9"},
        {"train.weight_decay", "0.0001"},
        {"train.tau", "0.996"},
        {"train.alpha", "1"},
        {"train.beta", "1"},
        {"train.lambda", "1"},
        {"train.gamma", "10"},
        {"train.top_k", "2"},
        {"train.streams", "joint,motion,bone"},
        {"train.seed", "0"},
        {"train.checkpoint_every", "10"},
        {"train.strict_vote", "false"},
        {"train.use_predictor", "true"},
        {"train.loss", "cmal"},
        {"eval.knn_k", "20"},
        {"eval.linear_lr", "3.0"},
        {"eval.linear_epochs", "100"},
        {"eval.linear_drop_epoch", "80"},
        {"eval.linear_drop_factor", "10"},
        {"eval.semi_lr", "0.1"},
        {"eval.semi_epochs", "150"},
        {"eval.semi_drop_epoch", "80"},
        {"eval.semi_drop_factor", "10"},
        {"eval.batch_size", "128"},
        {"eval.fraction", "0.1"},
        {"eval.ensemble", "mean"},
        {"eval.seed", "0"},
    };
    return d;
}

struct RunConfig {
    std::map<std::string, std::string> values; // "section.key" -> value

    static void check_key(const std::string& dotted) {
        auto dot = dotted.find('.');
        if (dot == std::string::npos)
            throw ConfigError("key must be section.key: " + dotted);
        std::string section = dotted.substr(0, dot);
        std::string key = dotted.substr(dot + 1);
        auto it = schema().find(section);
        if (it == schema().end() || !it->second.count(key))
            throw ConfigError("unknown config key: " + dotted);
    }

    void set(const std::string& dotted, const std::string& value) {
        check_key(dotted);
        values[dotted] = value;
    }

    const std::string& get(const std::string& dotted) const {
        auto it = values.find(dotted);
        if (it != values.end()) return it->second;
        auto d = defaults().find(dotted);
        if (d != defaults().end()) return d->second;
        throw ConfigError("missing config key: " + dotted);
    }
    bool has(const std::string& dotted) const {
        return values.count(dotted) || defaults().count(dotted);
    }
    int get_int(const std::string& k) const {
        try { return std::stoi(get(k)); }
        catch (const std::logic_error&) { throw ConfigError("bad integer for " + k); }
    }
    double get_double(const std::string& k) const {
        try { return std::stod(get(k)); }
        catch (const std::logic_error&) { throw ConfigError("bad number for " + k); }
    }
    bool get_bool(const std::string& k) const {
        const std::string& v = get(k);
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        throw ConfigError("bad boolean for " + k);
    }
    uint64_t get_u64(const std::string& k) const {
        try { return std::stoull(get(k)); }
        catch (const std::logic_error&) { throw ConfigError("bad integer for " + k); }
    }

    // canonical text: defaults merged with overrides, sorted
    std::string canonical() const {
        std::map<std::string, std::string> merged = defaults();
        for (const auto& [k, v] : values) merged[k] = v;
        std::ostringstream out;
        for (const auto& [k, v] : merged) out << k << "=" << v << "\n";
        return out.str();
    }

    // FNV-1a 64-bit over the canonical form
    std::string hash() const {
        uint64_t h = 1469598103934665603ull;
        for (unsigned char c : canonical()) {
            h ^= c;
            h *= 1099511628211ull;
        }
        std::ostringstream out;
        out << std::hex << h;
        return out.str();
    }
};

inline std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline RunConfig parse_ini(std::istream& in) {
    RunConfig cfg;
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[' && t.back() == ']') {
            section = trim(t.substr(1, t.size() - 2));
            if (!schema().count(section))
                throw ConfigError("unknown config section: [" + section + "]");
            continue;
        }
        auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        if (section.empty())
            throw ConfigError("line " + std::to_string(lineno) + ": key outside a section");
        cfg.set(section + "." + trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return cfg;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    return parse_ini(in);
}

// "--section.key=value" overrides
inline void apply_overrides(RunConfig& cfg, const std::vector<std::string>& overrides) {
    for (const auto& o : overrides) {
        std::string s = o;
        if (s.rfind("--", 0) == 0) s = s.substr(2);
        auto eq = s.find('=');
        if (eq == std::string::npos)
            throw ConfigError("override must be --section.key=value: " + o);
        cfg.set(s.substr(0, eq), s.substr(eq + 1));
    }
}

} // namespace cmcs::cfg
