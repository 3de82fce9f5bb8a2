#pragma once

// Skeleton sequence data model: preprocessing, the joint/motion/bone stream
// derivations, and the binary sequence / JSON manifest / JSON topology file
// formats.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmcs/errors.hpp"

namespace cmcs::skel {

struct SkeletonSequence {
    // (T, V, C, M) row-major
    std::vector<float> data;
    int T = 0, V = 0, C = 3, M = 1;
    std::optional<int> label;
    std::string source_id;

    float& at(int t, int v, int c, int m) {
        return data[((static_cast<size_t>(t) * V + v) * C + c) * M + m];
    }
    float at(int t, int v, int c, int m) const {
        return data[((static_cast<size_t>(t) * V + v) * C + c) * M + m];
    }
    size_t size() const { return static_cast<size_t>(T) * V * C * M; }

    void validate() const {
        if (T < 2 || V < 2 || C != 3 || M < 1)
            throw InvalidSequence("sequence dims out of range: T=" + std::to_string(T) +
                                  " V=" + std::to_string(V) + " C=" + std::to_string(C) +
                                  " M=" + std::to_string(M));
        if (data.size() != size())
            throw InvalidSequence("data size does not match dims");
        for (float x : data)
            if (!std::isfinite(x)) throw InvalidSequence("non-finite value in sequence");
    }
};

struct BoneTopology {
    std::vector<std::pair<int, int>> pairs; // (child, parent), length V
    int root = 0;

    int joints() const { return static_cast<int>(pairs.size()); }

    void validate() const {
        const int V = joints();
        if (V < 2) throw TopologyMismatch("topology needs at least 2 joints");
        std::vector<int> parent(V, -1);
        int self_pairs = 0;
        for (auto [c, p] : pairs) {
            if (c < 0 || c >= V || p < 0 || p >= V)
                throw TopologyMismatch("joint index out of range");
            if (parent[c] != -1) throw TopologyMismatch("duplicate child in pairs");
            parent[c] = p;
            if (c == p) ++self_pairs;
        }
        if (self_pairs != 1 || parent[root] != root)
            throw TopologyMismatch("pairs must form a tree with one self-parented root");
        // every joint must reach the root
        for (int v = 0; v < V; ++v) {
            int cur = v, hops = 0;
            while (cur != root) {
                cur = parent[cur];
                if (++hops > V) throw TopologyMismatch("cycle in topology");
            }
        }
    }

    int parent_of(int v) const {
        for (auto [c, p] : pairs)
            if (c == v) return p;
        throw TopologyMismatch("joint has no parent entry");
    }
};

struct StreamTriple {
    SkeletonSequence joint, motion, bone;
};

enum class SplitProtocol { cross_subject, cross_view, cross_setup, random_split };

struct ManifestEntry {
    std::string path;
    int label = 0;
    int subject = 0;
    int view = 0;
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    SplitProtocol split_protocol = SplitProtocol::cross_subject;
    int num_classes = 0;
};

// --- file formats ------------------------------------------------------

inline void write_sequence_file(const SkeletonSequence& seq, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open for write: " + path);
    out.write("SKL1", 4);
    auto put_u32 = [&](uint32_t x) {
        unsigned char b[4] = {static_cast<unsigned char>(x & 0xff),
                              static_cast<unsigned char>((x >> 8) & 0xff),
                              static_cast<unsigned char>((x >> 16) & 0xff),
                              static_cast<unsigned char>((x >> 24) & 0xff)};
        out.write(reinterpret_cast<char*>(b), 4);
    };
    put_u32(static_cast<uint32_t>(seq.T));
    put_u32(static_cast<uint32_t>(seq.V));
    put_u32(static_cast<uint32_t>(seq.C));
    put_u32(static_cast<uint32_t>(seq.M));
    static_assert(sizeof(float) == 4);
    out.write(reinterpret_cast<const char*>(seq.data.data()),
              static_cast<std::streamsize>(seq.data.size() * 4));
    if (!out) throw FormatError("short write: " + path);
}

inline SkeletonSequence read_sequence_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "SKL1", 4) != 0)
        throw FormatError("bad magic in " + path);
    auto get_u32 = [&]() -> uint32_t {
        unsigned char b[4];
        in.read(reinterpret_cast<char*>(b), 4);
        if (!in) throw FormatError("truncated header in " + path);
        return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
               (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
    };
    SkeletonSequence seq;
    seq.T = static_cast<int>(get_u32());
    seq.V = static_cast<int>(get_u32());
    seq.C = static_cast<int>(get_u32());
    seq.M = static_cast<int>(get_u32());
    if (seq.T < 2 || seq.V < 2 || seq.C != 3 || seq.M < 1)
        throw FormatError("invalid dims in header of " + path);
    seq.data.resize(seq.size());
    in.read(reinterpret_cast<char*>(seq.data.data()),
            static_cast<std::streamsize>(seq.data.size() * 4));
    if (static_cast<size_t>(in.gcount()) != seq.data.size() * 4)
        throw FormatError("truncated payload in " + path);
    seq.source_id = path;
    return seq;
}

inline void write_manifest(const DatasetManifest& m, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot open for write: " + path);
    for (const auto& e : m.entries) {
        nlohmann::json j{{"path", e.path}, {"label", e.label},
                         {"subject", e.subject}, {"view", e.view}};
        out << j.dump() << "\n";
    }
}

inline DatasetManifest read_manifest(const std::string& path, int num_classes,
                                     SplitProtocol proto = SplitProtocol::cross_subject) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open: " + path);
    DatasetManifest m;
    m.num_classes = num_classes;
    m.split_protocol = proto;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) throw FormatError("bad manifest line: " + line);
        ManifestEntry e;
        e.path = j.at("path").get<std::string>();
        e.label = j.at("label").get<int>();
        e.subject = j.at("subject").get<int>();
        e.view = j.at("view").get<int>();
        if (num_classes > 0 && (e.label < 0 || e.label >= num_classes))
            throw FormatError("label out of range in manifest");
        m.entries.push_back(std::move(e));
    }
    return m;
}

inline void write_topology(const BoneTopology& topo, const std::string& path) {
    nlohmann::json j = nlohmann::json::array();
    for (auto [c, p] : topo.pairs) j.push_back({c, p});
    std::ofstream out(path);
    if (!out) throw FormatError("cannot open for write: " + path);
    out << j.dump(2) << "\n";
}

inline BoneTopology read_topology(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open: " + path);
    nlohmann::json j;
    try { in >> j; } catch (const nlohmann::json::exception&) {
        throw FormatError("bad topology JSON: " + path);
    }
    BoneTopology topo;
    for (const auto& pr : j) {
        if (!pr.is_array() || pr.size() != 2)
            throw FormatError("topology entries must be [child, parent] pairs");
        int c = pr[0].get<int>(), p = pr[1].get<int>();
        topo.pairs.emplace_back(c, p);
        if (c == p) topo.root = c;
    }
    topo.validate();
    return topo;
}

// The 25-joint human tree used as the default topology (spine-rooted,
// NTU-style joint ordering). Joint 1 is the mid-spine root.
inline BoneTopology default_topology25() {
    BoneTopology t;
    t.root = 1;
    static const int parents[25] = {
        1, 1, 20, 2, 20, 4, 5, 6, 20, 8, 9, 10, 0,
        12, 13, 14, 0, 16, 17, 18, 1, 7, 7, 11, 11};
    for (int v = 0; v < 25; ++v) t.pairs.emplace_back(v, parents[v]);
    t.validate();
    return t;
}

// Stick-figure topology for arbitrary V: joint 0 is the root of a chain with
// short limb branches every third joint. Deterministic; used by the
// synthetic generator for non-25 joint counts.
inline BoneTopology make_chain_topology(int V) {
    BoneTopology t;
    t.root = 0;
    t.pairs.emplace_back(0, 0);
    for (int v = 1; v < V; ++v) {
        int parent = (v % 3 == 0) ? std::max(0, v - 3) : v - 1;
        t.pairs.emplace_back(v, parent);
    }
    t.validate();
    return t;
}

inline BoneTopology topology_for(int V) {
    return V == 25 ? default_topology25() : make_chain_topology(V);
}

// --- preprocessing & streams ------------------------------------------

// Uniform temporal resampling indices (linspace-style, endpoints included
// when target > 1).
inline std::vector<int> resample_indices(int T, int target) {
    std::vector<int> idx(target);
    if (target == 1) { idx[0] = 0; return idx; }
    for (int i = 0; i < target; ++i) {
        double pos = static_cast<double>(i) * (T - 1) / (target - 1);
        idx[i] = static_cast<int>(std::lround(pos));
    }
    return idx;
}

inline SkeletonSequence preprocess(const SkeletonSequence& seq, int target_frames,
                                   int center_joint) {
    if (seq.T == 0) throw InvalidSequence("empty sequence");
    seq.validate();
    if (target_frames < 2) throw InvalidSequence("target_frames must be >= 2");
    if (center_joint < 0 || center_joint >= seq.V)
        throw InvalidSequence("center_joint out of range");

    SkeletonSequence out;
    out.T = target_frames;
    out.V = seq.V;
    out.C = seq.C;
    out.M = seq.M;
    out.label = seq.label;
    out.source_id = seq.source_id;
    out.data.assign(out.size(), 0.0f);

    const auto idx = resample_indices(seq.T, target_frames);
    float offset[3] = {seq.at(0, center_joint, 0, 0), seq.at(0, center_joint, 1, 0),
                       seq.at(0, center_joint, 2, 0)};
    // zero-padded person slots stay exactly zero
    std::vector<bool> slot_empty(seq.M, true);
    for (int m = 0; m < seq.M; ++m)
        for (int t = 0; t < seq.T && slot_empty[m]; ++t)
            for (int v = 0; v < seq.V && slot_empty[m]; ++v)
                for (int c = 0; c < seq.C; ++c)
                    if (seq.at(t, v, c, m) != 0.0f) { slot_empty[m] = false; break; }
    for (int t = 0; t < target_frames; ++t)
        for (int v = 0; v < seq.V; ++v)
            for (int c = 0; c < seq.C; ++c)
                for (int m = 0; m < seq.M; ++m)
                    out.at(t, v, c, m) = slot_empty[m]
                        ? 0.0f
                        : seq.at(idx[t], v, c, m) - offset[c];
    return out;
}

inline SkeletonSequence derive_motion(const SkeletonSequence& seq) {
    if (seq.T < 2) throw InvalidSequence("derive_motion needs T >= 2");
    SkeletonSequence out = seq;
    for (int t = 0; t < seq.T - 1; ++t)
        for (int v = 0; v < seq.V; ++v)
            for (int c = 0; c < seq.C; ++c)
                for (int m = 0; m < seq.M; ++m)
                    out.at(t, v, c, m) = seq.at(t + 1, v, c, m) - seq.at(t, v, c, m);
    for (int v = 0; v < seq.V; ++v)
        for (int c = 0; c < seq.C; ++c)
            for (int m = 0; m < seq.M; ++m)
                out.at(seq.T - 1, v, c, m) = 0.0f;
    return out;
}

inline SkeletonSequence derive_bone(const SkeletonSequence& seq,
                                    const BoneTopology& topology) {
    if (topology.joints() != seq.V)
        throw TopologyMismatch("topology has " + std::to_string(topology.joints()) +
                               " joints, sequence has " + std::to_string(seq.V));
    SkeletonSequence out = seq;
    for (auto [child, parent] : topology.pairs)
        for (int t = 0; t < seq.T; ++t)
            for (int c = 0; c < seq.C; ++c)
                for (int m = 0; m < seq.M; ++m)
                    out.at(t, child, c, m) =
                        seq.at(t, child, c, m) - seq.at(t, parent, c, m);
    return out;
}

inline StreamTriple derive_streams(const SkeletonSequence& seq,
                                   const BoneTopology& topology) {
    return {seq, derive_motion(seq), derive_bone(seq, topology)};
}

} // namespace cmcs::skel
