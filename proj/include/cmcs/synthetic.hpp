#pragma once

// Synthetic skeleton dataset generator. Each class is a parameterized motion
// pattern on a fixed stick-figure topology: a class-specific oscillation
// frequency, a class-specific set of active joints, and class-specific phase
// offsets, plus per-sample jitter and coordinate noise. Deterministic given
// the seed.

#include <cmath>
#include <filesystem>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "cmcs/skeleton.hpp"

namespace cmcs::skel {

struct SyntheticDataset {
    DatasetManifest manifest;
    std::vector<SkeletonSequence> sequences; // parallel to manifest.entries
    BoneTopology topology;
};

// Deterministic rest pose: each joint sits at a fixed offset from its parent.
inline std::vector<std::array<float, 3>> rest_pose(const BoneTopology& topo) {
    const int V = topo.joints();
    std::vector<std::array<float, 3>> pos(V, {0.f, 0.f, 0.f});
    std::vector<bool> placed(V, false);
    placed[topo.root] = true;
    bool progress = true;
    while (progress) {
        progress = false;
        for (auto [child, parent] : topo.pairs) {
            if (placed[child] || !placed[parent]) continue;
            // golden-angle spiral gives well-spread, fixed limb directions
            double a = 2.399963 * child;
            double b = 0.741 * child;
            float dx = static_cast<float>(0.25 * std::cos(a) * std::cos(b));
            float dy = static_cast<float>(0.25 * std::sin(a) * std::cos(b));
            float dz = static_cast<float>(0.25 * std::sin(b));
            pos[child] = {pos[parent][0] + dx, pos[parent][1] + dy, pos[parent][2] + dz};
            placed[child] = true;
            progress = true;
        }
    }
    return pos;
}

struct SynthParams {
    int num_classes = 4;
    int per_class = 130;
    int T = 50;
    int V = 25;
    uint64_t seed = 0;
    float noise_sigma = 0.03f;
    float amplitude = 0.35f;
    // per-sample viewpoint nuisance: coordinates pass through I plus uniform
    // off-diagonal entries in [-view_shear, view_shear], like a camera shear
    float view_shear = 0.5f;
    int num_subjects = 13;
};

inline SyntheticDataset generate_synthetic_dataset(const SynthParams& p) {
    if (p.num_classes < 2) throw ParameterError("num_classes must be >= 2");
    if (p.per_class < 2) throw ParameterError("per_class must be >= 2");
    SyntheticDataset ds;
    ds.topology = topology_for(p.V);
    ds.manifest.num_classes = p.num_classes;
    const auto rest = rest_pose(ds.topology);

    std::mt19937_64 rng(p.seed);
    std::normal_distribution<float> gauss(0.f, 1.f);
    std::uniform_real_distribution<float> uni(-1.f, 1.f);

    for (int c = 0; c < p.num_classes; ++c) {
        const double freq = 1.0 + 0.75 * c;       // cycles per clip
        for (int i = 0; i < p.per_class; ++i) {
            SkeletonSequence seq;
            seq.T = p.T; seq.V = p.V; seq.C = 3; seq.M = 1;
            seq.label = c;
            seq.source_id = "synth_c" + std::to_string(c) + "_" + std::to_string(i);
            seq.data.assign(seq.size(), 0.f);

            const float phase_jitter = 0.15f * uni(rng);
            const float freq_jitter = 1.f + 0.02f * uni(rng);
            const float amp_jitter = 1.f + 0.1f * uni(rng);

            double view[3][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
            for (int r = 0; r < 3; ++r)
                for (int c2 = 0; c2 < 3; ++c2)
                    if (r != c2) view[r][c2] = p.view_shear * uni(rng);

            for (int v = 0; v < p.V; ++v) {
                // class-specific active-joint pattern and per-joint phase
                const bool active = ((v + c) % 3) != 0;
                const double amp = active ? p.amplitude * amp_jitter : 0.0;
                const double phase = 0.9 * c + 0.35 * v * (1 + (c % 2)) + phase_jitter;
                // class-dependent oscillation axis
                const double ax[3] = {std::cos(0.8 * c + 0.2 * v),
                                      std::sin(0.8 * c + 0.2 * v),
                                      std::cos(0.5 * c - 0.1 * v)};
                for (int t = 0; t < p.T; ++t) {
                    const double s = std::sin(2.0 * M_PI * freq * freq_jitter * t / p.T + phase);
                    double pos[3];
                    for (int ch = 0; ch < 3; ++ch)
                        pos[ch] = rest[v][ch] + amp * s * ax[ch];
                    for (int ch = 0; ch < 3; ++ch)
                        seq.at(t, v, ch, 0) = static_cast<float>(
                            view[ch][0] * pos[0] + view[ch][1] * pos[1] +
                            view[ch][2] * pos[2]) +
                            p.noise_sigma * gauss(rng);
                }
            }
            ManifestEntry e;
            e.label = c;
            e.subject = i % p.num_subjects;
            e.view = i % 3;
            e.path = seq.source_id + ".skl";
            ds.manifest.entries.push_back(e);
            ds.sequences.push_back(std::move(seq));
        }
    }
    return ds;
}

inline SyntheticDataset generate_synthetic_dataset(int num_classes, int per_class,
                                                   int T, int V, uint64_t seed) {
    SynthParams p;
    p.num_classes = num_classes;
    p.per_class = per_class;
    p.T = T;
    p.V = V;
    p.seed = seed;
    return generate_synthetic_dataset(p);
}

// Split by subject id: entries whose subject is in test_subjects form the
// test half. Returns index lists into manifest.entries.
inline std::pair<std::vector<int>, std::vector<int>>
split_by_subject(const DatasetManifest& m, const std::set<int>& test_subjects) {
    std::vector<int> train, test;
    for (int i = 0; i < static_cast<int>(m.entries.size()); ++i) {
        if (test_subjects.count(m.entries[i].subject))
            test.push_back(i);
        else
            train.push_back(i);
    }
    return {train, test};
}

// Writes sequence files, full/train/test manifests, and the topology file.
inline void write_synthetic_dataset(const SyntheticDataset& ds, const std::string& dir,
                                    const std::set<int>& test_subjects) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    DatasetManifest full = ds.manifest, train, test;
    train.num_classes = test.num_classes = full.num_classes;
    auto [tr, te] = split_by_subject(full, test_subjects);
    for (size_t i = 0; i < ds.sequences.size(); ++i) {
        std::string path = (fs::path(dir) / full.entries[i].path).string();
        write_sequence_file(ds.sequences[i], path);
        full.entries[i].path = ds.manifest.entries[i].path;
    }
    for (int i : tr) train.entries.push_back(full.entries[i]);
    for (int i : te) test.entries.push_back(full.entries[i]);
    write_manifest(full, (fs::path(dir) / "manifest.jsonl").string());
    write_manifest(train, (fs::path(dir) / "train.jsonl").string());
    write_manifest(test, (fs::path(dir) / "test.jsonl").string());
    write_topology(ds.topology, (fs::path(dir) / "topology.json").string());
}

} // namespace cmcs::skel
