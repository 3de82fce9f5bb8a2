#pragma once

// Stochastic augmentations producing the positive pair: a shared random
// shear matrix per call, and a temporal crop over a reflection-padded
// sequence.

#include <random>

#include "cmcs/errors.hpp"
#include "cmcs/skeleton.hpp"

namespace cmcs::aug {

using skel::SkeletonSequence;

enum class AugOrder { crop_then_shear, shear_then_crop };

struct AugmentationParams {
    double shear_amplitude = 0.5;
    int padding_ratio = 6;
    AugOrder order = AugOrder::crop_then_shear;
    uint64_t seed = 0;
};

// One shear matrix A per call, shared across all frames/joints/persons.
// A has unit diagonal and six off-diagonal factors ~ U[-amplitude, amplitude].
inline SkeletonSequence shear(const SkeletonSequence& seq, double amplitude,
                              std::mt19937_64& rng) {
    if (seq.C != 3) throw ChannelError("shear requires C = 3");
    if (amplitude < 0) throw ParameterError("shear amplitude must be >= 0");
    std::uniform_real_distribution<double> u(-amplitude, amplitude);
    double A[3][3] = {{1, u(rng), u(rng)}, {u(rng), 1, u(rng)}, {u(rng), u(rng), 1}};
    SkeletonSequence out = seq;
    for (int t = 0; t < seq.T; ++t)
        for (int v = 0; v < seq.V; ++v)
            for (int m = 0; m < seq.M; ++m) {
                double p[3] = {seq.at(t, v, 0, m), seq.at(t, v, 1, m), seq.at(t, v, 2, m)};
                for (int r = 0; r < 3; ++r)
                    out.at(t, v, r, m) = static_cast<float>(
                        A[r][0] * p[0] + A[r][1] * p[1] + A[r][2] * p[2]);
            }
    return out;
}

// Reflection-pad P = floor(T / padding_ratio) frames at each end, then crop a
// random window of the original length. Output frames are exact copies of
// input frames.
inline SkeletonSequence temporal_crop(const SkeletonSequence& seq, int padding_ratio,
                                      std::mt19937_64& rng) {
    if (seq.T < 2) throw InvalidSequence("temporal_crop needs T >= 2");
    if (padding_ratio < 1) throw ParameterError("padding_ratio must be >= 1");
    const int T = seq.T;
    const int P = T / padding_ratio;
    if (P == 0) return seq;

    // padded frame index list: reversed head, original, reversed tail
    std::vector<int> frames;
    frames.reserve(T + 2 * P);
    for (int i = P - 1; i >= 0; --i) frames.push_back(i);
    for (int i = 0; i < T; ++i) frames.push_back(i);
    for (int i = T - 1; i >= T - P; --i) frames.push_back(i);

    std::uniform_int_distribution<int> offs(0, 2 * P);
    const int start = offs(rng);
    SkeletonSequence out = seq;
    for (int t = 0; t < T; ++t) {
        const int src = frames[start + t];
        for (int v = 0; v < seq.V; ++v)
            for (int c = 0; c < seq.C; ++c)
                for (int m = 0; m < seq.M; ++m)
                    out.at(t, v, c, m) = seq.at(src, v, c, m);
    }
    return out;
}

inline SkeletonSequence augment_once(const SkeletonSequence& seq,
                                     const AugmentationParams& params,
                                     std::mt19937_64& rng) {
    if (params.order == AugOrder::crop_then_shear)
        return shear(temporal_crop(seq, params.padding_ratio, rng),
                     params.shear_amplitude, rng);
    return temporal_crop(shear(seq, params.shear_amplitude, rng),
                         params.padding_ratio, rng);
}

inline std::pair<SkeletonSequence, SkeletonSequence>
augment_pair(const SkeletonSequence& seq, const AugmentationParams& params,
             std::mt19937_64& rng) {
    auto x = augment_once(seq, params, rng);
    auto xp = augment_once(seq, params, rng);
    return {std::move(x), std::move(xp)};
}

} // namespace cmcs::aug
