#pragma once

// Loss functions and the pseudo-label pipeline: normalized MSE, the
// symmetrized BYOL loss, the adversarial CMAL loss, batch cosine similarity,
// sharpen / AND-fusion / inter-stream voting, and the cross-stream
// similarity loss.

#include <array>
#include <algorithm>
#include <numeric>
#include <vector>

#include "cmcs/autograd.hpp"
#include "cmcs/errors.hpp"

namespace cmcs::loss {

using ag::Mat;
using ag::Var;

struct LossWeights {
    double alpha = 1.0;   // CMAL attract
    double beta = 1.0;    // CMAL repel
    double lambda_ = 1.0; // stage-2 CMAL
    double gamma = 10.0;  // stage-2 CSCL
};

struct PseudoLabelMatrix {
    Mat matrix; // binary N x N, diagonal all 1
    int k_used = 0;
};

// Similarity matrices in fixed order: S_joint, S'_joint, S_motion, S'_motion,
// S_bone, S'_bone. All taken from the same batch.
struct SimilarityBundle {
    std::array<Var, 6> sims;
};

inline constexpr double kCsclEps = 1e-6;

// 2 - 2 <a,b> / (||a|| ||b||) for a single pair of vectors.
inline double normalized_mse(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    double na = a.norm(), nb = b.norm();
    if (na == 0.0 || nb == 0.0) throw DegenerateVector("normalized_mse: zero-norm input");
    return 2.0 - 2.0 * a.dot(b) / (na * nb);
}

// Mean over rows of normalized_mse(a_i, b_i), differentiable in both.
inline Var mean_normalized_mse(const Var& a, const Var& b) {
    if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols())
        throw ShapeError("mean_normalized_mse: shape mismatch");
    Var an = ag::row_l2_normalize(a);
    Var bn = ag::row_l2_normalize(b);
    double n = static_cast<double>(a->value.rows());
    return ag::add_scalar(ag::scale(ag::sum(ag::mul(an, bn)), -2.0 / n), 2.0);
}

// Symmetrized BYOL loss: predictions are regressed onto the *other*
// augment's target projection. z_t and z_tp must be constants (stop-grad).
inline Var byol_loss(const Var& p, const Var& pp, const Var& z_t, const Var& z_tp) {
    return ag::add(mean_normalized_mse(p, z_tp), mean_normalized_mse(pp, z_t));
}

// alpha * L1 - beta * L2: attract the two online predictions to each other,
// repel each from its own target projection.
inline Var cmal_loss(const Var& p, const Var& pp, const Var& z_t, const Var& z_tp,
                     const LossWeights& w) {
    Var l1 = mean_normalized_mse(p, pp);
    Var l2 = ag::scale(ag::add(mean_normalized_mse(p, z_t),
                               mean_normalized_mse(pp, z_tp)), 0.5);
    return ag::sub(ag::scale(l1, w.alpha), ag::scale(l2, w.beta));
}

inline void check_rows_normalized(const Mat& m, const char* what) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        if (std::abs(m.row(i).norm() - 1.0) > 1e-4)
            throw NormalizationError(std::string(what) + ": rows must be L2-normalized");
}

// S = Q * Kp^T over L2-normalized rows.
inline Var batch_similarity(const Var& q, const Var& kp) {
    if (q->value.cols() != kp->value.cols())
        throw ShapeError("batch_similarity: feature dims differ");
    check_rows_normalized(q->value, "batch_similarity Q");
    check_rows_normalized(kp->value, "batch_similarity K'");
    return ag::matmul(q, kp, false, true);
}

inline Mat batch_similarity(const Mat& q, const Mat& kp) {
    return batch_similarity(ag::constant(q), ag::constant(kp))->value;
}

// Diagonal plus top-k off-diagonal entries per row set to 1. Ties broken by
// lowest column index.
inline Mat sharpen(const Mat& s, int k) {
    const Eigen::Index n = s.rows();
    if (s.cols() != n) throw ShapeError("sharpen: matrix must be square");
    if (k < 0 || k > n - 1) throw ParameterError("sharpen: k out of [0, N-1]");
    Mat out = Mat::Zero(n, n);
    std::vector<int> cols;
    for (Eigen::Index i = 0; i < n; ++i) {
        out(i, i) = 1.0;
        cols.clear();
        for (Eigen::Index j = 0; j < n; ++j)
            if (j != i) cols.push_back(static_cast<int>(j));
        std::sort(cols.begin(), cols.end(), [&](int a, int b) {
            if (s(i, a) != s(i, b)) return s(i, a) > s(i, b);
            return a < b;
        });
        for (int r = 0; r < k; ++r) out(i, cols[r]) = 1.0;
    }
    return out;
}

inline void check_binary(const Mat& m, const char* what) {
    for (Eigen::Index i = 0; i < m.size(); ++i)
        if (m.data()[i] != 0.0 && m.data()[i] != 1.0)
            throw ParameterError(std::string(what) + ": input must be binary");
}

// Elementwise AND of the two sharpened within-stream similarity matrices.
inline PseudoLabelMatrix intra_stream_pseudo(const Mat& s, const Mat& sp, int k) {
    if (s.rows() != sp.rows() || s.cols() != sp.cols())
        throw ShapeError("intra_stream_pseudo: shape mismatch");
    PseudoLabelMatrix out;
    out.k_used = k;
    out.matrix = sharpen(s, k).cwiseProduct(sharpen(sp, k));
    return out;
}

// Majority vote across the three streams' binary labels; strict mode
// requires unanimity instead.
inline PseudoLabelMatrix inter_stream_vote(const Mat& a, const Mat& b, const Mat& c,
                                           bool strict = false) {
    if (a.rows() != b.rows() || a.rows() != c.rows() ||
        a.cols() != b.cols() || a.cols() != c.cols())
        throw ShapeError("inter_stream_vote: shape mismatch");
    check_binary(a, "inter_stream_vote");
    check_binary(b, "inter_stream_vote");
    check_binary(c, "inter_stream_vote");
    const double need = strict ? 3.0 : 2.0;
    PseudoLabelMatrix out;
    out.matrix = ((a + b + c).array() >= need).cast<double>().matrix();
    return out;
}

// Cross-stream similarity loss. Cosine similarities are mapped to
// probabilities by sigma(s) = clamp((s+1)/2, eps, 1-eps); the binary label
// supervises all six matrices, averaged over elements and matrices.
inline Var cscl_loss(const PseudoLabelMatrix& label, const SimilarityBundle& bundle) {
    check_binary(label.matrix, "cscl_loss label");
    Var label_c = ag::constant(label.matrix);
    Var inv_label_c = ag::constant(Mat((1.0 - label.matrix.array()).matrix()));
    Var total;
    for (const auto& s : bundle.sims) {
        if (s->value.rows() != label.matrix.rows() ||
            s->value.cols() != label.matrix.cols())
            throw ShapeError("cscl_loss: similarity/label shape mismatch");
        Var sigma = ag::clamp(ag::scale(ag::add_scalar(s, 1.0), 0.5),
                              kCsclEps, 1.0 - kCsclEps);
        Var one_minus = ag::add_scalar(ag::scale(sigma, -1.0), 1.0);
        Var term = ag::add(ag::mul(label_c, ag::log_op(sigma)),
                           ag::mul(inv_label_c, ag::log_op(one_minus)));
        Var m = ag::scale(ag::mean(term), -0.5);
        total = total ? ag::add(total, m) : m;
    }
    return ag::scale(total, 1.0 / 6.0);
}

// Full pipeline from the six raw similarity matrices to the voted label.
inline PseudoLabelMatrix compute_pseudo_label(const SimilarityBundle& bundle, int k,
                                              bool strict = false) {
    auto j = intra_stream_pseudo(bundle.sims[0]->value, bundle.sims[1]->value, k);
    auto m = intra_stream_pseudo(bundle.sims[2]->value, bundle.sims[3]->value, k);
    auto b = intra_stream_pseudo(bundle.sims[4]->value, bundle.sims[5]->value, k);
    auto out = inter_stream_vote(j.matrix, m.matrix, b.matrix, strict);
    out.k_used = k;
    return out;
}

} // namespace cmcs::loss
