#pragma once

// Small reverse-mode autodiff over dense Eigen matrices. A forward pass
// builds a tape of shared nodes; backward() walks it once in reverse
// topological order. Leaves wrap Parameter storage and accumulate into
// Parameter::grad, so anything forwarded through constant() is structurally
// cut off from gradients (the stop-gradient contract).

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "cmcs/errors.hpp"

namespace cmcs::ag {

using Mat = Eigen::MatrixXd;

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Mat value;
    Mat grad;                  // same shape as value, lazily allocated
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backprop; // scatters this->grad into parents

    void ensure_grad() {
        if (grad.size() == 0) grad = Mat::Zero(value.rows(), value.cols());
    }
};

// Trainable (or EMA-held) matrix with gradient and optimizer slots.
struct Parameter {
    Mat value;
    Mat grad;
    Mat velocity; // SGD momentum buffer

    explicit Parameter(Mat v = Mat())
        : value(std::move(v)),
          grad(Mat::Zero(value.rows(), value.cols())),
          velocity(Mat::Zero(value.rows(), value.cols())) {}

    void zero_grad() { grad.setZero(); }
};

inline Var constant(Mat v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    return n;
}

// Leaf node: backward accumulates into the parameter's grad buffer.
inline Var leaf(Parameter& p) {
    auto n = std::make_shared<Node>();
    n->value = p.value;
    n->requires_grad = true;
    Parameter* raw = &p;
    n->backprop = [raw](Node& self) { raw->grad += self.grad; };
    return n;
}

namespace detail {

inline Var make_op(Mat value, std::vector<Var> parents,
                   std::function<void(Node&)> back) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    bool any = false;
    for (const auto& p : parents) any = any || p->requires_grad;
    if (any) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backprop = std::move(back);
    }
    return n;
}

} // namespace detail

inline Var matmul(const Var& a, const Var& b, bool ta = false, bool tb = false) {
    Mat va = ta ? a->value.transpose() : a->value;
    Mat vb = tb ? b->value.transpose() : b->value;
    if (va.cols() != vb.rows()) throw ShapeError("matmul: inner dims differ");
    return detail::make_op(va * vb, {a, b}, [ta, tb](Node& self) {
        const Mat& g = self.grad;
        Node& A = *self.parents[0];
        Node& B = *self.parents[1];
        if (A.requires_grad) {
            A.ensure_grad();
            Mat vb = tb ? B.value.transpose() : B.value;
            if (ta)
                A.grad += (g * vb.transpose()).transpose();
            else
                A.grad += g * vb.transpose();
        }
        if (B.requires_grad) {
            B.ensure_grad();
            Mat va = ta ? A.value.transpose() : A.value;
            if (tb)
                B.grad += (va.transpose() * g).transpose();
            else
                B.grad += va.transpose() * g;
        }
    });
}

inline Var add(const Var& a, const Var& b) {
    if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols())
        throw ShapeError("add: shape mismatch");
    return detail::make_op(a->value + b->value, {a, b}, [](Node& self) {
        for (auto& p : self.parents)
            if (p->requires_grad) { p->ensure_grad(); p->grad += self.grad; }
    });
}

inline Var sub(const Var& a, const Var& b) {
    if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols())
        throw ShapeError("sub: shape mismatch");
    return detail::make_op(a->value - b->value, {a, b}, [](Node& self) {
        Node& A = *self.parents[0];
        Node& B = *self.parents[1];
        if (A.requires_grad) { A.ensure_grad(); A.grad += self.grad; }
        if (B.requires_grad) { B.ensure_grad(); B.grad -= self.grad; }
    });
}

inline Var mul(const Var& a, const Var& b) {
    if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols())
        throw ShapeError("mul: shape mismatch");
    return detail::make_op(a->value.cwiseProduct(b->value), {a, b}, [](Node& self) {
        Node& A = *self.parents[0];
        Node& B = *self.parents[1];
        if (A.requires_grad) { A.ensure_grad(); A.grad += self.grad.cwiseProduct(B.value); }
        if (B.requires_grad) { B.ensure_grad(); B.grad += self.grad.cwiseProduct(A.value); }
    });
}

inline Var scale(const Var& a, double c) {
    return detail::make_op(a->value * c, {a}, [c](Node& self) {
        Node& A = *self.parents[0];
        if (A.requires_grad) { A.ensure_grad(); A.grad += self.grad * c; }
    });
}

inline Var add_scalar(const Var& a, double c) {
    return detail::make_op(a->value.array() + c, {a}, [](Node& self) {
        Node& A = *self.parents[0];
        if (A.requires_grad) { A.ensure_grad(); A.grad += self.grad; }
    });
}

// Broadcast a 1 x C row vector over every row of a.
inline Var add_rowvec(const Var& a, const Var& bias) {
    if (bias->value.rows() != 1 || bias->value.cols() != a->value.cols())
        throw ShapeError("add_rowvec: bias must be 1 x cols(a)");
    Mat out = a->value;
    out.rowwise() += Eigen::RowVectorXd(bias->value.row(0));
    return detail::make_op(std::move(out), {a, bias}, [](Node& self) {
        Node& A = *self.parents[0];
        Node& B = *self.parents[1];
        if (A.requires_grad) { A.ensure_grad(); A.grad += self.grad; }
        if (B.requires_grad) { B.ensure_grad(); B.grad += self.grad.colwise().sum(); }
    });
}

inline Var relu(const Var& a) {
    return detail::make_op(a->value.cwiseMax(0.0), {a}, [](Node& self) {
        Node& A = *self.parents[0];
        if (!A.requires_grad) return;
        A.ensure_grad();
        A.grad += self.grad.cwiseProduct(
            (A.value.array() > 0.0).cast<double>().matrix());
    });
}

inline Var sigmoid(const Var& a) {
    Mat s = (1.0 / (1.0 + (-a->value.array()).exp())).matrix();
    return detail::make_op(s, {a}, [](Node& self) {
        Node& A = *self.parents[0];
        if (!A.requires_grad) return;
        A.ensure_grad();
        A.grad += self.grad.cwiseProduct(
            (self.value.array() * (1.0 - self.value.array())).matrix());
    });
}

inline Var tanh_op(const Var& a) {
    Mat t = a->value.array().tanh().matrix();
    return detail::make_op(t, {a}, [](Node& self) {
        Node& A = *self.parents[0];
        if (!A.requires_grad) return;
        A.ensure_grad();
        A.grad += self.grad.cwiseProduct(
            (1.0 - self.value.array().square()).matrix());
    });
}

inline Var log_op(const Var& a) {
    return detail::make_op(a->value.array().log().matrix(), {a}, [](Node& self) {
        Node& A = *self.parents[0];
        if (!A.requires_grad) return;
        A.ensure_grad();
        A.grad += self.grad.cwiseQuotient(A.value);
    });
}

// Clamp with pass-through gradient strictly inside (lo, hi).
inline Var clamp(const Var& a, double lo, double hi) {
    Mat out = a->value.cwiseMax(lo).cwiseMin(hi);
    return detail::make_op(std::move(out), {a}, [lo, hi](Node& self) {
        Node& A = *self.parents[0];
        if (!A.requires_grad) return;
        A.ensure_grad();
        Mat mask = ((A.value.array() > lo) && (A.value.array() < hi))
                       .cast<double>().matrix();
        A.grad += self.grad.cwiseProduct(mask);
    });
}

inline Var sum(const Var& a) {
    Mat out(1, 1);
    out(0, 0) = a->value.sum();
    return detail::make_op(std::move(out), {a}, [](Node& self) {
        Node& A = *self.parents[0];
        if (!A.requires_grad) return;
        A.ensure_grad();
        A.grad.array() += self.grad(0, 0);
    });
}

inline Var mean(const Var& a) {
    return scale(sum(a), 1.0 / static_cast<double>(a->value.size()));
}

// Row-wise L2 normalization: y_i = x_i / ||x_i||.
inline Var row_l2_normalize(const Var& a) {
    const Mat& x = a->value;
    Eigen::VectorXd norms = x.rowwise().norm();
    for (Eigen::Index i = 0; i < norms.size(); ++i)
        if (norms(i) == 0.0) throw DegenerateVector("row_l2_normalize: zero-norm row");
    Mat y = norms.cwiseInverse().asDiagonal() * x;
    return detail::make_op(std::move(y), {a}, [norms](Node& self) {
        Node& A = *self.parents[0];
        if (!A.requires_grad) return;
        A.ensure_grad();
        const Mat& y = self.value;
        const Mat& g = self.grad;
        for (Eigen::Index i = 0; i < y.rows(); ++i) {
            double dot = y.row(i).dot(g.row(i));
            A.grad.row(i) += (g.row(i) - dot * y.row(i)) / norms(i);
        }
    });
}

// Mean over consecutive row groups of size `group`: (R x C) -> (R/group x C).
inline Var group_mean_rows(const Var& a, int group) {
    const Mat& x = a->value;
    if (group <= 0 || x.rows() % group != 0)
        throw ShapeError("group_mean_rows: rows not divisible by group");
    Eigen::Index out_rows = x.rows() / group;
    Mat out = Mat::Zero(out_rows, x.cols());
    for (Eigen::Index r = 0; r < out_rows; ++r)
        out.row(r) = x.middleRows(r * group, group).colwise().mean();
    return detail::make_op(std::move(out), {a}, [group](Node& self) {
        Node& A = *self.parents[0];
        if (!A.requires_grad) return;
        A.ensure_grad();
        double inv = 1.0 / group;
        for (Eigen::Index r = 0; r < self.value.rows(); ++r)
            A.grad.middleRows(r * group, group).rowwise() +=
                Eigen::RowVectorXd(self.grad.row(r) * inv);
    });
}

// Column slice [start, start+len).
inline Var col_slice(const Var& a, int start, int len) {
    if (start < 0 || start + len > a->value.cols())
        throw ShapeError("col_slice: out of range");
    return detail::make_op(a->value.middleCols(start, len), {a},
                           [start, len](Node& self) {
        Node& A = *self.parents[0];
        if (!A.requires_grad) return;
        A.ensure_grad();
        A.grad.middleCols(start, len) += self.grad;
    });
}

// Spatial graph convolution over frames. x is (F*V) x Cin with frames stored
// as consecutive V-row blocks; out block = A * x_f * W with fixed A (V x V).
inline Var graph_conv(const Var& x, const Var& w, const Mat& adj) {
    Eigen::Index V = adj.rows();
    if (x->value.rows() % V != 0) throw ShapeError("graph_conv: rows % V != 0");
    if (x->value.cols() != w->value.rows()) throw ShapeError("graph_conv: channel mismatch");
    Eigen::Index F = x->value.rows() / V;
    Mat out(x->value.rows(), w->value.cols());
    for (Eigen::Index f = 0; f < F; ++f)
        out.middleRows(f * V, V).noalias() =
            adj * x->value.middleRows(f * V, V) * w->value;
    return detail::make_op(std::move(out), {x, w}, [adj, V, F](Node& self) {
        Node& X = *self.parents[0];
        Node& W = *self.parents[1];
        if (X.requires_grad) X.ensure_grad();
        if (W.requires_grad) W.ensure_grad();
        for (Eigen::Index f = 0; f < F; ++f) {
            Mat g = self.grad.middleRows(f * V, V);
            if (W.requires_grad)
                W.grad.noalias() +=
                    (adj * X.value.middleRows(f * V, V)).transpose() * g;
            if (X.requires_grad)
                X.grad.middleRows(f * V, V).noalias() +=
                    adj.transpose() * g * W.value.transpose();
        }
    });
}

// Temporal convolution along frames, per joint, with zero padding and stride.
// x is (N*T*V) x Cin; w is (kernel*Cin) x Cout (kernel taps stacked);
// output is (N*Tout*V) x Cout with Tout = ceil(T / stride) and output frame
// t_out reading input frames t_out*stride + dt - kernel/2.
inline Var temporal_conv(const Var& x, const Var& w, int N, int T, int V,
                         int kernel, int stride = 1) {
    if (x->value.rows() != static_cast<Eigen::Index>(N) * T * V)
        throw ShapeError("temporal_conv: row count mismatch");
    int Cin = static_cast<int>(x->value.cols());
    if (w->value.rows() != static_cast<Eigen::Index>(kernel) * Cin)
        throw ShapeError("temporal_conv: weight rows != kernel*Cin");
    int Cout = static_cast<int>(w->value.cols());
    int Tout = (T + stride - 1) / stride;
    int half = kernel / 2;
    Mat out = Mat::Zero(static_cast<Eigen::Index>(N) * Tout * V, Cout);
    for (int n = 0; n < N; ++n)
        for (int to = 0; to < Tout; ++to) {
            auto dst = out.middleRows((static_cast<Eigen::Index>(n) * Tout + to) * V, V);
            for (int k = 0; k < kernel; ++k) {
                int ti = to * stride + k - half;
                if (ti < 0 || ti >= T) continue;
                dst.noalias() +=
                    x->value.middleRows((static_cast<Eigen::Index>(n) * T + ti) * V, V) *
                    w->value.middleRows(static_cast<Eigen::Index>(k) * Cin, Cin);
            }
        }
    return detail::make_op(std::move(out), {x, w},
                           [N, T, V, kernel, stride, Cin, Tout, half](Node& self) {
        Node& X = *self.parents[0];
        Node& W = *self.parents[1];
        if (X.requires_grad) X.ensure_grad();
        if (W.requires_grad) W.ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int to = 0; to < Tout; ++to) {
                Mat g = self.grad.middleRows(
                    (static_cast<Eigen::Index>(n) * Tout + to) * V, V);
                for (int k = 0; k < kernel; ++k) {
                    int ti = to * stride + k - half;
                    if (ti < 0 || ti >= T) continue;
                    auto xin = X.value.middleRows(
                        (static_cast<Eigen::Index>(n) * T + ti) * V, V);
                    if (W.requires_grad)
                        W.grad.middleRows(static_cast<Eigen::Index>(k) * Cin, Cin)
                            .noalias() += xin.transpose() * g;
                    if (X.requires_grad)
                        X.grad.middleRows((static_cast<Eigen::Index>(n) * T + ti) * V, V)
                            .noalias() += g * W.value
                                .middleRows(static_cast<Eigen::Index>(k) * Cin, Cin)
                                .transpose();
                }
            }
    });
}

// Per-column batch normalization with running statistics.
struct BatchNormState {
    Mat running_mean; // 1 x C
    Mat running_var;  // 1 x C
    double momentum = 0.1;
    double eps = 1e-5;

    explicit BatchNormState(int channels = 0, double mom = 0.1)
        : running_mean(Mat::Zero(1, channels)),
          running_var(Mat::Ones(1, channels)),
          momentum(mom) {}
};

inline Var batch_norm(const Var& x, const Var& gamma, const Var& beta,
                      BatchNormState& state, bool training) {
    const Mat& v = x->value;
    const Eigen::Index m = v.rows();
    if (gamma->value.cols() != v.cols() || beta->value.cols() != v.cols())
        throw ShapeError("batch_norm: affine shape mismatch");
    Eigen::RowVectorXd mu, var;
    if (training) {
        mu = v.colwise().mean();
        Mat centered = v.rowwise() - mu;
        var = centered.array().square().colwise().mean();
        state.running_mean.row(0) =
            (1.0 - state.momentum) * state.running_mean.row(0) + state.momentum * mu;
        // unbiased estimate in running stats, biased in the normalization
        double corr = m > 1 ? static_cast<double>(m) / (m - 1) : 1.0;
        state.running_var.row(0) = (1.0 - state.momentum) * state.running_var.row(0) +
                                   state.momentum * (var * corr);
    } else {
        mu = state.running_mean.row(0);
        var = state.running_var.row(0);
    }
    Eigen::RowVectorXd inv_std = (var.array() + state.eps).rsqrt();
    Mat xhat = (v.rowwise() - mu) * inv_std.asDiagonal();
    Mat out = xhat * gamma->value.row(0).asDiagonal();
    out.rowwise() += Eigen::RowVectorXd(beta->value.row(0));
    auto n = detail::make_op(std::move(out), {x, gamma, beta},
                             [xhat, inv_std, training, m](Node& self) {
        Node& X = *self.parents[0];
        Node& G = *self.parents[1];
        Node& B = *self.parents[2];
        const Mat& g = self.grad;
        if (G.requires_grad) {
            G.ensure_grad();
            G.grad.row(0) += g.cwiseProduct(xhat).colwise().sum();
        }
        if (B.requires_grad) {
            B.ensure_grad();
            B.grad.row(0) += g.colwise().sum();
        }
        if (X.requires_grad) {
            X.ensure_grad();
            Mat dxhat = g * G.value.row(0).asDiagonal();
            if (training) {
                Eigen::RowVectorXd sum_dxhat = dxhat.colwise().sum();
                Eigen::RowVectorXd sum_dxhat_xhat =
                    dxhat.cwiseProduct(xhat).colwise().sum();
                Mat dx = dxhat;
                dx.rowwise() -= (sum_dxhat / static_cast<double>(m));
                dx -= xhat * (sum_dxhat_xhat / static_cast<double>(m)).asDiagonal();
                X.grad += dx * inv_std.asDiagonal();
            } else {
                X.grad += dxhat * inv_std.asDiagonal();
            }
        }
    });
    return n;
}

// Mean softmax cross-entropy over rows against integer class labels.
inline Var softmax_cross_entropy(const Var& logits, const std::vector<int>& labels) {
    const Mat& x = logits->value;
    if (static_cast<size_t>(x.rows()) != labels.size())
        throw ShapeError("softmax_cross_entropy: label count mismatch");
    const Eigen::Index n = x.rows();
    Mat probs(x.rows(), x.cols());
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        double mx = x.row(i).maxCoeff();
        Eigen::RowVectorXd e = (x.row(i).array() - mx).exp();
        double s = e.sum();
        probs.row(i) = e / s;
        total -= std::log(probs(i, labels[static_cast<size_t>(i)]));
    }
    Mat out(1, 1);
    out(0, 0) = total / static_cast<double>(n);
    return detail::make_op(std::move(out), {logits}, [probs, labels](Node& self) {
        Node& L = *self.parents[0];
        if (!L.requires_grad) return;
        L.ensure_grad();
        Mat g = probs;
        for (Eigen::Index i = 0; i < g.rows(); ++i)
            g(i, labels[static_cast<size_t>(i)]) -= 1.0;
        L.grad += self.grad(0, 0) * g / static_cast<double>(g.rows());
    });
}

// Reverse-topological backward from a scalar root.
inline void backward(const Var& root) {
    if (root->value.size() != 1) throw ShapeError("backward: root must be scalar");
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack{{root.get(), 0}};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (p->requires_grad && seen.insert(p).second)
                stack.push_back({p, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root->grad = Mat::Ones(1, 1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop && n->grad.size() != 0) n->backprop(*n);
    }
}

} // namespace cmcs::ag
