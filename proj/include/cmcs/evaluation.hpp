#pragma once

// Downstream evaluation: feature extraction, KNN / linear / semi-supervised
// / finetune protocols, stream ensembling, k-means + NMI, and CSV export.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmcs/networks.hpp"
#include "cmcs/training.hpp"

namespace cmcs::eval {

using ag::Mat;
using ag::Var;
using train::Stream;
using train::TrainingData;

struct FeatureMatrix {
    Mat features; // N x d
    std::vector<int> labels;
    std::string split_tag;
};

// Deterministic eval-mode forward of the online encoder; no augmentation.
inline FeatureMatrix extract_features(nn::ModelPair& pair, const TrainingData& data,
                                      Stream stream, int batch_size = 64) {
    FeatureMatrix out;
    out.labels = data.labels;
    const int n = static_cast<int>(data.size());
    out.features = Mat(n, pair.enc_cfg.feature_dim);
    for (int off = 0; off < n; off += batch_size) {
        const int b = std::min(batch_size, n - off);
        std::vector<const skel::SkeletonSequence*> batch;
        for (int i = 0; i < b; ++i)
            batch.push_back(&data.stream_of(off + i, stream));
        Mat input = nn::pack_batch(batch);
        out.features.middleRows(off, b) = pair.encode_eval(input, b, data.T)->value;
    }
    return out;
}

// Cosine-similarity KNN with majority vote; ties broken by summed similarity.
inline double knn_eval(const FeatureMatrix& train_set, const FeatureMatrix& test_set,
                       int k) {
    const int ntr = static_cast<int>(train_set.features.rows());
    const int nte = static_cast<int>(test_set.features.rows());
    if (ntr == 0 || nte == 0) throw EmptySplit("knn_eval: empty split");
    if (k < 1 || k > ntr) throw ParameterError("knn_eval: k out of range");
    Mat tr = train_set.features;
    Mat te = test_set.features;
    for (int i = 0; i < ntr; ++i) {
        double n = tr.row(i).norm();
        if (n > 0) tr.row(i) /= n;
    }
    for (int i = 0; i < nte; ++i) {
        double n = te.row(i).norm();
        if (n > 0) te.row(i) /= n;
    }
    Mat sims = te * tr.transpose(); // nte x ntr cosine similarities
    int correct = 0;
    std::vector<int> idx(ntr);
    for (int i = 0; i < nte; ++i) {
        std::iota(idx.begin(), idx.end(), 0);
        std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
            if (sims(i, a) != sims(i, b)) return sims(i, a) > sims(i, b);
            return a < b;
        });
        std::map<int, std::pair<int, double>> votes; // label -> (count, sum sim)
        for (int j = 0; j < k; ++j) {
            auto& v = votes[train_set.labels[idx[j]]];
            v.first += 1;
            v.second += sims(i, idx[j]);
        }
        int best = -1;
        std::pair<int, double> best_v{-1, 0.0};
        for (auto& [label, v] : votes)
            if (v.first > best_v.first ||
                (v.first == best_v.first && v.second > best_v.second)) {
                best = label;
                best_v = v;
            }
        if (best == test_set.labels[i]) ++correct;
    }
    return static_cast<double>(correct) / nte;
}

struct ProtocolConfig {
    double lr = 3.0;
    int epochs = 100;
    int lr_drop_epoch = 80;
    double lr_drop_factor = 10.0;
    int batch_size = 128;
    double momentum = 0.9;
    uint64_t seed = 0;
};

inline double accuracy_of(const Mat& logits, const std::vector<int>& labels) {
    int correct = 0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        Eigen::Index arg;
        logits.row(i).maxCoeff(&arg);
        if (static_cast<int>(arg) == labels[static_cast<size_t>(i)]) ++correct;
    }
    return logits.rows() ? static_cast<double>(correct) / logits.rows() : 0.0;
}

// Trains a linear softmax head on frozen features (the encoder is never
// touched). Returns (accuracy, trained head).
inline std::pair<double, nn::Linear>
train_linear_head(const FeatureMatrix& train_set, const FeatureMatrix& test_set,
                  int num_classes, const ProtocolConfig& pc) {
    const int d = static_cast<int>(train_set.features.cols());
    nn::Linear head(d, num_classes);
    std::mt19937_64 rng(pc.seed);
    head.init(rng);
    std::vector<ag::Parameter*> params;
    head.params(params);
    const int n = static_cast<int>(train_set.features.rows());
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < pc.epochs; ++epoch) {
        double lr = pc.lr / (epoch >= pc.lr_drop_epoch ? pc.lr_drop_factor : 1.0);
        std::shuffle(order.begin(), order.end(), rng);
        for (int off = 0; off < n; off += pc.batch_size) {
            const int b = std::min(pc.batch_size, n - off);
            Mat xb(b, d);
            std::vector<int> yb(b);
            for (int i = 0; i < b; ++i) {
                xb.row(i) = train_set.features.row(order[off + i]);
                yb[i] = train_set.labels[order[off + i]];
            }
            Var logits = head.forward(ag::constant(xb), true);
            Var l = ag::softmax_cross_entropy(logits, yb);
            train::zero_grads(params);
            ag::backward(l);
            train::sgd_step(params, lr, pc.momentum, 0.0);
        }
    }
    Mat logits = head.forward(ag::constant(test_set.features), false)->value;
    return {accuracy_of(logits, test_set.labels), std::move(head)};
}

inline double linear_eval(nn::ModelPair& pair, const TrainingData& train_data,
                          const TrainingData& test_data, Stream stream,
                          int num_classes, const ProtocolConfig& pc) {
    auto ftr = extract_features(pair, train_data, stream);
    auto fte = extract_features(pair, test_data, stream);
    return train_linear_head(ftr, fte, num_classes, pc).first;
}

// Stratified per-class subset, deterministic given seed.
inline std::vector<int> stratified_subset(const std::vector<int>& labels,
                                          int num_classes, double fraction,
                                          uint64_t seed) {
    if (fraction <= 0.0 || fraction > 1.0)
        throw ParameterError("fraction must be in (0, 1]");
    std::map<int, std::vector<int>> by_class;
    for (int i = 0; i < static_cast<int>(labels.size()); ++i)
        by_class[labels[i]].push_back(i);
    std::mt19937_64 rng(seed);
    std::vector<int> chosen;
    for (int c = 0; c < num_classes; ++c) {
        auto it = by_class.find(c);
        if (it == by_class.end())
            throw StratificationError("class " + std::to_string(c) + " has no samples");
        auto idx = it->second;
        std::shuffle(idx.begin(), idx.end(), rng);
        int take = static_cast<int>(std::lround(fraction * idx.size()));
        if (take < 1)
            throw StratificationError("class " + std::to_string(c) +
                                      " empty after subsampling");
        chosen.insert(chosen.end(), idx.begin(), idx.begin() + take);
    }
    std::sort(chosen.begin(), chosen.end());
    return chosen;
}

// Trains the whole network (encoder + linear head) on a labeled subset.
inline double semi_eval(nn::ModelPair& pair, const TrainingData& train_data,
                        const TrainingData& test_data, Stream stream,
                        int num_classes, double fraction, const ProtocolConfig& pc) {
    auto subset = stratified_subset(train_data.labels, num_classes, fraction, pc.seed);
    const int d = pair.enc_cfg.feature_dim;
    nn::Linear head(d, num_classes);
    std::mt19937_64 rng(pc.seed);
    head.init(rng);
    std::vector<ag::Parameter*> params;
    pair.online_encoder->params(params);
    head.params(params);
    const int n = static_cast<int>(subset.size());
    std::vector<int> order = subset;
    for (int epoch = 0; epoch < pc.epochs; ++epoch) {
        double lr = pc.lr / (epoch >= pc.lr_drop_epoch ? pc.lr_drop_factor : 1.0);
        std::shuffle(order.begin(), order.end(), rng);
        for (int off = 0; off < n; off += pc.batch_size) {
            const int b = std::min(pc.batch_size, n - off);
            if (b < 2) continue; // batch norm needs at least 2 rows
            std::vector<const skel::SkeletonSequence*> batch;
            std::vector<int> yb(b);
            for (int i = 0; i < b; ++i) {
                batch.push_back(&train_data.stream_of(order[off + i], stream));
                yb[i] = train_data.labels[order[off + i]];
            }
            Mat input = nn::pack_batch(batch);
            Var y = pair.online_encoder->forward(input, b, train_data.T, true, true);
            Var logits = head.forward(y, true);
            Var l = ag::softmax_cross_entropy(logits, yb);
            train::zero_grads(params);
            ag::backward(l);
            train::sgd_step(params, lr, pc.momentum, 0.0);
        }
    }
    auto fte = extract_features(pair, test_data, stream);
    Mat logits = head.forward(ag::constant(fte.features), false)->value;
    return accuracy_of(logits, fte.labels);
}

inline double finetune_eval(nn::ModelPair& pair, const TrainingData& train_data,
                            const TrainingData& test_data, Stream stream,
                            int num_classes, const ProtocolConfig& pc) {
    return semi_eval(pair, train_data, test_data, stream, num_classes, 1.0, pc);
}

enum class EnsembleRule { mean, sum };

inline Mat ensemble_scores(const std::vector<Mat>& per_stream_logits,
                           EnsembleRule rule = EnsembleRule::mean) {
    if (per_stream_logits.empty()) throw ShapeError("ensemble_scores: no inputs");
    Mat out = per_stream_logits[0];
    for (size_t i = 1; i < per_stream_logits.size(); ++i) {
        if (per_stream_logits[i].rows() != out.rows() ||
            per_stream_logits[i].cols() != out.cols())
            throw ShapeError("ensemble_scores: shape mismatch");
        out += per_stream_logits[i];
    }
    if (rule == EnsembleRule::mean)
        out /= static_cast<double>(per_stream_logits.size());
    return out;
}

// Lloyd k-means with several restarts; returns hard assignments.
inline std::vector<int> kmeans(const Mat& x, int k, int restarts = 10,
                               uint64_t seed = 0, int max_iters = 100) {
    const int n = static_cast<int>(x.rows());
    if (k < 1 || k > n) throw ParameterError("kmeans: bad k");
    std::mt19937_64 rng(seed);
    std::vector<int> best_assign(n, 0);
    double best_obj = std::numeric_limits<double>::infinity();
    for (int r = 0; r < restarts; ++r) {
        std::vector<int> centers_idx(n);
        std::iota(centers_idx.begin(), centers_idx.end(), 0);
        std::shuffle(centers_idx.begin(), centers_idx.end(), rng);
        Mat centers(k, x.cols());
        for (int c = 0; c < k; ++c) centers.row(c) = x.row(centers_idx[c]);
        std::vector<int> assign(n, -1);
        for (int it = 0; it < max_iters; ++it) {
            bool changed = false;
            for (int i = 0; i < n; ++i) {
                int arg = 0;
                double best = (x.row(i) - centers.row(0)).squaredNorm();
                for (int c = 1; c < k; ++c) {
                    double d = (x.row(i) - centers.row(c)).squaredNorm();
                    if (d < best) { best = d; arg = c; }
                }
                if (assign[i] != arg) { assign[i] = arg; changed = true; }
            }
            if (!changed) break;
            Mat sums = Mat::Zero(k, x.cols());
            std::vector<int> counts(k, 0);
            for (int i = 0; i < n; ++i) {
                sums.row(assign[i]) += x.row(i);
                ++counts[assign[i]];
            }
            for (int c = 0; c < k; ++c)
                if (counts[c] > 0) centers.row(c) = sums.row(c) / counts[c];
        }
        double obj = 0.0;
        for (int i = 0; i < n; ++i)
            obj += (x.row(i) - centers.row(assign[i])).squaredNorm();
        if (obj < best_obj) { best_obj = obj; best_assign = assign; }
    }
    return best_assign;
}

// Normalized mutual information with arithmetic-mean normalization.
inline double nmi(const std::vector<int>& labels_true,
                  const std::vector<int>& labels_pred) {
    if (labels_true.size() != labels_pred.size())
        throw ShapeError("nmi: length mismatch");
    const double n = static_cast<double>(labels_true.size());
    if (n == 0) return 0.0;
    std::map<int, int> ca, cb;
    std::map<std::pair<int, int>, int> joint;
    for (size_t i = 0; i < labels_true.size(); ++i) {
        ++ca[labels_true[i]];
        ++cb[labels_pred[i]];
        ++joint[{labels_true[i], labels_pred[i]}];
    }
    auto entropy = [&](const std::map<int, int>& counts) {
        double h = 0.0;
        for (auto& [k, c] : counts) {
            double p = c / n;
            if (p > 0) h -= p * std::log(p);
        }
        return h;
    };
    double ha = entropy(ca), hb = entropy(cb);
    if (ha == 0.0 || hb == 0.0) return 0.0; // single-cluster convention
    double mi = 0.0;
    for (auto& [kv, c] : joint) {
        double pxy = c / n;
        double px = ca[kv.first] / n;
        double py = cb[kv.second] / n;
        mi += pxy * std::log(pxy / (px * py));
    }
    return mi / (0.5 * (ha + hb));
}

// --- export ------------------------------------------------------------

inline void write_features_csv(const FeatureMatrix& fm, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot open for write: " + path);
    out << "label";
    for (Eigen::Index j = 0; j < fm.features.cols(); ++j) out << ",f" << j;
    out << "\n";
    out.precision(17);
    for (Eigen::Index i = 0; i < fm.features.rows(); ++i) {
        out << fm.labels[static_cast<size_t>(i)];
        for (Eigen::Index j = 0; j < fm.features.cols(); ++j)
            out << "," << fm.features(i, j);
        out << "\n";
    }
}

// First two principal components of the centered features.
inline Mat pca2(const Mat& x) {
    Mat centered = x.rowwise() - Eigen::RowVectorXd(x.colwise().mean());
    Eigen::JacobiSVD<Mat> svd(centered, Eigen::ComputeThinV);
    Mat v = svd.matrixV().leftCols(std::min<Eigen::Index>(2, svd.matrixV().cols()));
    return centered * v;
}

inline void write_pca_csv(const FeatureMatrix& fm, const std::string& path) {
    Mat p = pca2(fm.features);
    std::ofstream out(path);
    if (!out) throw FormatError("cannot open for write: " + path);
    out << "label,pc0,pc1\n";
    out.precision(17);
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
        out << fm.labels[static_cast<size_t>(i)] << "," << p(i, 0) << ","
            << (p.cols() > 1 ? p(i, 1) : 0.0) << "\n";
    }
}

} // namespace cmcs::eval
