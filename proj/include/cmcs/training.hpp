#pragma once

// Two-stage multi-stream pretraining: stage 1 trains each stream's
// online/target pair with the adversarial loss; stage 2 adds the
// cross-stream similarity loss supervised by the voted pseudo-label.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmcs/augmentation.hpp"
#include "cmcs/config.hpp"
#include "cmcs/losses.hpp"
#include "cmcs/networks.hpp"
#include "cmcs/skeleton.hpp"
#include "cmcs/synthetic.hpp"

namespace cmcs::train {

using ag::Mat;
using ag::Var;

enum class Stream { joint = 0, motion = 1, bone = 2 };

inline const char* stream_name(Stream s) {
    switch (s) {
        case Stream::joint: return "joint";
        case Stream::motion: return "motion";
        default: return "bone";
    }
}

inline Stream stream_from_name(const std::string& n) {
    if (n == "joint") return Stream::joint;
    if (n == "motion") return Stream::motion;
    if (n == "bone") return Stream::bone;
    throw ConfigError("unknown stream: " + n);
}

// Pretext objective for stage 1: the adversarial loss or the plain
// symmetrized BYOL baseline.
enum class PretextLoss { cmal, byol };

struct TrainConfig {
    int batch_size = 32;
    int total_epochs = 30;
    int stage1_epochs = 20;
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    double tau = 0.996;
    loss::LossWeights weights;
    int top_k = 2;
    std::vector<Stream> streams = {Stream::joint, Stream::motion, Stream::bone};
    uint64_t seed = 0;
    aug::AugmentationParams aug_params;
    nn::EncoderConfig enc;
    nn::HeadConfig head;
    bool strict_vote = false;
    bool use_predictor = true;
    int checkpoint_every = 10;
    PretextLoss pretext = PretextLoss::cmal;

    void validate() const {
        if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
        if (stage1_epochs <= 0 || stage1_epochs > total_epochs)
            throw ConfigError("need 0 < stage1_epochs <= total_epochs");
        if (streams.empty()) throw ConfigError("streams must be nonempty");
    }
};

// Preprocessed dataset held in memory, streams in lockstep.
struct TrainingData {
    std::vector<skel::StreamTriple> samples;
    std::vector<int> labels;
    int T = 0, V = 0;

    size_t size() const { return samples.size(); }

    const skel::SkeletonSequence& stream_of(size_t i, Stream s) const {
        switch (s) {
            case Stream::joint: return samples[i].joint;
            case Stream::motion: return samples[i].motion;
            default: return samples[i].bone;
        }
    }
};

inline TrainingData prepare_data(const std::vector<skel::SkeletonSequence>& seqs,
                                 const std::vector<int>& labels,
                                 const skel::BoneTopology& topo, int target_frames,
                                 int center_joint) {
    if (seqs.empty()) throw EmptySplit("dataset is empty");
    TrainingData data;
    data.labels = labels;
    for (const auto& s : seqs) {
        auto pre = skel::preprocess(s, target_frames, center_joint);
        data.samples.push_back(skel::derive_streams(pre, topo));
    }
    data.T = data.samples[0].joint.T;
    data.V = data.samples[0].joint.V;
    return data;
}

inline TrainingData load_data_from_manifest(const skel::DatasetManifest& manifest,
                                            const std::string& dir,
                                            const skel::BoneTopology& topo,
                                            int target_frames, int center_joint) {
    namespace fs = std::filesystem;
    std::vector<skel::SkeletonSequence> seqs;
    std::vector<int> labels;
    for (const auto& e : manifest.entries) {
        auto seq = skel::read_sequence_file((fs::path(dir) / e.path).string());
        seq.label = e.label;
        seqs.push_back(std::move(seq));
        labels.push_back(e.label);
    }
    return prepare_data(seqs, labels, topo, target_frames, center_joint);
}

// SGD with momentum and decoupled-in-gradient weight decay:
// v <- mu*v + (g + wd*w); w <- w - lr*v.
inline void sgd_step(const std::vector<ag::Parameter*>& params, double lr,
                     double momentum, double weight_decay) {
    for (auto* p : params) {
        Mat g = p->grad + weight_decay * p->value;
        p->velocity = momentum * p->velocity + g;
        p->value -= lr * p->velocity;
    }
}

inline void zero_grads(const std::vector<ag::Parameter*>& params) {
    for (auto* p : params) p->zero_grad();
}

struct StepMetrics {
    std::map<std::string, double> stream_loss;
    double cscl = 0.0;
    double pseudo_density = -1.0;
};

class Trainer {
public:
    Trainer(TrainConfig cfg, TrainingData data)
        : cfg_(std::move(cfg)), data_(std::move(data)), rng_(cfg_.seed) {
        cfg_.validate();
        int si = 0;
        for (Stream s : cfg_.streams) {
            auto pair = nn::init_model_pair(cfg_.enc, cfg_.head, cfg_.tau,
                                            cfg_.seed + 101 * (si++ + 1));
            pair.use_predictor = cfg_.use_predictor;
            pairs_.emplace(s, std::move(pair));
        }
    }

    TrainConfig& config() { return cfg_; }
    const TrainingData& data() const { return data_; }
    nn::ModelPair& pair(Stream s) { return pairs_.at(s); }
    int epochs_done() const { return epochs_done_; }
    std::mt19937_64& rng() { return rng_; }

    struct StreamForward {
        nn::ModelPair::Forward f, fp; // online on x and x'
        Var z_t, z_tp;                // target projections (constants)
    };

    // Augments the batch for one stream and runs both branches.
    StreamForward forward_stream(Stream s, const std::vector<int>& batch) {
        std::vector<skel::SkeletonSequence> xs, xps;
        xs.reserve(batch.size());
        for (int i : batch) {
            auto [x, xp] = aug::augment_pair(data_.stream_of(i, s), cfg_.aug_params, rng_);
            xs.push_back(std::move(x));
            xps.push_back(std::move(xp));
        }
        std::vector<const skel::SkeletonSequence*> bx, bxp;
        for (auto& s2 : xs) bx.push_back(&s2);
        for (auto& s2 : xps) bxp.push_back(&s2);
        Mat mx = nn::pack_batch(bx), mxp = nn::pack_batch(bxp);
        const int N = static_cast<int>(batch.size());
        auto& pr = pairs_.at(s);
        StreamForward out;
        out.f = pr.forward_online(mx, N, data_.T, true);
        out.fp = pr.forward_online(mxp, N, data_.T, true);
        out.z_t = pr.forward_target(mx, N, data_.T, true);
        out.z_tp = pr.forward_target(mxp, N, data_.T, true);
        return out;
    }

    StepMetrics train_step_stage1(const std::vector<int>& batch) {
        StepMetrics metrics;
        for (Stream s : cfg_.streams) {
            auto fwd = forward_stream(s, batch);
            Var l = cfg_.pretext == PretextLoss::byol
                        ? loss::byol_loss(fwd.f.p, fwd.fp.p, fwd.z_t, fwd.z_tp)
                        : loss::cmal_loss(fwd.f.p, fwd.fp.p, fwd.z_t, fwd.z_tp,
                                          cfg_.weights);
            double lv = l->value(0, 0);
            if (!std::isfinite(lv)) throw TrainingDiverged("NaN stage-1 loss");
            auto& pr = pairs_.at(s);
            auto params = pr.online_params();
            zero_grads(params);
            ag::backward(l);
            sgd_step(params, cfg_.lr, cfg_.momentum, cfg_.weight_decay);
            nn::ema_update(pr);
            metrics.stream_loss[stream_name(s)] = lv;
        }
        return metrics;
    }

    StepMetrics train_step_stage2(const std::vector<int>& batch) {
        StepMetrics metrics;
        std::map<Stream, StreamForward> fwds;
        std::map<Stream, Var> cmal;
        for (Stream s : cfg_.streams) {
            auto fwd = forward_stream(s, batch);
            cmal[s] = loss::cmal_loss(fwd.f.p, fwd.fp.p, fwd.z_t, fwd.z_tp, cfg_.weights);
            metrics.stream_loss[stream_name(s)] = cmal[s]->value(0, 0);
            fwds.emplace(s, std::move(fwd));
        }

        // Per-stream normalized Q, Q', K, K' and the six similarity matrices.
        std::map<Stream, std::pair<Var, Var>> sims;
        for (Stream s : cfg_.streams) {
            auto& fwd = fwds.at(s);
            Var q = ag::row_l2_normalize(fwd.f.p);
            Var qp = ag::row_l2_normalize(fwd.fp.p);
            Var k = ag::row_l2_normalize(fwd.z_t);
            Var kp = ag::row_l2_normalize(fwd.z_tp);
            sims[s] = {loss::batch_similarity(q, kp), loss::batch_similarity(qp, k)};
        }

        Var cscl;
        if (cfg_.streams.size() == 3) {
            loss::SimilarityBundle bundle;
            bundle.sims = {sims.at(Stream::joint).first, sims.at(Stream::joint).second,
                           sims.at(Stream::motion).first, sims.at(Stream::motion).second,
                           sims.at(Stream::bone).first, sims.at(Stream::bone).second};
            auto label = loss::compute_pseudo_label(bundle, cfg_.top_k, cfg_.strict_vote);
            metrics.pseudo_density = label.matrix.mean();
            cscl = loss::cscl_loss(label, bundle);
        } else {
            if (!warned_) {
                std::cerr << "warning: stage 2 with fewer than 3 streams; using "
                             "per-stream pseudo-labels without voting\n";
                warned_ = true;
            }
            double density = 0.0;
            for (Stream s : cfg_.streams) {
                auto label = loss::intra_stream_pseudo(sims.at(s).first->value,
                                                       sims.at(s).second->value, cfg_.top_k);
                density += label.matrix.mean();
                Var label_c = ag::constant(label.matrix);
                for (const Var& sv : {sims.at(s).first, sims.at(s).second}) {
                    Var sigma = ag::clamp(ag::scale(ag::add_scalar(sv, 1.0), 0.5),
                                          loss::kCsclEps, 1.0 - loss::kCsclEps);
                    Var one_minus = ag::add_scalar(ag::scale(sigma, -1.0), 1.0);
                    Var inv = ag::constant(Mat((1.0 - label.matrix.array()).matrix()));
                    Var term = ag::add(ag::mul(label_c, ag::log_op(sigma)),
                                       ag::mul(inv, ag::log_op(one_minus)));
                    Var m = ag::scale(ag::mean(term), -0.5);
                    cscl = cscl ? ag::add(cscl, m) : m;
                }
            }
            cscl = ag::scale(cscl, 1.0 / (2.0 * cfg_.streams.size()));
            metrics.pseudo_density = density / cfg_.streams.size();
        }
        metrics.cscl = cscl->value(0, 0);

        Var total;
        for (Stream s : cfg_.streams) {
            Var t = ag::scale(cmal.at(s), cfg_.weights.lambda_);
            total = total ? ag::add(total, t) : t;
        }
        total = ag::add(total, ag::scale(cscl, cfg_.weights.gamma));
        if (!std::isfinite(total->value(0, 0)))
            throw TrainingDiverged("NaN stage-2 loss");

        std::vector<ag::Parameter*> all;
        for (Stream s : cfg_.streams) {
            auto ps = pairs_.at(s).online_params();
            all.insert(all.end(), ps.begin(), ps.end());
        }
        zero_grads(all);
        ag::backward(total);
        for (Stream s : cfg_.streams) {
            auto& pr = pairs_.at(s);
            sgd_step(pr.online_params(), cfg_.lr, cfg_.momentum, cfg_.weight_decay);
            nn::ema_update(pr);
        }
        return metrics;
    }

    // Collapse monitor: per-dimension std of L2-normalized online projections
    // over a fixed monitor subset; returns (mean, min) over dimensions.
    std::pair<double, double> collapse_monitor(Stream s, int max_samples = 128) {
        const int n = static_cast<int>(std::min<size_t>(max_samples, data_.size()));
        std::vector<const skel::SkeletonSequence*> batch;
        for (int i = 0; i < n; ++i) batch.push_back(&data_.stream_of(i, s));
        Mat input = nn::pack_batch(batch);
        auto& pr = pairs_.at(s);
        Var y = pr.online_encoder->forward(input, n, data_.T, false, false);
        Var z = pr.online_projector.forward(y, false, false);
        Mat zn = ag::row_l2_normalize(z)->value;
        Eigen::RowVectorXd mu = zn.colwise().mean();
        Eigen::RowVectorXd var =
            (zn.rowwise() - mu).array().square().colwise().mean();
        Eigen::RowVectorXd sd = var.array().sqrt();
        return {sd.mean(), sd.minCoeff()};
    }

    // One pass over the data; returns per-epoch aggregate metrics.
    nlohmann::json run_epoch(std::ostream* metrics_out) {
        const int stage = epochs_done_ < cfg_.stage1_epochs ? 1 : 2;
        std::vector<int> order(data_.size());
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng_);
        double loss_sum = 0.0, density = -1.0;
        int steps = 0;
        for (size_t off = 0; off + cfg_.batch_size <= order.size();
             off += cfg_.batch_size) {
            std::vector<int> batch(order.begin() + off,
                                   order.begin() + off + cfg_.batch_size);
            StepMetrics m = stage == 1 ? train_step_stage1(batch)
                                       : train_step_stage2(batch);
            double step_loss = 0.0;
            for (auto& [k, v] : m.stream_loss) step_loss += v;
            loss_sum += step_loss;
            if (m.pseudo_density >= 0) density = m.pseudo_density;
            if (metrics_out) {
                nlohmann::json j{{"type", "step"}, {"epoch", epochs_done_},
                                 {"step", steps}, {"stage", stage},
                                 {"loss", m.stream_loss}};
                if (stage == 2) {
                    j["cscl"] = m.cscl;
                    j["pseudo_density"] = m.pseudo_density;
                }
                (*metrics_out) << j.dump() << "\n";
            }
            ++steps;
        }
        auto [sd_mean, sd_min] = collapse_monitor(cfg_.streams.front());
        ++epochs_done_;
        nlohmann::json j{{"type", "epoch"}, {"epoch", epochs_done_ - 1},
                         {"stage", stage},
                         {"mean_loss", steps ? loss_sum / steps : 0.0},
                         {"collapse_std_mean", sd_mean},
                         {"collapse_std_min", sd_min}};
        if (density >= 0) j["pseudo_density"] = density;
        if (metrics_out) (*metrics_out) << j.dump() << "\n";
        return j;
    }

    nn::StateDict state() {
        nn::StateDict sd;
        for (Stream s : cfg_.streams) {
            nn::StateDict part = pairs_.at(s).state();
            for (auto& [name, mat] : part)
                sd.push_back({std::string(stream_name(s)) + "." + name, mat});
        }
        return sd;
    }

    void save(const std::string& path, const std::string& config_snapshot = "",
              const std::string& config_hash = "") {
        std::ostringstream rng_state;
        rng_state << rng_;
        nlohmann::json meta{{"epoch", epochs_done_},
                            {"rng", rng_state.str()},
                            {"config", config_snapshot},
                            {"config_hash", config_hash}};
        nn::save_checkpoint(path, meta, state());
    }

    nlohmann::json load(const std::string& path) {
        auto sd = state();
        nlohmann::json meta = nn::load_checkpoint(path, sd);
        epochs_done_ = meta.at("epoch").get<int>();
        std::istringstream rng_state(meta.at("rng").get<std::string>());
        rng_state >> rng_;
        return meta;
    }

private:
    TrainConfig cfg_;
    TrainingData data_;
    std::map<Stream, nn::ModelPair> pairs_;
    std::mt19937_64 rng_;
    int epochs_done_ = 0;
    bool warned_ = false;
};

// Full pretraining run with periodic checkpoints and JSON-lines metrics.
// Returns the final checkpoint path.
inline std::string pretrain(Trainer& trainer, const std::string& run_dir,
                            const std::string& config_snapshot = "",
                            const std::string& config_hash = "") {
    namespace fs = std::filesystem;
    fs::create_directories(run_dir);
    std::ofstream metrics((fs::path(run_dir) / "metrics.jsonl").string(),
                          std::ios::app);
    const auto& cfg = trainer.config();
    while (trainer.epochs_done() < cfg.total_epochs) {
        try {
            trainer.run_epoch(&metrics);
        } catch (const TrainingDiverged&) {
            trainer.save((fs::path(run_dir) / "diverged.ckpt").string(),
                         config_snapshot, config_hash);
            throw;
        }
        if (cfg.checkpoint_every > 0 &&
            trainer.epochs_done() % cfg.checkpoint_every == 0 &&
            trainer.epochs_done() < cfg.total_epochs) {
            char name[64];
            std::snprintf(name, sizeof(name), "ckpt_epoch_%03d.ckpt",
                          trainer.epochs_done());
            trainer.save((fs::path(run_dir) / name).string(), config_snapshot,
                         config_hash);
        }
    }
    std::string final_path = (fs::path(run_dir) / "final.ckpt").string();
    trainer.save(final_path, config_snapshot, config_hash);
    return final_path;
}

inline TrainConfig train_config_from(const cfg::RunConfig& rc,
                                     const skel::BoneTopology& topo) {
    TrainConfig tc;
    tc.batch_size = rc.get_int("train.batch_size");
    tc.total_epochs = rc.get_int("train.total_epochs");
    tc.stage1_epochs = rc.get_int("train.stage1_epochs");
    tc.lr = rc.get_double("train.lr");
    tc.momentum = rc.get_double("train.momentum");
    tc.weight_decay = rc.get_double("train.weight_decay");
    tc.tau = rc.get_double("train.tau");
    tc.weights.alpha = rc.get_double("train.alpha");
    tc.weights.beta = rc.get_double("train.beta");
    tc.weights.lambda_ = rc.get_double("train.lambda");
    tc.weights.gamma = rc.get_double("train.gamma");
    tc.top_k = rc.get_int("train.top_k");
    tc.seed = rc.get_u64("train.seed");
    tc.strict_vote = rc.get_bool("train.strict_vote");
    tc.use_predictor = rc.get_bool("train.use_predictor");
    tc.checkpoint_every = rc.get_int("train.checkpoint_every");
    const std::string pl = rc.get("train.loss");
    if (pl == "byol")
        tc.pretext = PretextLoss::byol;
    else if (pl == "cmal")
        tc.pretext = PretextLoss::cmal;
    else
        throw ConfigError("train.loss must be cmal or byol");
    tc.streams.clear();
    std::stringstream ss(rc.get("train.streams"));
    std::string item;
    while (std::getline(ss, item, ','))
        if (!cfg::trim(item).empty()) tc.streams.push_back(stream_from_name(cfg::trim(item)));
    tc.aug_params.shear_amplitude = rc.get_double("aug.shear_amplitude");
    tc.aug_params.padding_ratio = rc.get_int("aug.padding_ratio");
    tc.aug_params.order = rc.get("aug.order") == "shear_then_crop"
                              ? aug::AugOrder::shear_then_crop
                              : aug::AugOrder::crop_then_shear;
    tc.enc.kind = rc.get("model.encoder") == "recurrent" ? nn::EncoderKind::recurrent
                                                         : nn::EncoderKind::graph_conv;
    tc.enc.feature_dim = rc.get_int("model.feature_dim");
    tc.enc.channel_scale = rc.get_double("model.channel_scale");
    tc.enc.topology = topo;
    tc.enc.num_joints = topo.joints();
    tc.head.hidden_dim = rc.get_int("model.hidden_dim");
    tc.head.out_dim = rc.get_int("model.out_dim");
    return tc;
}

} // namespace cmcs::train
