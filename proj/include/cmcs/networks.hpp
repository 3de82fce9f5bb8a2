#pragma once

// Encoders (graph-conv and recurrent), projector/predictor MLP heads, the
// online/target ModelPair with EMA update, and the CMCS-CKPT-1 checkpoint
// container.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmcs/autograd.hpp"
#include "cmcs/errors.hpp"
#include "cmcs/skeleton.hpp"

namespace cmcs::nn {

using ag::Mat;
using ag::Parameter;
using ag::Var;

inline Var wrap(Parameter& p, bool with_grad) {
    return with_grad ? ag::leaf(p) : ag::constant(p.value);
}

inline void uniform_init(Mat& m, int fan_in, std::mt19937_64& rng) {
    double bound = 1.0 / std::sqrt(static_cast<double>(std::max(1, fan_in)));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
}

// Named views of every piece of persistent state (weights, optimizer
// velocity, batch-norm running stats); drives EMA, checkpoints, and tests.
using StateDict = std::vector<std::pair<std::string, Mat*>>;

struct Linear {
    Parameter W, b;

    Linear() = default;
    Linear(int in, int out) : W(Mat::Zero(in, out)), b(Mat::Zero(1, out)) {}

    void init(std::mt19937_64& rng) {
        uniform_init(W.value, static_cast<int>(W.value.rows()), rng);
        uniform_init(b.value, static_cast<int>(W.value.rows()), rng);
    }
    Var forward(const Var& x, bool g) {
        return ag::add_rowvec(ag::matmul(x, wrap(W, g)), wrap(b, g));
    }
    void params(std::vector<Parameter*>& out) { out.push_back(&W); out.push_back(&b); }
    void state(const std::string& p, StateDict& out) {
        out.push_back({p + ".W", &W.value});
        out.push_back({p + ".b", &b.value});
        out.push_back({p + ".W.vel", &W.velocity});
        out.push_back({p + ".b.vel", &b.velocity});
    }
};

struct BatchNorm {
    Parameter gamma, beta;
    ag::BatchNormState stats;

    BatchNorm() = default;
    explicit BatchNorm(int channels)
        : gamma(Mat::Ones(1, channels)), beta(Mat::Zero(1, channels)), stats(channels) {}

    Var forward(const Var& x, bool training, bool g) {
        return ag::batch_norm(x, wrap(gamma, g), wrap(beta, g), stats, training);
    }
    void params(std::vector<Parameter*>& out) { out.push_back(&gamma); out.push_back(&beta); }
    void state(const std::string& p, StateDict& out) {
        out.push_back({p + ".gamma", &gamma.value});
        out.push_back({p + ".beta", &beta.value});
        out.push_back({p + ".gamma.vel", &gamma.velocity});
        out.push_back({p + ".beta.vel", &beta.velocity});
        out.push_back({p + ".running_mean", &stats.running_mean});
        out.push_back({p + ".running_var", &stats.running_var});
    }
};

enum class EncoderKind { graph_conv, recurrent };

struct EncoderConfig {
    EncoderKind kind = EncoderKind::graph_conv;
    int feature_dim = 128;      // d_y
    double channel_scale = 0.25;
    int num_joints = 25;
    skel::BoneTopology topology;
};

struct HeadConfig {
    int hidden_dim = 512; // h_mlp
    int out_dim = 128;    // d_z
};

class Encoder {
public:
    virtual ~Encoder() = default;
    // input: (N*T*V) x 3 stacked person-0 coordinates, frames contiguous
    virtual Var forward(const Mat& input, int N, int T, bool training, bool with_grad) = 0;
    virtual void params(std::vector<Parameter*>& out) = 0;
    virtual void state(const std::string& prefix, StateDict& out) = 0;
    virtual std::unique_ptr<Encoder> clone() const = 0;
    virtual int out_dim() const = 0;
};

// Symmetrically normalized adjacency with self-loops.
inline Mat normalized_adjacency(const skel::BoneTopology& topo) {
    const int V = topo.joints();
    Mat A = Mat::Identity(V, V);
    for (auto [c, p] : topo.pairs)
        if (c != p) { A(c, p) = 1.0; A(p, c) = 1.0; }
    Eigen::VectorXd d = A.rowwise().sum();
    Eigen::VectorXd dinv = d.array().rsqrt();
    return dinv.asDiagonal() * A * dinv.asDiagonal();
}

// Three blocks of spatial graph convolution + strided temporal convolution,
// global average pooling, and a linear map to the feature dimension.
class GraphConvEncoder final : public Encoder {
public:
    GraphConvEncoder(const EncoderConfig& cfg) : cfg_(cfg) {
        adj_ = normalized_adjacency(cfg.topology);
        int base[3] = {32, 64, 128};
        int cin = 3;
        for (int b = 0; b < 3; ++b) {
            int cout = std::max(4, static_cast<int>(base[b] * cfg.channel_scale));
            blocks_[b] = Block(cin, cout);
            cin = cout;
        }
        head_ = Linear(cin, cfg.feature_dim);
    }

    void init(std::mt19937_64& rng) {
        for (auto& b : blocks_) {
            uniform_init(b.gc_w.value, static_cast<int>(b.gc_w.value.rows()), rng);
            uniform_init(b.tc_w.value, static_cast<int>(b.tc_w.value.rows()), rng);
        }
        head_.init(rng);
    }

    Var forward(const Mat& input, int N, int T, bool training, bool with_grad) override {
        if (input.rows() != static_cast<Eigen::Index>(N) * T * cfg_.num_joints ||
            input.cols() != 3)
            throw ShapeError("GraphConvEncoder: bad input shape");
        const int V = cfg_.num_joints;
        Var x = ag::constant(input);
        int t = T;
        for (auto& b : blocks_) {
            x = ag::graph_conv(x, wrap(b.gc_w, with_grad), adj_);
            x = ag::relu(b.bn1.forward(x, training, with_grad));
            x = ag::temporal_conv(x, wrap(b.tc_w, with_grad), N, t, V, kKernel, kStride);
            t = (t + kStride - 1) / kStride;
            x = ag::relu(b.bn2.forward(x, training, with_grad));
        }
        x = ag::group_mean_rows(x, t * V); // (N x C)
        return head_.forward(x, with_grad);
    }

    void params(std::vector<Parameter*>& out) override {
        for (auto& b : blocks_) {
            out.push_back(&b.gc_w);
            b.bn1.params(out);
            out.push_back(&b.tc_w);
            b.bn2.params(out);
        }
        head_.params(out);
    }

    void state(const std::string& prefix, StateDict& out) override {
        for (int i = 0; i < 3; ++i) {
            auto& b = blocks_[i];
            std::string p = prefix + ".block" + std::to_string(i);
            out.push_back({p + ".gc.W", &b.gc_w.value});
            out.push_back({p + ".gc.W.vel", &b.gc_w.velocity});
            b.bn1.state(p + ".bn1", out);
            out.push_back({p + ".tc.W", &b.tc_w.value});
            out.push_back({p + ".tc.W.vel", &b.tc_w.velocity});
            b.bn2.state(p + ".bn2", out);
        }
        head_.state(prefix + ".head", out);
    }

    std::unique_ptr<Encoder> clone() const override {
        return std::make_unique<GraphConvEncoder>(*this);
    }
    int out_dim() const override { return cfg_.feature_dim; }

private:
    static constexpr int kKernel = 3;
    static constexpr int kStride = 2;

    struct Block {
        Parameter gc_w, tc_w;
        BatchNorm bn1, bn2;
        Block() = default;
        Block(int cin, int cout)
            : gc_w(Mat::Zero(cin, cout)),
              tc_w(Mat::Zero(kKernel * cout, cout)),
              bn1(cout), bn2(cout) {}
    };

    EncoderConfig cfg_;
    Mat adj_;
    Block blocks_[3];
    Linear head_;
};

// Single-layer GRU over frames; the final hidden state is the feature.
class RecurrentEncoder final : public Encoder {
public:
    RecurrentEncoder(const EncoderConfig& cfg) : cfg_(cfg) {
        const int in = cfg.num_joints * 3, h = cfg.feature_dim;
        wz_ = Linear(in, h);
        wr_ = Linear(in, h);
        wh_ = Linear(in, h);
        uz_p_ = Parameter(Mat::Zero(h, h));
        ur_p_ = Parameter(Mat::Zero(h, h));
        uh_p_ = Parameter(Mat::Zero(h, h));
    }

    void init(std::mt19937_64& rng) {
        wz_.init(rng); wr_.init(rng); wh_.init(rng);
        uniform_init(uz_p_.value, cfg_.feature_dim, rng);
        uniform_init(ur_p_.value, cfg_.feature_dim, rng);
        uniform_init(uh_p_.value, cfg_.feature_dim, rng);
    }

    Var forward(const Mat& input, int N, int T, bool /*training*/, bool g) override {
        const int V = cfg_.num_joints;
        if (input.rows() != static_cast<Eigen::Index>(N) * T * V || input.cols() != 3)
            throw ShapeError("RecurrentEncoder: bad input shape");
        const int in_dim = V * 3, h_dim = cfg_.feature_dim;
        Var h = ag::constant(Mat::Zero(N, h_dim));
        Var ones = ag::constant(Mat::Ones(N, h_dim));
        Var vuz = wrap(uz_p_, g), vur = wrap(ur_p_, g), vuh = wrap(uh_p_, g);
        for (int t = 0; t < T; ++t) {
            Mat xt(N, in_dim);
            for (int n = 0; n < N; ++n)
                for (int v = 0; v < V; ++v)
                    for (int c = 0; c < 3; ++c)
                        xt(n, v * 3 + c) =
                            input((static_cast<Eigen::Index>(n) * T + t) * V + v, c);
            Var x = ag::constant(std::move(xt));
            Var z = ag::sigmoid(ag::add(wz_.forward(x, g), ag::matmul(h, vuz)));
            Var r = ag::sigmoid(ag::add(wr_.forward(x, g), ag::matmul(h, vur)));
            Var hh = ag::tanh_op(ag::add(wh_.forward(x, g),
                                         ag::matmul(ag::mul(r, h), vuh)));
            h = ag::add(ag::mul(ag::sub(ones, z), h), ag::mul(z, hh));
        }
        return h;
    }

    void params(std::vector<Parameter*>& out) override {
        wz_.params(out); wr_.params(out); wh_.params(out);
        out.push_back(&uz_p_); out.push_back(&ur_p_); out.push_back(&uh_p_);
    }

    void state(const std::string& prefix, StateDict& out) override {
        wz_.state(prefix + ".wz", out);
        wr_.state(prefix + ".wr", out);
        wh_.state(prefix + ".wh", out);
        for (auto [n, p] : {std::pair{std::string(".uz"), &uz_p_},
                            {std::string(".ur"), &ur_p_},
                            {std::string(".uh"), &uh_p_}}) {
            out.push_back({prefix + n, &p->value});
            out.push_back({prefix + n + ".vel", &p->velocity});
        }
    }

    std::unique_ptr<Encoder> clone() const override {
        return std::make_unique<RecurrentEncoder>(*this);
    }
    int out_dim() const override { return cfg_.feature_dim; }

private:
    EncoderConfig cfg_;
    Linear wz_, wr_, wh_;
    Parameter uz_p_, ur_p_, uh_p_;
};

inline std::unique_ptr<Encoder> make_encoder(const EncoderConfig& cfg) {
    if (cfg.kind == EncoderKind::graph_conv)
        return std::make_unique<GraphConvEncoder>(cfg);
    return std::make_unique<RecurrentEncoder>(cfg);
}

// Linear -> BatchNorm -> ReLU -> Linear (the paper's projector/predictor).
struct MLPHead {
    Linear fc1, fc2;
    BatchNorm bn;

    MLPHead() = default;
    MLPHead(int in, int hidden, int out) : fc1(in, hidden), fc2(hidden, out), bn(hidden) {}

    void init(std::mt19937_64& rng) { fc1.init(rng); fc2.init(rng); }

    Var forward(const Var& x, bool training, bool g) {
        return fc2.forward(ag::relu(bn.forward(fc1.forward(x, g), training, g)), g);
    }
    void params(std::vector<Parameter*>& out) { fc1.params(out); bn.params(out); fc2.params(out); }
    void state(const std::string& p, StateDict& out) {
        fc1.state(p + ".fc1", out);
        bn.state(p + ".bn", out);
        fc2.state(p + ".fc2", out);
    }
    size_t param_count() {
        std::vector<Parameter*> ps;
        params(ps);
        size_t n = 0;
        for (auto* p : ps) n += static_cast<size_t>(p->value.size());
        return n;
    }
};

// Packs person 0 of each sequence into the (N*T*V) x 3 encoder input layout.
inline Mat pack_batch(const std::vector<const skel::SkeletonSequence*>& batch) {
    if (batch.empty()) throw ShapeError("pack_batch: empty batch");
    const int T = batch[0]->T, V = batch[0]->V;
    const int N = static_cast<int>(batch.size());
    Mat out(static_cast<Eigen::Index>(N) * T * V, 3);
    for (int n = 0; n < N; ++n) {
        const auto& s = *batch[n];
        if (s.T != T || s.V != V) throw ShapeError("pack_batch: ragged batch");
        for (int t = 0; t < T; ++t)
            for (int v = 0; v < V; ++v)
                for (int c = 0; c < 3; ++c)
                    out((static_cast<Eigen::Index>(n) * T + t) * V + v, c) =
                        s.at(t, v, c, 0);
    }
    return out;
}

struct ModelPair {
    std::unique_ptr<Encoder> online_encoder, target_encoder;
    MLPHead online_projector, online_predictor, target_projector;
    double tau = 0.996;
    EncoderConfig enc_cfg;
    HeadConfig head_cfg;
    bool use_predictor = true;

    std::vector<Parameter*> online_params() {
        std::vector<Parameter*> ps;
        online_encoder->params(ps);
        online_projector.params(ps);
        if (use_predictor) online_predictor.params(ps);
        return ps;
    }
    std::vector<Parameter*> target_params() {
        std::vector<Parameter*> ps;
        target_encoder->params(ps);
        target_projector.params(ps);
        return ps;
    }
    // the EMA-tracked subset of the online side (encoder + projector)
    std::vector<Parameter*> online_ema_sources() {
        std::vector<Parameter*> ps;
        online_encoder->params(ps);
        online_projector.params(ps);
        return ps;
    }

    StateDict state() {
        StateDict sd;
        online_encoder->state("online.encoder", sd);
        online_projector.state("online.projector", sd);
        online_predictor.state("online.predictor", sd);
        target_encoder->state("target.encoder", sd);
        target_projector.state("target.projector", sd);
        return sd;
    }

    struct Forward {
        Var y, z, p;
    };

    Forward forward_online(const Mat& input, int N, int T, bool training) {
        Forward f;
        f.y = online_encoder->forward(input, N, T, training, true);
        f.z = online_projector.forward(f.y, training, true);
        f.p = use_predictor ? online_predictor.forward(f.z, training, true) : f.z;
        return f;
    }

    // Target forward carries no gradient by construction.
    Var forward_target(const Mat& input, int N, int T, bool training) {
        Var y = target_encoder->forward(input, N, T, training, false);
        return target_projector.forward(y, training, false);
    }

    Var encode_eval(const Mat& input, int N, int T) {
        return online_encoder->forward(input, N, T, false, false);
    }
};

inline void copy_state(const StateDict& src, StateDict& dst) {
    if (src.size() != dst.size()) throw ArchitectureMismatch("state dict size mismatch");
    for (size_t i = 0; i < src.size(); ++i) *dst[i].second = *src[i].second;
}

inline ModelPair init_model_pair(const EncoderConfig& enc, const HeadConfig& head,
                                 double tau, uint64_t seed) {
    if (tau < 0.0 || tau > 1.0) throw ParameterError("tau must be in [0,1]");
    ModelPair pair;
    pair.enc_cfg = enc;
    pair.head_cfg = head;
    pair.tau = tau;
    std::mt19937_64 rng(seed);
    pair.online_encoder = make_encoder(enc);
    if (enc.kind == EncoderKind::graph_conv)
        static_cast<GraphConvEncoder*>(pair.online_encoder.get())->init(rng);
    else
        static_cast<RecurrentEncoder*>(pair.online_encoder.get())->init(rng);
    pair.online_projector = MLPHead(enc.feature_dim, head.hidden_dim, head.out_dim);
    pair.online_projector.init(rng);
    pair.online_predictor = MLPHead(head.out_dim, head.hidden_dim, head.out_dim);
    pair.online_predictor.init(rng);
    // target starts as an exact copy of the online encoder + projector
    pair.target_encoder = pair.online_encoder->clone();
    pair.target_projector = pair.online_projector;
    return pair;
}

// xi <- tau * xi + (1 - tau) * theta, elementwise over encoder + projector.
inline void ema_update(ModelPair& pair) {
    auto online = pair.online_ema_sources();
    auto target = pair.target_params();
    if (online.size() != target.size())
        throw ArchitectureMismatch("online/target parameter trees differ");
    for (size_t i = 0; i < online.size(); ++i) {
        if (online[i]->value.rows() != target[i]->value.rows() ||
            online[i]->value.cols() != target[i]->value.cols())
            throw ArchitectureMismatch("parameter shape mismatch in EMA");
        target[i]->value = pair.tau * target[i]->value +
                           (1.0 - pair.tau) * online[i]->value;
    }
}

// --- CMCS-CKPT-1 checkpoint container ---------------------------------

inline void write_u32(std::ostream& out, uint32_t x) {
    unsigned char b[4] = {static_cast<unsigned char>(x & 0xff),
                          static_cast<unsigned char>((x >> 8) & 0xff),
                          static_cast<unsigned char>((x >> 16) & 0xff),
                          static_cast<unsigned char>((x >> 24) & 0xff)};
    out.write(reinterpret_cast<char*>(b), 4);
}

inline uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw FormatError("truncated checkpoint");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

// meta: arbitrary JSON (epoch counter, config snapshot, RNG states).
inline void save_checkpoint(const std::string& path, const nlohmann::json& meta,
                            const StateDict& state) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open checkpoint for write: " + path);
    const std::string tag = "CMCS-CKPT-1\n";
    out.write(tag.data(), static_cast<std::streamsize>(tag.size()));
    std::string meta_s = meta.dump();
    write_u32(out, static_cast<uint32_t>(meta_s.size()));
    out.write(meta_s.data(), static_cast<std::streamsize>(meta_s.size()));
    write_u32(out, static_cast<uint32_t>(state.size()));
    for (const auto& [name, mat] : state) {
        write_u32(out, static_cast<uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_u32(out, static_cast<uint32_t>(mat->rows()));
        write_u32(out, static_cast<uint32_t>(mat->cols()));
        out.write(reinterpret_cast<const char*>(mat->data()),
                  static_cast<std::streamsize>(mat->size() * sizeof(double)));
    }
    if (!out) throw FormatError("short write on checkpoint: " + path);
}

inline nlohmann::json load_checkpoint(const std::string& path, StateDict& state) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint: " + path);
    std::string tag(12, '\0');
    in.read(tag.data(), 12);
    if (!in || tag != "CMCS-CKPT-1\n")
        throw FormatError("bad checkpoint format tag in " + path);
    uint32_t meta_len = read_u32(in);
    std::string meta_s(meta_len, '\0');
    in.read(meta_s.data(), meta_len);
    if (!in) throw FormatError("truncated checkpoint meta in " + path);
    nlohmann::json meta = nlohmann::json::parse(meta_s, nullptr, false);
    if (meta.is_discarded()) throw FormatError("bad checkpoint meta JSON in " + path);
    uint32_t count = read_u32(in);
    if (count != state.size())
        throw ArchitectureMismatch("checkpoint tensor count mismatch");
    for (uint32_t i = 0; i < count; ++i) {
        uint32_t name_len = read_u32(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        uint32_t rows = read_u32(in), cols = read_u32(in);
        if (name != state[i].first)
            throw ArchitectureMismatch("checkpoint tensor name mismatch: " + name +
                                       " vs " + state[i].first);
        Mat& m = *state[i].second;
        if (m.rows() != static_cast<Eigen::Index>(rows) ||
            m.cols() != static_cast<Eigen::Index>(cols))
            throw ArchitectureMismatch("checkpoint tensor shape mismatch: " + name);
        in.read(reinterpret_cast<char*>(m.data()),
                static_cast<std::streamsize>(m.size() * sizeof(double)));
        if (!in) throw FormatError("truncated tensor payload in " + path);
    }
    return meta;
}

} // namespace cmcs::nn
