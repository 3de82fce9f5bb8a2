#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "cmcs/training.hpp"

using namespace cmcs;
using ag::Mat;
using ag::Var;
using train::Stream;

namespace {

train::TrainingData tiny_data(int num_classes = 3, int per_class = 8,
                              uint64_t seed = 7) {
    skel::SynthParams p;
    p.num_classes = num_classes;
    p.per_class = per_class;
    p.T = 16;
    p.V = 5;
    p.seed = seed;
    auto ds = skel::generate_synthetic_dataset(p);
    std::vector<int> labels;
    for (const auto& e : ds.manifest.entries) labels.push_back(e.label);
    return train::prepare_data(ds.sequences, labels, ds.topology, 8, 0);
}

train::TrainConfig tiny_config(std::vector<Stream> streams = {Stream::joint},
                               uint64_t seed = 5) {
    train::TrainConfig cfg;
    cfg.batch_size = 4;
    cfg.total_epochs = 2;
    cfg.stage1_epochs = 1;
    cfg.lr = 0.05;
    cfg.seed = seed;
    cfg.streams = std::move(streams);
    cfg.enc.feature_dim = 12;
    cfg.enc.num_joints = 5;
    cfg.enc.topology = skel::make_chain_topology(5);
    cfg.head.hidden_dim = 16;
    cfg.head.out_dim = 8;
    cfg.checkpoint_every = 0;
    return cfg;
}

std::vector<Mat> snapshot(const std::vector<ag::Parameter*>& ps) {
    std::vector<Mat> out;
    for (auto* p : ps) out.push_back(p->value);
    return out;
}

bool states_equal(train::Trainer& a, train::Trainer& b, double tol = 0.0) {
    auto sa = a.state(), sb = b.state();
    if (sa.size() != sb.size()) return false;
    for (size_t i = 0; i < sa.size(); ++i) {
        if (sa[i].first != sb[i].first) return false;
        const Mat& x = *sa[i].second;
        const Mat& y = *sb[i].second;
        if (tol == 0.0) {
            if (x != y) return false;
        } else {
            double denom = std::max(1.0, x.norm());
            if ((x - y).norm() / denom > tol) return false;
        }
    }
    return true;
}

} // namespace

TEST_CASE("config validation rejects bad settings") {
    auto cfg = tiny_config();
    auto data = tiny_data();
    cfg.batch_size = 1;
    REQUIRE_THROWS_AS(train::Trainer(cfg, data), ConfigError);
    cfg = tiny_config();
    cfg.stage1_epochs = 3; // > total_epochs
    REQUIRE_THROWS_AS(train::Trainer(cfg, data), ConfigError);
    cfg = tiny_config();
    cfg.streams.clear();
    REQUIRE_THROWS_AS(train::Trainer(cfg, data), ConfigError);
}

TEST_CASE("stream names round trip") {
    for (Stream s : {Stream::joint, Stream::motion, Stream::bone})
        REQUIRE(train::stream_from_name(train::stream_name(s)) == s);
    REQUIRE_THROWS_AS(train::stream_from_name("velocity"), ConfigError);
}

TEST_CASE("sgd step matches the closed-form momentum update") {
    // w' = w - lr * (mu * v + g + wd * w), v' = mu * v + g + wd * w
    ag::Parameter p(Mat::Constant(1, 1, 2.0));
    const double a = 0.5, lr = 0.1, mu = 0.9, wd = 0.01;
    auto grad_of = [&](double w) { return w - a; };
    double w = 2.0, v = 0.0;
    for (int step = 0; step < 4; ++step) {
        p.grad(0, 0) = grad_of(p.value(0, 0));
        train::sgd_step({&p}, lr, mu, wd);
        double g = grad_of(w) + wd * w;
        v = mu * v + g;
        w -= lr * v;
        REQUIRE(p.value(0, 0) == Catch::Approx(w).margin(1e-15));
        REQUIRE(p.velocity(0, 0) == Catch::Approx(v).margin(1e-15));
    }
}

TEST_CASE("zero learning rate freezes online weights but EMA still runs") {
    auto cfg = tiny_config();
    cfg.lr = 0.0;
    cfg.weight_decay = 0.0;
    cfg.tau = 0.9;
    auto data = tiny_data();
    train::Trainer trainer(cfg, data);
    auto& pair = trainer.pair(Stream::joint);
    // separate the target from the online weights so EMA motion is visible
    for (auto* p : pair.target_params()) p->value.array() += 0.25;
    auto online_before = snapshot(pair.online_params());
    auto target_before = snapshot(pair.target_params());
    trainer.train_step_stage1({0, 1, 2, 3});
    auto op = pair.online_params();
    // batch-norm running stats move, but parameters must not
    for (size_t i = 0; i < op.size(); ++i) REQUIRE(op[i]->value == online_before[i]);
    auto tp = pair.target_params();
    bool target_moved = false;
    for (size_t i = 0; i < tp.size(); ++i)
        target_moved = target_moved || tp[i]->value != target_before[i];
    REQUIRE(target_moved);
    // the EMA moved the target toward the online weights by factor (1 - tau)
    Mat expected = 0.9 * target_before[0] + 0.1 * online_before[0];
    REQUIRE((tp[0]->value - expected).norm() < 1e-12);
}

TEST_CASE("training steps are bitwise deterministic") {
    auto data = tiny_data();
    train::Trainer a(tiny_config({Stream::joint, Stream::motion, Stream::bone}), data);
    train::Trainer b(tiny_config({Stream::joint, Stream::motion, Stream::bone}), data);
    auto ma = a.train_step_stage1({0, 1, 2, 3});
    auto mb = b.train_step_stage1({0, 1, 2, 3});
    REQUIRE(ma.stream_loss == mb.stream_loss);
    auto m2a = a.train_step_stage2({4, 5, 6, 7});
    auto m2b = b.train_step_stage2({4, 5, 6, 7});
    REQUIRE(m2a.stream_loss == m2b.stream_loss);
    REQUIRE(m2a.cscl == m2b.cscl);
    REQUIRE(m2a.pseudo_density == m2b.pseudo_density);
    REQUIRE(states_equal(a, b));
}

TEST_CASE("stage-1 loss trends downward over many steps") {
    auto cfg = tiny_config();
    cfg.lr = 0.02;
    auto data = tiny_data(3, 8);
    train::Trainer trainer(cfg, data);
    std::mt19937_64 rng(3);
    std::vector<double> losses;
    const int steps = 150;
    for (int s = 0; s < steps; ++s) {
        std::vector<int> batch(4);
        for (auto& i : batch) i = static_cast<int>(rng() % data.size());
        auto m = trainer.train_step_stage1(batch);
        losses.push_back(m.stream_loss.at("joint"));
    }
    auto avg = [&](int from) {
        double s = 0;
        for (int i = from; i < from + 20; ++i) s += losses[i];
        return s / 20;
    };
    REQUIRE(avg(steps - 20) < avg(0));
}

TEST_CASE("stage 2 with gamma zero reproduces the stage-1 update") {
    auto cfg = tiny_config({Stream::joint, Stream::motion, Stream::bone});
    cfg.weights.gamma = 0.0;
    cfg.weights.lambda_ = 1.0;
    auto data = tiny_data();
    train::Trainer a(cfg, data), b(cfg, data);
    std::vector<int> batch = {0, 3, 5, 9};
    auto m1 = a.train_step_stage1(batch);
    auto m2 = b.train_step_stage2(batch);
    for (auto& [name, v] : m1.stream_loss)
        REQUIRE(v == m2.stream_loss.at(name));
    REQUIRE(states_equal(a, b, 1e-12));
}

TEST_CASE("pseudo-label matches a brute-force pipeline oracle") {
    auto cfg = tiny_config({Stream::joint, Stream::motion, Stream::bone});
    auto data = tiny_data();
    train::Trainer trainer(cfg, data);
    std::vector<int> batch = {0, 1, 2, 3, 4, 5, 6, 7};
    const int n = static_cast<int>(batch.size());

    // gather the six similarity matrices exactly as stage 2 does
    std::array<Mat, 6> sims;
    int slot = 0;
    for (Stream s : cfg.streams) {
        auto fwd = trainer.forward_stream(s, batch);
        Mat q = fwd.f.p->value, qp = fwd.fp.p->value;
        Mat k = fwd.z_t->value, kp = fwd.z_tp->value;
        for (Mat* m : {&q, &qp, &k, &kp})
            for (int i = 0; i < n; ++i) m->row(i) /= m->row(i).norm();
        Mat s1(n, n), s2(n, n);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                s1(i, j) = q.row(i).dot(kp.row(j));
                s2(i, j) = qp.row(i).dot(k.row(j));
            }
        sims[slot++] = s1;
        sims[slot++] = s2;
    }

    loss::SimilarityBundle bundle;
    for (int i = 0; i < 6; ++i) bundle.sims[i] = ag::constant(sims[i]);
    auto label = loss::compute_pseudo_label(bundle, cfg.top_k);

    // independent re-implementation: per-row top-k via exhaustive count,
    // AND within stream, majority across streams
    Mat oracle(n, n);
    auto sharp = [&](const Mat& s, int i, int j) {
        if (i == j) return 1;
        int better = 0;
        for (int c = 0; c < n; ++c) {
            if (c == i || c == j) continue;
            if (s(i, c) > s(i, j) || (s(i, c) == s(i, j) && c < j)) ++better;
        }
        return better < cfg.top_k ? 1 : 0;
    };
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            int votes = 0;
            for (int st = 0; st < 3; ++st)
                votes += sharp(sims[2 * st], i, j) & sharp(sims[2 * st + 1], i, j);
            oracle(i, j) = votes >= 2 ? 1.0 : 0.0;
        }
    REQUIRE(label.matrix == oracle);
    // pure function of features and k: recomputation is bit-identical
    REQUIRE(loss::compute_pseudo_label(bundle, cfg.top_k).matrix == label.matrix);
}

TEST_CASE("stage-2 backward leaves target gradients at zero") {
    auto cfg = tiny_config({Stream::joint, Stream::motion, Stream::bone});
    auto data = tiny_data();
    train::Trainer trainer(cfg, data);
    trainer.train_step_stage2({0, 1, 2, 3});
    for (Stream s : cfg.streams)
        for (auto* p : trainer.pair(s).target_params())
            REQUIRE(p->grad.isZero(0.0));
}

TEST_CASE("gradients do not flow through the pseudo-label") {
    // the label enters cscl_loss as a plain matrix; gradients on the
    // similarity inputs must be identical whether the label is computed in
    // place or supplied as a cached copy
    std::mt19937_64 rng(11);
    const int n = 5;
    auto randm = [&] {
        std::normal_distribution<double> d(0.0, 1.0);
        Mat m(n, 8);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
        return m;
    };
    std::vector<ag::Parameter> feats;
    for (int i = 0; i < 6; ++i) feats.emplace_back(randm());
    auto run = [&](const Mat* cached_label) {
        loss::SimilarityBundle bundle;
        for (int i = 0; i < 6; i += 2) {
            Var a = ag::row_l2_normalize(ag::leaf(feats[i]));
            Var b = ag::row_l2_normalize(ag::leaf(feats[i + 1]));
            bundle.sims[i] = loss::batch_similarity(a, b);
            bundle.sims[i + 1] = loss::batch_similarity(b, a);
        }
        loss::PseudoLabelMatrix label;
        if (cached_label) {
            label.matrix = *cached_label;
        } else {
            label = loss::compute_pseudo_label(bundle, 2);
        }
        for (auto& f : feats) f.zero_grad();
        ag::backward(loss::cscl_loss(label, bundle));
        std::vector<Mat> grads;
        for (auto& f : feats) grads.push_back(f.grad);
        return std::pair(label.matrix, grads);
    };
    auto [label, grads_live] = run(nullptr);
    auto [label2, grads_cached] = run(&label);
    REQUIRE(label == label2);
    for (size_t i = 0; i < grads_live.size(); ++i)
        REQUIRE(grads_live[i] == grads_cached[i]);
}

TEST_CASE("run_epoch writes parseable step and epoch metrics") {
    auto cfg = tiny_config();
    auto data = tiny_data(3, 4); // 12 samples, batch 4 -> 3 steps
    train::Trainer trainer(cfg, data);
    std::ostringstream out;
    auto j = trainer.run_epoch(&out);
    REQUIRE(trainer.epochs_done() == 1);
    REQUIRE(j.at("type") == "epoch");
    REQUIRE(j.at("stage") == 1);
    REQUIRE(j.at("mean_loss").is_number());
    double sd_mean = j.at("collapse_std_mean").get<double>();
    REQUIRE(sd_mean > 0.0);
    REQUIRE(sd_mean < 1.0);
    int steps = 0, epochs = 0;
    std::istringstream in(out.str());
    std::string line;
    while (std::getline(in, line)) {
        auto rec = nlohmann::json::parse(line);
        if (rec.at("type") == "step") ++steps;
        else ++epochs;
    }
    REQUIRE(steps == 3);
    REQUIRE(epochs == 1);
    // second epoch enters stage 2 and reports pseudo-label density
    auto j2 = trainer.run_epoch(nullptr);
    REQUIRE(j2.at("stage") == 2);
    REQUIRE(j2.at("pseudo_density").get<double>() > 0.0);
}

TEST_CASE("resume from checkpoint continues identically") {
    namespace fs = std::filesystem;
    auto cfg = tiny_config({Stream::joint, Stream::motion}, 17);
    cfg.total_epochs = 4;
    cfg.stage1_epochs = 4; // pure-CMAL run
    auto data = tiny_data(3, 4);

    train::Trainer full(cfg, data);
    full.run_epoch(nullptr);
    full.run_epoch(nullptr);

    train::Trainer half(cfg, data);
    half.run_epoch(nullptr);
    const std::string path = "test_resume.ckpt";
    half.save(path, "snapshot", "hash");

    train::Trainer resumed(cfg, data);
    auto meta = resumed.load(path);
    REQUIRE(meta.at("epoch") == 1);
    REQUIRE(meta.at("config") == "snapshot");
    REQUIRE(resumed.epochs_done() == 1);
    resumed.run_epoch(nullptr);
    REQUIRE(states_equal(full, resumed, 1e-5));
    REQUIRE(states_equal(full, resumed)); // bit-exact on one machine
    std::remove(path.c_str());
}

TEST_CASE("pretrain writes metrics and a final checkpoint") {
    namespace fs = std::filesystem;
    const std::string run_dir = "test_pretrain_run";
    fs::remove_all(run_dir);
    auto cfg = tiny_config();
    cfg.total_epochs = 2;
    cfg.stage1_epochs = 1;
    cfg.checkpoint_every = 1;
    auto data = tiny_data(3, 4);
    train::Trainer trainer(cfg, data);
    std::string final_path = train::pretrain(trainer, run_dir, "cfg", "h");
    REQUIRE(fs::exists(final_path));
    REQUIRE(fs::exists(fs::path(run_dir) / "ckpt_epoch_001.ckpt"));
    REQUIRE(fs::exists(fs::path(run_dir) / "metrics.jsonl"));
    REQUIRE(trainer.epochs_done() == 2);
    std::ifstream m((fs::path(run_dir) / "metrics.jsonl").string());
    std::string line;
    int epoch_lines = 0;
    while (std::getline(m, line))
        if (nlohmann::json::parse(line).at("type") == "epoch") ++epoch_lines;
    REQUIRE(epoch_lines == 2);
    fs::remove_all(run_dir);
}

TEST_CASE("collapse monitor reflects embedding spread") {
    auto cfg = tiny_config();
    auto data = tiny_data();
    train::Trainer trainer(cfg, data);
    auto [mean_sd, min_sd] = trainer.collapse_monitor(Stream::joint);
    REQUIRE(mean_sd > 0.0);
    REQUIRE(min_sd >= 0.0);
    REQUIRE(min_sd <= mean_sd);
    // a freshly initialized network has meaningless batch-norm running
    // statistics, so its eval-mode embeddings are nearly constant; after a
    // short warmup the spread must sit above the collapse threshold
    trainer.run_epoch(nullptr);
    auto [warm_mean, warm_min] = trainer.collapse_monitor(Stream::joint);
    REQUIRE(warm_mean > mean_sd);
    REQUIRE(warm_mean > 0.1 / std::sqrt(static_cast<double>(cfg.head.out_dim)));
}

TEST_CASE("train_config_from maps run config keys") {
    cfg::RunConfig rc;
    rc.set("train.batch_size", "16");
    rc.set("train.gamma", "5.5");
    rc.set("train.streams", "joint, bone");
    rc.set("model.encoder", "recurrent");
    auto topo = skel::make_chain_topology(7);
    auto tc = train::train_config_from(rc, topo);
    REQUIRE(tc.batch_size == 16);
    REQUIRE(tc.weights.gamma == 5.5);
    REQUIRE(tc.streams == std::vector<Stream>{Stream::joint, Stream::bone});
    REQUIRE(tc.enc.kind == nn::EncoderKind::recurrent);
    REQUIRE(tc.enc.num_joints == 7);
    REQUIRE(tc.tau == 0.996);
    REQUIRE(tc.lr == 0.1);
    REQUIRE(tc.momentum == 0.9);
    REQUIRE(tc.weight_decay == 1e-4);
    REQUIRE(tc.top_k == 2);
    REQUIRE(tc.weights.lambda_ == 1.0);
}

TEST_CASE("byol pretext mode trains with the plain symmetrized loss") {
    cfg::RunConfig rc;
    rc.set("train.loss", "byol");
    auto topo = skel::make_chain_topology(5);
    auto tc = train::train_config_from(rc, topo);
    REQUIRE(tc.pretext == train::PretextLoss::byol);
    rc.set("train.loss", "nonsense");
    REQUIRE_THROWS_AS(train::train_config_from(rc, topo), ConfigError);

    auto cfg = tiny_config();
    cfg.pretext = train::PretextLoss::byol;
    train::Trainer trainer(cfg, tiny_data());
    std::vector<int> batch{0, 1, 2, 3};
    auto m = trainer.train_step_stage1(batch);
    // the symmetrized regression loss is a sum of two terms in [0, 4]
    double l = m.stream_loss.at("joint");
    REQUIRE(l >= 0.0);
    REQUIRE(l <= 8.0);
}
