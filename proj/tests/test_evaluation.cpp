#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <random>

#include "cmcs/evaluation.hpp"
#include "cmcs/synthetic.hpp"

using namespace cmcs;
using ag::Mat;
using train::Stream;

namespace {

Mat random_mat(int r, int c, std::mt19937_64& rng) {
    std::normal_distribution<double> d(0.0, 1.0);
    Mat m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
    return m;
}

eval::FeatureMatrix make_features(const Mat& f, std::vector<int> labels) {
    eval::FeatureMatrix fm;
    fm.features = f;
    fm.labels = std::move(labels);
    return fm;
}

// brute-force cosine KNN: full sort, same tie rules
double knn_oracle(const eval::FeatureMatrix& tr, const eval::FeatureMatrix& te, int k) {
    const int ntr = static_cast<int>(tr.features.rows());
    int correct = 0;
    for (int i = 0; i < te.features.rows(); ++i) {
        Eigen::RowVectorXd q = te.features.row(i).normalized();
        std::vector<std::pair<double, int>> sims;
        for (int j = 0; j < ntr; ++j)
            sims.push_back({q.dot(tr.features.row(j).normalized()), j});
        std::sort(sims.begin(), sims.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        std::map<int, std::pair<int, double>> votes;
        for (int j = 0; j < k; ++j) {
            auto& v = votes[tr.labels[sims[j].second]];
            v.first += 1;
            v.second += sims[j].first;
        }
        int best = -1;
        std::pair<int, double> bv{-1, 0.0};
        for (auto& [l, v] : votes)
            if (v.first > bv.first || (v.first == bv.first && v.second > bv.second)) {
                best = l; bv = v;
            }
        if (best == te.labels[i]) ++correct;
    }
    return static_cast<double>(correct) / te.features.rows();
}

struct Fixture {
    train::TrainingData train_data, test_data;
    int num_classes = 3;
};

Fixture small_dataset() {
    skel::SynthParams p;
    p.num_classes = 3;
    p.per_class = 12;
    p.T = 16;
    p.V = 5;
    p.seed = 7;
    auto ds = skel::generate_synthetic_dataset(p);
    std::vector<skel::SkeletonSequence> tr_seqs, te_seqs;
    std::vector<int> tr_labels, te_labels;
    auto [tr, te] = skel::split_by_subject(ds.manifest, {10, 11, 12});
    for (int i : tr) {
        tr_seqs.push_back(ds.sequences[i]);
        tr_labels.push_back(ds.manifest.entries[i].label);
    }
    for (int i : te) {
        te_seqs.push_back(ds.sequences[i]);
        te_labels.push_back(ds.manifest.entries[i].label);
    }
    Fixture f;
    f.train_data = train::prepare_data(tr_seqs, tr_labels, ds.topology, 8, 0);
    f.test_data = train::prepare_data(te_seqs, te_labels, ds.topology, 8, 0);
    return f;
}

nn::ModelPair small_pair(uint64_t seed, int V = 5, int d_y = 12) {
    nn::EncoderConfig cfg;
    cfg.feature_dim = d_y;
    cfg.num_joints = V;
    cfg.topology = skel::make_chain_topology(V);
    return nn::init_model_pair(cfg, nn::HeadConfig{16, 8}, 0.996, seed);
}

} // namespace

TEST_CASE("extract_features is deterministic and counts rows") {
    auto fx = small_dataset();
    auto pair = small_pair(3);
    auto a = eval::extract_features(pair, fx.test_data, Stream::joint);
    auto b = eval::extract_features(pair, fx.test_data, Stream::joint);
    REQUIRE(a.features == b.features);
    REQUIRE(a.features.rows() == static_cast<Eigen::Index>(fx.test_data.size()));
    REQUIRE(a.labels == fx.test_data.labels);
    // different streams give different features
    auto m = eval::extract_features(pair, fx.test_data, Stream::motion);
    REQUIRE(a.features != m.features);
}

TEST_CASE("knn k=1 recovers the label of an identical train point") {
    std::mt19937_64 rng(1);
    Mat tr = random_mat(10, 4, rng);
    auto train_set = make_features(tr, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
    auto test_set = make_features(tr.row(6), {6});
    REQUIRE(eval::knn_eval(train_set, test_set, 1) == 1.0);
}

TEST_CASE("knn on a hand-placed planar toy set") {
    // two clusters by direction: class 0 near +x, class 1 near +y
    Mat tr(6, 2);
    tr << 1.0, 0.0,
          0.9, 0.1,
          1.0, -0.1,
          0.0, 1.0,
          0.1, 0.9,
          -0.1, 1.0;
    auto train_set = make_features(tr, {0, 0, 0, 1, 1, 1});
    Mat te(4, 2);
    te << 2.0, 0.2,
          0.2, 2.0,
          1.0, 0.1,
          0.0, 0.5;
    auto test_set = make_features(te, {0, 1, 0, 1});
    double got = eval::knn_eval(train_set, test_set, 3);
    REQUIRE(got == 1.0);
    REQUIRE(got == knn_oracle(train_set, test_set, 3));
}

TEST_CASE("knn matches the exhaustive oracle on random instances") {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 60; ++trial) {
        int ntr = 4 + static_cast<int>(rng() % 7);
        int nte = 2 + static_cast<int>(rng() % 5);
        int k = 1 + static_cast<int>(rng() % ntr);
        std::vector<int> trl(ntr), tel(nte);
        for (auto& l : trl) l = static_cast<int>(rng() % 3);
        for (auto& l : tel) l = static_cast<int>(rng() % 3);
        auto train_set = make_features(random_mat(ntr, 5, rng), trl);
        auto test_set = make_features(random_mat(nte, 5, rng), tel);
        REQUIRE(eval::knn_eval(train_set, test_set, k) ==
                knn_oracle(train_set, test_set, k));
    }
}

TEST_CASE("knn is invariant to common positive feature rescaling") {
    std::mt19937_64 rng(3);
    std::vector<int> trl = {0, 1, 0, 1, 2, 2, 0, 1}, tel = {0, 1, 2, 0};
    auto train_set = make_features(random_mat(8, 6, rng), trl);
    auto test_set = make_features(random_mat(4, 6, rng), tel);
    double base = eval::knn_eval(train_set, test_set, 3);
    train_set.features *= 7.5;
    test_set.features *= 0.03;
    REQUIRE(eval::knn_eval(train_set, test_set, 3) == base);
}

TEST_CASE("knn rejects bad arguments") {
    std::mt19937_64 rng(4);
    auto train_set = make_features(random_mat(5, 3, rng), {0, 1, 0, 1, 0});
    auto test_set = make_features(random_mat(2, 3, rng), {0, 1});
    REQUIRE_THROWS_AS(eval::knn_eval(train_set, test_set, 0), ParameterError);
    REQUIRE_THROWS_AS(eval::knn_eval(train_set, test_set, 6), ParameterError);
    eval::FeatureMatrix empty;
    empty.features = Mat(0, 3);
    REQUIRE_THROWS_AS(eval::knn_eval(empty, test_set, 1), EmptySplit);
}

TEST_CASE("protocol defaults follow the evaluation schedule") {
    eval::ProtocolConfig pc;
    REQUIRE(pc.lr == 3.0);
    REQUIRE(pc.epochs == 100);
    REQUIRE(pc.lr_drop_epoch == 80);
    REQUIRE(pc.lr_drop_factor == 10.0);
    REQUIRE(pc.batch_size == 128);
}

TEST_CASE("linear head reaches full accuracy on separable features") {
    // three classes at well-separated means
    std::mt19937_64 rng(5);
    const int per = 20, d = 6;
    Mat tr(3 * per, d), te(3 * per, d);
    std::vector<int> trl, tel;
    std::normal_distribution<double> noise(0.0, 0.05);
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < per; ++i) {
            Eigen::RowVectorXd mu = Eigen::RowVectorXd::Zero(d);
            mu(c) = 2.0;
            for (int j = 0; j < d; ++j) {
                tr(c * per + i, j) = mu(j) + noise(rng);
                te(c * per + i, j) = mu(j) + noise(rng);
            }
            trl.push_back(c);
            tel.push_back(c);
        }
    eval::ProtocolConfig pc;
    pc.epochs = 20;
    pc.lr = 0.5;
    pc.batch_size = 16;
    auto [acc, head] = eval::train_linear_head(make_features(tr, trl),
                                               make_features(te, tel), 3, pc);
    REQUIRE(acc == 1.0);
    REQUIRE(head.W.value.cols() == 3);
}

TEST_CASE("linear_eval leaves the encoder bitwise unchanged") {
    auto fx = small_dataset();
    auto pair = small_pair(6);
    std::vector<ag::Parameter*> ps;
    pair.online_encoder->params(ps);
    std::vector<Mat> before;
    for (auto* p : ps) before.push_back(p->value);
    eval::ProtocolConfig pc;
    pc.epochs = 2;
    pc.batch_size = 16;
    eval::linear_eval(pair, fx.train_data, fx.test_data, Stream::joint,
                      fx.num_classes, pc);
    for (size_t i = 0; i < ps.size(); ++i) REQUIRE(ps[i]->value == before[i]);
}

TEST_CASE("stratified_subset counting and determinism") {
    std::vector<int> labels;
    for (int c = 0; c < 4; ++c)
        for (int i = 0; i < 100; ++i) labels.push_back(c);
    auto a = eval::stratified_subset(labels, 4, 0.1, 11);
    auto b = eval::stratified_subset(labels, 4, 0.1, 11);
    auto c = eval::stratified_subset(labels, 4, 0.1, 12);
    REQUIRE(a == b);
    REQUIRE(a != c);
    REQUIRE(a.size() == 40);
    std::map<int, int> per_class;
    for (int i : a) per_class[labels[i]]++;
    for (auto [cls, cnt] : per_class) REQUIRE(cnt == 10);
    // fraction 1 selects everything
    REQUIRE(eval::stratified_subset(labels, 4, 1.0, 0).size() == labels.size());
    REQUIRE_THROWS_AS(eval::stratified_subset(labels, 4, 0.0, 0), ParameterError);
    REQUIRE_THROWS_AS(eval::stratified_subset(labels, 4, 0.001, 0),
                      StratificationError);
    REQUIRE_THROWS_AS(eval::stratified_subset(labels, 5, 0.5, 0),
                      StratificationError);
}

TEST_CASE("semi at fraction one equals finetune") {
    auto fx = small_dataset();
    eval::ProtocolConfig pc;
    pc.epochs = 2;
    pc.lr = 0.05;
    pc.batch_size = 8;
    pc.seed = 21;
    auto pair_a = small_pair(7);
    auto pair_b = small_pair(7);
    double semi = eval::semi_eval(pair_a, fx.train_data, fx.test_data, Stream::joint,
                                  fx.num_classes, 1.0, pc);
    double fine = eval::finetune_eval(pair_b, fx.train_data, fx.test_data,
                                      Stream::joint, fx.num_classes, pc);
    REQUIRE(semi == fine);
    // and the trained encoders agree bitwise
    std::vector<ag::Parameter*> pa, pb;
    pair_a.online_encoder->params(pa);
    pair_b.online_encoder->params(pb);
    for (size_t i = 0; i < pa.size(); ++i) REQUIRE(pa[i]->value == pb[i]->value);
}

TEST_CASE("zero-epoch finetune equals the frozen-random-head baseline") {
    auto fx = small_dataset();
    eval::ProtocolConfig pc;
    pc.epochs = 0;
    pc.seed = 31;
    auto pair = small_pair(8);
    auto fte = eval::extract_features(pair, fx.test_data, Stream::joint);
    nn::Linear head(pair.enc_cfg.feature_dim, fx.num_classes);
    std::mt19937_64 rng(pc.seed);
    head.init(rng);
    Mat logits = head.forward(ag::constant(fte.features), false)->value;
    double baseline = eval::accuracy_of(logits, fte.labels);
    double got = eval::finetune_eval(pair, fx.train_data, fx.test_data, Stream::joint,
                                     fx.num_classes, pc);
    REQUIRE(got == baseline);
}

TEST_CASE("ensemble_scores arithmetic and oracle") {
    std::mt19937_64 rng(9);
    Mat l = random_mat(5, 3, rng);
    // idempotence
    REQUIRE((eval::ensemble_scores({l, l, l}) - l).norm() < 1e-12);
    // zeros + L -> L/2
    Mat half = eval::ensemble_scores({Mat::Zero(5, 3), l});
    REQUIRE((half - 0.5 * l).norm() < 1e-12);
    // sum rule
    Mat summed = eval::ensemble_scores({l, l}, eval::EnsembleRule::sum);
    REQUIRE((summed - 2.0 * l).norm() < 1e-12);
    // loop oracle over random triples
    for (int trial = 0; trial < 50; ++trial) {
        Mat a = random_mat(4, 3, rng), b = random_mat(4, 3, rng),
            c = random_mat(4, 3, rng);
        Mat e = eval::ensemble_scores({a, b, c});
        for (int i = 0; i < 4; ++i) {
            Eigen::Index got, want;
            e.row(i).maxCoeff(&got);
            Eigen::RowVectorXd mean = (a.row(i) + b.row(i) + c.row(i)) / 3.0;
            mean.maxCoeff(&want);
            REQUIRE(got == want);
        }
    }
    REQUIRE_THROWS_AS(eval::ensemble_scores({}), ShapeError);
    REQUIRE_THROWS_AS(eval::ensemble_scores({l, Mat::Zero(4, 3)}), ShapeError);
}

TEST_CASE("ensemble argmax ignores per-row constants") {
    std::mt19937_64 rng(10);
    Mat a = random_mat(6, 4, rng), b = random_mat(6, 4, rng);
    Mat base = eval::ensemble_scores({a, b});
    Mat a2 = a, b2 = b;
    for (int i = 0; i < 6; ++i) {
        a2.row(i).array() += 3.0 * i;
        b2.row(i).array() -= 1.5 * i;
    }
    Mat shifted = eval::ensemble_scores({a2, b2});
    for (int i = 0; i < 6; ++i) {
        Eigen::Index x, y;
        base.row(i).maxCoeff(&x);
        shifted.row(i).maxCoeff(&y);
        REQUIRE(x == y);
    }
}

TEST_CASE("nmi endpoint and hand-computed values") {
    std::vector<int> t = {0, 0, 0, 1, 1, 1};
    REQUIRE(eval::nmi(t, t) == Catch::Approx(1.0));
    REQUIRE(eval::nmi(t, {7, 7, 7, 7, 7, 7}) == 0.0);
    // relabeling clusters does not change NMI
    REQUIRE(eval::nmi(t, {5, 5, 5, 2, 2, 2}) == Catch::Approx(1.0));
    // hand-computed 6-element example: pred = {0,0,1,1,1,1}
    std::vector<int> p = {0, 0, 1, 1, 1, 1};
    double ha = std::log(2.0);
    double hb = -((1.0 / 3) * std::log(1.0 / 3) + (2.0 / 3) * std::log(2.0 / 3));
    double mi = (1.0 / 3) * std::log((1.0 / 3) / (0.5 * (1.0 / 3))) +
                (1.0 / 6) * std::log((1.0 / 6) / (0.5 * (2.0 / 3))) +
                (1.0 / 2) * std::log((1.0 / 2) / (0.5 * (2.0 / 3)));
    REQUIRE(eval::nmi(t, p) == Catch::Approx(mi / (0.5 * (ha + hb))).margin(1e-12));
    REQUIRE_THROWS_AS(eval::nmi(t, {0, 1}), ShapeError);
}

TEST_CASE("kmeans separates well-spaced clusters") {
    std::mt19937_64 rng(12);
    const int per = 15;
    Mat x(3 * per, 2);
    std::vector<int> truth;
    std::normal_distribution<double> noise(0.0, 0.1);
    double centers[3][2] = {{0, 0}, {10, 0}, {0, 10}};
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < per; ++i) {
            x(c * per + i, 0) = centers[c][0] + noise(rng);
            x(c * per + i, 1) = centers[c][1] + noise(rng);
            truth.push_back(c);
        }
    auto assign = eval::kmeans(x, 3, 10, 5);
    REQUIRE(eval::nmi(truth, assign) == Catch::Approx(1.0));
    REQUIRE_THROWS_AS(eval::kmeans(x, 0), ParameterError);
}

TEST_CASE("feature and pca export write readable csv") {
    std::mt19937_64 rng(13);
    auto fm = make_features(random_mat(6, 4, rng), {0, 1, 2, 0, 1, 2});
    eval::write_features_csv(fm, "test_feat.csv");
    eval::write_pca_csv(fm, "test_pca.csv");
    std::ifstream f("test_feat.csv");
    std::string header;
    std::getline(f, header);
    REQUIRE(header == "label,f0,f1,f2,f3");
    int lines = 0;
    std::string line;
    while (std::getline(f, line)) ++lines;
    REQUIRE(lines == 6);
    std::ifstream g("test_pca.csv");
    std::getline(g, header);
    REQUIRE(header == "label,pc0,pc1");
    // pca projection keeps row count and is centered
    Mat p = eval::pca2(fm.features);
    REQUIRE(p.rows() == 6);
    REQUIRE(p.cols() == 2);
    REQUIRE(p.colwise().mean().norm() < 1e-10);
    std::remove("test_feat.csv");
    std::remove("test_pca.csv");
}
