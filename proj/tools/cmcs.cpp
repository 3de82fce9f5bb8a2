// Command-line entry points: pretrain, eval, export, synth.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cmcs/config.hpp"
#include "cmcs/evaluation.hpp"
#include "cmcs/networks.hpp"
#include "cmcs/skeleton.hpp"
#include "cmcs/synthetic.hpp"
#include "cmcs/training.hpp"

namespace fs = std::filesystem;
using namespace cmcs;

namespace {

cfg::RunConfig load_run_config(const std::string& config_path,
                               const std::vector<std::string>& overrides) {
    cfg::RunConfig rc;
    if (!config_path.empty()) {
        if (!fs::exists(config_path))
            throw ConfigError("config file not found: " + config_path);
        rc = cfg::load_config(config_path);
    }
    cfg::apply_overrides(rc, overrides);
    return rc;
}

cfg::RunConfig config_from_canonical(const std::string& text) {
    cfg::RunConfig rc;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        rc.set(line.substr(0, eq), line.substr(eq + 1));
    }
    return rc;
}

std::string default_run_root() {
    const char* env = std::getenv("CMCS_RUN_DIR");
    return env ? env : "runs";
}

skel::BoneTopology topology_from_config(const cfg::RunConfig& rc) {
    if (rc.values.count("data.topology"))
        return skel::read_topology(rc.get("data.topology"));
    std::string dir = rc.get("data.dir");
    std::string path = (fs::path(dir) / "topology.json").string();
    if (fs::exists(path)) return skel::read_topology(path);
    return skel::default_topology25();
}

train::TrainingData load_split(const cfg::RunConfig& rc, const skel::BoneTopology& topo,
                               const std::string& manifest_name) {
    std::string dir = rc.get("data.dir");
    auto manifest = skel::read_manifest((fs::path(dir) / manifest_name).string(),
                                        rc.get_int("data.num_classes"));
    return train::load_data_from_manifest(manifest, dir, topo,
                                          rc.get_int("data.target_frames"),
                                          rc.get_int("data.center_joint"));
}

int cmd_pretrain(const std::string& config_path,
                 const std::vector<std::string>& overrides, std::string run_dir,
                 const std::string& resume) {
    auto rc = load_run_config(config_path, overrides);
    auto topo = topology_from_config(rc);
    auto tc = train::train_config_from(rc, topo);
    auto data = load_split(rc, topo, "train.jsonl");
    train::Trainer trainer(std::move(tc), std::move(data));
    if (!resume.empty()) trainer.load(resume);
    if (run_dir.empty())
        run_dir = (fs::path(default_run_root()) / ("run_" + rc.hash())).string();
    fs::create_directories(run_dir);
    {
        std::ofstream snap((fs::path(run_dir) / "config.snapshot").string());
        snap << rc.canonical();
    }
    std::string final_path;
    try {
        final_path = train::pretrain(trainer, run_dir, rc.canonical(), rc.hash());
    } catch (const TrainingDiverged& e) {
        std::cerr << "training diverged: " << e.what() << "\n";
        return 1;
    }
    std::cout << "checkpoint=" << final_path << "\n";
    return 0;
}

std::pair<train::Trainer, cfg::RunConfig>
trainer_from_checkpoint(const std::string& ckpt,
                        const std::vector<std::string>& overrides) {
    // peek at the stored config to rebuild the architecture
    std::ifstream in(ckpt, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint: " + ckpt);
    std::string tag(12, '\0');
    in.read(tag.data(), 12);
    if (!in || tag != "CMCS-CKPT-1\n") throw FormatError("bad checkpoint tag: " + ckpt);
    uint32_t meta_len = nn::read_u32(in);
    std::string meta_s(meta_len, '\0');
    in.read(meta_s.data(), meta_len);
    if (!in) throw FormatError("truncated checkpoint meta: " + ckpt);
    auto meta = nlohmann::json::parse(meta_s, nullptr, false);
    if (meta.is_discarded()) throw FormatError("bad checkpoint meta: " + ckpt);
    auto rc = config_from_canonical(meta.value("config", ""));
    cfg::apply_overrides(rc, overrides);
    auto topo = topology_from_config(rc);
    auto tc = train::train_config_from(rc, topo);
    auto data = load_split(rc, topo, "train.jsonl");
    train::Trainer trainer(std::move(tc), std::move(data));
    trainer.load(ckpt);
    return {std::move(trainer), std::move(rc)};
}

int cmd_eval(const std::string& ckpt, const std::string& protocol,
             const std::string& stream_name, double fraction,
             const std::vector<std::string>& overrides, std::string out_path) {
    auto [trainer, rc] = trainer_from_checkpoint(ckpt, overrides);
    auto topo = topology_from_config(rc);
    auto train_data = load_split(rc, topo, "train.jsonl");
    auto test_data = load_split(rc, topo, "test.jsonl");
    auto stream = train::stream_from_name(stream_name);
    const int num_classes = rc.get_int("data.num_classes");

    eval::ProtocolConfig pc;
    pc.batch_size = rc.get_int("eval.batch_size");
    pc.seed = rc.get_u64("eval.seed");
    double accuracy = 0.0;
    nlohmann::json result{{"protocol", protocol}, {"stream", stream_name},
                          {"seed", pc.seed}, {"checkpoint", ckpt},
                          {"config_hash", rc.hash()}};
    if (protocol == "knn") {
        int k = rc.get_int("eval.knn_k");
        auto ftr = eval::extract_features(trainer.pair(stream), train_data, stream);
        auto fte = eval::extract_features(trainer.pair(stream), test_data, stream);
        accuracy = eval::knn_eval(ftr, fte, k);
        result["k"] = k;
    } else if (protocol == "linear") {
        pc.lr = rc.get_double("eval.linear_lr");
        pc.epochs = rc.get_int("eval.linear_epochs");
        pc.lr_drop_epoch = rc.get_int("eval.linear_drop_epoch");
        pc.lr_drop_factor = rc.get_double("eval.linear_drop_factor");
        accuracy = eval::linear_eval(trainer.pair(stream), train_data, test_data,
                                     stream, num_classes, pc);
    } else if (protocol == "semi" || protocol == "finetune") {
        pc.lr = rc.get_double("eval.semi_lr");
        pc.epochs = rc.get_int("eval.semi_epochs");
        pc.lr_drop_epoch = rc.get_int("eval.semi_drop_epoch");
        pc.lr_drop_factor = rc.get_double("eval.semi_drop_factor");
        double f = protocol == "finetune" ? 1.0 : fraction;
        accuracy = eval::semi_eval(trainer.pair(stream), train_data, test_data,
                                   stream, num_classes, f, pc);
        result["fraction"] = f;
    } else {
        std::cerr << "unknown protocol: " << protocol << "\n";
        return 2;
    }
    result["accuracy"] = accuracy;
    if (out_path.empty())
        out_path = (fs::path(default_run_root()) /
                    ("eval_" + protocol + "_" + stream_name + ".json")).string();
    fs::create_directories(fs::path(out_path).parent_path().empty()
                               ? "."
                               : fs::path(out_path).parent_path().string());
    std::ofstream out(out_path);
    out << result.dump(2) << "\n";
    std::cout << "accuracy=" << accuracy << "\n";
    return 0;
}

int cmd_export(const std::string& ckpt, const std::vector<std::string>& overrides,
               const std::string& out_dir) {
    auto [trainer, rc] = trainer_from_checkpoint(ckpt, overrides);
    auto topo = topology_from_config(rc);
    auto test_data = load_split(rc, topo, "test.jsonl");
    fs::create_directories(out_dir);
    for (auto s : trainer.config().streams) {
        auto fm = eval::extract_features(trainer.pair(s), test_data, s);
        fm.split_tag = "test";
        std::string base = (fs::path(out_dir) / train::stream_name(s)).string();
        eval::write_features_csv(fm, base + "_features.csv");
        eval::write_pca_csv(fm, base + "_pca2.csv");
    }
    std::cout << "exported to " << out_dir << "\n";
    return 0;
}

int cmd_synth(int classes, int per_class, int frames, int joints, uint64_t seed,
              double noise, double view_shear, const std::string& out_dir) {
    skel::SynthParams p;
    p.num_classes = classes;
    p.per_class = per_class;
    p.T = frames;
    p.V = joints;
    p.seed = seed;
    p.noise_sigma = static_cast<float>(noise);
    p.view_shear = static_cast<float>(view_shear);
    auto ds = skel::generate_synthetic_dataset(p);
    // hold out the last ~23% of the subjects present for the test split
    std::set<int> subjects;
    for (const auto& e : ds.manifest.entries) subjects.insert(e.subject);
    std::set<int> test_subjects;
    size_t keep = (subjects.size() * 10) / 13;
    size_t idx = 0;
    for (int s : subjects)
        if (idx++ >= keep) test_subjects.insert(s);
    skel::write_synthetic_dataset(ds, out_dir, test_subjects);
    std::cout << "wrote " << ds.sequences.size() << " sequences to " << out_dir << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Cross-model cross-stream skeleton representation learning"};
    app.require_subcommand(1);

    std::string config_path, run_dir, resume, ckpt, protocol = "knn";
    std::string stream = "joint", out_path, out_dir = "export";
    double fraction = 0.1, noise = 0.03, view_shear = 0.5;
    int classes = 4, per_class = 130, frames = 50, joints = 25;
    uint64_t seed = 0;
    std::vector<std::string> overrides;

    auto* pre = app.add_subcommand("pretrain", "run two-stage pretraining");
    pre->add_option("--config", config_path, "INI config file");
    pre->add_option("--run-dir", run_dir, "output run directory");
    pre->add_option("--resume", resume, "checkpoint to resume from");
    pre->add_option("override", overrides, "--section.key=value overrides");

    auto* ev = app.add_subcommand("eval", "run a downstream evaluation protocol");
    ev->add_option("--checkpoint", ckpt, "checkpoint path")->required();
    ev->add_option("--protocol", protocol, "knn|linear|semi|finetune");
    ev->add_option("--stream", stream, "joint|motion|bone");
    ev->add_option("--fraction", fraction, "labeled fraction for semi");
    ev->add_option("--out", out_path, "result JSON path");
    ev->add_option("override", overrides, "--section.key=value overrides");

    auto* ex = app.add_subcommand("export", "export per-stream features to CSV");
    ex->add_option("--checkpoint", ckpt, "checkpoint path")->required();
    ex->add_option("--out", out_dir, "output directory");
    ex->add_option("override", overrides, "--section.key=value overrides");

    auto* sy = app.add_subcommand("synth", "generate a synthetic dataset");
    sy->add_option("--out", out_dir, "output directory")->required();
    sy->add_option("--classes", classes, "number of classes");
    sy->add_option("--per-class", per_class, "samples per class");
    sy->add_option("--frames", frames, "frames per sequence");
    sy->add_option("--joints", joints, "joints per skeleton");
    sy->add_option("--seed", seed, "generator seed");
    sy->add_option("--noise", noise, "coordinate noise sigma");
    sy->add_option("--view-shear", view_shear, "per-sample viewpoint shear range");

    // allow --section.key=value to pass through CLI11
    app.allow_extras();
    for (auto* sc : {pre, ev, ex}) sc->allow_extras();

    try {
        app.parse(argc, argv);
        for (auto* sc : {pre, ev, ex})
            if (sc->parsed())
                for (const auto& extra : sc->remaining())
                    overrides.push_back(extra);
        if (pre->parsed()) return cmd_pretrain(config_path, overrides, run_dir, resume);
        if (ev->parsed()) return cmd_eval(ckpt, protocol, stream, fraction, overrides, out_path);
        if (ex->parsed()) return cmd_export(ckpt, overrides, out_dir);
        if (sy->parsed())
            return cmd_synth(classes, per_class, frames, joints, seed, noise,
                             view_shear, out_dir);
        std::cerr << app.help();
        return 2;
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
