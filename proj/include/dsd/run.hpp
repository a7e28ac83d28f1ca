#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "dsd/distill.hpp"
#include "dsd/eval.hpp"
#include "dsd/toy.hpp"

namespace dsd {

// ---- run orchestration ----
//
// Every subcommand takes a JSON config (file + dotted-path overrides), writes
// the resolved config verbatim to <out>/config.snapshot before any work, and
// leaves artifacts under <out>. Defaults chain on the generated toy dataset:
// gen_toy -> stats -> pretrain -> {distill, knn, probe, segment, pca_viz, bench}.

inline const std::vector<std::string>& run_modes() {
    static const std::vector<std::string> m{"pretrain", "distill", "knn",   "probe", "segment",
                                            "pca_viz",  "stats",   "bench", "gen_toy"};
    return m;
}

inline int env_workers() {
    const char* v = std::getenv("DSD_WORKERS");
    if (!v || !*v) return 1;
    const int n = std::atoi(v);
    if (n < 1) throw ConfigError("DSD_WORKERS must be a positive integer");
    return n;
}

// "a.b.c=value"; the value is parsed as JSON when possible, else kept string.
inline void apply_override(nlohmann::json& cfg, const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("override must be key.path=value: " + kv);
    const std::string path = kv.substr(0, eq);
    const std::string raw = kv.substr(eq + 1);
    nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;

    nlohmann::json* node = &cfg;
    size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot - start);
        if (key.empty()) throw ConfigError("empty key in override path: " + path);
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

// Recursive merge; user values win over defaults.
inline nlohmann::json merge_config(nlohmann::json base, const nlohmann::json& user) {
    if (!base.is_object() || !user.is_object()) return user;
    for (auto it = user.begin(); it != user.end(); ++it) {
        if (base.contains(it.key()))
            base[it.key()] = merge_config(base[it.key()], it.value());
        else
            base[it.key()] = it.value();
    }
    return base;
}

inline nlohmann::json toy_model_json() {
    SslModelConfig m;
    m.vit = {8, 48, 3, 4, 2.0, 6};
    m.dino_head = {48, 128, 32, 64, true};
    m.ibot_head = {48, 128, 32, 64, true};
    return m.to_json();
}

inline nlohmann::json toy_crops_json() {
    CropConfig c;
    c.global_size = 48;
    c.local_size = 24;
    c.patch_size = 8;
    c.local_count = 4;
    return c.to_json();
}

inline nlohmann::json default_config(const std::string& mode) {
    nlohmann::json j{{"seed", 0}, {"deterministic", true}};
    if (mode == "gen_toy") {
        j["out"] = "runs/gen_toy";
        j["dir"] = "toy_data";
        j["count"] = 660;
        j["size"] = 56;
        j["invalid_prob"] = 0.01;
    } else if (mode == "stats") {
        j["out"] = "runs/stats";
        j["manifest"] = "toy_data/manifest.jsonl";
        j["stats_out"] = "toy_data/stats.json";
        j["workers"] = env_workers();
    } else if (mode == "pretrain") {
        j["out"] = "runs/pretrain";
        j["manifest"] = "toy_data/manifest.jsonl";
        j["stats"] = "toy_data/stats.json";
        j["model"] = toy_model_json();
        j["crops"] = toy_crops_json();
        Schedules s;
        s.peak_lr = 1e-3;
        s.warmup_steps = 10;
        s.total_steps = 30;
        s.m0 = 0.99;
        j["sched"] = s.to_json();
        j["weights"] = LossWeights{}.to_json();
        j["mixture"] = {{"mde", 0.0}, {"synthetic", 1.0}, {"real", 0.0}};
        j["batch_size"] = 8;
        j["sinkhorn_iters"] = 3;
        j["checkpoint_every"] = 0;
    } else if (mode == "distill") {
        j["out"] = "runs/distill";
        j["teacher_run"] = "runs/pretrain";
        j["manifest"] = "toy_data/manifest.jsonl";
        j["stats"] = "toy_data/stats.json";
        StudentConfig s;
        s.cnn = {8, 32, 2, 1e-4};
        s.cls_head = {32, 64, 32, 64, true};
        s.dense_head = {32, 64, 32, 64, true};
        j["students"] = nlohmann::json::array({s.to_json()});
        j["teacher_crop"] = 48;
        j["global_count"] = 2;
        j["local_count"] = 2;
        j["student_local_crop"] = 32;
        Schedules sc;
        sc.peak_lr = 1e-3;
        sc.warmup_steps = 10;
        sc.total_steps = 30;
        j["sched"] = sc.to_json();
        j["mixture"] = {{"mde", 0.0}, {"synthetic", 1.0}, {"real", 0.0}};
        j["batch_size"] = 8;
        j["sinkhorn_iters"] = 3;
        j["checkpoint_every"] = 0;
    } else if (mode == "knn" || mode == "probe") {
        j["out"] = "runs/" + mode;
        j["checkpoint_run"] = "runs/pretrain";
        j["labels"] = "toy_data/labels.jsonl";
        j["stats"] = "toy_data/stats.json";
        j["train_frac"] = 0.9;
        if (mode == "knn") {
            j["k"] = 5;
            j["temperature"] = 0.07;
        } else {
            j["lr_grid"] = {1e-3, 1e-2, 1e-1};
            j["epochs"] = 100;
        }
    } else if (mode == "segment") {
        j["out"] = "runs/segment";
        j["checkpoint_run"] = "runs/pretrain";
        j["data_dir"] = "toy_data";
        j["stats"] = "toy_data/stats.json";
        j["classes"] = 4;
        j["train_frac"] = 0.9;
        j["epochs"] = 40;
        j["lr"] = 1e-2;
        j["max_images"] = 80;
    } else if (mode == "pca_viz") {
        j["out"] = "runs/pca_viz";
        j["checkpoint_run"] = "runs/pretrain";
        j["manifest"] = "toy_data/manifest.jsonl";
        j["stats"] = "toy_data/stats.json";
        j["count"] = 8;
    } else if (mode == "bench") {
        j["out"] = "runs/bench";
        j["model"] = toy_model_json();
        j["image_size"] = 48;
        j["iters"] = 3;
    } else {
        throw ConfigError("unknown mode: " + mode);
    }
    return j;
}

inline nlohmann::json resolve_config(const std::string& mode, const std::string& config_path,
                                     const std::vector<std::string>& overrides) {
    nlohmann::json cfg = default_config(mode);
    if (!config_path.empty()) {
        std::ifstream is(config_path);
        if (!is) throw PathMissing("config file: " + config_path);
        nlohmann::json user = nlohmann::json::parse(is, nullptr, false);
        if (user.is_discarded()) throw ConfigError("config file does not parse: " + config_path);
        cfg = merge_config(cfg, user);
    }
    for (const auto& o : overrides) apply_override(cfg, o);
    return cfg;
}

inline void write_snapshot(const nlohmann::json& cfg, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    std::ofstream os(fs::path(out_dir) / "config.snapshot");
    if (!os) throw IoFailure("cannot write config.snapshot");
    os << cfg.dump(2) << "\n";
}

inline void require_path(const std::string& p, const std::string& what) {
    if (!std::filesystem::exists(p)) throw PathMissing(what + ": " + p);
}

inline std::string find_latest_checkpoint(const std::string& run_dir) {
    namespace fs = std::filesystem;
    const fs::path ckdir = fs::path(run_dir) / "checkpoints";
    if (!fs::exists(ckdir)) throw PathMissing("checkpoint dir: " + ckdir.string());
    int64_t best = -1;
    std::string best_path;
    for (const auto& e : fs::directory_iterator(ckdir)) {
        const std::string name = e.path().filename().string();
        if (name.rfind("step_", 0) != 0) continue;
        const int64_t step = std::atoll(name.c_str() + 5);
        if (step > best) {
            best = step;
            best_path = e.path().string();
        }
    }
    if (best < 0) throw PathMissing("no checkpoints in " + ckdir.string());
    return best_path;
}

struct LoadedTeacher {
    SslModelConfig model;
    CropConfig crops;
    ParamStore params;    // full teacher (backbone + heads)
    ParamStore backbone;  // backbone only
};

inline LoadedTeacher load_teacher(const std::string& checkpoint_path) {
    Checkpoint ck = load_checkpoint(checkpoint_path);
    if (!ck.config.contains("model"))
        throw CheckpointIncompatible("no model config in " + checkpoint_path);
    LoadedTeacher t;
    t.model = SslModelConfig::from_json(ck.config.at("model"));
    if (ck.config.contains("crops")) t.crops = CropConfig::from_json(ck.config.at("crops"));
    t.params = extract_prefix(ck.tensors, "teacher.");
    if (t.params.empty()) throw CheckpointIncompatible("no teacher tensors in " + checkpoint_path);
    t.backbone = extract_prefix(t.params, "backbone.");
    return t;
}

inline NormalizedInput eval_input(const DepthImage& img, int size, const ChannelStats& stats) {
    return normalize(resize_depth(img, size, size), &stats);
}

inline FeatureSet backbone_features(const LoadedTeacher& t, const ChannelStats& stats,
                                    const std::vector<std::pair<std::string, int>>& labeled) {
    FeatureSet fs;
    fs.labels.reserve(labeled.size());
    const int size = t.crops.global_size;
    for (size_t i = 0; i < labeled.size(); ++i) {
        Tensor<float> f =
            extract_vit_features(t.backbone, t.model.vit,
                                 eval_input(load_depth(labeled[i].first), size, stats));
        if (i == 0) fs.features = Tensor<float>({static_cast<int>(labeled.size()), f.cols()});
        std::copy(f.data.begin(), f.data.end(),
                  fs.features.data.begin() + i * static_cast<size_t>(f.cols()));
        fs.labels.push_back(labeled[i].second);
    }
    return fs;
}

// Deterministic split: every round(1/(1-frac))-th sample is held out.
inline void split_holdout(double train_frac, size_t n, std::vector<size_t>& train,
                          std::vector<size_t>& test) {
    if (train_frac <= 0.0 || train_frac >= 1.0) throw ConfigError("train_frac must be in (0,1)");
    const size_t period = std::max<size_t>(2, std::llround(1.0 / (1.0 - train_frac)));
    for (size_t i = 0; i < n; ++i)
        (i % period == period - 1 ? test : train).push_back(i);
    if (train.empty() || test.empty()) throw TooFewPoints("holdout split");
}

inline FeatureSet subset(const FeatureSet& all, const std::vector<size_t>& idx) {
    FeatureSet out;
    out.features = Tensor<float>({static_cast<int>(idx.size()), all.dim()});
    for (size_t i = 0; i < idx.size(); ++i) {
        std::copy(all.features.data.begin() + idx[i] * static_cast<size_t>(all.dim()),
                  all.features.data.begin() + (idx[i] + 1) * static_cast<size_t>(all.dim()),
                  out.features.data.begin() + i * static_cast<size_t>(all.dim()));
        out.labels.push_back(all.labels[idx[i]]);
    }
    return out;
}

inline void write_report(const std::string& out_dir, const std::string& name,
                         const nlohmann::json& report) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(out_dir) / "reports");
    std::ofstream os(fs::path(out_dir) / "reports" / name);
    if (!os) throw IoFailure("cannot write report " + name);
    os << report.dump(2) << "\n";
}

inline int run_mode(const std::string& mode, const nlohmann::json& cfg) {
    const std::string out = cfg.at("out");
    write_snapshot(cfg, out);

    if (mode == "gen_toy") {
        ToyConfig tc;
        tc.count = cfg.at("count");
        tc.size = cfg.at("size");
        tc.seed = cfg.at("seed");
        tc.invalid_prob = cfg.value("invalid_prob", 0.01);
        if (tc.count < 3) throw InvalidSpec("count must cover all 3 classes");
        if (tc.size < 8) throw InvalidSpec("size too small");
        gen_toy_dataset(tc, cfg.at("dir"));
        return 0;
    }

    if (mode == "stats") {
        const std::string mpath = cfg.at("manifest");
        require_path(mpath, "manifest");
        auto manifest = load_manifest(mpath);
        ChannelStats s = compute_channel_stats(manifest, cfg.value("workers", 1));
        save_channel_stats(s, cfg.at("stats_out"));
        return 0;
    }

    if (mode == "pretrain") {
        const std::string mpath = cfg.at("manifest");
        require_path(mpath, "manifest");
        auto manifest = load_manifest(mpath);
        const std::string spath = cfg.at("stats");
        ChannelStats stats;
        if (std::filesystem::exists(spath)) {
            stats = load_channel_stats(spath);
        } else {
            stats = compute_channel_stats(manifest);
            save_channel_stats(stats, spath);
        }
        PretrainConfig pc = PretrainConfig::from_json(cfg);
        std::optional<std::string> resume;
        if (cfg.contains("resume")) resume = cfg.at("resume").get<std::string>();
        run_pretrain(pc, manifest, stats, out, resume);
        return 0;
    }

    if (mode == "distill") {
        const std::string mpath = cfg.at("manifest");
        require_path(mpath, "manifest");
        auto manifest = load_manifest(mpath);
        ChannelStats stats = load_channel_stats(cfg.at("stats"));
        const std::string ckpt = cfg.contains("teacher_checkpoint")
                                     ? cfg.at("teacher_checkpoint").get<std::string>()
                                     : find_latest_checkpoint(cfg.at("teacher_run"));
        LoadedTeacher t = load_teacher(ckpt);
        nlohmann::json dj = cfg;
        dj["teacher"] = t.model.to_json();
        DistillConfig dc = DistillConfig::from_json(dj);
        for (const auto& s : dc.students) {
            if (!s.cosine && (s.cls_head.prototypes != dc.teacher.dino_head.prototypes ||
                              s.dense_head.prototypes != dc.teacher.ibot_head.prototypes))
                throw ConfigError("student prototype count must match the teacher heads");
        }
        run_distill(dc, manifest, stats, t.params, out);
        return 0;
    }

    if (mode == "knn" || mode == "probe") {
        const std::string lpath = cfg.at("labels");
        require_path(lpath, "labels");
        LoadedTeacher t = load_teacher(cfg.contains("checkpoint")
                                           ? cfg.at("checkpoint").get<std::string>()
                                           : find_latest_checkpoint(cfg.at("checkpoint_run")));
        ChannelStats stats = load_channel_stats(cfg.at("stats"));
        FeatureSet all = backbone_features(t, stats, load_toy_labels(lpath));
        std::vector<size_t> tr, te;
        split_holdout(cfg.at("train_frac"), all.labels.size(), tr, te);
        FeatureSet train = subset(all, tr), test = subset(all, te);
        nlohmann::json report{{"n_train", train.count()}, {"n_test", test.count()}};
        if (mode == "knn") {
            const int k = cfg.at("k");
            report["k"] = k;
            KnnResult r = knn_eval(train, test, k, cfg.at("temperature"));
            report["top1"] = r.top1;
            report["top5"] = r.top5;
            write_report(out, "knn.json", report);
        } else {
            ProbeResult r = linear_probe(train, test, cfg.at("lr_grid").get<std::vector<double>>(),
                                         cfg.at("epochs"), cfg.at("seed"));
            report["accuracy"] = r.accuracy;
            report["lr"] = r.lr;
            report["train_loss"] = r.train_loss;
            write_report(out, "probe.json", report);
        }
        return 0;
    }

    if (mode == "segment") {
        LoadedTeacher t = load_teacher(cfg.contains("checkpoint")
                                           ? cfg.at("checkpoint").get<std::string>()
                                           : find_latest_checkpoint(cfg.at("checkpoint_run")));
        ChannelStats stats = load_channel_stats(cfg.at("stats"));
        const std::string dir = cfg.at("data_dir");
        require_path(dir, "data_dir");
        auto manifest = load_manifest((std::filesystem::path(dir) / "manifest.jsonl").string());
        const int classes = cfg.at("classes");
        const int max_images = cfg.value("max_images", 0);
        std::vector<SegSample> samples;
        for (const auto& rec : manifest) {
            if (max_images > 0 && static_cast<int>(samples.size()) >= max_images) break;
            std::string seg = rec.path;
            const auto dot = seg.rfind(".dfm1");
            if (dot == std::string::npos) continue;
            seg.replace(dot, 5, "_seg.pgm");
            if (!std::filesystem::exists(seg)) continue;
            auto [labels, hw] = load_pgm(seg);
            SegSample s;
            auto [tokens, grid] = extract_vit_patch_tokens(
                t.backbone, t.model.vit,
                eval_input(load_depth(rec.path), t.crops.global_size, stats));
            s.tokens = std::move(tokens);
            s.grid = grid;
            s.labels = std::move(labels);
            s.height = hw.first;
            s.width = hw.second;
            samples.push_back(std::move(s));
        }
        if (samples.empty()) throw TooFewPoints("no segmentation samples");
        std::vector<size_t> tr, te;
        split_holdout(cfg.at("train_frac"), samples.size(), tr, te);
        std::vector<SegSample> train, test;
        for (size_t i : tr) train.push_back(samples[i]);
        for (size_t i : te) test.push_back(samples[i]);
        SegProbeResult r = segment_probe(train, test, classes, cfg.at("epochs"), cfg.at("lr"),
                                         255, cfg.at("seed"));
        write_report(out, "segment.json",
                     {{"miou", r.miou},
                      {"classes", classes},
                      {"n_train", train.size()},
                      {"n_test", test.size()}});
        return 0;
    }

    if (mode == "pca_viz") {
        LoadedTeacher t = load_teacher(cfg.contains("checkpoint")
                                           ? cfg.at("checkpoint").get<std::string>()
                                           : find_latest_checkpoint(cfg.at("checkpoint_run")));
        ChannelStats stats = load_channel_stats(cfg.at("stats"));
        auto manifest = load_manifest(cfg.at("manifest"));
        const int count =
            std::min(cfg.at("count").get<int>(), static_cast<int>(manifest.size()));
        if (count < 1) throw TooFewPoints("pca_viz needs at least one image");
        std::vector<std::pair<Tensor<float>, int>> grids;
        for (int i = 0; i < count; ++i)
            grids.push_back(extract_vit_patch_tokens(
                t.backbone, t.model.vit,
                eval_input(load_depth(manifest[i].path), t.crops.global_size, stats)));
        pca_visualize(grids, (std::filesystem::path(out) / "reports").string());
        return 0;
    }

    if (mode == "bench") {
        SslModelConfig m = SslModelConfig::from_json(cfg.at("model"));
        Rng rng = Rng(Rng::seed_mix(cfg.at("seed"), 0xbe7c4));
        ParamStore backbone = init_vit_params(m.vit, rng);
        BenchReport r = bench_vit(backbone, m.vit, cfg.at("image_size"), cfg.at("iters"));
        write_report(out, "bench.json",
                     {{"params", r.params}, {"flops", r.flops}, {"ms_per_image", r.ms_per_image}});
        return 0;
    }

    throw ConfigError("unknown mode: " + mode);
}

}  // namespace dsd
