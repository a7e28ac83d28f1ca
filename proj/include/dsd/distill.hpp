#pragma once

#include <filesystem>
#include <fstream>
#include <optional>

#include "dsd/cnn.hpp"
#include "dsd/ssl.hpp"

namespace dsd {

// ---- frozen-teacher distillation ----
//
// The teacher is a pretrained ViT + heads; its parameters never change during
// distillation (asserted by fingerprint). Students are compact ViTs or
// CNN+BiFPN pyramids. The global term matches the student cls/pooled feature
// against teacher cls targets on global and local crops; the dense term
// matches student spatial features at stride 16 (or student patch tokens)
// against teacher patch tokens on global crops only, with grids equal by hard
// invariant.

enum class StudentKind { cnn, vit };

struct StudentConfig {
    StudentKind kind = StudentKind::cnn;
    CnnConfig cnn;
    ViTConfig vit;           // used when kind == vit
    HeadConfig cls_head;     // pooled/cls embedding -> K prototypes
    HeadConfig dense_head;   // spatial tokens -> K prototypes
    bool cosine = false;     // cosine-adapter objective instead of prototype CE

    nlohmann::json to_json() const {
        return {{"kind", kind == StudentKind::cnn ? "cnn" : "vit"},
                {"cnn", cnn.to_json()},
                {"vit", vit.to_json()},
                {"cls_head", cls_head.to_json()},
                {"dense_head", dense_head.to_json()},
                {"cosine", cosine}};
    }
    static StudentConfig from_json(const nlohmann::json& j) {
        StudentConfig s;
        const std::string k = j.value("kind", "cnn");
        if (k == "cnn") s.kind = StudentKind::cnn;
        else if (k == "vit") s.kind = StudentKind::vit;
        else throw ConfigError("student kind must be cnn or vit: " + k);
        if (j.contains("cnn")) s.cnn = CnnConfig::from_json(j.at("cnn"));
        if (j.contains("vit")) s.vit = ViTConfig::from_json(j.at("vit"));
        s.cls_head = HeadConfig::from_json(j.at("cls_head"));
        s.dense_head = HeadConfig::from_json(j.at("dense_head"));
        s.cosine = j.value("cosine", false);
        return s;
    }
};

struct DistillConfig {
    SslModelConfig teacher;
    std::vector<StudentConfig> students;
    int teacher_crop = 224;
    int global_count = 2;
    int local_count = 8;
    int student_local_crop = 96;  // locals skip the dense term, so any /32 size
    Schedules sched;
    MixtureSpec mixture{0.0, 0.0, 1.0};
    int batch_size = 16;
    uint64_t seed = 0;
    int sinkhorn_iters = 3;
    int checkpoint_every = 500;
    double crop_scale_lo = 0.32, crop_scale_hi = 1.0;
    double local_scale_lo = 0.05, local_scale_hi = 0.32;
    AugmentParams augment;
    double dense_weight = 1.0;

    int teacher_grid() const { return teacher_crop / teacher.vit.patch_size; }

    // CNN students tap stride 16; ViT students use their own patch size.
    int student_crop(const StudentConfig& s) const {
        const int stride = s.kind == StudentKind::cnn ? 16 : s.vit.patch_size;
        return stride * teacher_grid();
    }

    nlohmann::json to_json() const {
        nlohmann::json js = nlohmann::json::array();
        for (const auto& s : students) js.push_back(s.to_json());
        return {{"teacher", teacher.to_json()},
                {"students", js},
                {"teacher_crop", teacher_crop},
                {"global_count", global_count},
                {"local_count", local_count},
                {"student_local_crop", student_local_crop},
                {"sched", sched.to_json()},
                {"batch_size", batch_size},
                {"seed", seed},
                {"sinkhorn_iters", sinkhorn_iters},
                {"checkpoint_every", checkpoint_every},
                {"mixture", {{"mde", mixture.w_mde},
                             {"synthetic", mixture.w_synthetic},
                             {"real", mixture.w_real}}},
                {"crop_scale_lo", crop_scale_lo},
                {"crop_scale_hi", crop_scale_hi},
                {"local_scale_lo", local_scale_lo},
                {"local_scale_hi", local_scale_hi},
                {"augment", augment.to_json()},
                {"dense_weight", dense_weight}};
    }
    static DistillConfig from_json(const nlohmann::json& j) {
        DistillConfig c;
        c.teacher = SslModelConfig::from_json(j.at("teacher"));
        for (const auto& s : j.at("students")) c.students.push_back(StudentConfig::from_json(s));
        c.teacher_crop = j.value("teacher_crop", c.teacher_crop);
        c.global_count = j.value("global_count", c.global_count);
        c.local_count = j.value("local_count", c.local_count);
        c.student_local_crop = j.value("student_local_crop", c.student_local_crop);
        if (j.contains("sched")) c.sched = Schedules::from_json(j.at("sched"));
        if (j.contains("mixture")) {
            const auto& m = j.at("mixture");
            c.mixture = {m.value("mde", 0.0), m.value("synthetic", 0.0), m.value("real", 0.0)};
        }
        c.batch_size = j.value("batch_size", c.batch_size);
        c.seed = j.value("seed", c.seed);
        c.sinkhorn_iters = j.value("sinkhorn_iters", c.sinkhorn_iters);
        c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
        c.crop_scale_lo = j.value("crop_scale_lo", c.crop_scale_lo);
        c.crop_scale_hi = j.value("crop_scale_hi", c.crop_scale_hi);
        c.local_scale_lo = j.value("local_scale_lo", c.local_scale_lo);
        c.local_scale_hi = j.value("local_scale_hi", c.local_scale_hi);
        if (j.contains("augment")) c.augment = AugmentParams::from_json(j.at("augment"));
        c.dense_weight = j.value("dense_weight", c.dense_weight);
        return c;
    }
};

struct AlignmentReport {
    int student_grid = 0;
    int teacher_grid = 0;
    bool aligned = false;
};

inline AlignmentReport alignment_check(int student_grid, int teacher_grid) {
    AlignmentReport r;
    r.student_grid = student_grid;
    r.teacher_grid = teacher_grid;
    r.aligned = student_grid > 0 && student_grid == teacher_grid;
    return r;
}

inline void validate_alignment(const DistillConfig& cfg) {
    if (cfg.teacher_crop % cfg.teacher.vit.patch_size)
        throw GridMismatch("teacher crop not divisible by patch size");
    if (cfg.global_count < 1) throw ConfigError("global_count must be >= 1");
    for (const auto& s : cfg.students) {
        const int crop = cfg.student_crop(s);
        if (s.kind == StudentKind::cnn) {
            if (crop % 32)
                throw GridMismatch("cnn student crop must divide 32: " + std::to_string(crop));
            if (cfg.local_count > 0 && cfg.student_local_crop % 32)
                throw GridMismatch("cnn student local crop must divide 32");
        } else if (cfg.local_count > 0 && cfg.student_local_crop % s.vit.patch_size) {
            throw GridMismatch("vit student local crop must divide its patch size");
        }
        const int stride = s.kind == StudentKind::cnn ? 16 : s.vit.patch_size;
        auto rep = alignment_check(crop / stride, cfg.teacher_grid());
        if (!rep.aligned)
            throw GridMismatch("student grid " + std::to_string(rep.student_grid) +
                               " vs teacher grid " + std::to_string(rep.teacher_grid));
    }
}

inline ParamStore init_student_params(const StudentConfig& cfg, int teacher_dim, Rng& rng) {
    ParamStore p;
    int feat_dim;
    if (cfg.kind == StudentKind::cnn) {
        insert_prefixed(p, "cnn.", init_cnn_params(cfg.cnn, rng));
        feat_dim = cfg.cnn.bifpn_channels;
    } else {
        insert_prefixed(p, "vit.", init_vit_params(cfg.vit, rng));
        feat_dim = cfg.vit.embed_dim;
    }
    if (cfg.cosine) {
        p["adapt_cls.w"] = randn({teacher_dim, feat_dim}, 0.02, rng);
        p["adapt_cls.b"] = Tensor<float>({teacher_dim});
        p["adapt_patch.w"] = randn({teacher_dim, feat_dim}, 0.02, rng);
        p["adapt_patch.b"] = Tensor<float>({teacher_dim});
    } else {
        insert_prefixed(p, "cls.", init_head_params(cfg.cls_head, rng));
        insert_prefixed(p, "dense.", init_head_params(cfg.dense_head, rng));
    }
    return p;
}

// One image's views. Globals come in teacher/student resolution pairs of the
// same augmented crop; locals are student-only.
struct DistillItem {
    std::vector<NormalizedInput> teacher_globals;
    std::vector<DepthImage> global_crops;  // meters, at teacher resolution
    std::vector<DepthImage> local_crops;   // meters, at student_local_crop base
};

inline std::vector<DistillItem> make_distill_batch(const std::vector<ManifestRecord>& manifest,
                                                   const DistillConfig& cfg,
                                                   const ChannelStats& stats, int64_t step) {
    Rng sampler = Rng(Rng::seed_mix(cfg.seed, 0xd15 + static_cast<uint64_t>(step)));
    auto records = sample_batch(manifest, cfg.mixture, cfg.batch_size, sampler);
    std::vector<DistillItem> batch;
    batch.reserve(records.size());
    for (size_t i = 0; i < records.size(); ++i) {
        DepthImage img = load_depth(records[i].path);
        Rng rng = Rng(Rng::seed_mix(cfg.seed, (static_cast<uint64_t>(step) << 16) ^ (i + 1)));
        DistillItem item;
        for (int g = 0; g < cfg.global_count; ++g) {
            DepthImage crop = random_resized_crop(img, cfg.teacher_crop, cfg.crop_scale_lo,
                                                  cfg.crop_scale_hi, rng);
            crop = depth_augment(crop, cfg.augment, rng);
            if (crop.valid_count() == 0) crop.set_pixel(0, 0, 1.0f);
            item.teacher_globals.push_back(normalize(crop, &stats));
            item.global_crops.push_back(std::move(crop));
        }
        for (int l = 0; l < cfg.local_count; ++l) {
            DepthImage crop = random_resized_crop(img, cfg.student_local_crop, cfg.local_scale_lo,
                                                  cfg.local_scale_hi, rng);
            crop = depth_augment(crop, cfg.augment, rng);
            if (crop.valid_count() == 0) crop.set_pixel(0, 0, 1.0f);
            item.local_crops.push_back(std::move(crop));
        }
        batch.push_back(std::move(item));
    }
    return batch;
}

// Teacher outputs for one batch, shared by all students. One teacher forward
// per global view, never per student.
struct DistillTargets {
    Tensor<double> cls;       // (B*G) x K prototype distributions
    Tensor<double> dense;     // (B*G*n) x K, token order: image, view, position
    Tensor<float> cls_emb;    // (B*G) x d backbone cls embeddings (cosine mode)
    Tensor<float> patch_emb;  // (B*G*n) x d
    int grid = 0;
    int forwards = 0;
};

inline DistillTargets compute_distill_targets(const ParamStore& teacher, const DistillConfig& cfg,
                                              const std::vector<DistillItem>& batch,
                                              double teacher_temp) {
    Graph<float> g(false);
    auto bound = bind_params(g, teacher);
    auto parts = split_bound(bound);
    std::vector<Graph<float>::Var> cls_rows, patch_rows;
    DistillTargets t;
    for (const auto& item : batch)
        for (const auto& view : item.teacher_globals) {
            auto out = vit_forward(g, parts.backbone, cfg.teacher.vit, view.channels, nullptr);
            t.grid = out.grid;
            cls_rows.push_back(out.cls);
            patch_rows.push_back(out.patches);
            ++t.forwards;
        }
    auto cls = g.concat_rows(cls_rows);
    auto patches = g.concat_rows(patch_rows);
    t.cls_emb = g.value(cls);
    t.patch_emb = g.value(patches);
    t.cls = sinkhorn_normalize(
        g.value(head_forward(g, parts.dino, cfg.teacher.dino_head, cls)).cast<double>(),
        teacher_temp, cfg.sinkhorn_iters);
    t.dense = sinkhorn_normalize(
        g.value(head_forward(g, parts.ibot, cfg.teacher.ibot_head, patches)).cast<double>(),
        teacher_temp, cfg.sinkhorn_iters);
    return t;
}

struct DistillLoss {
    double total = 0.0, cls = 0.0, dense = 0.0;
};

namespace detail {

// Normalize one student view (crop in meters resized to `size`) and run the
// student forward; returns (global feature row, spatial token rows or -1).
template <typename T>
struct StudentView {
    typename Graph<T>::Var pooled;
    typename Graph<T>::Var tokens = -1;
    int grid = 0;
};

template <typename T>
StudentView<T> student_forward(Graph<T>& g, const BoundParams<T>& backbone,
                               const StudentConfig& cfg, const Tensor<T>& channels,
                               bool want_tokens) {
    StudentView<T> v;
    if (cfg.kind == StudentKind::cnn) {
        auto out = cnn_bifpn_forward(g, backbone, cfg.cnn, channels);
        v.pooled = out.pooled;
        v.grid = out.grid16;
        if (want_tokens) v.tokens = g.chw_to_rows(out.s16);
    } else {
        auto out = vit_forward(g, backbone, cfg.vit, channels, nullptr);
        v.pooled = out.cls;
        v.grid = out.grid;
        if (want_tokens) v.tokens = out.patches;
    }
    return v;
}

}  // namespace detail

// Build one student's loss graph over the batch. The global term pairs every
// student view with teacher global targets (globals i vs j != i, locals vs
// all globals); the dense term matches same-view global grids one-to-one.
template <typename T>
std::pair<typename Graph<T>::Var, DistillLoss> student_loss(
    Graph<T>& g, const BoundParams<T>& bound, const StudentConfig& cfg, const DistillConfig& dc,
    const ChannelStats& stats, const DistillTargets& targets,
    const std::vector<DistillItem>& batch, double student_temp) {
    using Var = typename Graph<T>::Var;
    BoundParams<T> backbone, cls_head, dense_head;
    for (const auto& [name, var] : bound.vars) {
        if (name.rfind("cnn.", 0) == 0) backbone.vars[name.substr(4)] = var;
        else if (name.rfind("vit.", 0) == 0) backbone.vars[name.substr(4)] = var;
        else if (name.rfind("cls.", 0) == 0) cls_head.vars[name.substr(4)] = var;
        else if (name.rfind("dense.", 0) == 0) dense_head.vars[name.substr(6)] = var;
    }

    const int B = static_cast<int>(batch.size());
    const int G = dc.global_count;
    const int L = dc.local_count;
    const int gsize = dc.student_crop(cfg);
    std::vector<Var> global_rows, local_rows, token_rows;
    for (const auto& item : batch) {
        for (const auto& crop : item.global_crops) {
            NormalizedInput in = normalize(resize_depth(crop, gsize, gsize), &stats);
            auto v = detail::student_forward(g, backbone, cfg, in.channels.template cast<T>(),
                                             true);
            if (v.grid != targets.grid)
                throw GridMismatch("student grid " + std::to_string(v.grid) + " vs teacher grid " +
                                   std::to_string(targets.grid));
            global_rows.push_back(v.pooled);
            token_rows.push_back(v.tokens);
        }
        for (const auto& crop : item.local_crops) {
            NormalizedInput in = normalize(crop, &stats);
            auto v = detail::student_forward(g, backbone, cfg, in.channels.template cast<T>(),
                                             false);
            local_rows.push_back(v.pooled);
        }
    }

    Var loss_cls, loss_dense;
    const int d = targets.cls_emb.cols();
    if (cfg.cosine) {
        auto cos_loss = [&](Var x, const std::string& adapter, const Tensor<float>& ref) {
            Var a = g.l2norm_rows(g.linear(x, bound.at(adapter + ".w"), bound.at(adapter + ".b")));
            Tensor<T> refn = ref.template cast<T>();
            for (int r = 0; r < refn.rows(); ++r) {
                double s = 0.0;
                for (int c = 0; c < d; ++c) s += double(refn.at(r, c)) * refn.at(r, c);
                const T inv = static_cast<T>(1.0 / std::max(std::sqrt(s), 1e-12));
                for (int c = 0; c < d; ++c) refn.at(r, c) *= inv;
            }
            // mean over all entries = (mean row cosine) / d, hence the rescale
            Var cos_mean = g.mean_all(g.hadamard(a, g.constant(std::move(refn))));
            return g.add(g.constant(Tensor<T>::scalar(T(1))), g.scale(cos_mean, -static_cast<T>(d)));
        };
        loss_cls = cos_loss(g.concat_rows(global_rows), "adapt_cls", targets.cls_emb);
        loss_dense = cos_loss(g.concat_rows(token_rows), "adapt_patch", targets.patch_emb);
    } else {
        const int K = cfg.cls_head.prototypes;
        std::vector<Var> all_rows = global_rows;
        all_rows.insert(all_rows.end(), local_rows.begin(), local_rows.end());
        Var cls_logits = head_forward(g, cls_head, cfg.cls_head, g.concat_rows(all_rows));

        std::vector<int> pair_idx;
        std::vector<int> pair_target;  // row into targets.cls
        for (int b = 0; b < B; ++b)
            for (int i = 0; i < G; ++i)
                for (int j = 0; j < G; ++j) {
                    if (i == j && G > 1) continue;
                    pair_idx.push_back(b * G + i);
                    pair_target.push_back(b * G + j);
                }
        for (int b = 0; b < B; ++b)
            for (int l = 0; l < L; ++l)
                for (int j = 0; j < G; ++j) {
                    pair_idx.push_back(B * G + b * L + l);
                    pair_target.push_back(b * G + j);
                }
        Tensor<T> ptargets({static_cast<int>(pair_idx.size()), K});
        for (size_t r = 0; r < pair_idx.size(); ++r)
            for (int c = 0; c < K; ++c)
                ptargets.at(static_cast<int>(r), c) =
                    static_cast<T>(targets.cls.at(pair_target[r], c));
        loss_cls = g.cross_entropy_rows(g.select_rows(cls_logits, pair_idx), std::move(ptargets),
                                        static_cast<T>(student_temp));

        Var dense_logits =
            head_forward(g, dense_head, cfg.dense_head, g.concat_rows(token_rows));
        loss_dense = g.cross_entropy_rows(
            dense_logits, targets.dense.template cast<T>(), static_cast<T>(student_temp));
    }
    Var total = g.add(loss_cls, g.scale(loss_dense, static_cast<T>(dc.dense_weight)));
    DistillLoss dl;
    dl.cls = static_cast<double>(g.value(loss_cls).data[0]);
    dl.dense = static_cast<double>(g.value(loss_dense).data[0]);
    dl.total = static_cast<double>(g.value(total).data[0]);
    return {total, dl};
}

struct StudentState {
    ParamStore params;
    ParamStore ema;  // the distillation artifact
    AdamW opt;
};

struct DistillState {
    ParamStore teacher;
    uint64_t teacher_fp = 0;
    std::vector<StudentState> students;
    int64_t step = 0;
};

inline DistillState init_distill_state(const DistillConfig& cfg, const ParamStore& teacher) {
    validate_alignment(cfg);
    DistillState st;
    st.teacher = teacher;
    st.teacher_fp = fingerprint(teacher);
    for (size_t i = 0; i < cfg.students.size(); ++i) {
        Rng rng = Rng(Rng::seed_mix(cfg.seed, 0x57d + i));
        StudentState s;
        s.params = init_student_params(cfg.students[i], cfg.teacher.vit.embed_dim, rng);
        s.ema = s.params;
        st.students.push_back(std::move(s));
    }
    return st;
}

inline std::vector<DistillLoss> distill_step(DistillState& st, const DistillConfig& cfg,
                                             const ChannelStats& stats,
                                             const std::vector<DistillItem>& batch) {
    const auto& s = cfg.sched;
    const double lr = schedule_value(s, st.step, ScheduleKind::lr);
    const double wd = schedule_value(s, st.step, ScheduleKind::wd);
    const double mom = schedule_value(s, st.step, ScheduleKind::momentum);
    const double ttemp = schedule_value(s, st.step, ScheduleKind::teacher_temp);

    auto targets = compute_distill_targets(st.teacher, cfg, batch, ttemp);
    std::vector<DistillLoss> losses;
    for (size_t i = 0; i < st.students.size(); ++i) {
        Graph<float> g(true);
        auto bound = bind_params(g, st.students[i].params);
        auto [loss, dl] =
            student_loss(g, bound, cfg.students[i], cfg, stats, targets, batch, s.student_temp);
        g.backward(loss);
        auto grads = collect_grads(g, bound);
        st.students[i].opt.step(st.students[i].params, grads, lr, wd);
        ema_update(st.students[i].ema, st.students[i].params, mom);
        losses.push_back(dl);
    }
    if (fingerprint(st.teacher) != st.teacher_fp)
        throw TeacherNotFrozen("teacher parameters changed during distillation");
    ++st.step;
    return losses;
}

// Mean cosine similarity between the student's global feature (adapted to
// teacher width in cosine mode, prototype distributions otherwise) and the
// teacher cls targets over a held-out batch. Rises as distillation trains.
inline double distill_agreement(const DistillState& st, const DistillConfig& cfg,
                                const ChannelStats& stats,
                                const std::vector<DistillItem>& batch, size_t student_idx,
                                bool use_ema = true) {
    const double ttemp = cfg.sched.teacher_temp1;
    auto targets = compute_distill_targets(st.teacher, cfg, batch, ttemp);
    const auto& scfg = cfg.students[student_idx];
    const auto& params = use_ema ? st.students[student_idx].ema : st.students[student_idx].params;
    Graph<float> g(false);
    auto bound = bind_params(g, params);
    BoundParams<float> backbone, cls_head;
    for (const auto& [name, var] : bound.vars) {
        if (name.rfind("cnn.", 0) == 0 || name.rfind("vit.", 0) == 0)
            backbone.vars[name.substr(4)] = var;
        else if (name.rfind("cls.", 0) == 0) cls_head.vars[name.substr(4)] = var;
    }
    const int gsize = cfg.student_crop(scfg);
    std::vector<Graph<float>::Var> rows;
    for (const auto& item : batch)
        for (const auto& crop : item.global_crops) {
            NormalizedInput in = normalize(resize_depth(crop, gsize, gsize), &stats);
            rows.push_back(detail::student_forward(g, backbone, scfg, in.channels, false).pooled);
        }

    auto mean_cos = [](const Tensor<float>& a, const Tensor<double>& b) {
        double acc = 0.0;
        for (int r = 0; r < a.rows(); ++r) {
            double dot = 0.0, an = 0.0, bn = 0.0;
            for (int c = 0; c < a.cols(); ++c) {
                dot += double(a.at(r, c)) * b.at(r, c);
                an += double(a.at(r, c)) * a.at(r, c);
                bn += b.at(r, c) * b.at(r, c);
            }
            acc += dot / std::max(std::sqrt(an * bn), 1e-24);
        }
        return acc / a.rows();
    };
    if (scfg.cosine) {
        Tensor<float> adapted = g.value(g.l2norm_rows(
            g.linear(g.concat_rows(rows), bound.at("adapt_cls.w"), bound.at("adapt_cls.b"))));
        return mean_cos(adapted, targets.cls_emb.cast<double>());
    }
    Tensor<float> probs = g.value(g.softmax_rows(g.scale(
        head_forward(g, cls_head, scfg.cls_head, g.concat_rows(rows)),
        1.0f / static_cast<float>(cfg.sched.student_temp))));
    return mean_cos(probs, targets.cls);
}

inline void save_distill_checkpoint(const std::string& path, const nlohmann::json& config,
                                    const DistillState& st) {
    ParamStore all;
    insert_prefixed(all, "teacher.", st.teacher);
    for (size_t i = 0; i < st.students.size(); ++i) {
        const std::string p = "student" + std::to_string(i) + ".";
        insert_prefixed(all, p + "raw.", st.students[i].params);
        insert_prefixed(all, p + "ema.", st.students[i].ema);
        insert_prefixed(all, p + "opt.m.", st.students[i].opt.m);
        insert_prefixed(all, p + "opt.v.", st.students[i].opt.v);
    }
    nlohmann::json meta = config;
    meta["step"] = st.step;
    meta["teacher_fingerprint"] = st.teacher_fp;
    meta["num_students"] = st.students.size();
    if (!st.students.empty()) meta["opt_t"] = st.students[0].opt.t;
    save_checkpoint(path, meta, all);
}

inline DistillState run_distill(const DistillConfig& cfg,
                                const std::vector<ManifestRecord>& manifest,
                                const ChannelStats& stats, const ParamStore& teacher,
                                const std::string& out_dir) {
    namespace fs = std::filesystem;
    cfg.sched.validate();
    if (manifest.empty()) throw EmptyManifest("distill");
    if (cfg.students.empty()) throw ConfigError("no students configured");
    fs::create_directories(fs::path(out_dir) / "checkpoints");

    DistillState st = init_distill_state(cfg, teacher);
    const nlohmann::json meta = cfg.to_json();
    const std::string ckdir = (fs::path(out_dir) / "checkpoints").string();
    save_distill_checkpoint(ckdir + "/step_" + std::to_string(st.step), meta, st);

    std::ofstream metrics(fs::path(out_dir) / "metrics.log", std::ios::trunc);
    if (!metrics) throw IoFailure("cannot open metrics.log");

    while (st.step < cfg.sched.total_steps) {
        auto batch = make_distill_batch(manifest, cfg, stats, st.step);
        const int64_t step_before = st.step;
        auto losses = distill_step(st, cfg, stats, batch);
        nlohmann::json j{{"step", step_before},
                         {"lr", schedule_value(cfg.sched, step_before, ScheduleKind::lr)}};
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& l : losses)
            arr.push_back({{"total", l.total}, {"cls", l.cls}, {"dense", l.dense}});
        j["students"] = arr;
        metrics << j.dump() << "\n";
        if (cfg.checkpoint_every > 0 && st.step % cfg.checkpoint_every == 0)
            save_distill_checkpoint(ckdir + "/step_" + std::to_string(st.step), meta, st);
    }
    save_distill_checkpoint(ckdir + "/step_" + std::to_string(st.step), meta, st);
    return st;
}

}  // namespace dsd
