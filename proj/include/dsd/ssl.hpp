#pragma once

#include <filesystem>
#include <fstream>
#include <optional>

#include "dsd/augment.hpp"
#include "dsd/common.hpp"
#include "dsd/heads.hpp"
#include "dsd/manifest.hpp"
#include "dsd/params.hpp"
#include "dsd/vit.hpp"

namespace dsd {

// ---- Sinkhorn-Knopp centering ----
//
// exp(logits / temperature) scaled iteratively so column sums approach B/K
// and row sums approach 1; rows are returned as distributions. The B = 1
// case degenerates (the doubly-constrained solution is uniform), so a single
// row is plain softmax.
inline Tensor<double> sinkhorn_normalize(const Tensor<double>& logits, double temperature,
                                         int iterations) {
    if (temperature <= 0.0) throw DomainError("sinkhorn temperature must be positive");
    const int B = logits.rows(), K = logits.cols();
    if (B < 1 || K < 2) throw DomainError("sinkhorn needs B >= 1, K >= 2");
    if (!logits.all_finite()) throw NonFiniteLogits("sinkhorn input");

    double mx = logits.data[0];
    for (double v : logits.data) mx = std::max(mx, v);
    Tensor<double> q({B, K});
    for (size_t i = 0; i < q.size(); ++i) q.data[i] = std::exp((logits.data[i] - mx) / temperature);

    if (B > 1) {
        for (int it = 0; it < iterations; ++it) {
            // columns -> B/K
            for (int c = 0; c < K; ++c) {
                double s = 0.0;
                for (int r = 0; r < B; ++r) s += q.at(r, c);
                const double f = s > 0.0 ? (static_cast<double>(B) / K) / s : 0.0;
                for (int r = 0; r < B; ++r) q.at(r, c) *= f;
            }
            // rows -> 1
            for (int r = 0; r < B; ++r) {
                double s = 0.0;
                for (int c = 0; c < K; ++c) s += q.at(r, c);
                const double f = s > 0.0 ? 1.0 / s : 0.0;
                for (int c = 0; c < K; ++c) q.at(r, c) *= f;
            }
        }
    }
    // final row normalization so each row is exactly a distribution
    for (int r = 0; r < B; ++r) {
        double s = 0.0;
        for (int c = 0; c < K; ++c) s += q.at(r, c);
        if (s <= 0.0) throw NonFiniteLogits("sinkhorn degenerate row");
        for (int c = 0; c < K; ++c) q.at(r, c) /= s;
    }
    return q;
}

// -sum p_t log softmax(logits / tau), log clamped to keep the value finite.
inline double dino_cross_entropy(const std::vector<double>& teacher_probs,
                                 const std::vector<double>& student_logits,
                                 double student_temperature) {
    if (student_temperature <= 0.0) throw DomainError("student temperature must be positive");
    if (teacher_probs.size() != student_logits.size())
        throw ShapeMismatch("dino_cross_entropy sizes");
    const size_t k = student_logits.size();
    double mx = student_logits[0] / student_temperature;
    for (size_t i = 1; i < k; ++i) mx = std::max(mx, student_logits[i] / student_temperature);
    double sum = 0.0;
    for (size_t i = 0; i < k; ++i) sum += std::exp(student_logits[i] / student_temperature - mx);
    const double logsum = std::log(sum);
    double loss = 0.0;
    for (size_t i = 0; i < k; ++i) {
        const double logp =
            std::max(student_logits[i] / student_temperature - mx - logsum, std::log(1e-12));
        loss -= teacher_probs[i] * logp;
    }
    return loss;
}

// ---- schedules ----

struct Schedules {
    double peak_lr = 1.5e-4;
    double final_lr = 1e-6;
    int64_t warmup_steps = 100;
    int64_t total_steps = 1000;
    double wd0 = 0.04, wd1 = 0.2;
    double m0 = 0.994, m1 = 1.0;
    double teacher_temp0 = 0.04, teacher_temp1 = 0.07;
    double student_temp = 0.1;

    void validate() const {
        if (warmup_steps > total_steps) throw ConfigError("warmup_steps > total_steps");
        if (peak_lr <= 0 || student_temp <= 0) throw ConfigError("schedule values");
    }

    nlohmann::json to_json() const {
        return {{"peak_lr", peak_lr},       {"final_lr", final_lr},
                {"warmup_steps", warmup_steps}, {"total_steps", total_steps},
                {"wd0", wd0},               {"wd1", wd1},
                {"m0", m0},                 {"m1", m1},
                {"teacher_temp0", teacher_temp0}, {"teacher_temp1", teacher_temp1},
                {"student_temp", student_temp}};
    }
    static Schedules from_json(const nlohmann::json& j) {
        Schedules s;
        s.peak_lr = j.at("peak_lr");
        s.final_lr = j.at("final_lr");
        s.warmup_steps = j.at("warmup_steps");
        s.total_steps = j.at("total_steps");
        s.wd0 = j.at("wd0");
        s.wd1 = j.at("wd1");
        s.m0 = j.at("m0");
        s.m1 = j.at("m1");
        s.teacher_temp0 = j.at("teacher_temp0");
        s.teacher_temp1 = j.at("teacher_temp1");
        s.student_temp = j.at("student_temp");
        return s;
    }
};

enum class ScheduleKind { lr, wd, momentum, teacher_temp };

inline double cosine_interp(double a, double b, double frac) {
    // endpoints are returned exactly: b + 0.5*(a-b)*2 is not bitwise a
    if (frac <= 0.0) return a;
    if (frac >= 1.0) return b;
    return b + 0.5 * (a - b) * (1.0 + std::cos(3.14159265358979323846 * frac));
}

inline double schedule_value(const Schedules& s, int64_t step, ScheduleKind which) {
    if (step < 0 || step > s.total_steps) throw StepOutOfRange(std::to_string(step));
    const double tfrac =
        s.total_steps > 0 ? static_cast<double>(step) / static_cast<double>(s.total_steps) : 1.0;
    switch (which) {
        case ScheduleKind::lr: {
            if (step < s.warmup_steps)
                return s.peak_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
            const double denom = static_cast<double>(s.total_steps - s.warmup_steps);
            const double frac = denom > 0 ? static_cast<double>(step - s.warmup_steps) / denom : 1.0;
            return cosine_interp(s.peak_lr, s.final_lr, frac);
        }
        case ScheduleKind::wd:
            return cosine_interp(s.wd0, s.wd1, tfrac);
        case ScheduleKind::momentum:
            return cosine_interp(s.m0, s.m1, tfrac);
        case ScheduleKind::teacher_temp: {
            if (s.warmup_steps <= 0 || step >= s.warmup_steps) return s.teacher_temp1;
            const double frac = static_cast<double>(step) / static_cast<double>(s.warmup_steps);
            return s.teacher_temp0 + (s.teacher_temp1 - s.teacher_temp0) * frac;
        }
    }
    throw DomainError("bad ScheduleKind");
}

struct LossWeights {
    double dino_global = 1.0;
    double dino_local = 1.0;
    double ibot = 1.0;
    double koleo = 0.1;

    void validate() const {
        if (dino_global < 0 || dino_local < 0 || ibot < 0 || koleo < 0)
            throw ConfigError("negative loss weight");
        if (dino_global + dino_local + ibot + koleo <= 0)
            throw ConfigError("all loss weights zero");
    }

    nlohmann::json to_json() const {
        return {{"dino_global", dino_global}, {"dino_local", dino_local}, {"ibot", ibot},
                {"koleo", koleo}};
    }
    static LossWeights from_json(const nlohmann::json& j) {
        LossWeights w;
        w.dino_global = j.at("dino_global");
        w.dino_local = j.at("dino_local");
        w.ibot = j.at("ibot");
        w.koleo = j.at("koleo");
        return w;
    }
};

// ---- model bundle ----

// Backbone plus the two projection heads, with a flat parameter namespace:
// backbone.*, dino.*, ibot.*
struct SslModelConfig {
    ViTConfig vit;
    HeadConfig dino_head;
    HeadConfig ibot_head;

    nlohmann::json to_json() const {
        return {{"vit", vit.to_json()},
                {"dino_head", dino_head.to_json()},
                {"ibot_head", ibot_head.to_json()}};
    }
    static SslModelConfig from_json(const nlohmann::json& j) {
        SslModelConfig m;
        m.vit = ViTConfig::from_json(j.at("vit"));
        m.dino_head = HeadConfig::from_json(j.at("dino_head"));
        m.ibot_head = HeadConfig::from_json(j.at("ibot_head"));
        return m;
    }
};

inline ParamStore init_ssl_params(const SslModelConfig& cfg, Rng& rng) {
    ParamStore p;
    insert_prefixed(p, "backbone.", init_vit_params(cfg.vit, rng));
    insert_prefixed(p, "dino.", init_head_params(cfg.dino_head, rng));
    insert_prefixed(p, "ibot.", init_head_params(cfg.ibot_head, rng));
    return p;
}

template <typename T>
struct PrefixedParams {
    BoundParams<T> backbone, dino, ibot;
};

template <typename T>
PrefixedParams<T> split_bound(const BoundParams<T>& all) {
    PrefixedParams<T> out;
    for (const auto& [name, var] : all.vars) {
        if (name.rfind("backbone.", 0) == 0)
            out.backbone.vars[name.substr(9)] = var;
        else if (name.rfind("dino.", 0) == 0)
            out.dino.vars[name.substr(5)] = var;
        else if (name.rfind("ibot.", 0) == 0)
            out.ibot.vars[name.substr(5)] = var;
    }
    return out;
}

struct LossBreakdown {
    double total = 0.0;
    double dino_global = 0.0;
    double dino_local = 0.0;
    double ibot = 0.0;
    double koleo = 0.0;
};

// Teacher-side targets for one batch, computed without gradient tracking.
struct TeacherTargets {
    Tensor<double> dino;  // (B*G) x K distributions, row index = img*G + view
    Tensor<double> ibot;  // M x K over all masked tokens (order: img, view, position)
    int masked_tokens = 0;
};

template <typename T>
TeacherTargets compute_teacher_targets(const ParamStore& teacher, const SslModelConfig& cfg,
                                       const std::vector<CropSet>& batch, double teacher_temp,
                                       int sinkhorn_iters) {
    Graph<T> g(false);
    auto bound = bind_params(g, teacher);
    auto parts = split_bound(bound);
    std::vector<typename Graph<T>::Var> cls_rows;
    std::vector<typename Graph<T>::Var> masked_rows;
    int masked_total = 0;
    for (const auto& crops : batch) {
        for (size_t v = 0; v < crops.globals.size(); ++v) {
            auto out = vit_forward(g, parts.backbone, cfg.vit,
                                   crops.globals[v].channels.template cast<T>(), nullptr);
            cls_rows.push_back(out.cls);
            const auto& mask = crops.masks[v];
            if (!mask.empty()) {
                std::vector<int> idx;
                for (size_t i = 0; i < mask.size(); ++i)
                    if (mask[i]) idx.push_back(static_cast<int>(i));
                if (!idx.empty()) {
                    masked_total += static_cast<int>(idx.size());
                    masked_rows.push_back(g.select_rows(out.patches, idx));
                }
            }
        }
    }
    TeacherTargets t;
    auto cls_logits =
        g.value(head_forward(g, parts.dino, cfg.dino_head, g.concat_rows(cls_rows)));
    t.dino = sinkhorn_normalize(cls_logits.template cast<double>(), teacher_temp, sinkhorn_iters);
    t.masked_tokens = masked_total;
    if (masked_total > 0) {
        auto tok_logits = g.value(
            head_forward(g, parts.ibot, cfg.ibot_head, g.concat_rows(masked_rows)));
        t.ibot =
            sinkhorn_normalize(tok_logits.template cast<double>(), teacher_temp, sinkhorn_iters);
    }
    return t;
}

// The full pretraining objective on one batch. Returns the scalar loss Var
// (for backward) plus the per-term breakdown.
template <typename T>
std::pair<typename Graph<T>::Var, LossBreakdown> ssl_total_loss(
    Graph<T>& g, const BoundParams<T>& student, const SslModelConfig& cfg,
    const TeacherTargets& targets, const std::vector<CropSet>& batch, const LossWeights& w,
    double student_temp, double koleo_eps = 1e-8) {
    using Var = typename Graph<T>::Var;
    w.validate();
    const int B = static_cast<int>(batch.size());
    if (B < 1) throw DomainError("empty batch");
    const int G = static_cast<int>(batch[0].globals.size());
    if (G < 2) throw TooFewGlobals("need G >= 2 global crops");
    const int L = static_cast<int>(batch[0].locals.size());

    auto parts = split_bound(student);

    std::vector<Var> global_cls;           // B*G rows
    std::vector<Var> local_cls;            // B*L rows
    std::vector<Var> student_masked_rows;  // matches targets.ibot row order
    for (const auto& crops : batch) {
        for (size_t v = 0; v < crops.globals.size(); ++v) {
            const auto& mask = crops.masks[v];
            auto out = vit_forward(g, parts.backbone, cfg.vit,
                                   crops.globals[v].channels.template cast<T>(),
                                   mask.empty() ? nullptr : &mask);
            global_cls.push_back(out.cls);
            if (!mask.empty()) {
                std::vector<int> idx;
                for (size_t i = 0; i < mask.size(); ++i)
                    if (mask[i]) idx.push_back(static_cast<int>(i));
                if (!idx.empty()) student_masked_rows.push_back(g.select_rows(out.patches, idx));
            }
        }
        for (const auto& loc : crops.locals) {
            auto out = vit_forward(g, parts.backbone, cfg.vit, loc.channels.template cast<T>(),
                                   nullptr);
            local_cls.push_back(out.cls);
        }
    }

    Var all_cls = g.concat_rows([&] {
        std::vector<Var> rows = global_cls;
        rows.insert(rows.end(), local_cls.begin(), local_cls.end());
        return rows;
    }());
    Var dino_logits = head_forward(g, parts.dino, cfg.dino_head, all_cls);

    const int K = cfg.dino_head.prototypes;
    // ordered student-view/teacher-view pairs, i != j, within each image
    std::vector<int> gpair_idx;
    std::vector<std::pair<int, int>> gpair_target;  // (img, teacher view)
    for (int b = 0; b < B; ++b)
        for (int i = 0; i < G; ++i)
            for (int j = 0; j < G; ++j) {
                if (i == j) continue;
                gpair_idx.push_back(b * G + i);
                gpair_target.push_back({b, j});
            }
    Tensor<T> gtargets({static_cast<int>(gpair_idx.size()), K});
    for (size_t r = 0; r < gpair_idx.size(); ++r)
        for (int c = 0; c < K; ++c)
            gtargets.at(static_cast<int>(r), c) = static_cast<T>(
                targets.dino.at(gpair_target[r].first * G + gpair_target[r].second, c));
    Var loss_global = g.cross_entropy_rows(g.select_rows(dino_logits, gpair_idx),
                                           std::move(gtargets), static_cast<T>(student_temp));

    Var loss_local = g.constant(Tensor<T>::scalar(T(0)));
    if (L > 0) {
        std::vector<int> lpair_idx;
        std::vector<std::pair<int, int>> lpair_target;
        for (int b = 0; b < B; ++b)
            for (int l = 0; l < L; ++l)
                for (int j = 0; j < G; ++j) {
                    lpair_idx.push_back(B * G + b * L + l);
                    lpair_target.push_back({b, j});
                }
        Tensor<T> ltargets({static_cast<int>(lpair_idx.size()), K});
        for (size_t r = 0; r < lpair_idx.size(); ++r)
            for (int c = 0; c < K; ++c)
                ltargets.at(static_cast<int>(r), c) = static_cast<T>(
                    targets.dino.at(lpair_target[r].first * G + lpair_target[r].second, c));
        loss_local = g.cross_entropy_rows(g.select_rows(dino_logits, lpair_idx),
                                          std::move(ltargets), static_cast<T>(student_temp));
    }

    Var loss_ibot = g.constant(Tensor<T>::scalar(T(0)));
    if (targets.masked_tokens > 0) {
        Var tok = g.concat_rows(student_masked_rows);
        if (g.value(tok).rows() != targets.masked_tokens)
            throw GridMismatch("student/teacher masked token count");
        Var tok_logits = head_forward(g, parts.ibot, cfg.ibot_head, tok);
        loss_ibot = g.cross_entropy_rows(tok_logits, targets.ibot.template cast<T>(),
                                         static_cast<T>(student_temp));
    }

    // KoLeo on the backbone cls embeddings of each global view across the batch
    Var loss_koleo = g.constant(Tensor<T>::scalar(T(0)));
    if (B >= 2 && w.koleo > 0.0) {
        std::vector<Var> per_view;
        for (int v = 0; v < G; ++v) {
            std::vector<Var> rows;
            for (int b = 0; b < B; ++b) rows.push_back(global_cls[b * G + v]);
            per_view.push_back(g.koleo(g.concat_rows(rows), static_cast<T>(koleo_eps)));
        }
        Var s = per_view[0];
        for (size_t i = 1; i < per_view.size(); ++i) s = g.add(s, per_view[i]);
        loss_koleo = g.scale(s, T(1) / static_cast<T>(G));
    }

    Var total = g.add(g.add(g.scale(loss_global, static_cast<T>(w.dino_global)),
                            g.scale(loss_local, static_cast<T>(w.dino_local))),
                      g.add(g.scale(loss_ibot, static_cast<T>(w.ibot)),
                            g.scale(loss_koleo, static_cast<T>(w.koleo))));

    LossBreakdown bd;
    bd.dino_global = static_cast<double>(g.value(loss_global).data[0]);
    bd.dino_local = static_cast<double>(g.value(loss_local).data[0]);
    bd.ibot = static_cast<double>(g.value(loss_ibot).data[0]);
    bd.koleo = static_cast<double>(g.value(loss_koleo).data[0]);
    bd.total = static_cast<double>(g.value(total).data[0]);
    return {total, bd};
}

// ---- training driver ----

struct PretrainConfig {
    SslModelConfig model;
    CropConfig crops;
    Schedules sched;
    LossWeights weights;
    MixtureSpec mixture{0.0, 0.0, 1.0};
    int batch_size = 16;
    uint64_t seed = 0;
    bool deterministic = true;
    int sinkhorn_iters = 3;
    int checkpoint_every = 500;
    double koleo_eps = 1e-8;

    nlohmann::json to_json() const {
        return {{"model", model.to_json()},
                {"crops", crops.to_json()},
                {"sched", sched.to_json()},
                {"weights", weights.to_json()},
                {"mixture", {{"mde", mixture.w_mde},
                             {"synthetic", mixture.w_synthetic},
                             {"real", mixture.w_real}}},
                {"batch_size", batch_size},
                {"seed", seed},
                {"deterministic", deterministic},
                {"sinkhorn_iters", sinkhorn_iters},
                {"checkpoint_every", checkpoint_every},
                {"koleo_eps", koleo_eps}};
    }
    static PretrainConfig from_json(const nlohmann::json& j) {
        PretrainConfig c;
        c.model = SslModelConfig::from_json(j.at("model"));
        if (j.contains("crops")) c.crops = CropConfig::from_json(j.at("crops"));
        if (j.contains("sched")) c.sched = Schedules::from_json(j.at("sched"));
        if (j.contains("weights")) c.weights = LossWeights::from_json(j.at("weights"));
        if (j.contains("mixture")) {
            const auto& m = j.at("mixture");
            c.mixture = {m.value("mde", 0.0), m.value("synthetic", 0.0), m.value("real", 0.0)};
        }
        c.batch_size = j.value("batch_size", c.batch_size);
        c.seed = j.value("seed", c.seed);
        c.deterministic = j.value("deterministic", c.deterministic);
        c.sinkhorn_iters = j.value("sinkhorn_iters", c.sinkhorn_iters);
        c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
        c.koleo_eps = j.value("koleo_eps", c.koleo_eps);
        return c;
    }
};

struct StepMetrics {
    int64_t step;
    double lr, wd, momentum;
    LossBreakdown loss;
};

inline void write_metrics_line(std::ostream& os, const StepMetrics& m) {
    nlohmann::json j{{"step", m.step},
                     {"lr", m.lr},
                     {"wd", m.wd},
                     {"momentum", m.momentum},
                     {"loss_total", m.loss.total},
                     {"loss_global", m.loss.dino_global},
                     {"loss_local", m.loss.dino_local},
                     {"loss_ibot", m.loss.ibot},
                     {"loss_koleo", m.loss.koleo}};
    os << j.dump() << "\n";
}

// Assemble one batch of crop sets with per-image derived seeds.
inline std::vector<CropSet> make_batch(const std::vector<ManifestRecord>& manifest,
                                       const PretrainConfig& cfg, const ChannelStats& stats,
                                       int64_t step) {
    Rng sampler = Rng(Rng::seed_mix(cfg.seed, 0x5a17 + static_cast<uint64_t>(step)));
    auto records = sample_batch(manifest, cfg.mixture, cfg.batch_size, sampler);
    std::vector<CropSet> batch;
    batch.reserve(records.size());
    for (size_t i = 0; i < records.size(); ++i) {
        DepthImage img = load_depth(records[i].path);
        Rng crop_rng =
            Rng(Rng::seed_mix(cfg.seed, (static_cast<uint64_t>(step) << 16) ^ (i + 1)));
        batch.push_back(multi_crop(img, cfg.crops, &stats, crop_rng));
    }
    return batch;
}

struct PretrainState {
    ParamStore student;
    ParamStore teacher;
    AdamW opt;
    int64_t step = 0;
};

inline void save_training_checkpoint(const std::string& path, const nlohmann::json& config,
                                     const PretrainState& st) {
    ParamStore all;
    insert_prefixed(all, "student.", st.student);
    insert_prefixed(all, "teacher.", st.teacher);
    insert_prefixed(all, "opt.m.", st.opt.m);
    insert_prefixed(all, "opt.v.", st.opt.v);
    nlohmann::json meta = config;
    meta["step"] = st.step;
    meta["opt_t"] = st.opt.t;
    meta["teacher_fingerprint"] = fingerprint(st.teacher);
    save_checkpoint(path, meta, all);
}

inline PretrainState load_training_checkpoint(const std::string& path) {
    Checkpoint ck = load_checkpoint(path);
    PretrainState st;
    st.student = extract_prefix(ck.tensors, "student.");
    st.teacher = extract_prefix(ck.tensors, "teacher.");
    st.opt.m = extract_prefix(ck.tensors, "opt.m.");
    st.opt.v = extract_prefix(ck.tensors, "opt.v.");
    st.step = ck.config.value("step", int64_t(0));
    st.opt.t = ck.config.value("opt_t", int64_t(0));
    return st;
}

// One optimizer step: teacher targets, student forward/backward, AdamW, EMA.
inline StepMetrics pretrain_step(PretrainState& st, const PretrainConfig& cfg,
                                 const std::vector<CropSet>& batch) {
    const auto& s = cfg.sched;
    StepMetrics m;
    m.step = st.step;
    m.lr = schedule_value(s, st.step, ScheduleKind::lr);
    m.wd = schedule_value(s, st.step, ScheduleKind::wd);
    m.momentum = schedule_value(s, st.step, ScheduleKind::momentum);
    const double ttemp = schedule_value(s, st.step, ScheduleKind::teacher_temp);

    auto targets = compute_teacher_targets<float>(st.teacher, cfg.model, batch, ttemp,
                                                  cfg.sinkhorn_iters);
    Graph<float> g(true);
    auto bound = bind_params(g, st.student);
    auto [loss, bd] = ssl_total_loss(g, bound, cfg.model, targets, batch, cfg.weights,
                                     s.student_temp, cfg.koleo_eps);
    g.backward(loss);
    auto grads = collect_grads(g, bound);
    st.opt.step(st.student, grads, m.lr, m.wd);
    ema_update(st.teacher, st.student, m.momentum);
    ++st.step;
    m.loss = bd;
    return m;
}

// Full run: checkpoints + metrics under out_dir. Returns the final state.
inline PretrainState run_pretrain(const PretrainConfig& cfg,
                                  const std::vector<ManifestRecord>& manifest,
                                  const ChannelStats& stats, const std::string& out_dir,
                                  const std::optional<std::string>& resume = std::nullopt) {
    namespace fs = std::filesystem;
    cfg.sched.validate();
    cfg.weights.validate();
    if (manifest.empty()) throw EmptyManifest("pretrain");
    fs::create_directories(fs::path(out_dir) / "checkpoints");

    PretrainState st;
    if (resume) {
        Checkpoint ck = load_checkpoint(*resume);
        if (ck.config.value("model", nlohmann::json()) != cfg.model.to_json())
            throw ResumeMismatch("model config differs from checkpoint");
        st.student = extract_prefix(ck.tensors, "student.");
        st.teacher = extract_prefix(ck.tensors, "teacher.");
        st.opt.m = extract_prefix(ck.tensors, "opt.m.");
        st.opt.v = extract_prefix(ck.tensors, "opt.v.");
        st.step = ck.config.value("step", int64_t(0));
        st.opt.t = ck.config.value("opt_t", int64_t(0));
    } else {
        Rng rng = Rng(Rng::seed_mix(cfg.seed, 0x1317));
        st.student = init_ssl_params(cfg.model, rng);
        st.teacher = st.student;  // teacher starts as a copy
    }

    const nlohmann::json meta = cfg.to_json();
    const std::string ckdir = (fs::path(out_dir) / "checkpoints").string();
    save_training_checkpoint(ckdir + "/step_" + std::to_string(st.step), meta, st);

    std::ofstream metrics(fs::path(out_dir) / "metrics.log",
                          resume ? std::ios::app : std::ios::trunc);
    if (!metrics) throw IoFailure("cannot open metrics.log");

    while (st.step < cfg.sched.total_steps) {
        auto batch = make_batch(manifest, cfg, stats, st.step);
        StepMetrics m = pretrain_step(st, cfg, batch);
        write_metrics_line(metrics, m);
        if (cfg.checkpoint_every > 0 && st.step % cfg.checkpoint_every == 0)
            save_training_checkpoint(ckdir + "/step_" + std::to_string(st.step), meta, st);
    }
    save_training_checkpoint(ckdir + "/step_" + std::to_string(st.step), meta, st);
    metrics.flush();
    return st;
}

}  // namespace dsd
