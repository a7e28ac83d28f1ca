// Acceptance harness: one pass/fail line per criterion, nonzero exit on any
// failure. Heavy artifacts (toy dataset, pretrained teacher) are built once
// under ./acceptance_work and shared across criteria.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "dsd/grad_check.hpp"
#include "dsd/run.hpp"

namespace fs = std::filesystem;
using namespace dsd;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

double now_s() {
    using clock = std::chrono::steady_clock;
    return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

// ---- shared toy artifacts ----

struct Workspace {
    fs::path root;
    ToyDataset dataset;
    ChannelStats stats;
    PretrainConfig pretrain_cfg;
    PretrainState pretrained;  // final state of the long toy run
    bool pretrain_done = false;
};

SslModelConfig toy_model() {
    SslModelConfig m;
    m.vit = {8, 48, 3, 4, 2.0, 6};
    m.dino_head = {48, 128, 32, 64, true};
    m.ibot_head = {48, 128, 32, 64, true};
    return m;
}

CropConfig toy_crops() {
    CropConfig c;
    c.global_size = 48;
    c.local_size = 24;
    c.patch_size = 8;
    c.local_count = 4;
    // gentler crop ranges than the full-scale defaults: 56px toy scenes hold a
    // single object, so aggressive scale crops often miss it entirely
    c.global_scale_lo = 0.6;
    c.local_scale_lo = 0.2;
    c.local_scale_hi = 0.5;
    return c;
}

void build_dataset(Workspace& ws) {
    ToyConfig tc;
    tc.count = 660;
    tc.size = 56;
    tc.seed = 7;
    ws.dataset = gen_toy_dataset(tc, (ws.root / "toy_data").string());
    ws.stats = compute_channel_stats(ws.dataset.manifest);
}

void run_toy_pretrain(Workspace& ws) {
    PretrainConfig pc;
    pc.model = toy_model();
    pc.crops = toy_crops();
    pc.sched.peak_lr = 1e-3;
    pc.sched.final_lr = 1e-5;
    pc.sched.warmup_steps = 800;
    pc.sched.total_steps = 2000;
    pc.sched.m0 = 0.9;
    // at batch 8 the balanced-assignment targets are noise-dominated (16 view
    // rows against 64 prototypes), which pins the objective near its uniform
    // plateau; the toy run uses plain softmax targets and leans on the koleo
    // term to keep the embedding spread
    pc.sinkhorn_iters = 0;
    pc.weights.koleo = 1.0;
    pc.mixture = {0.0, 1.0, 0.0};
    pc.batch_size = 8;
    pc.seed = 11;
    pc.checkpoint_every = 0;
    ws.pretrain_cfg = pc;
    ws.pretrained = run_pretrain(pc, ws.dataset.manifest, ws.stats, (ws.root / "pretrain").string());
    ws.pretrain_done = true;
}

FeatureSet toy_features(const Workspace& ws, size_t begin, size_t end) {
    const ParamStore backbone = extract_prefix(ws.pretrained.teacher, "backbone.");
    FeatureSet out;
    for (size_t i = begin; i < end; ++i) {
        NormalizedInput in =
            normalize(resize_depth(load_depth(ws.dataset.manifest[i].path), 48, 48), &ws.stats);
        Tensor<float> f = extract_vit_features(backbone, ws.pretrain_cfg.model.vit, in);
        if (out.features.size() == 0)
            out.features = Tensor<float>({static_cast<int>(end - begin), f.cols()});
        std::copy(f.data.begin(), f.data.end(),
                  out.features.data.begin() + (i - begin) * static_cast<size_t>(f.cols()));
        out.labels.push_back(ws.dataset.labels[i]);
    }
    return out;
}

// ---- criteria ----

Outcome c1_normalization() {
    Rng rng(101);
    const int n = 10000;
    DepthImage img(100, 100);
    for (int r = 0; r < 100; ++r)
        for (int c = 0; c < 100; ++c)
            img.set_pixel(r, c, static_cast<float>(rng.uniform(0.01, 120.0)));
    NormalizedInput out = normalize(img, nullptr);

    long double lmin = INFINITY, lmax = -INFINITY;
    for (int i = 0; i < n; ++i) {
        const long double l = std::log1p(static_cast<long double>(img.depth[i]));
        lmin = std::min(lmin, l);
        lmax = std::max(lmax, l);
    }
    double worst = 0.0;
    for (int i = 0; i < n; ++i) {
        const long double l = std::log1p(static_cast<long double>(img.depth[i]));
        const long double refs[3] = {(l - lmin) / (lmax - lmin), l / std::log1p(10.0L),
                                     l / std::log1p(100.0L)};
        for (int c = 0; c < 3; ++c) {
            const double got = out.channels.data[static_cast<size_t>(c) * n + i];
            const double rel = std::abs(got - static_cast<double>(refs[c])) /
                               std::max(1e-30L, std::abs(refs[c]));
            worst = std::max(worst, rel);
        }
    }
    if (worst >= 1e-6) return {false, "max relative error " + fmt(worst)};

    DepthImage anchors(1, 3);
    anchors.set_pixel(0, 0, 10.0f);
    anchors.set_pixel(0, 1, 100.0f);
    anchors.set_pixel(0, 2, 1.0f);
    NormalizedInput a = normalize(anchors, nullptr);
    const double c2_at_10 = a.channels.data[1 * 3 + 0];
    const double c3_at_100 = a.channels.data[2 * 3 + 1];
    if (std::abs(c2_at_10 - 1.0) > 1e-12 || std::abs(c3_at_100 - 1.0) > 1e-12)
        return {false, "anchor C2(10)=" + fmt(c2_at_10) + " C3(100)=" + fmt(c3_at_100)};
    return {true, "max rel err " + fmt(worst) + ", anchors exact"};
}

Outcome c2_sinkhorn() {
    const int B = 64, K = 128;
    Rng rng(103);
    Tensor<double> logits({B, K});
    for (auto& v : logits.data) v = rng.normal(0.0, 1.0);
    Tensor<double> q = sinkhorn_normalize(logits, 1.0, 50);
    double worst_row = 0.0, worst_col = 0.0;
    for (int r = 0; r < B; ++r) {
        double s = 0.0;
        for (int c = 0; c < K; ++c) s += q.at(r, c);
        worst_row = std::max(worst_row, std::abs(s - 1.0));
    }
    const double target = static_cast<double>(B) / K;
    for (int c = 0; c < K; ++c) {
        double s = 0.0;
        for (int r = 0; r < B; ++r) s += q.at(r, c);
        worst_col = std::max(worst_col, std::abs(s - target) / target);
    }
    if (worst_row >= 1e-6 || worst_col >= 1e-3)
        return {false, "row err " + fmt(worst_row) + ", col rel err " + fmt(worst_col)};

    Tensor<double> two({2, 2});
    two.at(0, 0) = 0.0;
    two.at(0, 1) = std::log(2.0);
    two.at(1, 0) = std::log(2.0);
    two.at(1, 1) = 0.0;
    Tensor<double> fixed = sinkhorn_normalize(two, 1.0, 50);
    const double expect[4] = {1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0};
    double worst2 = 0.0;
    for (int i = 0; i < 4; ++i) worst2 = std::max(worst2, std::abs(fixed.data[i] - expect[i]));
    if (worst2 >= 1e-9) return {false, "2x2 fixed point error " + fmt(worst2)};
    return {true, "row " + fmt(worst_row) + ", col " + fmt(worst_col) + ", 2x2 " + fmt(worst2)};
}

Outcome c3_gradients() {
    SslModelConfig cfg;
    cfg.vit = {8, 16, 2, 2, 2.0, 4};
    cfg.dino_head = {16, 24, 8, 8, true};
    cfg.ibot_head = {16, 24, 8, 8, true};
    CropConfig crops;
    crops.global_size = 32;
    crops.local_size = 16;
    crops.patch_size = 8;
    crops.local_count = 2;
    crops.mask_sample_prob = 1.0;

    Rng data_rng(105);
    std::vector<CropSet> batch;
    for (int b = 0; b < 2; ++b) {
        DepthImage img(40, 40);
        for (auto& d : img.depth) d = static_cast<float>(data_rng.uniform(0.5, 9.0));
        Rng crop_rng(200 + b);
        batch.push_back(multi_crop(img, crops, nullptr, crop_rng));
    }

    Rng init_rng(107);
    ParamStore teacher = init_ssl_params(cfg, init_rng);
    ParamStore student = init_ssl_params(cfg, init_rng);
    TeacherTargets targets = compute_teacher_targets<double>(teacher, cfg, batch, 0.05, 3);
    LossWeights w;

    auto loss_fn = [&](const ParamsF64& p) {
        Graph<double> g(false);
        auto bound = bind_params(g, p);
        auto [loss, bd] = ssl_total_loss<double>(g, bound, cfg, targets, batch, w, 0.1);
        (void)bd;
        return g.value(loss).data[0];
    };

    ParamsF64 base = to_f64(student);
    Graph<double> g(true);
    auto bound = bind_params(g, base);
    auto [loss, bd] = ssl_total_loss<double>(g, bound, cfg, targets, batch, w, 0.1);
    (void)bd;
    g.backward(loss);
    ParamsF64 analytic;
    for (const auto& [name, var] : bound.vars)
        if (g.has_grad(var)) analytic[name] = g.grad(var);

    Rng probe_rng(109);
    // 1e-7 step: small enough that the curvature of the normalized-head
    // branch does not dominate, large enough for clean f64 central diffs
    GradCheckResult res = grad_check(loss_fn, base, analytic, 3, probe_rng, 1e-7);
    if (res.max_rel_error >= 1e-6)
        return {false, "max rel error " + fmt(res.max_rel_error) + " at " + res.worst_param +
                           "[" + std::to_string(res.worst_index) + "] analytic " +
                           fmt(res.analytic) + " numeric " + fmt(res.numeric)};
    return {true, "max rel error " + fmt(res.max_rel_error) + " over " +
                      std::to_string(res.checked) + " coordinates"};
}

Outcome c4_schedules_ema() {
    Schedules s;
    s.peak_lr = 3e-4;
    s.final_lr = 1e-6;
    s.warmup_steps = 100;
    s.total_steps = 1000;
    if (std::abs(schedule_value(s, 100, ScheduleKind::lr) - s.peak_lr) > 1e-9)
        return {false, "lr(warmup) != peak"};
    if (schedule_value(s, 0, ScheduleKind::lr) != 0.0) return {false, "lr(0) != 0"};
    if (std::abs(schedule_value(s, 1000, ScheduleKind::lr) - s.final_lr) > 1e-12)
        return {false, "lr(total) != final"};
    if (schedule_value(s, 0, ScheduleKind::wd) != s.wd0) return {false, "wd(0) != wd0"};
    if (std::abs(schedule_value(s, 1000, ScheduleKind::wd) - s.wd1) > 1e-12)
        return {false, "wd(total) != wd1"};
    if (std::abs(schedule_value(s, 1000, ScheduleKind::momentum) - s.m1) > 1e-12)
        return {false, "momentum(total) != m1"};
    if (schedule_value(s, 0, ScheduleKind::teacher_temp) != s.teacher_temp0)
        return {false, "ttemp(0) != t0"};

    Rng rng(111);
    ParamStore t, st;
    t["a"] = Tensor<float>({3, 4});
    st["a"] = Tensor<float>({3, 4});
    for (auto& v : t["a"].data) v = static_cast<float>(rng.uniform(-2.0, 2.0));
    for (auto& v : st["a"].data) v = static_cast<float>(rng.uniform(-2.0, 2.0));
    for (double m : {0.0, 0.5, 1.0}) {
        ParamStore upd = t;
        ema_update(upd, st, m);
        const float mf = static_cast<float>(m);
        for (size_t i = 0; i < upd["a"].data.size(); ++i) {
            const float expect = mf * t["a"].data[i] + (1.0f - mf) * st["a"].data[i];
            if (upd["a"].data[i] != expect)
                return {false, "ema bit mismatch at m=" + fmt(m)};
        }
    }
    return {true, "schedule anchors and bit-level ema identities hold"};
}

Outcome c5_toy_pretrain(Workspace& ws) {
    run_toy_pretrain(ws);

    // smoothed loss: 50-step windows centred at step 100 and at the end
    std::ifstream is(ws.root / "pretrain" / "metrics.log");
    std::vector<double> losses;
    std::string line;
    while (std::getline(is, line))
        if (!line.empty()) losses.push_back(nlohmann::json::parse(line).at("loss_total"));
    if (losses.size() < 200) return {false, "metrics.log too short"};
    auto window_mean = [&](size_t begin, size_t end) {
        double s = 0.0;
        for (size_t i = begin; i < end; ++i) s += losses[i];
        return s / static_cast<double>(end - begin);
    };
    const double early = window_mean(75, 125);
    const double late = window_mean(losses.size() - 50, losses.size());
    const bool loss_ok = late < 0.8 * early;

    FeatureSet train = toy_features(ws, 0, 600);
    FeatureSet test = toy_features(ws, 600, 660);
    KnnResult knn = knn_eval(train, test, 5);
    const bool knn_ok = knn.top1 >= 0.80;
    const std::string detail = "smoothed loss " + fmt(early) + " -> " + fmt(late) +
                               ", knn top1 " + fmt(knn.top1) + " (chance 0.333)";
    return {loss_ok && knn_ok, detail};
}

Outcome c6_distill(Workspace& ws) {
    if (!ws.pretrain_done) return {false, "no pretrained teacher (criterion 5 did not run)"};

    // hard alignment assertion: 224/14 teacher, cnn student at 256 -> 16x16 grid
    DistillConfig canon;
    canon.teacher = SslModelConfig{};  // default vit: patch 14, base grid 16
    StudentConfig cnn;
    cnn.kind = StudentKind::cnn;
    canon.students = {cnn};
    canon.teacher_crop = 224;
    canon.student_local_crop = 96;
    if (canon.teacher_grid() != 16) return {false, "teacher grid != 16"};
    if (canon.student_crop(cnn) != 256) return {false, "cnn student crop != 256"};
    validate_alignment(canon);
    if (!alignment_check(canon.student_crop(cnn) / 16, canon.teacher_grid()).aligned)
        return {false, "stride-16 grid does not match the teacher grid"};

    DistillConfig cfg;
    cfg.teacher = ws.pretrain_cfg.model;
    StudentConfig student;
    student.kind = StudentKind::cnn;
    student.cnn.base_channels = 4;
    student.cnn.bifpn_channels = 16;
    student.cnn.bifpn_layers = 1;
    student.cosine = true;
    student.cls_head = {16, 32, 16, 64, true};
    student.dense_head = {16, 32, 16, 64, true};
    cfg.students = {student};
    cfg.teacher_crop = 48;  // grid 6 -> cnn crop 96
    cfg.global_count = 2;
    cfg.local_count = 1;
    cfg.student_local_crop = 32;
    cfg.sched.peak_lr = 1e-3;
    cfg.sched.final_lr = 1e-5;
    cfg.sched.warmup_steps = 50;
    cfg.sched.total_steps = 1000;
    cfg.mixture = {0.0, 1.0, 0.0};
    cfg.batch_size = 2;
    cfg.seed = 13;
    cfg.checkpoint_every = 0;

    const ParamStore& teacher = ws.pretrained.teacher;
    const uint64_t fp_before = fingerprint(teacher);
    DistillState init = init_distill_state(cfg, teacher);
    auto holdout = make_distill_batch(ws.dataset.manifest, cfg, ws.stats, 999983);
    const double before = distill_agreement(init, cfg, ws.stats, holdout, 0);

    DistillState final_st =
        run_distill(cfg, ws.dataset.manifest, ws.stats, teacher, (ws.root / "distill").string());
    const double after = distill_agreement(final_st, cfg, ws.stats, holdout, 0);

    if (fingerprint(final_st.teacher) != fp_before) return {false, "teacher tensors changed"};
    for (const auto& [name, t] : final_st.teacher)
        if (t.data != teacher.at(name).data) return {false, "teacher tensor " + name + " changed"};
    if (!(after > before))
        return {false, "agreement " + fmt(before) + " -> " + fmt(after) + " did not increase"};
    return {true, "grid 16x16 aligned; held-out agreement " + fmt(before) + " -> " + fmt(after)};
}

Outcome c7_eval_oracles() {
    // knn vs a from-scratch double-precision oracle on 6 planted points
    FeatureSet train;
    train.features = Tensor<float>({6, 3});
    const float pts[6][3] = {{1, 0.2f, 0},   {0.9f, -0.1f, 0.1f}, {1.1f, 0, -0.2f},
                             {0, 1, 0.15f},  {0.1f, 0.9f, -0.1f}, {-0.05f, 1.05f, 0}};
    for (int r = 0; r < 6; ++r)
        for (int c = 0; c < 3; ++c) train.features.at(r, c) = pts[r][c];
    train.labels = {0, 0, 0, 1, 1, 1};
    FeatureSet test;
    test.features = Tensor<float>({4, 3});
    const float qs[4][3] = {{2, 0.3f, 0.1f}, {0.2f, 1.8f, 0}, {1, 0.8f, 0}, {0.7f, 1, 0.1f}};
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 3; ++c) test.features.at(r, c) = qs[r][c];
    const int k = 3;
    const double tau = 0.07;
    std::vector<int> oracle_pred;
    for (int q = 0; q < 4; ++q) {
        std::vector<std::pair<double, int>> sims;
        for (int r = 0; r < 6; ++r) {
            double dot = 0.0, nq = 0.0, nr = 0.0;
            for (int c = 0; c < 3; ++c) {
                dot += static_cast<double>(test.features.at(q, c)) * train.features.at(r, c);
                nq += static_cast<double>(test.features.at(q, c)) * test.features.at(q, c);
                nr += static_cast<double>(train.features.at(r, c)) * train.features.at(r, c);
            }
            sims.push_back({dot / (std::sqrt(nq) * std::sqrt(nr)), train.labels[r]});
        }
        std::sort(sims.begin(), sims.end(), [](auto& a, auto& b) { return a.first > b.first; });
        double votes[2] = {0.0, 0.0};
        for (int i = 0; i < k; ++i) votes[sims[i].second] += std::exp(sims[i].first / tau);
        oracle_pred.push_back(votes[1] > votes[0] ? 1 : 0);
    }
    // score knn_eval against every labeling consistent with the oracle
    double oracle_top1 = 0.0;
    test.labels = oracle_pred;
    for (int q = 0; q < 4; ++q) oracle_top1 += 0.25;
    KnnResult r = knn_eval(train, test, k, tau);
    if (std::abs(r.top1 - oracle_top1) > 1e-9)
        return {false, "knn top1 " + fmt(r.top1) + " vs oracle " + fmt(oracle_top1)};

    // linear probe on well-separated blobs
    Rng rng(113);
    auto draw = [&](int n) {
        FeatureSet s;
        s.features = Tensor<float>({n, 6});
        for (int i = 0; i < n; ++i) {
            const int label = i % 2;
            s.labels.push_back(label);
            for (int c = 0; c < 6; ++c)
                s.features.at(i, c) =
                    static_cast<float>(rng.normal(c == 0 ? 6.0 * label : 0.0, 1.0));
        }
        return s;
    };
    ProbeResult pr = linear_probe(draw(60), draw(30));
    if (pr.accuracy < 0.99) return {false, "blob probe accuracy " + fmt(pr.accuracy)};

    // half-overlap mIoU = 1/3 exactly
    std::vector<int> pred(64), gt(64);
    for (int i = 0; i < 64; ++i) {
        pred[i] = (i % 8) < 4 ? 0 : 1;  // left half
        gt[i] = (i / 8) < 4 ? 0 : 1;    // top half
    }
    const double miou = mean_iou(pred, gt, 2);
    if (std::abs(miou - 1.0 / 3.0) > 1e-9) return {false, "half-overlap miou " + fmt(miou)};

    // pca against a direct symmetric eigensolver on an independent covariance
    const int n = 40, d = 4;
    Tensor<float> rows({n, d});
    for (auto& v : rows.data) v = static_cast<float>(rng.normal(0.0, 1.5));
    PcaBasis basis = pca_fit(rows, d);
    Eigen::MatrixXd x(n, d);
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < d; ++c) x(i, c) = rows.at(i, c);
    Eigen::RowVectorXd mu = x.colwise().mean();
    Eigen::MatrixXd centered = x.rowwise() - mu;
    Eigen::MatrixXd cov = centered.transpose() * centered / (n - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    for (int m = 0; m < d; ++m) {
        const double ev = es.eigenvalues()(d - 1 - m);  // descending
        if (std::abs(basis.eigenvalues[m] - ev) > 1e-6 * std::max(1.0, ev))
            return {false, "pca eigenvalue " + std::to_string(m) + " off"};
        double dot = 0.0;
        for (int c = 0; c < d; ++c) dot += basis.components.at(m, c) * es.eigenvectors()(c, d - 1 - m);
        if (std::abs(std::abs(dot) - 1.0) > 1e-6)
            return {false, "pca component " + std::to_string(m) + " misaligned"};
    }
    return {true, "knn, probe (" + fmt(pr.accuracy) + "), miou 1/3, pca spectrum all match"};
}

Outcome c8_persistence(Workspace& ws) {
    PretrainConfig pc;
    pc.model.vit = {8, 16, 1, 2, 2.0, 3};
    pc.model.dino_head = {16, 24, 8, 8, true};
    pc.model.ibot_head = {16, 24, 8, 8, true};
    pc.crops = toy_crops();
    pc.crops.global_size = 24;
    pc.crops.local_size = 16;
    pc.crops.local_count = 2;
    pc.sched.peak_lr = 1e-3;
    pc.sched.warmup_steps = 1;
    pc.sched.total_steps = 3;
    pc.mixture = {0.0, 1.0, 0.0};
    pc.batch_size = 2;
    pc.seed = 17;
    pc.checkpoint_every = 0;

    const fs::path a = ws.root / "det_a", b = ws.root / "det_b";
    PretrainState sa = run_pretrain(pc, ws.dataset.manifest, ws.stats, a.string());
    PretrainState sb = run_pretrain(pc, ws.dataset.manifest, ws.stats, b.string());

    auto slurp = [](const fs::path& p) {
        std::ifstream is(p, std::ios::binary);
        std::stringstream ss;
        ss << is.rdbuf();
        return ss.str();
    };
    if (slurp(a / "metrics.log") != slurp(b / "metrics.log"))
        return {false, "metrics logs differ between identical runs"};
    if (slurp(a / "checkpoints" / "step_3") != slurp(b / "checkpoints" / "step_3"))
        return {false, "final checkpoints differ between identical runs"};

    PretrainState loaded = load_training_checkpoint((a / "checkpoints" / "step_3").string());
    if (loaded.step != 3) return {false, "reloaded step mismatch"};
    for (const auto& [name, t] : sa.student)
        if (loaded.student.at(name).data != t.data)
            return {false, "student tensor " + name + " not bit-exact after reload"};
    for (const auto& [name, t] : sa.teacher)
        if (loaded.teacher.at(name).data != t.data)
            return {false, "teacher tensor " + name + " not bit-exact after reload"};
    for (const auto& [name, t] : sa.opt.m)
        if (loaded.opt.m.at(name).data != t.data)
            return {false, "optimizer moment " + name + " not bit-exact after reload"};
    return {true, "byte-identical runs; checkpoint round trip bit-exact"};
}

Outcome c9_segment(Workspace& ws) {
    if (!ws.pretrain_done) return {false, "no pretrained teacher (criterion 5 did not run)"};
    const ParamStore backbone = extract_prefix(ws.pretrained.teacher, "backbone.");
    std::vector<SegSample> samples;
    for (size_t i = 0; i < 80; ++i) {
        NormalizedInput in =
            normalize(resize_depth(load_depth(ws.dataset.manifest[i].path), 48, 48), &ws.stats);
        auto [tokens, grid] = extract_vit_patch_tokens(backbone, ws.pretrain_cfg.model.vit, in);
        auto [labels, hw] = load_pgm(ws.dataset.seg_paths[i]);
        SegSample s;
        s.tokens = std::move(tokens);
        s.grid = grid;
        s.labels = std::move(labels);
        s.height = hw.first;
        s.width = hw.second;
        samples.push_back(std::move(s));
    }
    std::vector<size_t> tr, te;
    split_holdout(0.9, samples.size(), tr, te);
    std::vector<SegSample> train, test;
    for (size_t i : tr) train.push_back(samples[i]);
    for (size_t i : te) test.push_back(samples[i]);
    SegProbeResult r = segment_probe(train, test, 4, 40, 1e-2);
    if (r.miou < 0.6) return {false, "miou " + fmt(r.miou) + " < 0.6"};
    return {true, "miou " + fmt(r.miou) + " on " + std::to_string(te.size()) + " held-out images"};
}

}  // namespace

int main() {
    Workspace ws;
    ws.root = fs::current_path() / "acceptance_work";
    fs::remove_all(ws.root);
    fs::create_directories(ws.root);

    const char* names[9] = {
        "normalization exactness",        "sinkhorn correctness",
        "gradient fidelity",              "schedule and ema exactness",
        "end-to-end toy pretraining",     "distillation alignment and progress",
        "evaluation oracles",             "persistence and determinism",
        "segmentation probe sanity"};

    bool dataset_ready = false;
    auto ensure_dataset = [&]() {
        if (!dataset_ready) {
            build_dataset(ws);
            dataset_ready = true;
        }
    };

    int failures = 0;
    for (int i = 0; i < 9; ++i) {
        Outcome o;
        const double t0 = now_s();
        try {
            switch (i) {
                case 0: o = c1_normalization(); break;
                case 1: o = c2_sinkhorn(); break;
                case 2: o = c3_gradients(); break;
                case 3: o = c4_schedules_ema(); break;
                case 4: ensure_dataset(); o = c5_toy_pretrain(ws); break;
                case 5: ensure_dataset(); o = c6_distill(ws); break;
                case 6: o = c7_eval_oracles(); break;
                case 7: ensure_dataset(); o = c8_persistence(ws); break;
                case 8: ensure_dataset(); o = c9_segment(ws); break;
            }
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double dt = now_s() - t0;
        failures += o.pass ? 0 : 1;
        std::cout << "[" << (i + 1) << "/9] " << names[i] << ": "
                  << (o.pass ? "PASS" : "FAIL") << " (" << o.detail << ") [" << fmt(dt) << "s]"
                  << std::endl;
    }
    if (failures) {
        std::cout << failures << " criterion(s) failed" << std::endl;
        return 1;
    }
    std::cout << "all 9 criteria passed" << std::endl;
    return 0;
}
