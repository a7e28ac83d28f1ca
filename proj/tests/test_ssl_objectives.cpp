// Sinkhorn centering, distillation objectives, schedules, EMA, pretraining.

#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "dsd/ssl.hpp"

namespace fs = std::filesystem;
using namespace dsd;
using Catch::Matchers::WithinAbs;

namespace {

SslModelConfig tiny_model() {
    SslModelConfig m;
    m.vit.patch_size = 8;
    m.vit.embed_dim = 16;
    m.vit.depth = 1;
    m.vit.heads = 2;
    m.vit.mlp_ratio = 2.0;
    m.vit.base_grid = 2;
    m.dino_head = {16, 24, 8, 8, true};
    m.ibot_head = {16, 24, 8, 8, true};
    return m;
}

CropConfig tiny_crops() {
    CropConfig c;
    c.global_count = 2;
    c.local_count = 2;
    c.global_size = 16;
    c.local_size = 8;
    c.patch_size = 8;
    return c;
}

NormalizedInput rand_view(int S, Rng& rng) {
    NormalizedInput v;
    v.height = v.width = S;
    v.valid.assign(static_cast<size_t>(S) * S, 1);
    v.channels = Tensor<float>({3, S, S});
    for (auto& x : v.channels.data) x = static_cast<float>(rng.uniform(-1.0, 1.0));
    return v;
}

CropSet rand_cropset(Rng& rng, int G = 2, int L = 2, bool masked = false) {
    CropSet cs;
    for (int g = 0; g < G; ++g) {
        cs.globals.push_back(rand_view(16, rng));
        if (masked && g == 0)
            cs.masks.push_back({1, 0, 1, 0});  // 2 of 4 patches
        else
            cs.masks.emplace_back();
    }
    for (int l = 0; l < L; ++l) cs.locals.push_back(rand_view(8, rng));
    return cs;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    REQUIRE(is.good());
    return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

fs::path ssl_tmp() {
    fs::path p = fs::temp_directory_path() / "dsd_ssl_tests";
    fs::create_directories(p);
    return p;
}

// A tiny on-disk dataset for driver tests.
std::vector<ManifestRecord> write_toy_manifest(const fs::path& dir) {
    fs::create_directories(dir);
    std::vector<ManifestRecord> manifest;
    Rng rng(77);
    for (int i = 0; i < 6; ++i) {
        DepthImage img(24, 24);
        for (int r = 0; r < 24; ++r)
            for (int c = 0; c < 24; ++c)
                img.set_pixel(r, c, static_cast<float>(rng.uniform(0.5, 8.0)));
        const fs::path p = dir / ("img_" + std::to_string(i) + ".dfm1");
        save_dfm1(img, p.string());
        manifest.push_back({p.string(), SourceType::real, ""});
    }
    return manifest;
}

PretrainConfig tiny_pretrain(int64_t steps) {
    PretrainConfig cfg;
    cfg.model = tiny_model();
    cfg.crops = tiny_crops();
    cfg.sched.warmup_steps = 1;
    cfg.sched.total_steps = steps;
    cfg.sched.peak_lr = 1e-3;
    cfg.batch_size = 2;
    cfg.seed = 3;
    cfg.checkpoint_every = 0;
    cfg.mixture = {0.0, 0.0, 1.0};
    return cfg;
}

}  // namespace

TEST_CASE("sinkhorn maps equal logits to uniform rows", "[ssl_objectives]") {
    Tensor<double> logits = Tensor<double>::full({4, 6}, 1.7);
    Tensor<double> q = sinkhorn_normalize(logits, 0.1, 10);
    for (double v : q.data) CHECK_THAT(v, WithinAbs(1.0 / 6.0, 1e-12));
}

TEST_CASE("sinkhorn 2x2 fixed point", "[ssl_objectives]") {
    // exp(logits) proportional to [[1,2],[2,1]]; the balanced solution is
    // [[1/3,2/3],[2/3,1/3]]
    const double ln2 = std::log(2.0);
    Tensor<double> logits({2, 2}, {0.0, ln2, ln2, 0.0});
    Tensor<double> q = sinkhorn_normalize(logits, 1.0, 50);
    CHECK_THAT(q.at(0, 0), WithinAbs(1.0 / 3.0, 1e-12));
    CHECK_THAT(q.at(0, 1), WithinAbs(2.0 / 3.0, 1e-12));
    CHECK_THAT(q.at(1, 0), WithinAbs(2.0 / 3.0, 1e-12));
    CHECK_THAT(q.at(1, 1), WithinAbs(1.0 / 3.0, 1e-12));
}

TEST_CASE("single-row sinkhorn degenerates to softmax", "[ssl_objectives]") {
    Rng rng(1);
    Tensor<double> logits({1, 5});
    for (auto& v : logits.data) v = rng.uniform(-2.0, 2.0);
    const double tau = 0.07;
    Tensor<double> q = sinkhorn_normalize(logits, tau, 3);
    double mx = logits.data[0];
    for (double v : logits.data) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : logits.data) z += std::exp((v - mx) / tau);
    for (int c = 0; c < 5; ++c)
        CHECK_THAT(q.at(0, c), WithinAbs(std::exp((logits.at(0, c) - mx) / tau) / z, 1e-12));
}

TEST_CASE("sinkhorn satisfies both marginals on random input", "[ssl_objectives]") {
    Rng rng(2);
    const int B = 8, K = 16;
    Tensor<double> logits({B, K});
    for (auto& v : logits.data) v = rng.normal(0.0, 1.0);
    Tensor<double> q = sinkhorn_normalize(logits, 0.5, 50);
    for (int r = 0; r < B; ++r) {
        double s = 0.0;
        for (int c = 0; c < K; ++c) s += q.at(r, c);
        CHECK_THAT(s, WithinAbs(1.0, 1e-6));
    }
    for (int c = 0; c < K; ++c) {
        double s = 0.0;
        for (int r = 0; r < B; ++r) s += q.at(r, c);
        CHECK_THAT(s, WithinAbs(static_cast<double>(B) / K, 1e-3 * B / K));
    }
}

TEST_CASE("sinkhorn input validation", "[ssl_objectives]") {
    Tensor<double> bad({2, 2});
    bad.data[1] = std::nan("");
    CHECK_THROWS_AS(sinkhorn_normalize(bad, 0.1, 3), NonFiniteLogits);
    Tensor<double> ok({2, 2});
    CHECK_THROWS_AS(sinkhorn_normalize(ok, 0.0, 3), DomainError);
    CHECK_THROWS_AS(sinkhorn_normalize(Tensor<double>({2, 1}), 0.1, 3), DomainError);
}

TEST_CASE("dino cross entropy anchors", "[ssl_objectives]") {
    // matching one-hot: near zero with a decisive logit gap
    CHECK_THAT(dino_cross_entropy({1.0, 0.0}, {40.0, 0.0}, 1.0), WithinAbs(0.0, 1e-6));
    // uniform teacher, equal logits: ln K
    const int K = 8;
    std::vector<double> u(K, 1.0 / K), z(K, 0.0);
    CHECK_THAT(dino_cross_entropy(u, z, 0.1), WithinAbs(std::log(double(K)), 1e-12));
    // teacher [1,0] vs a 50/50 student: ln 2
    CHECK_THAT(dino_cross_entropy({1.0, 0.0}, {0.0, 0.0}, 1.0), WithinAbs(std::log(2.0), 1e-12));
    CHECK_THROWS_AS(dino_cross_entropy({1.0}, {0.0, 0.0}, 1.0), ShapeMismatch);
    CHECK_THROWS_AS(dino_cross_entropy({1.0, 0.0}, {0.0, 0.0}, 0.0), DomainError);
}

TEST_CASE("cross entropy is bounded below by the teacher entropy", "[ssl_objectives]") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const int K = 6;
        std::vector<double> t(K), s(K);
        double sum = 0.0;
        for (auto& v : t) sum += v = rng.uniform(0.01, 1.0);
        for (auto& v : t) v /= sum;
        for (auto& v : s) v = rng.uniform(-3.0, 3.0);
        double h = 0.0;
        for (double v : t) h -= v * std::log(v);
        CHECK(dino_cross_entropy(t, s, 0.5) >= h - 1e-6);
    }
}

TEST_CASE("schedule anchor values", "[ssl_objectives]") {
    Schedules s;  // warmup 100, total 1000
    CHECK(schedule_value(s, 0, ScheduleKind::lr) == 0.0);
    CHECK_THAT(schedule_value(s, s.warmup_steps, ScheduleKind::lr), WithinAbs(s.peak_lr, 1e-9));
    CHECK_THAT(schedule_value(s, s.total_steps, ScheduleKind::lr), WithinAbs(s.final_lr, 1e-12));
    CHECK_THAT(schedule_value(s, 0, ScheduleKind::wd), WithinAbs(s.wd0, 1e-12));
    CHECK_THAT(schedule_value(s, s.total_steps, ScheduleKind::wd), WithinAbs(s.wd1, 1e-12));
    CHECK_THAT(schedule_value(s, s.total_steps, ScheduleKind::momentum), WithinAbs(s.m1, 1e-12));
    CHECK_THAT(schedule_value(s, 0, ScheduleKind::teacher_temp), WithinAbs(s.teacher_temp0, 1e-12));
    CHECK_THAT(schedule_value(s, s.warmup_steps, ScheduleKind::teacher_temp),
               WithinAbs(s.teacher_temp1, 1e-12));
    CHECK_THAT(schedule_value(s, s.total_steps, ScheduleKind::teacher_temp),
               WithinAbs(s.teacher_temp1, 1e-12));
    // monotone warmup, then decay: continuity at the joint
    CHECK_THAT(schedule_value(s, s.warmup_steps, ScheduleKind::lr),
               WithinAbs(cosine_interp(s.peak_lr, s.final_lr, 0.0), 1e-9));
    CHECK_THROWS_AS(schedule_value(s, -1, ScheduleKind::lr), StepOutOfRange);
    CHECK_THROWS_AS(schedule_value(s, s.total_steps + 1, ScheduleKind::lr), StepOutOfRange);
}

TEST_CASE("ema update bit-level behavior", "[ssl_objectives]") {
    ParamStore teacher{{"w", Tensor<float>({1, 2}, {2.0f, -1.0f})}};
    ParamStore student{{"w", Tensor<float>({1, 2}, {4.0f, 3.0f})}};

    ParamStore t1 = teacher;
    ema_update(t1, student, 1.0);
    CHECK(t1.at("w").data == teacher.at("w").data);  // unchanged

    ParamStore t0 = teacher;
    ema_update(t0, student, 0.0);
    CHECK(t0.at("w").data == student.at("w").data);  // replaced

    ParamStore th = teacher;
    ema_update(th, student, 0.5);
    CHECK(th.at("w").data[0] == 3.0f);  // midpoint of 2 and 4
    CHECK(th.at("w").data[1] == 0.5f * -1.0f + 0.5f * 3.0f);

    // contraction: ||t' - s|| = m ||t - s||
    const double m = 0.994;
    ParamStore tc = teacher;
    ema_update(tc, student, m);
    for (size_t i = 0; i < 2; ++i)
        CHECK_THAT(tc.at("w").data[i] - student.at("w").data[i],
                   WithinAbs(m * (teacher.at("w").data[i] - student.at("w").data[i]), 1e-6));

    CHECK_THROWS_AS(ema_update(th, student, 1.5), DomainError);
    ParamStore other{{"x", Tensor<float>({1, 2})}};
    CHECK_THROWS_AS(ema_update(th, other, 0.5), NameSetMismatch);
}

TEST_CASE("adamw decays only rank-2 tensors", "[ssl_objectives]") {
    ParamStore params{{"w", Tensor<float>::full({2, 2}, 1.0f)},
                      {"b", Tensor<float>::full({2}, 1.0f)}};
    std::map<std::string, Tensor<float>> grads{{"w", Tensor<float>({2, 2})},
                                               {"b", Tensor<float>({2})}};
    AdamW opt;
    opt.step(params, grads, 0.1, 0.5);  // zero grads: only decay moves weights
    CHECK(params.at("w").data[0] < 1.0f);
    CHECK(params.at("b").data[0] == 1.0f);
    CHECK(opt.t == 1);
}

TEST_CASE("loss breakdown matches a manual recomputation", "[ssl_objectives]") {
    SslModelConfig model = tiny_model();
    Rng prng(10);
    ParamStore params = init_ssl_params(model, prng);
    Rng brng(11);
    std::vector<CropSet> batch{rand_cropset(brng)};  // B=1: koleo off
    auto targets = compute_teacher_targets<float>(params, model, batch, 0.05, 10);
    REQUIRE(targets.dino.rows() == 2);
    for (int r = 0; r < 2; ++r) {
        double s = 0.0;
        for (int c = 0; c < 8; ++c) s += targets.dino.at(r, c);
        CHECK_THAT(s, WithinAbs(1.0, 1e-6));
    }

    LossWeights w;
    Graph<float> g;
    auto bound = bind_params(g, params);
    auto [loss, bd] = ssl_total_loss(g, bound, model, targets, batch, w, 0.1);
    CHECK(bd.koleo == 0.0);
    CHECK(bd.ibot == 0.0);  // no masks drawn
    CHECK_THAT(bd.total,
               WithinAbs(w.dino_global * bd.dino_global + w.dino_local * bd.dino_local, 1e-5));

    // manual pair-wise recomputation from raw forwards
    Graph<float> h(false);
    auto parts = split_bound(bind_params(h, params));
    std::vector<std::vector<double>> glog, llog;
    for (int v = 0; v < 2; ++v) {
        auto out = vit_forward(h, parts.backbone, model.vit, batch[0].globals[v].channels);
        auto lg = h.value(head_forward(h, parts.dino, model.dino_head, out.cls));
        glog.emplace_back(lg.data.begin(), lg.data.end());
    }
    for (int l = 0; l < 2; ++l) {
        auto out = vit_forward(h, parts.backbone, model.vit, batch[0].locals[l].channels);
        auto lg = h.value(head_forward(h, parts.dino, model.dino_head, out.cls));
        llog.emplace_back(lg.data.begin(), lg.data.end());
    }
    auto trow = [&](int v) {
        return std::vector<double>(targets.dino.data.begin() + v * 8,
                                   targets.dino.data.begin() + (v + 1) * 8);
    };
    const double manual_global =
        0.5 * (dino_cross_entropy(trow(1), glog[0], 0.1) + dino_cross_entropy(trow(0), glog[1], 0.1));
    double manual_local = 0.0;
    for (int l = 0; l < 2; ++l)
        for (int v = 0; v < 2; ++v) manual_local += dino_cross_entropy(trow(v), llog[l], 0.1);
    manual_local /= 4.0;
    CHECK_THAT(bd.dino_global, WithinAbs(manual_global, 1e-4));
    CHECK_THAT(bd.dino_local, WithinAbs(manual_local, 1e-4));

    // doubling a weight moves the total by exactly that term
    LossWeights w2 = w;
    w2.dino_local = 2.0;
    Graph<float> g2;
    auto [loss2, bd2] = ssl_total_loss(g2, bind_params(g2, params), model, targets, batch, w2, 0.1);
    CHECK_THAT(bd2.total - bd.total, WithinAbs(bd.dino_local, 1e-5));
}

TEST_CASE("ibot and koleo terms engage when enabled", "[ssl_objectives]") {
    SslModelConfig model = tiny_model();
    Rng prng(12);
    ParamStore params = init_ssl_params(model, prng);
    Rng brng(13);
    std::vector<CropSet> batch{rand_cropset(brng, 2, 0, true), rand_cropset(brng, 2, 0, true)};
    auto targets = compute_teacher_targets<float>(params, model, batch, 0.05, 5);
    CHECK(targets.masked_tokens == 4);  // 2 images x 2 masked patches
    CHECK(targets.ibot.rows() == 4);

    LossWeights w;
    Graph<float> g;
    auto [loss, bd] = ssl_total_loss(g, bind_params(g, params), model, targets, batch, w, 0.1);
    CHECK(bd.ibot > 0.0);
    CHECK(bd.dino_local == 0.0);  // L = 0

    // koleo on 2 rows: each row's neighbor is the other; -log distance
    Graph<float> h(false);
    auto parts = split_bound(bind_params(h, params));
    double manual_koleo = 0.0;
    for (int v = 0; v < 2; ++v) {
        std::vector<std::vector<float>> cls;
        for (int b = 0; b < 2; ++b) {
            const auto& mask = batch[b].masks[v];
            auto out = vit_forward(h, parts.backbone, model.vit, batch[b].globals[v].channels,
                                   mask.empty() ? nullptr : &mask);
            const auto& row = h.value(out.cls);
            cls.emplace_back(row.data.begin(), row.data.end());
        }
        auto norm = [](std::vector<float> r) {
            double s = 0.0;
            for (float x : r) s += static_cast<double>(x) * x;
            const double n = std::sqrt(s);
            std::vector<double> o(r.size());
            for (size_t i = 0; i < r.size(); ++i) o[i] = r[i] / n;
            return o;
        };
        auto a = norm(cls[0]), b2 = norm(cls[1]);
        double d2 = 0.0;
        for (size_t i = 0; i < a.size(); ++i) d2 += (a[i] - b2[i]) * (a[i] - b2[i]);
        manual_koleo += -std::log(std::sqrt(d2));
    }
    manual_koleo /= 2.0;
    CHECK_THAT(bd.koleo, WithinAbs(manual_koleo, 1e-4));

    // tampered masked-token count is caught
    auto broken = targets;
    broken.masked_tokens += 1;
    Graph<float> g3;
    CHECK_THROWS_AS(ssl_total_loss(g3, bind_params(g3, params), model, broken, batch, w, 0.1),
                    GridMismatch);

    // koleo disabled by weight
    LossWeights nk = w;
    nk.koleo = 0.0;
    Graph<float> g4;
    auto [l4, bd4] = ssl_total_loss(g4, bind_params(g4, params), model, targets, batch, nk, 0.1);
    CHECK(bd4.koleo == 0.0);
}

TEST_CASE("fewer than two globals is rejected", "[ssl_objectives]") {
    SslModelConfig model = tiny_model();
    Rng prng(14);
    ParamStore params = init_ssl_params(model, prng);
    Rng brng(15);
    std::vector<CropSet> batch{rand_cropset(brng, 1, 0)};
    TeacherTargets targets;
    targets.dino = Tensor<double>({1, 8});
    Graph<float> g;
    CHECK_THROWS_AS(ssl_total_loss(g, bind_params(g, params), model, targets, batch, {}, 0.1),
                    TooFewGlobals);
}

TEST_CASE("teacher after one step follows the ema formula exactly", "[ssl_objectives]") {
    PretrainConfig cfg = tiny_pretrain(4);
    auto manifest = write_toy_manifest(ssl_tmp() / "data");
    ChannelStats stats = compute_channel_stats(manifest);
    Rng rng(Rng::seed_mix(cfg.seed, 0x1317));
    PretrainState st;
    st.student = init_ssl_params(cfg.model, rng);
    st.teacher = st.student;
    ParamStore teacher_pre = st.teacher;
    auto batch = make_batch(manifest, cfg, stats, 0);
    StepMetrics m = pretrain_step(st, cfg, batch);
    const float mf = static_cast<float>(m.momentum);
    for (const auto& [name, t] : st.teacher) {
        const auto& pre = teacher_pre.at(name);
        const auto& s = st.student.at(name);
        for (size_t i = 0; i < t.size(); ++i)
            CHECK(t.data[i] == mf * pre.data[i] + (1.0f - mf) * s.data[i]);
    }
    CHECK(st.step == 1);
}

TEST_CASE("zero-step run writes only the initial checkpoint", "[ssl_objectives]") {
    PretrainConfig cfg = tiny_pretrain(0);
    cfg.sched.warmup_steps = 0;
    auto manifest = write_toy_manifest(ssl_tmp() / "data0");
    ChannelStats stats = compute_channel_stats(manifest);
    const fs::path out = ssl_tmp() / "run0";
    fs::remove_all(out);
    PretrainState st = run_pretrain(cfg, manifest, stats, out.string());
    CHECK(fs::exists(out / "checkpoints" / "step_0"));
    CHECK(slurp(out / "metrics.log").empty());
    // round trip is bit exact
    PretrainState back = load_training_checkpoint((out / "checkpoints" / "step_0").string());
    REQUIRE(back.student.size() == st.student.size());
    for (const auto& [name, t] : st.student) CHECK(back.student.at(name).data == t.data);
    for (const auto& [name, t] : st.teacher) CHECK(back.teacher.at(name).data == t.data);
    CHECK(back.step == 0);
}

TEST_CASE("same-seed runs are byte-identical", "[ssl_objectives]") {
    PretrainConfig cfg = tiny_pretrain(2);
    auto manifest = write_toy_manifest(ssl_tmp() / "data1");
    ChannelStats stats = compute_channel_stats(manifest);
    const fs::path a = ssl_tmp() / "runA", b = ssl_tmp() / "runB";
    fs::remove_all(a);
    fs::remove_all(b);
    run_pretrain(cfg, manifest, stats, a.string());
    run_pretrain(cfg, manifest, stats, b.string());
    CHECK(slurp(a / "metrics.log") == slurp(b / "metrics.log"));
    CHECK(slurp(a / "checkpoints" / "step_2") == slurp(b / "checkpoints" / "step_2"));
    // two logged steps
    const std::string log = slurp(a / "metrics.log");
    CHECK(std::count(log.begin(), log.end(), '\n') == 2);
}

TEST_CASE("resume rejects a different model config", "[ssl_objectives]") {
    PretrainConfig cfg = tiny_pretrain(1);
    auto manifest = write_toy_manifest(ssl_tmp() / "data2");
    ChannelStats stats = compute_channel_stats(manifest);
    const fs::path out = ssl_tmp() / "runR";
    fs::remove_all(out);
    run_pretrain(cfg, manifest, stats, out.string());
    PretrainConfig other = cfg;
    other.model.vit.depth = 2;
    CHECK_THROWS_AS(run_pretrain(other, manifest, stats, out.string(),
                                 (out / "checkpoints" / "step_1").string()),
                    ResumeMismatch);
}
