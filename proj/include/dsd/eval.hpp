#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <chrono>

#include <Eigen/Dense>

#include "dsd/cnn.hpp"
#include "dsd/ssl.hpp"

namespace dsd {

// ---- frozen-feature evaluation harness ----

struct FeatureSet {
    Tensor<float> features;  // N x D
    std::vector<int> labels;

    int count() const { return features.rows(); }
    int dim() const { return features.cols(); }

    void validate() const {
        if (features.rank() != 2) throw ShapeMismatch("feature matrix rank");
        if (static_cast<size_t>(features.rows()) != labels.size())
            throw ShapeMismatch("feature/label count");
        if (!features.all_finite()) throw DegenerateFeatures("non-finite features");
    }
};

inline int num_classes(const std::vector<int>& labels) {
    int c = 0;
    for (int l : labels) {
        if (l < 0) throw DomainError("negative class label");
        c = std::max(c, l + 1);
    }
    return c;
}

// Backbone features for one image: backbone cls plus mean patch embedding.
inline Tensor<float> extract_vit_features(const ParamStore& backbone, const ViTConfig& cfg,
                                          const NormalizedInput& input) {
    Graph<float> g(false);
    auto bound = bind_params(g, backbone);
    auto out = vit_forward(g, bound, cfg, input.channels, nullptr);
    const Tensor<float> cls = g.value(out.cls);
    const Tensor<float> patches = g.value(g.mean_rows(out.patches));
    Tensor<float> feat({1, cls.cols() * 2});
    for (int c = 0; c < cls.cols(); ++c) {
        feat.at(0, c) = cls.at(0, c);
        feat.at(0, cls.cols() + c) = patches.at(0, c);
    }
    return feat;
}

// Patch-token map for segmentation probing: (grid*grid) x d plus the grid.
inline std::pair<Tensor<float>, int> extract_vit_patch_tokens(const ParamStore& backbone,
                                                              const ViTConfig& cfg,
                                                              const NormalizedInput& input) {
    Graph<float> g(false);
    auto bound = bind_params(g, backbone);
    auto out = vit_forward(g, bound, cfg, input.channels, nullptr);
    return {g.value(out.patches), out.grid};
}

inline Tensor<float> extract_cnn_features(const ParamStore& cnn, const CnnConfig& cfg,
                                          const NormalizedInput& input) {
    Graph<float> g(false);
    auto bound = bind_params(g, cnn);
    auto out = cnn_bifpn_forward(g, bound, cfg, input.channels);
    return g.value(out.pooled);
}

// ---- weighted nearest-neighbor classification ----

struct KnnResult {
    double top1 = 0.0;
    double top5 = 0.0;
};

// Cosine similarity, k neighbors, class votes weighted by exp(sim / temperature).
inline KnnResult knn_eval(const FeatureSet& train, const FeatureSet& test, int k,
                          double temperature = 0.07) {
    train.validate();
    test.validate();
    if (train.count() == 0 || test.count() == 0) throw TooFewPoints("empty feature set");
    if (train.dim() != test.dim()) throw DimensionMismatch("train/test feature width");
    if (k < 1 || k > train.count()) throw KTooLarge("k outside [1, train size]");
    const int classes = num_classes(train.labels);

    auto norms = [](const Tensor<float>& f) {
        std::vector<double> out(f.rows());
        for (int r = 0; r < f.rows(); ++r) {
            double s = 0.0;
            for (int c = 0; c < f.cols(); ++c) s += double(f.at(r, c)) * f.at(r, c);
            out[r] = std::max(std::sqrt(s), 1e-12);
        }
        return out;
    };
    const auto tn = norms(train.features);
    const auto qn = norms(test.features);

    int top1 = 0, top5 = 0;
    std::vector<std::pair<double, int>> sims(train.count());
    for (int q = 0; q < test.count(); ++q) {
        for (int r = 0; r < train.count(); ++r) {
            double dot = 0.0;
            for (int c = 0; c < train.dim(); ++c)
                dot += double(test.features.at(q, c)) * train.features.at(r, c);
            sims[r] = {dot / (tn[r] * qn[q]), train.labels[r]};
        }
        std::partial_sort(sims.begin(), sims.begin() + k, sims.end(),
                          [](const auto& a, const auto& b) { return a.first > b.first; });
        std::vector<std::pair<double, int>> votes(classes);
        for (int c = 0; c < classes; ++c) votes[c] = {0.0, c};
        for (int i = 0; i < k; ++i)
            votes[sims[i].second].first += std::exp(sims[i].first / temperature);
        std::sort(votes.begin(), votes.end(),
                  [](const auto& a, const auto& b) { return a.first > b.first; });
        if (votes[0].second == test.labels[q]) ++top1;
        for (int i = 0; i < std::min(5, classes); ++i)
            if (votes[i].second == test.labels[q]) {
                ++top5;
                break;
            }
    }
    KnnResult r;
    r.top1 = static_cast<double>(top1) / test.count();
    r.top5 = static_cast<double>(top5) / test.count();
    return r;
}

// ---- linear probe ----
//
// Softmax classifier on frozen features, trained per learning rate over a
// small grid; the best validation accuracy is reported.
struct ProbeResult {
    double accuracy = 0.0;
    double lr = 0.0;
    double train_loss = 0.0;
};

inline ProbeResult linear_probe(const FeatureSet& train, const FeatureSet& test,
                                std::vector<double> lr_grid = {1e-3, 1e-2, 1e-1},
                                int epochs = 100, uint64_t seed = 0) {
    train.validate();
    test.validate();
    if (train.dim() != test.dim()) throw DimensionMismatch("train/test feature width");
    const int classes = num_classes(train.labels);
    if (classes < 2) throw SingleClassTrainSet("linear probe needs >= 2 classes");
    const int n = train.count(), d = train.dim();

    Tensor<float> onehot({n, classes});
    for (int r = 0; r < n; ++r) onehot.at(r, train.labels[r]) = 1.0f;

    ProbeResult best;
    best.accuracy = -1.0;
    for (double lr : lr_grid) {
        Rng rng = Rng(Rng::seed_mix(seed, fnv1a(&lr, sizeof lr)));
        ParamStore p;
        p["w"] = randn({classes, d}, 0.01, rng);
        p["b"] = Tensor<float>({classes});
        AdamW opt;
        double last_loss = 0.0;
        for (int e = 0; e < epochs; ++e) {
            Graph<float> g(true);
            auto bound = bind_params(g, p);
            auto logits = g.linear(g.constant(train.features), bound.at("w"), bound.at("b"));
            auto loss = g.cross_entropy_rows(logits, onehot, 1.0f);
            g.backward(loss);
            last_loss = g.value(loss).data[0];
            opt.step(p, collect_grads(g, bound), lr, 0.0);
        }
        Graph<float> g(false);
        auto bound = bind_params(g, p);
        auto logits = g.value(g.linear(g.constant(test.features), bound.at("w"), bound.at("b")));
        int correct = 0;
        for (int r = 0; r < logits.rows(); ++r) {
            int arg = 0;
            for (int c = 1; c < logits.cols(); ++c)
                if (logits.at(r, c) > logits.at(r, arg)) arg = c;
            if (arg == test.labels[r]) ++correct;
        }
        const double acc = static_cast<double>(correct) / std::max(1, logits.rows());
        if (acc > best.accuracy) {
            best.accuracy = acc;
            best.lr = lr;
            best.train_loss = last_loss;
        }
    }
    return best;
}

// ---- segmentation metrics ----

// Mean IoU over classes present in the ground truth; pixels labeled
// ignore_index are excluded entirely.
inline double mean_iou(const std::vector<int>& pred, const std::vector<int>& gt, int classes,
                       int ignore_index = 255) {
    if (pred.size() != gt.size()) throw ShapeMismatch("mean_iou sizes");
    std::vector<int64_t> inter(classes, 0), uni(classes, 0), gt_count(classes, 0);
    size_t labeled = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        if (gt[i] == ignore_index) continue;
        ++labeled;
        if (gt[i] < 0 || gt[i] >= classes || pred[i] < 0 || pred[i] >= classes)
            throw DomainError("class id out of range");
        ++gt_count[gt[i]];
        if (pred[i] == gt[i]) {
            ++inter[gt[i]];
            ++uni[gt[i]];
        } else {
            ++uni[gt[i]];
            ++uni[pred[i]];
        }
    }
    if (labeled == 0) throw NoLabeledPixels("mean_iou");
    double sum = 0.0;
    int present = 0;
    for (int c = 0; c < classes; ++c) {
        if (gt_count[c] == 0) continue;  // average only over ground-truth classes
        sum += static_cast<double>(inter[c]) / uni[c];
        ++present;
    }
    return present ? sum / present : 0.0;
}

// ---- segmentation probe ----
//
// A linear layer on frozen patch tokens, bilinearly upsampled to the label
// resolution and trained with per-pixel cross entropy.
struct SegSample {
    Tensor<float> tokens;  // (grid*grid) x d, frozen
    int grid = 0;
    std::vector<int> labels;  // H*W ints, ignore_index allowed
    int height = 0, width = 0;
};

struct SegProbeResult {
    double miou = 0.0;
    ParamStore params;
};

inline std::vector<int> seg_predict(const ParamStore& p, const SegSample& s, int classes) {
    Graph<float> g(false);
    auto bound = bind_params(g, p);
    auto logits_rows = g.linear(g.constant(s.tokens), bound.at("w"), bound.at("b"));
    auto logits = g.bilinear_resize(g.rows_to_chw(logits_rows, s.grid, s.grid), s.height, s.width);
    const Tensor<float> lv = g.value(logits);
    std::vector<int> pred(static_cast<size_t>(s.height) * s.width);
    for (int r = 0; r < s.height; ++r)
        for (int c = 0; c < s.width; ++c) {
            int arg = 0;
            for (int ch = 1; ch < classes; ++ch)
                if (lv.data[(static_cast<size_t>(ch) * s.height + r) * s.width + c] >
                    lv.data[(static_cast<size_t>(arg) * s.height + r) * s.width + c])
                    arg = ch;
            pred[static_cast<size_t>(r) * s.width + c] = arg;
        }
    return pred;
}

inline SegProbeResult segment_probe(const std::vector<SegSample>& train,
                                    const std::vector<SegSample>& test, int classes,
                                    int epochs = 60, double lr = 1e-2, int ignore_index = 255,
                                    uint64_t seed = 0) {
    if (train.empty() || test.empty()) throw TooFewPoints("segmentation probe sets");
    const int d = train[0].tokens.cols();
    Rng rng = Rng(Rng::seed_mix(seed, 0x5e6));
    ParamStore p;
    p["w"] = randn({classes, d}, 0.01, rng);
    p["b"] = Tensor<float>({classes});
    AdamW opt;
    for (int e = 0; e < epochs; ++e) {
        for (const auto& s : train) {
            Graph<float> g(true);
            auto bound = bind_params(g, p);
            auto logits_rows = g.linear(g.constant(s.tokens), bound.at("w"), bound.at("b"));
            auto logits =
                g.bilinear_resize(g.rows_to_chw(logits_rows, s.grid, s.grid), s.height, s.width);
            auto loss = g.softmax_ce_map(logits, s.labels, ignore_index);
            g.backward(loss);
            opt.step(p, collect_grads(g, bound), lr, 0.0);
        }
    }
    SegProbeResult res;
    double sum = 0.0;
    for (const auto& s : test)
        sum += mean_iou(seg_predict(p, s, classes), s.labels, classes, ignore_index);
    res.miou = sum / test.size();
    res.params = p;
    return res;
}

// ---- principal component visualization ----

struct PcaBasis {
    Tensor<float> mean;        // 1 x d
    Tensor<float> components;  // m x d, rows ordered by descending eigenvalue
    std::vector<double> eigenvalues;
};

// PCA of row features via the covariance eigendecomposition.
inline PcaBasis pca_fit(const Tensor<float>& rows, int m) {
    if (rows.rank() != 2) throw ShapeMismatch("pca input rank");
    const int n = rows.rows(), d = rows.cols();
    if (n < 2) throw TooFewPoints("pca needs >= 2 rows");
    if (m < 1 || m > d) throw DimensionMismatch("pca component count");
    Eigen::MatrixXd x(n, d);
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < d; ++c) x(r, c) = rows.at(r, c);
    Eigen::RowVectorXd mu = x.colwise().mean();
    x.rowwise() -= mu;
    Eigen::MatrixXd cov = x.transpose() * x / static_cast<double>(n - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    if (es.info() != Eigen::Success) throw DegenerateFeatures("pca eigensolver failed");

    PcaBasis b;
    b.mean = Tensor<float>({1, d});
    for (int c = 0; c < d; ++c) b.mean.at(0, c) = static_cast<float>(mu(c));
    b.components = Tensor<float>({m, d});
    for (int i = 0; i < m; ++i) {
        const int src = d - 1 - i;  // Eigen sorts ascending
        b.eigenvalues.push_back(es.eigenvalues()(src));
        // deterministic sign: largest-magnitude coordinate positive
        int arg = 0;
        for (int c = 1; c < d; ++c)
            if (std::abs(es.eigenvectors()(c, src)) > std::abs(es.eigenvectors()(arg, src)))
                arg = c;
        const double sgn = es.eigenvectors()(arg, src) < 0 ? -1.0 : 1.0;
        for (int c = 0; c < d; ++c)
            b.components.at(i, c) = static_cast<float>(sgn * es.eigenvectors()(c, src));
    }
    return b;
}

inline Tensor<float> pca_project(const PcaBasis& b, const Tensor<float>& rows) {
    const int n = rows.rows(), d = rows.cols(), m = b.components.rows();
    if (d != b.mean.cols()) throw DimensionMismatch("pca project width");
    Tensor<float> out({n, m});
    for (int r = 0; r < n; ++r)
        for (int i = 0; i < m; ++i) {
            double s = 0.0;
            for (int c = 0; c < d; ++c)
                s += (double(rows.at(r, c)) - b.mean.at(0, c)) * b.components.at(i, c);
            out.at(r, i) = static_cast<float>(s);
        }
    return out;
}

inline void write_ppm(const std::string& path, int h, int w,
                      const std::vector<unsigned char>& rgb) {
    if (rgb.size() != static_cast<size_t>(h) * w * 3) throw ShapeMismatch("ppm buffer");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoFailure("cannot write " + path);
    os << "P6\n" << w << " " << h << "\n255\n";
    os.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
    if (!os) throw IoFailure("ppm write failed: " + path);
}

// Fit PCA across all token sets, threshold the centered first component at 0
// with its sign chosen so image-border tokens fall on the background side,
// refit a 3-component basis on the foreground tokens, min-max scale each
// component to [0,1] as RGB, and write one image per input at the patch grid
// resolution. Background tokens are black.
inline void pca_visualize(const std::vector<std::pair<Tensor<float>, int>>& token_grids,
                          const std::string& out_dir) {
    namespace fs = std::filesystem;
    if (token_grids.empty()) throw TooFewPoints("pca_visualize");
    int total = 0;
    const int d = token_grids[0].first.cols();
    for (const auto& [toks, grid] : token_grids) {
        if (toks.cols() != d) throw DimensionMismatch("token width");
        if (toks.rows() != grid * grid) throw ShapeMismatch("token grid");
        total += toks.rows();
    }
    if (total < 4) throw TooFewPoints("pca_visualize needs >= 4 tokens");
    Tensor<float> all({total, d});
    std::vector<char> border(total, 0);
    int at = 0;
    for (const auto& [toks, grid] : token_grids) {
        std::copy(toks.data.begin(), toks.data.end(), all.data.begin() + size_t(at) * d);
        for (int r = 0; r < grid; ++r)
            for (int c = 0; c < grid; ++c)
                if (r == 0 || c == 0 || r == grid - 1 || c == grid - 1)
                    border[at + r * grid + c] = 1;
        at += toks.rows();
    }
    PcaBasis basis = pca_fit(all, 1);
    Tensor<float> first = pca_project(basis, all);
    double border_mean = 0.0;
    int border_n = 0;
    for (int r = 0; r < total; ++r)
        if (border[r]) {
            border_mean += first.at(r, 0);
            ++border_n;
        }
    const float sign = (border_n > 0 && border_mean / border_n > 0.0) ? -1.0f : 1.0f;
    std::vector<char> fg(total, 0);
    int fg_count = 0;
    for (int r = 0; r < total; ++r)
        if (sign * first.at(r, 0) > 0.0f) {
            fg[r] = 1;
            ++fg_count;
        }
    if (fg_count < 4) {
        // degenerate split: color everything instead of failing
        std::fill(fg.begin(), fg.end(), 1);
        fg_count = total;
    }

    Tensor<float> fg_rows({fg_count, d});
    for (int r = 0, w = 0; r < total; ++r)
        if (fg[r]) {
            std::copy(all.data.begin() + size_t(r) * d, all.data.begin() + size_t(r + 1) * d,
                      fg_rows.data.begin() + size_t(w) * d);
            ++w;
        }
    const int mcomp = std::min(3, d);
    PcaBasis fg_basis = pca_fit(fg_rows, mcomp);
    Tensor<float> proj = pca_project(fg_basis, all);

    std::vector<float> lo(3, 0.0f), hi(3, 1.0f);
    for (int i = 0; i < 3; ++i) {
        const int comp = std::min(i, mcomp - 1);
        bool init = false;
        float mn = 0.0f, mx = 0.0f;
        for (int r = 0; r < total; ++r) {
            if (!fg[r]) continue;
            const float v = proj.at(r, comp);
            if (!init || v < mn) mn = v;
            if (!init || v > mx) mx = v;
            init = true;
        }
        lo[i] = mn;
        hi[i] = mx > mn ? mx : mn + 1.0f;
    }

    fs::create_directories(out_dir);
    at = 0;
    for (size_t img = 0; img < token_grids.size(); ++img) {
        const int grid = token_grids[img].second;
        const int n = token_grids[img].first.rows();
        std::vector<unsigned char> rgb(static_cast<size_t>(grid) * grid * 3, 0);
        for (int r = 0; r < n; ++r) {
            const int row = at + r;
            if (!fg[row]) continue;
            for (int i = 0; i < 3; ++i) {
                const int comp = std::min(i, mcomp - 1);
                const float v = (proj.at(row, comp) - lo[i]) / (hi[i] - lo[i]);
                rgb[static_cast<size_t>(r) * 3 + i] =
                    static_cast<unsigned char>(std::clamp(v, 0.0f, 1.0f) * 255.0f);
            }
        }
        write_ppm((fs::path(out_dir) / ("pca_" + std::to_string(img) + ".ppm")).string(), grid,
                  grid, rgb);
        at += n;
    }
}

// ---- micro-benchmark ----

struct BenchReport {
    int64_t params = 0;
    int64_t flops = 0;  // multiply-accumulates * 2 per image
    double ms_per_image = 0.0;
};

inline BenchReport bench_vit(const ParamStore& backbone, const ViTConfig& cfg, int image_size,
                             int iters = 3) {
    if (image_size % cfg.patch_size) throw ShapeMismatch("bench image size");
    BenchReport r;
    r.params = vit_param_count(cfg);
    r.flops = vit_flops(cfg, image_size / cfg.patch_size);
    Tensor<float> img({3, image_size, image_size});
    Rng rng = Rng(7);
    for (auto& v : img.data) v = static_cast<float>(rng.normal());
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < iters; ++i) {
        Graph<float> g(false);
        auto bound = bind_params(g, backbone);
        auto out = vit_forward(g, bound, cfg, img, nullptr);
        (void)g.value(out.cls);
    }
    const auto t1 = std::chrono::steady_clock::now();
    r.ms_per_image = std::chrono::duration<double, std::milli>(t1 - t0).count() / iters;
    return r;
}

}  // namespace dsd
