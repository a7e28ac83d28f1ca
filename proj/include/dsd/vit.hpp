#pragma once

#include <map>
#include <string>

#include "dsd/common.hpp"
#include "dsd/params.hpp"
#include "dsd/tensor.hpp"

namespace dsd {

struct ViTConfig {
    int patch_size = 14;
    int embed_dim = 192;
    int depth = 4;
    int heads = 4;
    double mlp_ratio = 4.0;
    int base_grid = 16;  // pos-embed grid; other grids are interpolated

    int mlp_hidden() const { return static_cast<int>(embed_dim * mlp_ratio); }

    void validate() const {
        if (embed_dim % heads) throw ConfigError("embed_dim must be divisible by heads");
        if (patch_size < 1 || depth < 1 || base_grid < 1) throw ConfigError("vit config");
    }

    nlohmann::json to_json() const {
        return {{"patch_size", patch_size}, {"embed_dim", embed_dim}, {"depth", depth},
                {"heads", heads},           {"mlp_ratio", mlp_ratio}, {"base_grid", base_grid}};
    }
    static ViTConfig from_json(const nlohmann::json& j) {
        ViTConfig c;
        c.patch_size = j.at("patch_size");
        c.embed_dim = j.at("embed_dim");
        c.depth = j.at("depth");
        c.heads = j.at("heads");
        c.mlp_ratio = j.at("mlp_ratio");
        c.base_grid = j.at("base_grid");
        return c;
    }
};

inline Tensor<float> randn(std::vector<int> shape, double std, Rng& rng) {
    Tensor<float> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<float>(rng.normal(0.0, std));
    return t;
}

inline ParamStore init_vit_params(const ViTConfig& cfg, Rng& rng) {
    cfg.validate();
    const int d = cfg.embed_dim;
    const int pp = cfg.patch_size * cfg.patch_size * 3;
    const int h = cfg.mlp_hidden();
    const double ws = 0.02;
    ParamStore p;
    p["pe.w"] = randn({d, pp}, ws, rng);
    p["pe.b"] = Tensor<float>({d});
    p["cls"] = randn({1, d}, ws, rng);
    p["cls_pos"] = randn({1, d}, ws, rng);
    p["pos"] = randn({d, cfg.base_grid, cfg.base_grid}, ws, rng);
    p["mask_token"] = randn({1, d}, ws, rng);
    for (int b = 0; b < cfg.depth; ++b) {
        const std::string k = "blk" + std::to_string(b) + ".";
        p[k + "ln1.g"] = Tensor<float>::full({d}, 1.0f);
        p[k + "ln1.b"] = Tensor<float>({d});
        p[k + "wq"] = randn({d, d}, ws, rng);
        p[k + "bq"] = Tensor<float>({d});
        p[k + "wk"] = randn({d, d}, ws, rng);
        p[k + "bk"] = Tensor<float>({d});
        p[k + "wv"] = randn({d, d}, ws, rng);
        p[k + "bv"] = Tensor<float>({d});
        p[k + "wo"] = randn({d, d}, ws, rng);
        p[k + "bo"] = Tensor<float>({d});
        p[k + "ln2.g"] = Tensor<float>::full({d}, 1.0f);
        p[k + "ln2.b"] = Tensor<float>({d});
        p[k + "w1"] = randn({h, d}, ws, rng);
        p[k + "b1"] = Tensor<float>({h});
        p[k + "w2"] = randn({d, h}, ws, rng);
        p[k + "b2"] = Tensor<float>({d});
    }
    p["final.g"] = Tensor<float>::full({d}, 1.0f);
    p["final.b"] = Tensor<float>({d});
    return p;
}

// Graph-side handle to a parameter set: every tensor becomes a leaf Var.
template <typename T>
struct BoundParams {
    std::map<std::string, typename Graph<T>::Var> vars;

    typename Graph<T>::Var at(const std::string& name) const {
        auto it = vars.find(name);
        if (it == vars.end()) throw NameSetMismatch("missing param " + name);
        return it->second;
    }
};

template <typename T, typename U>
BoundParams<T> bind_params(Graph<T>& g, const std::map<std::string, Tensor<U>>& params) {
    BoundParams<T> b;
    for (const auto& [name, t] : params) b.vars[name] = g.leaf(t.template cast<T>());
    return b;
}

// Collect parameter gradients keyed by name (graph scalar type).
template <typename T>
std::map<std::string, Tensor<T>> collect_grads(const Graph<T>& g, const BoundParams<T>& b) {
    std::map<std::string, Tensor<T>> out;
    for (const auto& [name, var] : b.vars) {
        if (!g.has_grad(var)) continue;
        out[name] = g.grad(var);
    }
    return out;
}

// Rearrange {3,S,S} into one row per patch: (grid*grid, 3*p*p), channel-major
// within a row.
template <typename T>
Tensor<T> patchify(const Tensor<T>& img, int patch) {
    if (img.rank() != 3 || img.shape[0] != 3) throw ShapeMismatch("patchify input");
    const int S = img.shape[1];
    if (img.shape[2] != S || S % patch) throw ShapeMismatch("patchify size");
    const int grid = S / patch;
    Tensor<T> out({grid * grid, 3 * patch * patch});
    for (int gi = 0; gi < grid; ++gi)
        for (int gj = 0; gj < grid; ++gj) {
            T* row = out.data.data() + (static_cast<size_t>(gi) * grid + gj) * 3 * patch * patch;
            int idx = 0;
            for (int c = 0; c < 3; ++c)
                for (int pi = 0; pi < patch; ++pi)
                    for (int pj = 0; pj < patch; ++pj, ++idx)
                        row[idx] = img.data[(static_cast<size_t>(c) * S + gi * patch + pi) * S +
                                            gj * patch + pj];
        }
    return out;
}

template <typename T>
struct ViTOut {
    typename Graph<T>::Var cls;      // 1 x dim
    typename Graph<T>::Var patches;  // grid*grid x dim
    int grid = 0;
};

// Masked positions get the learned mask token before the transformer blocks.
template <typename T>
ViTOut<T> vit_forward(Graph<T>& g, const BoundParams<T>& p, const ViTConfig& cfg,
                      const Tensor<T>& input, const std::vector<char>* mask = nullptr) {
    using Var = typename Graph<T>::Var;
    cfg.validate();
    const int S = input.shape.at(1);
    if (S % cfg.patch_size) throw ShapeMismatch("input size not divisible by patch");
    const int grid = S / cfg.patch_size;
    const int n = grid * grid;
    if (mask && static_cast<int>(mask->size()) != n) throw ShapeMismatch("mask grid size");

    Var x = g.linear(g.constant(patchify(input, cfg.patch_size)), p.at("pe.w"), p.at("pe.b"));
    if (mask) x = g.mask_rows(x, p.at("mask_token"), *mask);

    Var pos = p.at("pos");
    if (grid != cfg.base_grid) pos = g.bilinear_resize(pos, grid, grid);
    x = g.add(x, g.chw_to_rows(pos));

    Var cls = g.add(p.at("cls"), p.at("cls_pos"));
    x = g.concat_rows({cls, x});

    const int d = cfg.embed_dim;
    const int dh = d / cfg.heads;
    const T att_scale = T(1) / static_cast<T>(std::sqrt(static_cast<double>(dh)));
    for (int b = 0; b < cfg.depth; ++b) {
        const std::string k = "blk" + std::to_string(b) + ".";
        Var h = g.layernorm(x, p.at(k + "ln1.g"), p.at(k + "ln1.b"));
        Var q = g.linear(h, p.at(k + "wq"), p.at(k + "bq"));
        Var kk = g.linear(h, p.at(k + "wk"), p.at(k + "bk"));
        Var v = g.linear(h, p.at(k + "wv"), p.at(k + "bv"));
        std::vector<Var> heads;
        for (int hd = 0; hd < cfg.heads; ++hd) {
            Var qi = g.slice_cols(q, hd * dh, (hd + 1) * dh);
            Var ki = g.slice_cols(kk, hd * dh, (hd + 1) * dh);
            Var vi = g.slice_cols(v, hd * dh, (hd + 1) * dh);
            Var att = g.softmax_rows(g.scale(g.matmul_nt(qi, ki), att_scale));
            heads.push_back(g.matmul(att, vi));
        }
        Var o = g.linear(g.concat_cols(heads), p.at(k + "wo"), p.at(k + "bo"));
        x = g.add(x, o);
        Var h2 = g.layernorm(x, p.at(k + "ln2.g"), p.at(k + "ln2.b"));
        Var m = g.gelu(g.linear(h2, p.at(k + "w1"), p.at(k + "b1")));
        x = g.add(x, g.linear(m, p.at(k + "w2"), p.at(k + "b2")));
    }
    x = g.layernorm(x, p.at("final.g"), p.at("final.b"));
    ViTOut<T> out;
    out.cls = g.slice_rows(x, 0, 1);
    out.patches = g.slice_rows(x, 1, n + 1);
    out.grid = grid;
    return out;
}

inline int64_t vit_param_count(const ViTConfig& cfg) {
    const int64_t d = cfg.embed_dim, h = cfg.mlp_hidden();
    const int64_t pp = 3LL * cfg.patch_size * cfg.patch_size;
    int64_t n = d * pp + d;                                  // patch embed
    n += 3 * d;                                              // cls, cls_pos, mask token
    n += d * static_cast<int64_t>(cfg.base_grid) * cfg.base_grid;  // pos
    n += cfg.depth * (4 * (d * d + d) + 2 * (d + d) + d * h + h + h * d + d);
    n += 2 * d;  // final norm
    return n;
}

// Forward multiply-accumulate estimate for one image at grid g.
inline int64_t vit_flops(const ViTConfig& cfg, int grid) {
    const int64_t n = static_cast<int64_t>(grid) * grid + 1;
    const int64_t d = cfg.embed_dim, h = cfg.mlp_hidden();
    const int64_t per_block = 4 * n * d * d + 2 * n * n * d + 2 * n * d * h;
    return 2 * (cfg.depth * per_block + n * d * 3 * cfg.patch_size * cfg.patch_size);
}

}  // namespace dsd
