#pragma once

#include "dsd/common.hpp"
#include "dsd/params.hpp"
#include "dsd/vit.hpp"

namespace dsd {

// MLP projection head onto K prototypes: three layers to a bottleneck, L2
// normalization, then a (optionally weight-normalized) prototype layer.
struct HeadConfig {
    int in_dim = 192;
    int hidden = 256;
    int bottleneck = 64;
    int prototypes = 256;  // K
    bool norm_last = true;

    void validate() const {
        if (prototypes < 2) throw ConfigError("head needs K > 1 prototypes");
    }

    nlohmann::json to_json() const {
        return {{"in_dim", in_dim},         {"hidden", hidden},       {"bottleneck", bottleneck},
                {"prototypes", prototypes}, {"norm_last", norm_last}};
    }
    static HeadConfig from_json(const nlohmann::json& j) {
        HeadConfig c;
        c.in_dim = j.at("in_dim");
        c.hidden = j.at("hidden");
        c.bottleneck = j.at("bottleneck");
        c.prototypes = j.at("prototypes");
        c.norm_last = j.at("norm_last");
        return c;
    }
};

inline ParamStore init_head_params(const HeadConfig& cfg, Rng& rng) {
    cfg.validate();
    const double ws = 0.02;
    ParamStore p;
    p["fc1.w"] = randn({cfg.hidden, cfg.in_dim}, ws, rng);
    p["fc1.b"] = Tensor<float>({cfg.hidden});
    p["fc2.w"] = randn({cfg.hidden, cfg.hidden}, ws, rng);
    p["fc2.b"] = Tensor<float>({cfg.hidden});
    p["fc3.w"] = randn({cfg.bottleneck, cfg.hidden}, ws, rng);
    p["fc3.b"] = Tensor<float>({cfg.bottleneck});
    p["last.w"] = randn({cfg.prototypes, cfg.bottleneck}, 1.0, rng);
    return p;
}

// embeddings (n x in_dim) -> logits (n x K)
template <typename T>
typename Graph<T>::Var head_forward(Graph<T>& g, const BoundParams<T>& p, const HeadConfig& cfg,
                                    typename Graph<T>::Var embeddings) {
    using Var = typename Graph<T>::Var;
    if (g.value(embeddings).cols() != cfg.in_dim) throw ShapeMismatch("head input width");
    Var x = g.gelu(g.linear(embeddings, p.at("fc1.w"), p.at("fc1.b")));
    x = g.gelu(g.linear(x, p.at("fc2.w"), p.at("fc2.b")));
    x = g.linear(x, p.at("fc3.w"), p.at("fc3.b"));
    x = g.l2norm_rows(x);
    Var w = cfg.norm_last ? g.l2norm_rows(p.at("last.w")) : p.at("last.w");
    return g.matmul_nt(x, w);
}

}  // namespace dsd
