#pragma once

#include "dsd/common.hpp"
#include "dsd/params.hpp"
#include "dsd/tensor.hpp"
#include "dsd/vit.hpp"

namespace dsd {

// Four-stage convolutional backbone tapped at strides 8/16/32, with a BiFPN
// on top fusing the three taps in top-down and bottom-up passes.
struct CnnConfig {
    int base_channels = 16;
    int bifpn_channels = 64;
    int bifpn_layers = 2;
    double fusion_eps = 1e-4;

    nlohmann::json to_json() const {
        return {{"base_channels", base_channels},
                {"bifpn_channels", bifpn_channels},
                {"bifpn_layers", bifpn_layers},
                {"fusion_eps", fusion_eps}};
    }
    static CnnConfig from_json(const nlohmann::json& j) {
        CnnConfig c;
        c.base_channels = j.at("base_channels");
        c.bifpn_channels = j.at("bifpn_channels");
        c.bifpn_layers = j.at("bifpn_layers");
        c.fusion_eps = j.value("fusion_eps", 1e-4);
        return c;
    }
};

namespace detail {
inline void add_conv(ParamStore& p, const std::string& name, int cin, int cout, int k, Rng& rng) {
    const double std = 0.5 / std::sqrt(static_cast<double>(cin * k * k));
    p[name + ".w"] = randn({cout, cin * k * k}, std, rng);
    p[name + ".b"] = Tensor<float>({cout});
}
}  // namespace detail

inline ParamStore init_cnn_params(const CnnConfig& cfg, Rng& rng) {
    const int c = cfg.base_channels;
    const int f = cfg.bifpn_channels;
    ParamStore p;
    detail::add_conv(p, "stem", 3, c, 3, rng);
    detail::add_conv(p, "s1.a", c, c, 3, rng);
    detail::add_conv(p, "s1.b", c, c, 3, rng);
    detail::add_conv(p, "s2.a", c, 2 * c, 3, rng);
    detail::add_conv(p, "s2.b", 2 * c, 2 * c, 3, rng);
    detail::add_conv(p, "s3.a", 2 * c, 4 * c, 3, rng);
    detail::add_conv(p, "s3.b", 4 * c, 4 * c, 3, rng);
    detail::add_conv(p, "s4.a", 4 * c, 8 * c, 3, rng);
    detail::add_conv(p, "s4.b", 8 * c, 8 * c, 3, rng);
    detail::add_conv(p, "lat8", 2 * c, f, 1, rng);
    detail::add_conv(p, "lat16", 4 * c, f, 1, rng);
    detail::add_conv(p, "lat32", 8 * c, f, 1, rng);
    for (int l = 0; l < cfg.bifpn_layers; ++l) {
        const std::string k = "fpn" + std::to_string(l) + ".";
        detail::add_conv(p, k + "td16", f, f, 3, rng);
        detail::add_conv(p, k + "td8", f, f, 3, rng);
        detail::add_conv(p, k + "out16", f, f, 3, rng);
        detail::add_conv(p, k + "out32", f, f, 3, rng);
        p[k + "w_td16"] = Tensor<float>::full({2}, 1.0f);
        p[k + "w_td8"] = Tensor<float>::full({2}, 1.0f);
        p[k + "w_out16"] = Tensor<float>::full({3}, 1.0f);
        p[k + "w_out32"] = Tensor<float>::full({2}, 1.0f);
    }
    return p;
}

template <typename T>
struct PyramidOut {
    typename Graph<T>::Var s8, s16, s32;  // {F, S/8, S/8} ...
    typename Graph<T>::Var pooled;        // 1 x F, spatial mean of s16
    int grid16 = 0;
};

template <typename T>
PyramidOut<T> cnn_bifpn_forward(Graph<T>& g, const BoundParams<T>& p, const CnnConfig& cfg,
                                const Tensor<T>& input) {
    using Var = typename Graph<T>::Var;
    if (input.rank() != 3 || input.shape[0] != 3) throw ShapeMismatch("cnn input");
    const int S = input.shape[1];
    if (input.shape[2] != S || S % 32) throw ShapeMismatch("cnn input size must divide 32");

    auto conv = [&](Var x, const std::string& name, int k, int stride) {
        return g.gelu(g.conv2d(x, p.at(name + ".w"), p.at(name + ".b"), k, k, stride, k / 2));
    };

    Var x = conv(g.constant(input), "stem", 3, 2);
    x = conv(conv(x, "s1.a", 3, 2), "s1.b", 3, 1);
    Var t8 = conv(conv(x, "s2.a", 3, 2), "s2.b", 3, 1);
    Var t16 = conv(conv(t8, "s3.a", 3, 2), "s3.b", 3, 1);
    Var t32 = conv(conv(t16, "s4.a", 3, 2), "s4.b", 3, 1);

    Var p8 = g.conv2d(t8, p.at("lat8.w"), p.at("lat8.b"), 1, 1, 1, 0);
    Var p16 = g.conv2d(t16, p.at("lat16.w"), p.at("lat16.b"), 1, 1, 1, 0);
    Var p32 = g.conv2d(t32, p.at("lat32.w"), p.at("lat32.b"), 1, 1, 1, 0);

    const T eps = static_cast<T>(cfg.fusion_eps);
    for (int l = 0; l < cfg.bifpn_layers; ++l) {
        const std::string k = "fpn" + std::to_string(l) + ".";
        Var td16 = conv(g.weighted_fusion({p16, g.upsample2x_nearest(p32)}, p.at(k + "w_td16"), eps),
                        k + "td16", 3, 1);
        Var td8 = conv(g.weighted_fusion({p8, g.upsample2x_nearest(td16)}, p.at(k + "w_td8"), eps),
                       k + "td8", 3, 1);
        Var out16 = conv(g.weighted_fusion({p16, td16, g.avgpool2x2(td8)}, p.at(k + "w_out16"), eps),
                         k + "out16", 3, 1);
        Var out32 = conv(g.weighted_fusion({p32, g.avgpool2x2(td16)}, p.at(k + "w_out32"), eps),
                         k + "out32", 3, 1);
        p8 = td8;
        p16 = out16;
        p32 = out32;
    }

    PyramidOut<T> out;
    out.s8 = p8;
    out.s16 = p16;
    out.s32 = p32;
    out.grid16 = S / 16;
    out.pooled = g.mean_rows(g.chw_to_rows(p16));
    return out;
}

inline int64_t param_count(const ParamStore& p) {
    int64_t n = 0;
    for (const auto& [name, t] : p) n += static_cast<int64_t>(t.size());
    return n;
}

}  // namespace dsd
