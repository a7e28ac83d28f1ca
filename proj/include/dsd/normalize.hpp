#pragma once

#include <array>
#include <cmath>
#include <limits>

#include "dsd/common.hpp"
#include "dsd/depth_image.hpp"
#include "dsd/tensor.hpp"

namespace dsd {

// Per-channel mean/std of the un-standardized 3-channel representation,
// computed once over a dataset's valid pixels.
struct ChannelStats {
    std::array<double, 3> mean{0.0, 0.0, 0.0};
    std::array<double, 3> std{1.0, 1.0, 1.0};
    uint64_t count = 0;

    static constexpr double kStdFloor = 1e-6;
};

// 3 x H x W stacked channels plus the validity mask carried through for
// augmentation bookkeeping.
struct NormalizedInput {
    Tensor<float> channels;  // {3, H, W}
    std::vector<char> valid;
    int height = 0;
    int width = 0;
};

inline double log1p_depth(double d) {
    if (!(d >= 0.0) || !std::isfinite(d)) throw NegativeDepth("log1p_depth input");
    return std::log1p(d);
}

namespace detail {
inline const double kLog10 = std::log1p(10.0);
inline const double kLog100 = std::log1p(100.0);
}  // namespace detail

// Channel values for a single depth d, given the image's valid-depth range.
// lmin/lmax are log1p(D_min)/log1p(D_max).
inline std::array<double, 3> depth_channels(double d, double lmin, double lmax) {
    const double lp = log1p_depth(d);
    const double denom = lmax - lmin;
    const double c1 = denom > 0.0 ? (lp - lmin) / denom : 0.0;
    return {c1, lp / detail::kLog10, lp / detail::kLog100};
}

// The three-channel log-compressed representation. If stats is non-null,
// channels are standardized to (c - mean) / std afterwards. Invalid pixels
// are filled with the channel values for D = 0 before standardization.
inline NormalizedInput normalize(const DepthImage& img, const ChannelStats* stats = nullptr) {
    double dmin = std::numeric_limits<double>::infinity();
    double dmax = -std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < img.size(); ++i) {
        if (!img.valid[i]) continue;
        dmin = std::min(dmin, static_cast<double>(img.depth[i]));
        dmax = std::max(dmax, static_cast<double>(img.depth[i]));
    }
    if (!std::isfinite(dmin)) throw NoValidPixels("normalize: no valid pixels");

    const double lmin = std::log1p(dmin);
    const double lmax = std::log1p(dmax);

    NormalizedInput out;
    out.height = img.height;
    out.width = img.width;
    out.valid = img.valid;
    out.channels = Tensor<float>({3, img.height, img.width});
    const size_t plane = img.size();
    const auto fill = depth_channels(0.0, lmin, lmax);
    for (size_t i = 0; i < plane; ++i) {
        const auto ch = img.valid[i]
                            ? depth_channels(static_cast<double>(img.depth[i]), lmin, lmax)
                            : fill;
        for (int c = 0; c < 3; ++c) {
            double v = ch[c];
            if (stats) v = (v - stats->mean[c]) / std::max(stats->std[c], ChannelStats::kStdFloor);
            out.channels.data[static_cast<size_t>(c) * plane + i] = static_cast<float>(v);
        }
    }
    return out;
}

// Plain min-max normalization replicated into three identical channels; the
// preprocessing used for RGB-pretrained baselines.
inline Tensor<float> baseline_minmax_normalize(const DepthImage& img) {
    double dmin = std::numeric_limits<double>::infinity();
    double dmax = -std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < img.size(); ++i) {
        if (!img.valid[i]) continue;
        dmin = std::min(dmin, static_cast<double>(img.depth[i]));
        dmax = std::max(dmax, static_cast<double>(img.depth[i]));
    }
    if (!std::isfinite(dmin)) throw NoValidPixels("baseline_minmax_normalize");
    const double denom = dmax - dmin;
    Tensor<float> out({3, img.height, img.width});
    const size_t plane = img.size();
    for (size_t i = 0; i < plane; ++i) {
        const double v = (img.valid[i] && denom > 0.0)
                             ? (static_cast<double>(img.depth[i]) - dmin) / denom
                             : 0.0;
        for (int c = 0; c < 3; ++c) out.data[static_cast<size_t>(c) * plane + i] = static_cast<float>(v);
    }
    return out;
}

}  // namespace dsd
