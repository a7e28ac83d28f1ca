#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include <json.hpp>

#include "dsd/common.hpp"
#include "dsd/depth_image.hpp"
#include "dsd/normalize.hpp"

namespace dsd {

struct AugmentParams {
    double flip_prob = 0.5;
    double scale_prob = 0.5;
    double scale_lo = 0.8;
    double scale_hi = 1.25;
    double noise_prob = 0.3;
    double noise_rel_sigma = 0.005;  // sigma = rel * local depth
    double hole_prob = 0.3;
    int hole_count_max = 3;
    double hole_frac_max = 0.25;  // max side length as a fraction of the image
    double stick_prob = 0.2;
    int stick_count_max = 4;

    static AugmentParams identity() {
        AugmentParams p;
        p.flip_prob = p.scale_prob = p.noise_prob = p.hole_prob = p.stick_prob = 0.0;
        return p;
    }

    nlohmann::json to_json() const {
        return {{"flip_prob", flip_prob},       {"scale_prob", scale_prob},
                {"scale_lo", scale_lo},         {"scale_hi", scale_hi},
                {"noise_prob", noise_prob},     {"noise_rel_sigma", noise_rel_sigma},
                {"hole_prob", hole_prob},       {"hole_count_max", hole_count_max},
                {"hole_frac_max", hole_frac_max}, {"stick_prob", stick_prob},
                {"stick_count_max", stick_count_max}};
    }
    static AugmentParams from_json(const nlohmann::json& j) {
        AugmentParams p;
        p.flip_prob = j.value("flip_prob", p.flip_prob);
        p.scale_prob = j.value("scale_prob", p.scale_prob);
        p.scale_lo = j.value("scale_lo", p.scale_lo);
        p.scale_hi = j.value("scale_hi", p.scale_hi);
        p.noise_prob = j.value("noise_prob", p.noise_prob);
        p.noise_rel_sigma = j.value("noise_rel_sigma", p.noise_rel_sigma);
        p.hole_prob = j.value("hole_prob", p.hole_prob);
        p.hole_count_max = j.value("hole_count_max", p.hole_count_max);
        p.hole_frac_max = j.value("hole_frac_max", p.hole_frac_max);
        p.stick_prob = j.value("stick_prob", p.stick_prob);
        p.stick_count_max = j.value("stick_count_max", p.stick_count_max);
        return p;
    }
};

struct CropConfig {
    int global_count = 2;
    int local_count = 8;
    int global_size = 224;
    int local_size = 98;
    int patch_size = 14;
    double global_scale_lo = 0.32, global_scale_hi = 1.0;
    double local_scale_lo = 0.05, local_scale_hi = 0.32;
    double mask_ratio_lo = 0.1, mask_ratio_hi = 0.5;
    double mask_sample_prob = 0.5;
    AugmentParams augment;

    void validate() const {
        if (global_size % patch_size || local_size % patch_size)
            throw ConfigError("crop sizes must be multiples of patch_size");
        if (global_count < 2) throw ConfigError("global_count must be >= 2");
        if (local_count < 0) throw ConfigError("local_count must be >= 0");
        if (mask_ratio_lo < 0 || mask_ratio_hi > 1 || mask_ratio_lo > mask_ratio_hi)
            throw ConfigError("mask ratio range out of order");
    }

    nlohmann::json to_json() const {
        return {{"global_count", global_count},   {"local_count", local_count},
                {"global_size", global_size},     {"local_size", local_size},
                {"patch_size", patch_size},       {"global_scale_lo", global_scale_lo},
                {"global_scale_hi", global_scale_hi}, {"local_scale_lo", local_scale_lo},
                {"local_scale_hi", local_scale_hi},   {"mask_ratio_lo", mask_ratio_lo},
                {"mask_ratio_hi", mask_ratio_hi}, {"mask_sample_prob", mask_sample_prob},
                {"augment", augment.to_json()}};
    }
    static CropConfig from_json(const nlohmann::json& j) {
        CropConfig c;
        c.global_count = j.value("global_count", c.global_count);
        c.local_count = j.value("local_count", c.local_count);
        c.global_size = j.value("global_size", c.global_size);
        c.local_size = j.value("local_size", c.local_size);
        c.patch_size = j.value("patch_size", c.patch_size);
        c.global_scale_lo = j.value("global_scale_lo", c.global_scale_lo);
        c.global_scale_hi = j.value("global_scale_hi", c.global_scale_hi);
        c.local_scale_lo = j.value("local_scale_lo", c.local_scale_lo);
        c.local_scale_hi = j.value("local_scale_hi", c.local_scale_hi);
        c.mask_ratio_lo = j.value("mask_ratio_lo", c.mask_ratio_lo);
        c.mask_ratio_hi = j.value("mask_ratio_hi", c.mask_ratio_hi);
        c.mask_sample_prob = j.value("mask_sample_prob", c.mask_sample_prob);
        if (j.contains("augment")) c.augment = AugmentParams::from_json(j.at("augment"));
        return c;
    }
};

// One multi-crop sample: G global views (some carrying patch masks) and L
// local views. Masks are flat row-major patch grids; locals have empty masks.
struct CropSet {
    std::vector<NormalizedInput> globals;
    std::vector<NormalizedInput> locals;
    std::vector<std::vector<char>> masks;  // one per global view, may be empty
};

// Depth-space augmentations, applied in meters before normalization. Any
// pixel pushed to <= 0 becomes invalid.
inline DepthImage depth_augment(const DepthImage& src, const AugmentParams& p, Rng& rng) {
    DepthImage img = src;
    if (p.flip_prob > 0.0 && rng.bernoulli(p.flip_prob)) {
        for (int r = 0; r < img.height; ++r)
            for (int c = 0; c < img.width / 2; ++c) {
                std::swap(img.at(r, c), img.at(r, img.width - 1 - c));
                std::swap(img.valid[static_cast<size_t>(r) * img.width + c],
                          img.valid[static_cast<size_t>(r) * img.width + img.width - 1 - c]);
            }
    }
    if (p.scale_prob > 0.0 && rng.bernoulli(p.scale_prob)) {
        const float s = static_cast<float>(rng.uniform(p.scale_lo, p.scale_hi));
        for (size_t i = 0; i < img.size(); ++i)
            if (img.valid[i]) img.depth[i] *= s;
    }
    if (p.noise_prob > 0.0 && rng.bernoulli(p.noise_prob)) {
        for (size_t i = 0; i < img.size(); ++i) {
            if (!img.valid[i]) continue;
            const double sigma = p.noise_rel_sigma * img.depth[i];
            img.depth[i] = static_cast<float>(img.depth[i] + rng.normal(0.0, sigma));
        }
    }
    if (p.hole_prob > 0.0 && rng.bernoulli(p.hole_prob)) {
        const int n = 1 + static_cast<int>(rng.uniform_u64(p.hole_count_max));
        for (int k = 0; k < n; ++k) {
            const int hh = std::max(1, static_cast<int>(rng.uniform(1.0, p.hole_frac_max * img.height)));
            const int ww = std::max(1, static_cast<int>(rng.uniform(1.0, p.hole_frac_max * img.width)));
            const int r0 = static_cast<int>(rng.uniform_u64(std::max(1, img.height - hh + 1)));
            const int c0 = static_cast<int>(rng.uniform_u64(std::max(1, img.width - ww + 1)));
            for (int r = r0; r < std::min(img.height, r0 + hh); ++r)
                for (int c = c0; c < std::min(img.width, c0 + ww); ++c) {
                    img.at(r, c) = 0.0f;
                    img.valid[static_cast<size_t>(r) * img.width + c] = 0;
                }
        }
    }
    if (p.stick_prob > 0.0 && rng.bernoulli(p.stick_prob)) {
        const int n = 1 + static_cast<int>(rng.uniform_u64(p.stick_count_max));
        for (int k = 0; k < n; ++k) {
            // thin line segment of invalid pixels
            double r = rng.uniform(0.0, img.height);
            double c = rng.uniform(0.0, img.width);
            const double ang = rng.uniform(0.0, 6.283185307179586);
            const double dr = std::sin(ang), dc = std::cos(ang);
            const int len = 2 + static_cast<int>(rng.uniform_u64(std::max(img.height, img.width)));
            for (int t = 0; t < len; ++t) {
                const int ri = static_cast<int>(r), ci = static_cast<int>(c);
                if (ri >= 0 && ri < img.height && ci >= 0 && ci < img.width) {
                    img.at(ri, ci) = 0.0f;
                    img.valid[static_cast<size_t>(ri) * img.width + ci] = 0;
                }
                r += dr;
                c += dc;
            }
        }
    }
    img.renormalize();  // clamps any negative/nonfinite depth to invalid
    return img;
}

// Validity-aware bilinear resize in meters. A target pixel interpolates over
// its valid neighbors with renormalized weights; with no valid neighbor it is
// invalid. Identity sizes reproduce the input exactly.
inline DepthImage resize_depth(const DepthImage& src, int H, int W) {
    if (H < 1 || W < 1) throw NonpositiveDimensions("resize_depth");
    DepthImage out(H, W);
    for (int i = 0; i < H; ++i) {
        const double y = (H == 1 || src.height == 1)
                             ? 0.0
                             : static_cast<double>(i) * (src.height - 1) / (H - 1);
        const int y0 = std::min(static_cast<int>(y), src.height - 1);
        const int y1 = std::min(y0 + 1, src.height - 1);
        const double fy = y - y0;
        for (int j = 0; j < W; ++j) {
            const double x = (W == 1 || src.width == 1)
                                 ? 0.0
                                 : static_cast<double>(j) * (src.width - 1) / (W - 1);
            const int x0 = std::min(static_cast<int>(x), src.width - 1);
            const int x1 = std::min(x0 + 1, src.width - 1);
            const double fx = x - x0;
            const int rr[4] = {y0, y0, y1, y1};
            const int cc[4] = {x0, x1, x0, x1};
            const double ww[4] = {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
            double num = 0.0, den = 0.0;
            for (int k = 0; k < 4; ++k) {
                if (!src.valid[static_cast<size_t>(rr[k]) * src.width + cc[k]]) continue;
                num += ww[k] * src.at(rr[k], cc[k]);
                den += ww[k];
            }
            if (den > 0.0) out.set_pixel(i, j, static_cast<float>(num / den));
        }
    }
    return out;
}

inline DepthImage crop_region(const DepthImage& src, int r0, int c0, int h, int w) {
    DepthImage out(h, w);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            const size_t si = static_cast<size_t>(r0 + r) * src.width + (c0 + c);
            out.depth[static_cast<size_t>(r) * w + c] = src.depth[si];
            out.valid[static_cast<size_t>(r) * w + c] = src.valid[si];
        }
    return out;
}

// Random-resized crop in meters: area scale in [lo, hi] of the source, aspect
// jitter in [3/4, 4/3], then validity-aware resize to size x size.
inline DepthImage random_resized_crop(const DepthImage& src, int size, double scale_lo,
                                      double scale_hi, Rng& rng) {
    if (scale_lo >= 1.0) return resize_depth(src, size, size);  // crop = full image
    const double area = static_cast<double>(src.height) * src.width;
    for (int attempt = 0; attempt < 10; ++attempt) {
        const double target = area * rng.uniform(scale_lo, scale_hi);
        const double aspect = std::exp(rng.uniform(std::log(3.0 / 4.0), std::log(4.0 / 3.0)));
        int w = static_cast<int>(std::lround(std::sqrt(target * aspect)));
        int h = static_cast<int>(std::lround(std::sqrt(target / aspect)));
        if (w < 1 || h < 1 || w > src.width || h > src.height) continue;
        const int r0 = static_cast<int>(rng.uniform_u64(src.height - h + 1));
        const int c0 = static_cast<int>(rng.uniform_u64(src.width - w + 1));
        return resize_depth(crop_region(src, r0, c0, h, w), size, size);
    }
    return resize_depth(src, size, size);  // fallback: full image
}

// Block-wise patch mask covering exactly round(ratio * h * w) patches.
inline std::vector<char> generate_patch_mask(int h, int w, double ratio, Rng& rng) {
    if (ratio < 0.0 || ratio > 1.0) throw DomainError("mask ratio out of [0,1]");
    const int total = h * w;
    const int target = static_cast<int>(std::lround(ratio * total));
    std::vector<char> mask(total, 0);
    int covered = 0;
    int guard = 0;
    while (covered < target && ++guard < 10000) {
        // random block, clipped so appending cells stops exactly at target
        const int bh = 1 + static_cast<int>(rng.uniform_u64(std::max(1, h / 2)));
        const int bw = 1 + static_cast<int>(rng.uniform_u64(std::max(1, w / 2)));
        const int r0 = static_cast<int>(rng.uniform_u64(std::max(1, h - bh + 1)));
        const int c0 = static_cast<int>(rng.uniform_u64(std::max(1, w - bw + 1)));
        for (int r = r0; r < std::min(h, r0 + bh) && covered < target; ++r)
            for (int c = c0; c < std::min(w, c0 + bw) && covered < target; ++c) {
                char& m = mask[static_cast<size_t>(r) * w + c];
                if (!m) {
                    m = 1;
                    ++covered;
                }
            }
    }
    return mask;
}

// Multi-crop pipeline: random-resized crop -> depth augmentations in meters
// -> normalize with the dataset stats. Patch masks are drawn for a fraction
// of the global views. Deterministic given the rng.
inline CropSet multi_crop(const DepthImage& image, const CropConfig& cfg,
                          const ChannelStats* stats, Rng& rng) {
    cfg.validate();
    const DepthImage* src = &image;
    DepthImage upsampled;
    const int min_dim = 2 * cfg.patch_size;
    if (image.height < min_dim || image.width < min_dim) {
        // tiny inputs are upsampled in meters first
        upsampled = resize_depth(image, std::max(image.height, min_dim),
                                 std::max(image.width, min_dim));
        src = &upsampled;
    }
    CropSet out;
    const int ggrid = cfg.global_size / cfg.patch_size;
    for (int g = 0; g < cfg.global_count; ++g) {
        DepthImage crop =
            random_resized_crop(*src, cfg.global_size, cfg.global_scale_lo, cfg.global_scale_hi, rng);
        crop = depth_augment(crop, cfg.augment, rng);
        if (crop.valid_count() == 0) crop.set_pixel(0, 0, 1.0f);  // keep normalize well-defined
        out.globals.push_back(normalize(crop, stats));
        if (rng.bernoulli(cfg.mask_sample_prob)) {
            const double ratio = rng.uniform(cfg.mask_ratio_lo, cfg.mask_ratio_hi);
            out.masks.push_back(generate_patch_mask(ggrid, ggrid, ratio, rng));
        } else {
            out.masks.emplace_back();
        }
    }
    for (int l = 0; l < cfg.local_count; ++l) {
        DepthImage crop =
            random_resized_crop(*src, cfg.local_size, cfg.local_scale_lo, cfg.local_scale_hi, rng);
        crop = depth_augment(crop, cfg.augment, rng);
        if (crop.valid_count() == 0) crop.set_pixel(0, 0, 1.0f);
        out.locals.push_back(normalize(crop, stats));
    }
    return out;
}

}  // namespace dsd
