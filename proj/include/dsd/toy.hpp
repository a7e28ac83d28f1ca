#pragma once

#include <filesystem>
#include <fstream>

#include "dsd/depth_image.hpp"
#include "dsd/manifest.hpp"

namespace dsd {

// ---- synthetic desk scenes ----
//
// Small orthographic depth images of a single object above a background
// plane. Three shape classes: sphere cap, box, inclined wedge. Each image
// gets a depth map, a class label, and a per-pixel segmentation mask
// (0 = background, 1..3 = class + 1).

struct ToyConfig {
    int count = 660;
    int size = 56;
    uint64_t seed = 0;
    double invalid_prob = 0.01;  // sensor dropout speckle

    nlohmann::json to_json() const {
        return {{"count", count}, {"size", size}, {"seed", seed},
                {"invalid_prob", invalid_prob}};
    }
};

struct ToySample {
    DepthImage image;
    std::vector<int> seg;  // size*size class ids
    int label = 0;
};

inline ToySample gen_toy_sample(const ToyConfig& cfg, Rng& rng) {
    const int s = cfg.size;
    ToySample out;
    out.image = DepthImage(s, s);
    out.seg.assign(static_cast<size_t>(s) * s, 0);
    out.label = static_cast<int>(rng.uniform_u64(3));

    const double bg = rng.uniform(2.0, 4.0);
    const double tilt_x = rng.uniform(-0.002, 0.002);
    const double tilt_y = rng.uniform(-0.002, 0.002);
    for (int r = 0; r < s; ++r)
        for (int c = 0; c < s; ++c)
            out.image.set_pixel(r, c, static_cast<float>(bg + tilt_x * c + tilt_y * r));

    const double cx = rng.uniform(0.38, 0.62) * s;
    const double cy = rng.uniform(0.38, 0.62) * s;
    const double ext = rng.uniform(0.22, 0.34) * s;  // half-extent in pixels
    const double height = rng.uniform(0.5, 1.0);     // meters above the plane

    auto put = [&](int r, int c, double d) {
        out.image.set_pixel(r, c, static_cast<float>(d));
        out.seg[static_cast<size_t>(r) * s + c] = out.label + 1;
    };

    if (out.label == 0) {
        // sphere cap
        for (int r = 0; r < s; ++r)
            for (int c = 0; c < s; ++c) {
                const double dx = (c - cx) / ext, dy = (r - cy) / ext;
                const double q = 1.0 - dx * dx - dy * dy;
                if (q > 0.0) put(r, c, bg - height * std::sqrt(q));
            }
    } else if (out.label == 1) {
        // box, axis aligned, flat top
        const double aspect = rng.uniform(0.6, 1.6);
        const double hx = ext * std::sqrt(aspect), hy = ext / std::sqrt(aspect);
        for (int r = 0; r < s; ++r)
            for (int c = 0; c < s; ++c)
                if (std::abs(c - cx) <= hx && std::abs(r - cy) <= hy) put(r, c, bg - height);
    } else {
        // wedge, linear ramp across its footprint
        const double dir = rng.bernoulli(0.5) ? 1.0 : -1.0;
        for (int r = 0; r < s; ++r)
            for (int c = 0; c < s; ++c)
                if (std::abs(c - cx) <= ext && std::abs(r - cy) <= ext) {
                    const double f = 0.5 + dir * (c - cx) / (2.0 * ext);
                    put(r, c, bg - height * f);
                }
    }

    for (int r = 0; r < s; ++r)
        for (int c = 0; c < s; ++c)
            if (rng.bernoulli(cfg.invalid_prob)) {
                out.image.depth[static_cast<size_t>(r) * s + c] = 0.0f;
                out.image.valid[static_cast<size_t>(r) * s + c] = 0;
            }
    out.image.renormalize();
    return out;
}

inline void write_pgm(const std::string& path, int h, int w, const std::vector<int>& vals) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoFailure("cannot write " + path);
    os << "P5\n" << w << " " << h << "\n255\n";
    for (int v : vals) os.put(static_cast<char>(v));
    if (!os) throw IoFailure("pgm write failed: " + path);
}

inline std::pair<std::vector<int>, std::pair<int, int>> load_pgm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoFailure("cannot open " + path);
    std::string magic;
    int w, h, maxv;
    is >> magic >> w >> h >> maxv;
    if (magic != "P5" || w < 1 || h < 1) throw UnknownFormat(path);
    is.get();
    std::vector<int> vals(static_cast<size_t>(w) * h);
    for (auto& v : vals) v = static_cast<unsigned char>(is.get());
    if (!is) throw TruncatedFile(path);
    return {std::move(vals), {h, w}};
}

struct ToyDataset {
    std::vector<ManifestRecord> manifest;
    std::vector<std::string> seg_paths;
    std::vector<int> labels;
};

// Write count images plus manifest.jsonl and labels.jsonl under dir.
inline ToyDataset gen_toy_dataset(const ToyConfig& cfg, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    Rng rng = Rng(Rng::seed_mix(cfg.seed, 0x70d));
    ToyDataset ds;
    std::ofstream labels(fs::path(dir) / "labels.jsonl", std::ios::trunc);
    for (int i = 0; i < cfg.count; ++i) {
        ToySample s = gen_toy_sample(cfg, rng);
        char name[32];
        std::snprintf(name, sizeof name, "img_%04d", i);
        const std::string base = (fs::path(dir) / name).string();
        save_dfm1(s.image, base + ".dfm1");
        write_pgm(base + "_seg.pgm", cfg.size, cfg.size, s.seg);
        ds.manifest.push_back({base + ".dfm1", SourceType::synthetic, "toy"});
        ds.seg_paths.push_back(base + "_seg.pgm");
        ds.labels.push_back(s.label);
        labels << nlohmann::json{{"path", base + ".dfm1"}, {"label", s.label}}.dump() << "\n";
    }
    save_manifest(ds.manifest, (fs::path(dir) / "manifest.jsonl").string());
    return ds;
}

inline std::vector<std::pair<std::string, int>> load_toy_labels(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoFailure("cannot open " + path);
    std::vector<std::pair<std::string, int>> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        out.push_back({j.at("path"), j.at("label")});
    }
    return out;
}

}  // namespace dsd
