#pragma once

#include <array>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "dsd/common.hpp"
#include "dsd/depth_image.hpp"
#include "dsd/normalize.hpp"

namespace dsd {

enum class SourceType { mde, synthetic, real };

inline std::string to_string(SourceType s) {
    switch (s) {
        case SourceType::mde: return "mde";
        case SourceType::synthetic: return "synthetic";
        case SourceType::real: return "real";
    }
    throw DomainError("bad SourceType");
}

inline SourceType source_from_string(const std::string& s) {
    if (s == "mde") return SourceType::mde;
    if (s == "synthetic") return SourceType::synthetic;
    if (s == "real") return SourceType::real;
    throw DomainError("unknown source type: " + s);
}

struct ManifestRecord {
    std::string path;
    SourceType source = SourceType::real;
    std::string domain;
};

// Line-delimited JSON, one record per line: {"path":..., "source":..., "domain":...}
inline std::vector<ManifestRecord> load_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoFailure("cannot open manifest: " + path);
    std::vector<ManifestRecord> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        out.push_back({j.at("path").get<std::string>(),
                       source_from_string(j.at("source").get<std::string>()),
                       j.value("domain", std::string())});
    }
    return out;
}

inline void save_manifest(const std::vector<ManifestRecord>& records, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoFailure("cannot write manifest: " + path);
    for (const auto& r : records) {
        nlohmann::json j{{"path", r.path}, {"source", to_string(r.source)}, {"domain", r.domain}};
        os << j.dump() << "\n";
    }
}

// Normalized source-type weights. A zero-weight source is never sampled.
struct MixtureSpec {
    double w_mde = 0.0;
    double w_synthetic = 0.0;
    double w_real = 0.0;

    std::array<double, 3> normalized() const {
        const double s = w_mde + w_synthetic + w_real;
        if (s <= 0.0) throw DomainError("MixtureSpec: weights sum to zero");
        if (w_mde < 0 || w_synthetic < 0 || w_real < 0)
            throw DomainError("MixtureSpec: negative weight");
        return {w_mde / s, w_synthetic / s, w_real / s};
    }
};

// ---- streaming channel statistics ----

// Chan et al. count/mean/M2 accumulator with an exact pairwise merge, so the
// merged result is independent of chunking order.
struct MomentAcc {
    uint64_t n = 0;
    double mean = 0.0;
    double m2 = 0.0;

    void push(double x) {
        ++n;
        const double d = x - mean;
        mean += d / static_cast<double>(n);
        m2 += d * (x - mean);
    }

    static MomentAcc merge(const MomentAcc& a, const MomentAcc& b) {
        if (a.n == 0) return b;
        if (b.n == 0) return a;
        MomentAcc r;
        r.n = a.n + b.n;
        const double delta = b.mean - a.mean;
        const double na = static_cast<double>(a.n), nb = static_cast<double>(b.n);
        r.mean = a.mean + delta * nb / (na + nb);
        r.m2 = a.m2 + b.m2 + delta * delta * na * nb / (na + nb);
        return r;
    }
};

struct ChannelAcc {
    std::array<MomentAcc, 3> ch;

    void accumulate(const NormalizedInput& x) {
        const size_t plane = static_cast<size_t>(x.height) * x.width;
        for (size_t i = 0; i < plane; ++i) {
            if (!x.valid[i]) continue;
            for (int c = 0; c < 3; ++c)
                ch[c].push(static_cast<double>(x.channels.data[static_cast<size_t>(c) * plane + i]));
        }
    }

    static ChannelAcc merge(const ChannelAcc& a, const ChannelAcc& b) {
        ChannelAcc r;
        for (int c = 0; c < 3; ++c) r.ch[c] = MomentAcc::merge(a.ch[c], b.ch[c]);
        return r;
    }
};

// Balanced pairwise reduction of per-image accumulators (order-independent).
inline ChannelAcc pairwise_reduce(std::vector<ChannelAcc>& accs, size_t lo, size_t hi) {
    if (hi - lo == 1) return accs[lo];
    const size_t mid = lo + (hi - lo) / 2;
    return ChannelAcc::merge(pairwise_reduce(accs, lo, mid), pairwise_reduce(accs, mid, hi));
}

// Single pass over all valid pixels of the un-standardized channels. Workers
// each produce per-image accumulators; the merge tree is fixed by image index.
inline ChannelStats compute_channel_stats(const std::vector<ManifestRecord>& manifest,
                                          int workers = 1) {
    if (manifest.empty()) throw EmptyManifest("compute_channel_stats");
    std::vector<ChannelAcc> accs(manifest.size());
    auto work = [&](size_t begin, size_t step) {
        for (size_t i = begin; i < manifest.size(); i += step) {
            DepthImage img = load_depth(manifest[i].path);
            if (img.valid_count() == 0) continue;
            accs[i].accumulate(normalize(img, nullptr));
        }
    };
    if (workers <= 1) {
        work(0, 1);
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < workers; ++t) pool.emplace_back(work, static_cast<size_t>(t), workers);
        for (auto& t : pool) t.join();
    }
    ChannelAcc total = pairwise_reduce(accs, 0, accs.size());
    if (total.ch[0].n == 0) throw NoValidPixels("compute_channel_stats");
    ChannelStats s;
    s.count = total.ch[0].n;
    for (int c = 0; c < 3; ++c) {
        s.mean[c] = total.ch[c].mean;
        const double var = total.ch[c].m2 / static_cast<double>(total.ch[c].n);
        s.std[c] = std::max(std::sqrt(std::max(var, 0.0)), ChannelStats::kStdFloor);
    }
    return s;
}

inline void save_channel_stats(const ChannelStats& s, const std::string& path) {
    nlohmann::json j{{"mean", s.mean}, {"std", s.std}, {"count", s.count}};
    std::ofstream os(path);
    if (!os) throw IoFailure("cannot write stats: " + path);
    os << j.dump(2) << "\n";
}

inline ChannelStats load_channel_stats(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoFailure("cannot open stats: " + path);
    auto j = nlohmann::json::parse(is);
    ChannelStats s;
    for (int c = 0; c < 3; ++c) {
        s.mean[c] = j.at("mean")[c].get<double>();
        s.std[c] = j.at("std")[c].get<double>();
    }
    s.count = j.value("count", uint64_t(0));
    return s;
}

// Draw records i.i.d.: source by mixture weight, then uniformly within source.
inline std::vector<ManifestRecord> sample_batch(const std::vector<ManifestRecord>& manifest,
                                                const MixtureSpec& mix, int batch_size, Rng& rng) {
    const auto w = mix.normalized();
    std::array<std::vector<size_t>, 3> by_source;
    for (size_t i = 0; i < manifest.size(); ++i)
        by_source[static_cast<int>(manifest[i].source)].push_back(i);
    for (int s = 0; s < 3; ++s)
        if (w[s] > 0.0 && by_source[s].empty())
            throw EmptySource("no records with source " +
                              to_string(static_cast<SourceType>(s)));
    std::vector<ManifestRecord> out;
    out.reserve(batch_size);
    for (int b = 0; b < batch_size; ++b) {
        const double u = rng.uniform();
        int s = -1;
        double acc = 0.0;
        for (int k = 0; k < 3; ++k) {
            if (w[k] <= 0.0) continue;
            acc += w[k];
            if (u < acc) {
                s = k;
                break;
            }
        }
        if (s < 0)  // fp roundoff at u ~ 1: clamp to the last positive source
            for (int k = 2; k >= 0; --k)
                if (w[k] > 0.0) {
                    s = k;
                    break;
                }
        const auto& pool = by_source[s];
        out.push_back(manifest[pool[rng.uniform_u64(pool.size())]]);
    }
    return out;
}

}  // namespace dsd
