#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <string>

#include <json.hpp>

#include "dsd/common.hpp"
#include "dsd/tensor.hpp"

namespace dsd {

// Named parameter tensors for one network. std::map keeps iteration order
// stable across save/load and across runs.
using ParamStore = std::map<std::string, Tensor<float>>;

inline uint64_t fingerprint(const ParamStore& params) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, t] : params) {
        h = fnv1a(name.data(), name.size(), h);
        h = fnv1a(t.data.data(), t.data.size() * sizeof(float), h);
    }
    return h;
}

// teacher <- m * teacher + (1 - m) * student, tensor by tensor.
inline void ema_update(ParamStore& teacher, const ParamStore& student, double m) {
    if (m < 0.0 || m > 1.0) throw DomainError("ema momentum out of [0,1]");
    if (teacher.size() != student.size()) throw NameSetMismatch("ema param count");
    auto it = teacher.begin();
    auto is = student.begin();
    for (; it != teacher.end(); ++it, ++is) {
        if (it->first != is->first) throw NameSetMismatch("ema name " + it->first);
        if (!it->second.same_shape(is->second)) throw NameSetMismatch("ema shape " + it->first);
        const float mf = static_cast<float>(m);
        for (size_t i = 0; i < it->second.size(); ++i)
            it->second.data[i] = mf * it->second.data[i] + (1.0f - mf) * is->second.data[i];
    }
}

// Decoupled-weight-decay adaptive-moment optimizer. Weight decay is skipped
// for rank<=1 tensors (biases, norm gains, tokens).
struct AdamW {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t t = 0;
    std::map<std::string, Tensor<float>> m, v;

    void step(ParamStore& params, const std::map<std::string, Tensor<float>>& grads, double lr,
              double wd) {
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (auto& [name, p] : params) {
            auto git = grads.find(name);
            if (git == grads.end()) continue;  // frozen or unused this step
            const auto& g = git->second;
            auto& mm = m.try_emplace(name, Tensor<float>(p.shape)).first->second;
            auto& vv = v.try_emplace(name, Tensor<float>(p.shape)).first->second;
            const bool decay = p.rank() >= 2 && wd > 0.0;
            for (size_t i = 0; i < p.size(); ++i) {
                const double gi = g.data[i];
                mm.data[i] = static_cast<float>(beta1 * mm.data[i] + (1.0 - beta1) * gi);
                vv.data[i] = static_cast<float>(beta2 * vv.data[i] + (1.0 - beta2) * gi * gi);
                const double mhat = mm.data[i] / bc1;
                const double vhat = vv.data[i] / bc2;
                double upd = lr * mhat / (std::sqrt(vhat) + eps);
                if (decay) upd += lr * wd * p.data[i];
                p.data[i] = static_cast<float>(p.data[i] - upd);
            }
        }
    }
};

// ---- checkpoint format ----
// magic "DFMC", u32 version, u64 config-blob length + JSON bytes,
// u32 tensor count, per tensor: u32 name length + name, u8 dtype (0 = f32),
// u32 rank, u32 dims..., u64 payload byte offset; then the f32le payloads.

namespace detail {
template <typename V>
void put(std::ostream& os, V v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}
template <typename V>
V get(std::istream& is) {
    V v;
    is.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (!is) throw TruncatedFile("checkpoint read");
    return v;
}
}  // namespace detail

inline void save_checkpoint(const std::string& path, const nlohmann::json& config,
                            const ParamStore& tensors) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoFailure("cannot write checkpoint: " + path);
    os.write("DFMC", 4);
    detail::put<uint32_t>(os, 1);
    const std::string blob = config.dump();
    detail::put<uint64_t>(os, blob.size());
    os.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    detail::put<uint32_t>(os, static_cast<uint32_t>(tensors.size()));
    uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        detail::put<uint32_t>(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put<uint8_t>(os, 0);
        detail::put<uint32_t>(os, static_cast<uint32_t>(t.shape.size()));
        for (int d : t.shape) detail::put<uint32_t>(os, static_cast<uint32_t>(d));
        detail::put<uint64_t>(os, offset);
        offset += t.size() * 4;
    }
    for (const auto& [name, t] : tensors)
        os.write(reinterpret_cast<const char*>(t.data.data()),
                 static_cast<std::streamsize>(t.size() * 4));
    if (!os) throw IoFailure("checkpoint write failed: " + path);
}

struct Checkpoint {
    nlohmann::json config;
    ParamStore tensors;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoFailure("cannot open checkpoint: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "DFMC", 4) != 0)
        throw CheckpointIncompatible("bad magic in " + path);
    const auto version = detail::get<uint32_t>(is);
    if (version != 1) throw CheckpointIncompatible("unsupported version");
    const auto blob_len = detail::get<uint64_t>(is);
    std::string blob(blob_len, '\0');
    is.read(blob.data(), static_cast<std::streamsize>(blob_len));
    if (!is) throw TruncatedFile(path);
    Checkpoint ck;
    ck.config = nlohmann::json::parse(blob);
    const auto count = detail::get<uint32_t>(is);
    struct Entry {
        std::string name;
        std::vector<int> shape;
        uint64_t offset;
    };
    std::vector<Entry> entries;
    for (uint32_t i = 0; i < count; ++i) {
        const auto nlen = detail::get<uint32_t>(is);
        std::string name(nlen, '\0');
        is.read(name.data(), nlen);
        const auto dtype = detail::get<uint8_t>(is);
        if (dtype != 0) throw CheckpointIncompatible("unsupported dtype");
        const auto rank = detail::get<uint32_t>(is);
        std::vector<int> shape(rank);
        for (auto& d : shape) d = static_cast<int>(detail::get<uint32_t>(is));
        const auto off = detail::get<uint64_t>(is);
        entries.push_back({std::move(name), std::move(shape), off});
    }
    const std::streampos payload_start = is.tellg();
    for (auto& e : entries) {
        Tensor<float> t(e.shape);
        is.seekg(payload_start + static_cast<std::streamoff>(e.offset));
        is.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(t.size() * 4));
        if (!is) throw TruncatedFile(path);
        ck.tensors.emplace(std::move(e.name), std::move(t));
    }
    return ck;
}

// Split a flat tensor map by name prefix (e.g. "student.", "teacher.").
inline ParamStore extract_prefix(const ParamStore& all, const std::string& prefix) {
    ParamStore out;
    for (const auto& [name, t] : all)
        if (name.rfind(prefix, 0) == 0) out.emplace(name.substr(prefix.size()), t);
    return out;
}

inline void insert_prefixed(ParamStore& all, const std::string& prefix, const ParamStore& part) {
    for (const auto& [name, t] : part) all.emplace(prefix + name, t);
}

}  // namespace dsd
