#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dsd/common.hpp"

namespace dsd {

// Metric depth map in meters. Pixels with depth <= 0 or non-finite are
// invalid (sensor holes); stored depth at invalid pixels is 0.
struct DepthImage {
    int height = 0;
    int width = 0;
    std::vector<float> depth;  // row-major, meters
    std::vector<char> valid;

    DepthImage() = default;
    DepthImage(int h, int w) : height(h), width(w) {
        if (h < 1 || w < 1) throw NonpositiveDimensions("DepthImage dims");
        depth.assign(static_cast<size_t>(h) * w, 0.0f);
        valid.assign(static_cast<size_t>(h) * w, 0);
    }

    size_t size() const { return depth.size(); }
    float& at(int r, int c) { return depth[static_cast<size_t>(r) * width + c]; }
    float at(int r, int c) const { return depth[static_cast<size_t>(r) * width + c]; }

    // Canonicalize: derive the valid mask from the stored values.
    void set_pixel(int r, int c, float d) {
        const size_t i = static_cast<size_t>(r) * width + c;
        if (std::isfinite(d) && d > 0.0f) {
            depth[i] = d;
            valid[i] = 1;
        } else {
            depth[i] = 0.0f;
            valid[i] = 0;
        }
    }

    void renormalize() {
        for (size_t i = 0; i < depth.size(); ++i) {
            if (std::isfinite(depth[i]) && depth[i] > 0.0f) {
                valid[i] = 1;
            } else {
                depth[i] = 0.0f;
                valid[i] = 0;
            }
        }
    }

    int valid_count() const {
        int n = 0;
        for (char v : valid) n += v;
        return n;
    }
};

enum class DepthFormat { pfm, dfm1 };

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "file IO assumes a little-endian host");

inline void put_f32le(std::ostream& os, float v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}
inline void put_u32le(std::ostream& os, uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}

inline float swap_f32(float v) {
    uint32_t u;
    std::memcpy(&u, &v, 4);
    u = __builtin_bswap32(u);
    std::memcpy(&v, &u, 4);
    return v;
}

}  // namespace detail

// DFM1: "DFM1", u32le height, u32le width, then h*w f32le values row-major
// top-to-bottom. Invalid pixels are stored as 0.
inline void save_dfm1(const DepthImage& img, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoFailure("cannot open for write: " + path);
    os.write("DFM1", 4);
    detail::put_u32le(os, static_cast<uint32_t>(img.height));
    detail::put_u32le(os, static_cast<uint32_t>(img.width));
    os.write(reinterpret_cast<const char*>(img.depth.data()),
             static_cast<std::streamsize>(img.depth.size() * 4));
    if (!os) throw IoFailure("write failed: " + path);
}

// PFM grayscale ("Pf"), negative scale = little-endian, rows bottom-to-top.
inline void save_pfm(const DepthImage& img, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoFailure("cannot open for write: " + path);
    os << "Pf\n" << img.width << " " << img.height << "\n-1.0\n";
    for (int r = img.height - 1; r >= 0; --r)
        os.write(reinterpret_cast<const char*>(img.depth.data() +
                                               static_cast<size_t>(r) * img.width),
                 static_cast<std::streamsize>(img.width) * 4);
    if (!os) throw IoFailure("write failed: " + path);
}

inline void save_depth(const DepthImage& img, const std::string& path, DepthFormat fmt) {
    if (fmt == DepthFormat::dfm1)
        save_dfm1(img, path);
    else
        save_pfm(img, path);
}

inline DepthImage load_depth(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoFailure("cannot open: " + path);
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());

    // even the shortest valid header is longer than 8 bytes
    if (bytes.size() < 8) throw TruncatedFile(path);

    if (bytes.compare(0, 4, "DFM1") == 0) {
        if (bytes.size() < 12) throw TruncatedFile(path);
        uint32_t h, w;
        std::memcpy(&h, bytes.data() + 4, 4);
        std::memcpy(&w, bytes.data() + 8, 4);
        if (h == 0 || w == 0) throw NonpositiveDimensions(path);
        const size_t need = 12 + static_cast<size_t>(h) * w * 4;
        if (bytes.size() < need) throw TruncatedFile(path);
        DepthImage img(static_cast<int>(h), static_cast<int>(w));
        std::memcpy(img.depth.data(), bytes.data() + 12, static_cast<size_t>(h) * w * 4);
        img.renormalize();
        return img;
    }

    if (bytes.compare(0, 2, "Pf") == 0 || bytes.compare(0, 2, "PF") == 0) {
        const bool color = bytes[1] == 'F';
        std::istringstream hs(bytes.substr(2));
        int w = 0, h = 0;
        double scale = 0.0;
        hs >> w >> h >> scale;
        if (!hs) throw TruncatedFile(path + ": bad PFM header");
        if (w <= 0 || h <= 0) throw NonpositiveDimensions(path);
        if (scale == 0.0) throw UnknownFormat(path + ": zero PFM scale");
        // payload starts one whitespace byte after the scale token:
        // skip three whitespace-separated tokens, then exactly one whitespace char
        size_t pos = 2;
        int tokens = 0;
        bool in_token = false;
        for (pos = 2; pos < bytes.size(); ++pos) {
            const bool ws = std::isspace(static_cast<unsigned char>(bytes[pos])) != 0;
            if (!ws && !in_token) in_token = true;
            if (ws && in_token) {
                in_token = false;
                if (++tokens == 3) {
                    ++pos;
                    break;
                }
            }
        }
        const int ch = color ? 3 : 1;
        const size_t need = pos + static_cast<size_t>(h) * w * ch * 4;
        if (bytes.size() < need) throw TruncatedFile(path);
        const bool file_le = scale < 0.0;
        DepthImage img(h, w);
        const char* payload = bytes.data() + pos;
        for (int r = 0; r < h; ++r) {
            // PFM stores rows bottom-to-top
            const char* row = payload + static_cast<size_t>(h - 1 - r) * w * ch * 4;
            for (int c = 0; c < w; ++c) {
                float v;
                std::memcpy(&v, row + static_cast<size_t>(c) * ch * 4, 4);
                if (!file_le) v = detail::swap_f32(v);
                img.depth[static_cast<size_t>(r) * w + c] = v;
            }
        }
        img.renormalize();
        return img;
    }

    throw UnknownFormat(path);
}

}  // namespace dsd
