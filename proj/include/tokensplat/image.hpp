#pragma once

// Float RGB image in [0,1], row-major, plus the two on-disk forms: 8-bit
// binary PPM (P6) for viewing and a headerless little-endian float32 raw
// sidecar for lossless loss-level comparisons.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "tokensplat/common.hpp"

namespace tokensplat {

struct Image {
    int width = 0;
    int height = 0;
    std::vector<float> data;  // height * width * 3

    Image() = default;
    Image(int w, int h, float fill = 0.0f)
        : width(w), height(h), data(static_cast<std::size_t>(w) * h * 3, fill) {}

    float& at(int x, int y, int c) {
        return data[(static_cast<std::size_t>(y) * width + x) * 3 + c];
    }
    float at(int x, int y, int c) const {
        return data[(static_cast<std::size_t>(y) * width + x) * 3 + c];
    }

    std::size_t size() const { return data.size(); }
};

inline void write_ppm(const Image& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open image for writing: " + path);
    out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
    std::vector<unsigned char> bytes(img.data.size());
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        const float v = std::clamp(img.data[i], 0.0f, 1.0f);
        bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("image write failed: " + path);
}

inline Image read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open image: " + path);
    std::string magic;
    in >> magic;
    if (magic != "P6") throw ParseError("not a binary PPM (P6)", 0);
    int w = 0, h = 0, maxval = 0;
    in >> w >> h >> maxval;
    if (!in || w <= 0 || h <= 0 || maxval != 255)
        throw ParseError("unsupported PPM header", static_cast<std::size_t>(in.tellg()));
    in.get();  // single whitespace after maxval
    Image img(w, h);
    std::vector<unsigned char> bytes(img.data.size());
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!in) throw ParseError("truncated PPM payload", static_cast<std::size_t>(in.gcount()));
    for (std::size_t i = 0; i < bytes.size(); ++i) img.data[i] = bytes[i] / 255.0f;
    return img;
}

inline void write_raw(const Image& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open raw image for writing: " + path);
    out.write(reinterpret_cast<const char*>(img.data.data()),
              static_cast<std::streamsize>(img.data.size() * sizeof(float)));
    if (!out) throw Error("raw image write failed: " + path);
}

inline Image read_raw(const std::string& path, int width, int height) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open raw image: " + path);
    Image img(width, height);
    in.read(reinterpret_cast<char*>(img.data.data()),
            static_cast<std::streamsize>(img.data.size() * sizeof(float)));
    if (!in) throw ParseError("truncated raw image payload", static_cast<std::size_t>(in.gcount()));
    return img;
}

}  // namespace tokensplat
