// SPDX-License-Identifier: MIT
#pragma once

#include <zlib.h>

#include <array>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "voxelage/common.hpp"

namespace voxelage {

// Minimal PNG writer: 8-bit RGB, filter type None on every scanline, one
// zlib-compressed IDAT chunk.
inline void write_png_rgb(const std::string& path, int64_t width, int64_t height,
                          const std::vector<uint8_t>& rgb) {
    require(width > 0 && height > 0, "png: non-positive size");
    require(static_cast<int64_t>(rgb.size()) == width * height * 3, "png: bad buffer size");

    std::vector<uint8_t> raw;
    raw.reserve(static_cast<size_t>(height * (1 + width * 3)));
    for (int64_t y = 0; y < height; ++y) {
        raw.push_back(0);  // filter: None
        raw.insert(raw.end(), rgb.begin() + y * width * 3, rgb.begin() + (y + 1) * width * 3);
    }
    uLongf comp_size = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> comp(comp_size);
    if (compress2(comp.data(), &comp_size, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK)
        throw IoError("png: deflate failure");
    comp.resize(comp_size);

    auto put_u32 = [](std::vector<uint8_t>& v, uint32_t x) {
        v.push_back(static_cast<uint8_t>(x >> 24));
        v.push_back(static_cast<uint8_t>(x >> 16));
        v.push_back(static_cast<uint8_t>(x >> 8));
        v.push_back(static_cast<uint8_t>(x));
    };
    auto chunk = [&](std::vector<uint8_t>& out, const char* tag, const std::vector<uint8_t>& data) {
        put_u32(out, static_cast<uint32_t>(data.size()));
        const size_t crc_start = out.size();
        out.insert(out.end(), tag, tag + 4);
        out.insert(out.end(), data.begin(), data.end());
        const uLong crc = crc32(0, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start));
        put_u32(out, static_cast<uint32_t>(crc));
    };

    std::vector<uint8_t> file = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    std::vector<uint8_t> ihdr;
    put_u32(ihdr, static_cast<uint32_t>(width));
    put_u32(ihdr, static_cast<uint32_t>(height));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(2);  // truecolor
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    chunk(file, "IHDR", ihdr);
    chunk(file, "IDAT", comp);
    chunk(file, "IEND", {});

    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw IoError("cannot open for writing: " + path);
    const bool ok = std::fwrite(file.data(), 1, file.size(), f) == file.size();
    if (std::fclose(f) != 0 || !ok) throw IoError("png write failure: " + path);
}

enum class Colormap { Gray, RedYellowBlue, DivergingBlueWhiteRed };

inline Colormap colormap_from_string(const std::string& s) {
    if (s == "gray") return Colormap::Gray;
    if (s == "red_yellow_blue") return Colormap::RedYellowBlue;
    if (s == "diverging_blue_white_red") return Colormap::DivergingBlueWhiteRed;
    throw ValidationError("unknown colormap: " + s);
}

// t in [0,1] for the sequential maps; the diverging map is evaluated at
// (v/range + 1)/2 so 0.5 is the white centre.
inline std::array<uint8_t, 3> colormap_rgb(Colormap map, double t) {
    t = t < 0 ? 0 : (t > 1 ? 1 : t);
    auto lerp = [](double a, double b, double u) {
        return static_cast<uint8_t>(a + (b - a) * u + 0.5);
    };
    switch (map) {
        case Colormap::Gray: {
            const uint8_t v = static_cast<uint8_t>(t * 255.0 + 0.5);
            return {v, v, v};
        }
        case Colormap::RedYellowBlue:
            // blue (low) -> yellow (middle) -> red (high)
            if (t < 0.5) {
                const double u = t * 2;
                return {lerp(0, 255, u), lerp(0, 255, u), lerp(255, 0, u)};
            } else {
                const double u = (t - 0.5) * 2;
                return {255, lerp(255, 0, u), 0};
            }
        case Colormap::DivergingBlueWhiteRed:
            if (t < 0.5) {
                const double u = t * 2;
                return {lerp(0, 255, u), lerp(0, 255, u), 255};
            } else {
                const double u = (t - 0.5) * 2;
                return {255, lerp(255, 0, u), lerp(255, 0, u)};
            }
    }
    return {0, 0, 0};
}

}  // namespace voxelage
