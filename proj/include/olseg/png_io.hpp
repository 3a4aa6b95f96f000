#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "olseg/common.hpp"
#include "olseg/image.hpp"

namespace olseg {

namespace detail {

inline void png_u32be(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

inline void png_chunk(std::vector<uint8_t>& out, const char type[4],
                      const std::vector<uint8_t>& payload) {
    png_u32be(out, static_cast<uint32_t>(payload.size()));
    const size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    const uint32_t crc = static_cast<uint32_t>(
        ::crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start)));
    png_u32be(out, crc);
}

inline void write_png(const std::string& path, size_t h, size_t w, int channels,
                      const std::vector<uint8_t>& interleaved) {
    if (interleaved.size() != h * w * static_cast<size_t>(channels)) {
        throw DataError("write_png: pixel buffer size mismatch");
    }
    // raw scanlines, filter byte 0 per row
    std::vector<uint8_t> raw;
    raw.reserve(h * (w * channels + 1));
    for (size_t y = 0; y < h; ++y) {
        raw.push_back(0);
        raw.insert(raw.end(), interleaved.begin() + y * w * channels,
                   interleaved.begin() + (y + 1) * w * channels);
    }
    uLongf comp_cap = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> comp(comp_cap);
    if (::compress2(comp.data(), &comp_cap, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK) {
        throw DataError("write_png: deflate failed");
    }
    comp.resize(comp_cap);

    std::vector<uint8_t> file = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    std::vector<uint8_t> ihdr;
    png_u32be(ihdr, static_cast<uint32_t>(w));
    png_u32be(ihdr, static_cast<uint32_t>(h));
    ihdr.push_back(8);                                   // bit depth
    ihdr.push_back(channels == 1 ? 0 : 2);               // gray / truecolor
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    png_chunk(file, "IHDR", ihdr);
    png_chunk(file, "IDAT", comp);
    png_chunk(file, "IEND", {});

    FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw DataError("write_png: cannot open " + path);
    const size_t written = std::fwrite(file.data(), 1, file.size(), f);
    std::fclose(f);
    if (written != file.size()) throw DataError("write_png: short write to " + path);
}

}  // namespace detail

// 8-bit grayscale from a [0,1] image.
inline void write_png_gray(const std::string& path, const Image& img) {
    std::vector<uint8_t> px(img.numel());
    for (size_t i = 0; i < px.size(); ++i) {
        float v = img.pixels[i];
        v = std::min(std::max(v, 0.0f), 1.0f);
        px[i] = static_cast<uint8_t>(std::lround(v * 255.0f));
    }
    detail::write_png(path, img.height, img.width, 1, px);
}

// 8-bit RGB, interleaved r,g,b per pixel.
inline void write_png_rgb(const std::string& path, size_t h, size_t w,
                          const std::vector<uint8_t>& rgb) {
    detail::write_png(path, h, w, 3, rgb);
}

}  // namespace olseg
