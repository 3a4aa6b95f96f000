#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "olseg/common.hpp"

namespace olseg {

// One B-scan: row-major intensities in [0, 1].
struct Image {
    size_t height = 0;
    size_t width = 0;
    std::vector<float> pixels;

    Image() = default;
    Image(size_t h, size_t w, float fill = 0.0f) : height(h), width(w), pixels(h * w, fill) {}

    float& at(size_t y, size_t x) { return pixels[y * width + x]; }
    float at(size_t y, size_t x) const { return pixels[y * width + x]; }
    size_t numel() const { return pixels.size(); }
};

// Bilinear sample with half-pixel centers and edge clamping.
inline float sample_bilinear(const Image& img, double y, double x) {
    y = std::min(std::max(y, 0.0), static_cast<double>(img.height - 1));
    x = std::min(std::max(x, 0.0), static_cast<double>(img.width - 1));
    const size_t y0 = static_cast<size_t>(y), x0 = static_cast<size_t>(x);
    const size_t y1 = std::min(y0 + 1, img.height - 1), x1 = std::min(x0 + 1, img.width - 1);
    const double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
    const double top = (1.0 - fx) * img.at(y0, x0) + fx * img.at(y0, x1);
    const double bot = (1.0 - fx) * img.at(y1, x0) + fx * img.at(y1, x1);
    return static_cast<float>((1.0 - fy) * top + fy * bot);
}

inline Image resize_bilinear(const Image& img, size_t out_h, size_t out_w) {
    if (img.height == 0 || img.width == 0) throw DataError("resize_bilinear: empty image");
    Image out(out_h, out_w);
    const double sy = static_cast<double>(img.height) / static_cast<double>(out_h);
    const double sx = static_cast<double>(img.width) / static_cast<double>(out_w);
    for (size_t y = 0; y < out_h; ++y) {
        const double src_y = (static_cast<double>(y) + 0.5) * sy - 0.5;
        for (size_t x = 0; x < out_w; ++x) {
            const double src_x = (static_cast<double>(x) + 0.5) * sx - 0.5;
            out.at(y, x) = sample_bilinear(img, src_y, src_x);
        }
    }
    return out;
}

inline void check_unit_range(const Image& img, const char* what) {
    for (float p : img.pixels) {
        if (!(p >= 0.0f && p <= 1.0f)) {
            throw DataError(std::string(what) + ": intensities must lie in [0,1]");
        }
    }
}

}  // namespace olseg
