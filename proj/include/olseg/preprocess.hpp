#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "olseg/image.hpp"

namespace olseg {

// ---------------------------------------------------------------------------
// B-scan conditioning: RPE-based flattening, band crop, Gaussian denoise,
// CLAHE, resize. Every coordinate change is recorded so predictions can be
// mapped back to original image space.
// ---------------------------------------------------------------------------

struct PreprocessConfig {
    double gaussian_sigma = 1.0;
    size_t clahe_tile_rows = 8;
    size_t clahe_tile_cols = 8;
    double clahe_clip = 0.01;  // clip limit as a fraction of tile pixel count
    int outlier_threshold_px = 60;
    size_t target_height = 512;
    size_t target_width = 512;
};

struct RpeCandidates {
    std::vector<int> row;        // per column
    std::vector<uint8_t> valid;  // per column
    size_t valid_count() const {
        size_t n = 0;
        for (uint8_t v : valid) n += v;
        return n;
    }
};

struct QuadraticCurve {
    double a = 0, b = 0, c = 0;  // row(u) = a u^2 + b u + c
    double eval(double u) const { return (a * u + b) * u + c; }
};

struct QuadraticFit {
    QuadraticCurve curve;
    double residual_rms = 0;
};

// Per-column flattening shifts plus crop/resize bookkeeping. new_row = old_row + shift.
struct TransformRecord {
    std::vector<int> column_shifts;
    long crop_top = 0;
    double resize_scale_rows = 1.0;
    double resize_scale_cols = 1.0;
    size_t original_height = 0, original_width = 0;
    size_t processed_height = 0, processed_width = 0;

    // original-space (col,row) -> processed-space (col,row)
    std::pair<double, double> to_processed(double col, double row) const {
        const size_t u = clamp_col(col);
        const double flat = row + static_cast<double>(column_shifts[u]);
        const double cropped = flat - static_cast<double>(crop_top);
        const double row_p = (cropped + 0.5) * resize_scale_rows - 0.5;
        const double col_p = (col + 0.5) * resize_scale_cols - 0.5;
        return {col_p, row_p};
    }

    // processed-space (col,row) -> original-space (col,row)
    std::pair<double, double> to_original(double col, double row) const {
        const double col_o = (col + 0.5) / resize_scale_cols - 0.5;
        const double cropped = (row + 0.5) / resize_scale_rows - 0.5;
        const double flat = cropped + static_cast<double>(crop_top);
        const size_t u = clamp_col(col_o);
        const double row_o = flat - static_cast<double>(column_shifts[u]);
        return {col_o, row_o};
    }

  private:
    size_t clamp_col(double col) const {
        long u = std::lround(col);
        if (u < 0) u = 0;
        if (u >= static_cast<long>(column_shifts.size()))
            u = static_cast<long>(column_shifts.size()) - 1;
        return static_cast<size_t>(u);
    }
};

// Per-column row of the strongest dark-above/bright-below transition: the
// signed intensity gradient evaluated as a difference of short window means
// above and below each row (a step-matched stencil, radius 4, so isolated
// noisy pixels cannot out-vote a real edge). Constant columns are invalid.
inline RpeCandidates detect_rpe_candidates(const Image& b) {
    if (b.height < 16 || b.width < 16) throw DataError("detect_rpe_candidates: scan too small");
    constexpr size_t kRadius = 4;
    RpeCandidates out;
    out.row.assign(b.width, 0);
    out.valid.assign(b.width, 0);
    for (size_t u = 0; u < b.width; ++u) {
        const float first = b.at(0, u);
        bool constant = true;
        for (size_t v = 1; v < b.height && constant; ++v) {
            if (b.at(v, u) != first) constant = false;
        }
        if (constant) continue;
        double best = -1e300;
        size_t best_v = kRadius;
        for (size_t v = kRadius; v + kRadius < b.height; ++v) {
            double below = 0, above = 0;
            for (size_t r = 1; r <= kRadius; ++r) {
                below += b.at(v + r, u);
                above += b.at(v - r, u);
            }
            const double g = (below - above) / static_cast<double>(kRadius);
            if (g > best) {
                best = g;
                best_v = v;
            }
        }
        out.row[u] = static_cast<int>(best_v);
        out.valid[u] = 1;
    }
    return out;
}

// Drops candidates that violate the threshold against the nearest valid column
// on both sides (one-sided at the image edges). Marks are applied
// simultaneously so the outcome does not depend on scan direction.
inline void reject_outliers(RpeCandidates& cand, int threshold_px = 60) {
    const size_t w = cand.row.size();
    if (cand.valid_count() < 3) throw DataError("reject_outliers: fewer than 3 valid candidates");
    std::vector<long> left(w, -1), right(w, -1);
    long last = -1;
    for (size_t u = 0; u < w; ++u) {
        left[u] = last;
        if (cand.valid[u]) last = static_cast<long>(u);
    }
    last = -1;
    for (size_t u = w; u-- > 0;) {
        right[u] = last;
        if (cand.valid[u]) last = static_cast<long>(u);
    }
    std::vector<uint8_t> keep = cand.valid;
    for (size_t u = 0; u < w; ++u) {
        if (!cand.valid[u]) continue;
        const bool has_l = left[u] >= 0;
        const bool has_r = right[u] >= 0;
        const bool far_l = has_l && std::abs(cand.row[u] - cand.row[left[u]]) > threshold_px;
        const bool far_r = has_r && std::abs(cand.row[u] - cand.row[right[u]]) > threshold_px;
        if (has_l && has_r) {
            if (far_l && far_r) keep[u] = 0;
        } else if (has_l) {
            if (far_l) keep[u] = 0;
        } else if (has_r) {
            if (far_r) keep[u] = 0;
        }
    }
    cand.valid = std::move(keep);
    if (cand.valid_count() == 0) throw DataError("reject_outliers: all candidates rejected");
}

// Least-squares quadratic through (col,row) points; centered/scaled normal
// equations keep the 3x3 solve well conditioned.
inline QuadraticFit fit_quadratic(const std::vector<std::pair<double, double>>& points) {
    if (points.size() < 3) throw DataError("fit_quadratic: need at least 3 points");
    {
        std::vector<double> cols;
        for (const auto& p : points) cols.push_back(p.first);
        std::sort(cols.begin(), cols.end());
        cols.erase(std::unique(cols.begin(), cols.end()), cols.end());
        if (cols.size() < 3) throw DataError("fit_quadratic: need 3 distinct columns");
    }
    double mean_u = 0;
    for (const auto& p : points) mean_u += p.first;
    mean_u /= static_cast<double>(points.size());
    double span = 1.0;
    for (const auto& p : points) span = std::max(span, std::fabs(p.first - mean_u));

    // normal equations for row = A t^2 + B t + C with t = (u - mean)/span
    double s[5] = {0, 0, 0, 0, 0};  // sums of t^k
    double r0 = 0, r1 = 0, r2 = 0;  // sums of row * t^k
    for (const auto& p : points) {
        const double t = (p.first - mean_u) / span;
        double tk = 1.0;
        for (int k = 0; k <= 4; ++k) {
            s[k] += tk;
            if (k <= 2) {
                if (k == 0) r0 += p.second;
                if (k == 1) r1 += p.second * t;
                if (k == 2) r2 += p.second * t * t;
            }
            tk *= t;
        }
    }
    double m[3][4] = {{s[4], s[3], s[2], r2}, {s[3], s[2], s[1], r1}, {s[2], s[1], s[0], r0}};
    // Gaussian elimination with partial pivoting
    for (int col = 0; col < 3; ++col) {
        int piv = col;
        for (int r = col + 1; r < 3; ++r)
            if (std::fabs(m[r][col]) > std::fabs(m[piv][col])) piv = r;
        if (std::fabs(m[piv][col]) < 1e-12) {
            throw DataError("fit_quadratic: rank-deficient design");
        }
        if (piv != col) std::swap(m[piv], m[col]);
        for (int r = 0; r < 3; ++r) {
            if (r == col) continue;
            const double f = m[r][col] / m[col][col];
            for (int c2 = col; c2 < 4; ++c2) m[r][c2] -= f * m[col][c2];
        }
    }
    const double A = m[0][3] / m[0][0];
    const double B = m[1][3] / m[1][1];
    const double C = m[2][3] / m[2][2];

    QuadraticFit fit;
    fit.curve.a = A / (span * span);
    fit.curve.b = B / span - 2.0 * A * mean_u / (span * span);
    fit.curve.c = A * mean_u * mean_u / (span * span) - B * mean_u / span + C;
    double ss = 0;
    for (const auto& p : points) {
        const double d = fit.curve.eval(p.first) - p.second;
        ss += d * d;
    }
    fit.residual_rms = std::sqrt(ss / static_cast<double>(points.size()));
    if (!std::isfinite(fit.curve.a) || !std::isfinite(fit.curve.b) || !std::isfinite(fit.curve.c)) {
        throw NumericError("fit_quadratic: non-finite coefficients");
    }
    return fit;
}

// Integer column shifts that place curve(u) on the central row; vacated pixels
// are zero-filled. Returns the shifted image and the per-column shifts.
inline std::pair<Image, std::vector<int>> flatten(const Image& b, const QuadraticCurve& curve) {
    const long center = static_cast<long>(b.height) / 2;
    Image out(b.height, b.width, 0.0f);
    std::vector<int> shifts(b.width, 0);
    for (size_t u = 0; u < b.width; ++u) {
        const long d = std::lround(static_cast<double>(center) - curve.eval(static_cast<double>(u)));
        if (std::labs(d) >= static_cast<long>(b.height)) {
            throw DataError("flatten: shift exceeds image height at column " + std::to_string(u));
        }
        shifts[u] = static_cast<int>(d);
        for (long v = 0; v < static_cast<long>(b.height); ++v) {
            const long src = v - d;
            if (src >= 0 && src < static_cast<long>(b.height)) {
                out.at(static_cast<size_t>(v), u) = b.at(static_cast<size_t>(src), u);
            }
        }
    }
    return {std::move(out), std::move(shifts)};
}

// Keeps rows [floor(H/8), floor(5H/8)); floor convention for heights not
// divisible by 8.
inline std::pair<Image, size_t> crop_band(const Image& b) {
    const size_t top = b.height / 8;
    const size_t bottom = (5 * b.height) / 8;
    Image out(bottom - top, b.width);
    for (size_t v = top; v < bottom; ++v)
        for (size_t u = 0; u < b.width; ++u) out.at(v - top, u) = b.at(v, u);
    return {std::move(out), top};
}

namespace detail {

inline std::vector<double> gaussian_kernel(double sigma) {
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(2 * radius + 1);
    double total = 0;
    for (int i = -radius; i <= radius; ++i) {
        const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
        k[i + radius] = v;
        total += v;
    }
    for (auto& v : k) v /= total;
    return k;
}

// index reflection with edge duplication: -1 -> 0, n -> n-1
inline size_t reflect(long i, long n) {
    while (i < 0 || i >= n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - i - 1;
    }
    return static_cast<size_t>(i);
}

}  // namespace detail

inline Image gaussian_smooth(const Image& b, double sigma) {
    if (sigma < 0) throw ConfigError("gaussian_smooth: sigma must be non-negative");
    if (sigma == 0.0) return b;
    const auto k = detail::gaussian_kernel(sigma);
    const int radius = static_cast<int>(k.size() / 2);
    Image tmp(b.height, b.width);
    for (size_t y = 0; y < b.height; ++y)
        for (size_t x = 0; x < b.width; ++x) {
            double acc = 0;
            for (int i = -radius; i <= radius; ++i) {
                acc += k[i + radius] *
                       b.at(y, detail::reflect(static_cast<long>(x) + i, static_cast<long>(b.width)));
            }
            tmp.at(y, x) = static_cast<float>(acc);
        }
    Image out(b.height, b.width);
    for (size_t y = 0; y < b.height; ++y)
        for (size_t x = 0; x < b.width; ++x) {
            double acc = 0;
            for (int i = -radius; i <= radius; ++i) {
                acc += k[i + radius] *
                       tmp.at(detail::reflect(static_cast<long>(y) + i, static_cast<long>(b.height)), x);
            }
            out.at(y, x) = static_cast<float>(acc);
        }
    return out;
}

// Contrast-limited adaptive histogram equalization. 256 bins over [0,1],
// clip limit as a fraction of the tile pixel count, clipped mass spread
// uniformly (remainder into the lowest bins), bilinear blending of the four
// surrounding tile mappings. Fully deterministic.
inline Image clahe(const Image& b, size_t tile_rows, size_t tile_cols, double clip_fraction) {
    if (tile_rows == 0 || tile_cols == 0) throw ConfigError("clahe: tile counts must be positive");
    if (clip_fraction <= 0) throw ConfigError("clahe: clip limit must be positive");
    constexpr size_t kBins = 256;

    // pad to tile multiples by edge replication
    const size_t tile_h = (b.height + tile_rows - 1) / tile_rows;
    const size_t tile_w = (b.width + tile_cols - 1) / tile_cols;
    const size_t ph = tile_h * tile_rows, pw = tile_w * tile_cols;
    Image padded(ph, pw);
    for (size_t y = 0; y < ph; ++y)
        for (size_t x = 0; x < pw; ++x)
            padded.at(y, x) = b.at(std::min(y, b.height - 1), std::min(x, b.width - 1));

    auto bin_of = [](float v) {
        long bin = static_cast<long>(v * 256.0f);
        if (bin < 0) bin = 0;
        if (bin > 255) bin = 255;
        return static_cast<size_t>(bin);
    };

    const size_t tile_pixels = tile_h * tile_w;
    const long clip_limit = std::max<long>(1, static_cast<long>(clip_fraction * tile_pixels));
    std::vector<std::vector<float>> mapping(tile_rows * tile_cols,
                                            std::vector<float>(kBins, 0.0f));
    for (size_t tr = 0; tr < tile_rows; ++tr) {
        for (size_t tc = 0; tc < tile_cols; ++tc) {
            long hist[kBins] = {0};
            for (size_t y = tr * tile_h; y < (tr + 1) * tile_h; ++y)
                for (size_t x = tc * tile_w; x < (tc + 1) * tile_w; ++x)
                    ++hist[bin_of(padded.at(y, x))];
            long excess = 0;
            for (size_t i = 0; i < kBins; ++i) {
                if (hist[i] > clip_limit) {
                    excess += hist[i] - clip_limit;
                    hist[i] = clip_limit;
                }
            }
            const long share = excess / static_cast<long>(kBins);
            const long remainder = excess % static_cast<long>(kBins);
            for (size_t i = 0; i < kBins; ++i) hist[i] += share;
            for (long i = 0; i < remainder; ++i) ++hist[i];
            long cdf = 0;
            auto& map = mapping[tr * tile_cols + tc];
            for (size_t i = 0; i < kBins; ++i) {
                cdf += hist[i];
                map[i] = static_cast<float>(static_cast<double>(cdf) /
                                            static_cast<double>(tile_pixels));
            }
        }
    }

    Image out(b.height, b.width);
    for (size_t y = 0; y < b.height; ++y) {
        double ty = (static_cast<double>(y) + 0.5) / static_cast<double>(tile_h) - 0.5;
        ty = std::min(std::max(ty, 0.0), static_cast<double>(tile_rows - 1));
        const size_t t0 = static_cast<size_t>(ty);
        const size_t t1 = std::min(t0 + 1, tile_rows - 1);
        const double fy = ty - static_cast<double>(t0);
        for (size_t x = 0; x < b.width; ++x) {
            double tx = (static_cast<double>(x) + 0.5) / static_cast<double>(tile_w) - 0.5;
            tx = std::min(std::max(tx, 0.0), static_cast<double>(tile_cols - 1));
            const size_t s0 = static_cast<size_t>(tx);
            const size_t s1 = std::min(s0 + 1, tile_cols - 1);
            const double fx = tx - static_cast<double>(s0);
            const size_t bin = bin_of(b.at(y, x));
            const double v00 = mapping[t0 * tile_cols + s0][bin];
            const double v01 = mapping[t0 * tile_cols + s1][bin];
            const double v10 = mapping[t1 * tile_cols + s0][bin];
            const double v11 = mapping[t1 * tile_cols + s1][bin];
            const double v = (1 - fy) * ((1 - fx) * v00 + fx * v01) +
                             fy * ((1 - fx) * v10 + fx * v11);
            out.at(y, x) = static_cast<float>(std::min(std::max(v, 0.0), 1.0));
        }
    }
    return out;
}

// Full pipeline: detect -> reject -> fit -> flatten -> crop -> gaussian ->
// clahe -> resize. Optionally records the intermediate stages for debugging.
inline std::pair<Image, TransformRecord> preprocess_bscan(
    const Image& b, const PreprocessConfig& cfg,
    std::vector<std::pair<std::string, Image>>* stages = nullptr) {
    if (b.height < 16 || b.width < 16) throw DataError("preprocess_bscan: scan smaller than 16x16");

    auto cand = detect_rpe_candidates(b);
    if (cand.valid_count() < 3) throw DataError("preprocess_bscan: unusable scan (no RPE signal)");
    reject_outliers(cand, cfg.outlier_threshold_px);
    std::vector<std::pair<double, double>> points;
    for (size_t u = 0; u < cand.row.size(); ++u) {
        if (cand.valid[u]) points.emplace_back(static_cast<double>(u), static_cast<double>(cand.row[u]));
    }
    const QuadraticFit fit = fit_quadratic(points);

    auto [flat, shifts] = flatten(b, fit.curve);
    if (stages) stages->emplace_back("flatten", flat);
    auto [band, crop_top] = crop_band(flat);
    if (stages) stages->emplace_back("crop", band);
    Image smooth = gaussian_smooth(band, cfg.gaussian_sigma);
    if (stages) stages->emplace_back("gaussian", smooth);
    Image enhanced = clahe(smooth, cfg.clahe_tile_rows, cfg.clahe_tile_cols, cfg.clahe_clip);
    if (stages) stages->emplace_back("clahe", enhanced);
    Image resized = resize_bilinear(enhanced, cfg.target_height, cfg.target_width);
    if (stages) stages->emplace_back("resize", resized);

    TransformRecord rec;
    rec.column_shifts = std::move(shifts);
    rec.crop_top = static_cast<long>(crop_top);
    rec.resize_scale_rows =
        static_cast<double>(cfg.target_height) / static_cast<double>(band.height);
    rec.resize_scale_cols =
        static_cast<double>(cfg.target_width) / static_cast<double>(band.width);
    rec.original_height = b.height;
    rec.original_width = b.width;
    rec.processed_height = cfg.target_height;
    rec.processed_width = cfg.target_width;
    return {std::move(resized), std::move(rec)};
}

}  // namespace olseg
