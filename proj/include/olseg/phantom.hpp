#pragma once

#include <array>
#include <cmath>

#include "olseg/data_io.hpp"
#include "olseg/rng.hpp"

namespace olseg {

// ---------------------------------------------------------------------------
// Synthetic OCT volumes with exactly known layer boundaries: piecewise-constant
// layer intensities, shared quadratic curvature, band-limited per-surface
// undulation over the (column, slice) grid, multiplicative gamma speckle and
// vessel shadows. Deterministic per seed.
// ---------------------------------------------------------------------------

struct PhantomConfig {
    uint64_t seed = 1;
    size_t slices = 16, height = 128, width = 128;
    // region means: vitreous, RNFL, GCL+IPL, INL+OPL, ONL, RPE band and below.
    // The RPE band must stay the brightest and the ONL the darkest region.
    std::array<double, 6> region_intensity = {0.05, 0.45, 0.32, 0.40, 0.10, 0.95};
    double curvature_amplitude = 6.0;   // px bow of all surfaces across the width
    double undulation_amplitude = 1.5;  // px std of surface perturbations
    double undulation_col_sigma = 10.0;
    double undulation_slice_sigma = 1.5;
    double speckle_contrast = 0.18;  // std/mean of unit-mean gamma speckle; 0 disables
    int shadow_count = 2;
    double shadow_width = 5.0;
    double shadow_attenuation = 0.55;  // multiplier in (0,1]
    double rpe_row_frac = 0.56;        // base row of the ONL-IS surface
    // layer thickness between consecutive surfaces, top to bottom, as height
    // fractions: RNFL, GCL+IPL, INL+OPL, ONL
    std::array<double, 4> layer_gap_frac = {0.055, 0.07, 0.07, 0.10};
};

namespace detail {

// separable Gaussian smoothing of an (slices x width) grid, reflecting edges
inline void smooth_grid(std::vector<double>& g, size_t s, size_t w, double sigma_col,
                        double sigma_slice) {
    auto blur_axis = [](std::vector<double>& data, size_t outer, size_t len, size_t stride,
                        size_t outer_stride, double sigma) {
        if (sigma <= 0) return;
        const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
        std::vector<double> k(2 * radius + 1);
        double total = 0;
        for (int i = -radius; i <= radius; ++i) {
            k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
            total += k[i + radius];
        }
        for (auto& v : k) v /= total;
        std::vector<double> line(len);
        for (size_t o = 0; o < outer; ++o) {
            for (size_t i = 0; i < len; ++i) line[i] = data[o * outer_stride + i * stride];
            for (size_t i = 0; i < len; ++i) {
                double acc = 0;
                for (int d = -radius; d <= radius; ++d) {
                    long j = static_cast<long>(i) + d;
                    while (j < 0 || j >= static_cast<long>(len)) {
                        if (j < 0) j = -j - 1;
                        if (j >= static_cast<long>(len)) j = 2 * static_cast<long>(len) - j - 1;
                    }
                    acc += k[d + radius] * line[static_cast<size_t>(j)];
                }
                data[o * outer_stride + i * stride] = acc;
            }
        }
    };
    blur_axis(g, s, w, 1, w, sigma_col);      // along columns
    blur_axis(g, w, s, w, 1, sigma_slice);    // along slices
}

}  // namespace detail

// Generates the volume and its exact boundary truth. Throws if the configured
// geometry cannot keep the five surfaces strictly ordered and in bounds.
inline std::pair<Volume, BoundarySet> generate_phantom(const PhantomConfig& cfg) {
    if (cfg.slices < 1 || cfg.height < 16 || cfg.width < 16) {
        throw ConfigError("generate_phantom: dims must be at least 16");
    }
    for (double v : cfg.region_intensity) {
        if (v < 0 || v > 1) throw ConfigError("generate_phantom: intensities must lie in [0,1]");
    }
    if (cfg.shadow_attenuation <= 0 || cfg.shadow_attenuation > 1) {
        throw ConfigError("generate_phantom: shadow attenuation must lie in (0,1]");
    }
    const size_t S = cfg.slices, H = cfg.height, W = cfg.width;

    Rng rng(cfg.seed);

    // Surface geometry: the ONL-IS surface anchors at rpe_row_frac with a
    // shared quadratic bow plus smoothed noise; the surfaces above follow at
    // the configured gaps perturbed by their own smoothed noise, clamped to a
    // minimum thickness so ordering holds by construction.
    const double half_w = static_cast<double>(W) / 2.0;
    constexpr double kMinGapPx = 1.0;
    std::array<std::vector<double>, 5> undulation;
    for (auto& grid : undulation) {
        grid.resize(S * W);
        for (auto& v : grid) v = rng.normal();
        detail::smooth_grid(grid, S, W, cfg.undulation_col_sigma, cfg.undulation_slice_sigma);
        // rescale to the requested amplitude
        double m = 0, m2 = 0;
        for (double v : grid) {
            m += v;
            m2 += v * v;
        }
        m /= static_cast<double>(grid.size());
        m2 /= static_cast<double>(grid.size());
        const double sd = std::sqrt(std::max(m2 - m * m, 1e-12));
        for (auto& v : grid) v = (v - m) / sd * cfg.undulation_amplitude;
    }

    std::array<double, 5> base{};
    base[4] = cfg.rpe_row_frac * static_cast<double>(H);
    for (int k = 3; k >= 0; --k) {
        base[k] = base[k + 1] - cfg.layer_gap_frac[static_cast<size_t>(k)] * static_cast<double>(H);
    }

    BoundarySet truth(S, 5, W);
    for (size_t j = 0; j < S; ++j) {
        for (size_t u = 0; u < W; ++u) {
            const double t = (static_cast<double>(u) - half_w) / half_w;
            const double bow = cfg.curvature_amplitude * t * t;
            // per-surface targets, then a top-down repair that keeps at least
            // the minimum gap; each surface deviates from its target by at
            // most what its neighbors force
            double above = 1e300;
            for (int k = 4; k >= 0; --k) {
                const double target =
                    base[static_cast<size_t>(k)] + bow + undulation[static_cast<size_t>(k)][j * W + u];
                const double row = std::min(target, above - kMinGapPx);
                truth.set(j, static_cast<size_t>(k), u, row, true);
                above = row;
            }
            if (truth.row(j, 0, u) < 1.0 || truth.row(j, 4, u) > static_cast<double>(H) - 2.0) {
                throw DataError(
                    "generate_phantom: infeasible layer thickness (surfaces leave the image)");
            }
        }
    }

    // Rendering. Per-slice derived seeds keep slices independent and the whole
    // volume reproducible.
    Volume vol(S, H, W);
    vol.row_spacing_um = 6000.0 / static_cast<double>(H);
    vol.col_spacing_um = 6000.0 / static_cast<double>(W);
    vol.slice_spacing_um = 6000.0 / static_cast<double>(S);
    const double contrast = cfg.speckle_contrast;
    const double gamma_shape = contrast > 0 ? 1.0 / (contrast * contrast) : 0.0;
    for (size_t j = 0; j < S; ++j) {
        Rng srng(Rng::derive_seed(cfg.seed, j));
        // vessel shadows: center column, width, strength
        std::vector<std::pair<double, double>> shadows;  // (center, width)
        for (int i = 0; i < cfg.shadow_count; ++i) {
            shadows.emplace_back(srng.uniform(0.0, static_cast<double>(W)),
                                 std::max(1.0, cfg.shadow_width * srng.uniform(0.6, 1.4)));
        }
        for (size_t u = 0; u < W; ++u) {
            double shade = 1.0;
            for (const auto& [center, width] : shadows) {
                const double d = (static_cast<double>(u) - center) / width;
                shade *= 1.0 - (1.0 - cfg.shadow_attenuation) * std::exp(-0.5 * d * d);
            }
            const double ilm = truth.row(j, 0, u);
            for (size_t v = 0; v < H; ++v) {
                int region = 5;
                for (size_t k = 0; k < 5; ++k) {
                    if (static_cast<double>(v) < truth.row(j, k, u)) {
                        region = static_cast<int>(k);
                        break;
                    }
                }
                double val = cfg.region_intensity[static_cast<size_t>(region)];
                if (contrast > 0) {
                    val *= srng.gamma(gamma_shape) / gamma_shape;  // unit-mean speckle
                }
                if (static_cast<double>(v) >= ilm) val *= shade;
                vol.at(j, v, u) = static_cast<float>(std::min(std::max(val, 0.0), 1.0));
            }
        }
    }
    return {std::move(vol), std::move(truth)};
}

// Strong localized corruption of exactly one slice: rectangular patches of
// flat noise or saturated speckle. severity in [0,1] scales patch count and
// size; at full severity the slice loses most of its correlation with the
// clean version. The fixture degrades layer-boundary evidence, so patches
// avoid the band around the bright flattening anchor (protected_lo/hi as row
// fractions, defaults matching the phantom geometry): clinical speckle and
// shadows rarely erase the RPE, and corrupting it would test the flattening
// fit instead of the segmentation network.
inline Volume corrupt_slice(const Volume& vol, size_t slice_index, double severity,
                            uint64_t seed, double protected_lo = 0.50,
                            double protected_hi = 0.67) {
    if (slice_index >= vol.slices) throw DataError("corrupt_slice: slice index out of range");
    if (severity < 0 || severity > 1) throw ConfigError("corrupt_slice: severity must lie in [0,1]");
    Volume out = vol;
    if (severity == 0.0) return out;
    Rng rng(Rng::derive_seed(seed, slice_index));
    // cubic ramp keeps moderate severities localized; near full severity the
    // patches multiply and grow until the slice is essentially shredded
    const double ramp = severity * severity * severity;
    const double shred = std::max(0.0, (severity - 0.85) / 0.15);
    const int patches = static_cast<int>(std::lround(2.0 + 13.0 * ramp + 26.0 * shred));
    const double replace_prob = std::min(1.0, 0.6 + 0.4 * ramp);
    const size_t H = vol.height, W = vol.width;
    const size_t band_lo = static_cast<size_t>(protected_lo * static_cast<double>(H));
    const size_t band_hi = std::min(H, static_cast<size_t>(protected_hi * static_cast<double>(H)));
    for (int i = 0; i < patches; ++i) {
        const double fh = rng.uniform(0.10, 0.10 + 0.35 * ramp + 0.25 * shred);
        const double fw = rng.uniform(0.25, 0.25 + 0.55 * ramp + 0.30 * shred);
        size_t ph = std::min(H / 2, std::max<size_t>(2, static_cast<size_t>(fh * static_cast<double>(H))));
        const size_t pw = std::min(W, std::max<size_t>(2, static_cast<size_t>(fw * static_cast<double>(W))));
        // place above or below the protected band, proportional to room
        const size_t room_above = band_lo > ph ? band_lo - ph : 0;
        const size_t room_below = (band_hi + ph < H) ? H - band_hi - ph : 0;
        size_t y0 = 0;
        if (room_above + room_below == 0) {
            ph = std::min(ph, std::max<size_t>(2, band_lo));
            y0 = 0;
        } else if (rng.below(room_above + room_below) < room_above) {
            y0 = rng.below(room_above + 1);
        } else {
            y0 = band_hi + rng.below(room_below + 1);
        }
        const size_t x0 = rng.below(W - pw + 1);
        const bool replace = rng.uniform() < replace_prob;
        for (size_t y = y0; y < std::min(H, y0 + ph); ++y)
            for (size_t x = x0; x < x0 + pw; ++x) {
                float& px = out.at(slice_index, y, x);
                const double noise = rng.uniform();
                // replace with flat noise, or saturate with multiplicative speckle
                const double v = replace ? noise : px * 2.0 * noise;
                px = static_cast<float>(std::min(std::max(v, 0.0), 1.0));
            }
    }
    return out;
}

}  // namespace olseg
