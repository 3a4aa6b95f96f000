#pragma once

#include <cmath>

#include "olseg/tensor.hpp"

namespace olseg {

// ---------------------------------------------------------------------------
// Training losses: pixel-wise mask cross-entropy, column-wise boundary
// cross-entropy, smooth L1 on the structured surface output, and their
// weighted combination. Log terms are clamped at 1e-12.
// ---------------------------------------------------------------------------

struct LossWeights {
    double lambda1 = 1.0;  // mask CE
    double lambda2 = 1.0;  // line CE
    double lambda3 = 1.0;  // line smooth-L1
};

// Supervision for one sample in network (processed) coordinates.
struct SliceTruth {
    size_t height = 0, width = 0, n_surfaces = 0, n_classes = 0;
    std::vector<int> class_map;         // height*width, -1 = ignore
    std::vector<double> boundary_rows;  // n_surfaces*width
    std::vector<uint8_t> boundary_valid;
};

inline constexpr double kLogClamp = 1e-12;

// Smooth L1: 0.5 d^2 for |d| < 1, |d| - 0.5 otherwise. C1 at |d| = 1.
inline double smooth_l1(double d) {
    const double a = std::fabs(d);
    return a < 1.0 ? 0.5 * d * d : a - 0.5;
}

// -(1/N) sum over non-ignored pixels of log p[true class]; N counts the
// non-ignored pixels (equals H*W when nothing is ignored).
template <typename S>
Tensor<S> mask_ce(const Tensor<S>& mask_probs, const SliceTruth& gt) {
    if (mask_probs.rank() != 3 || mask_probs.dim(0) != gt.height ||
        mask_probs.dim(1) != gt.width || mask_probs.dim(2) != gt.n_classes) {
        throw ShapeError("mask_ce: prediction shape mismatch");
    }
    const size_t C = gt.n_classes;
    const auto& pv = mask_probs.values();
    double total = 0;
    size_t count = 0;
    for (size_t px = 0; px < gt.height * gt.width; ++px) {
        const int cls = gt.class_map[px];
        if (cls < 0) continue;
        if (cls >= static_cast<int>(C)) throw DataError("mask_ce: class id out of range");
        total -= std::log(std::max(static_cast<double>(pv[px * C + cls]), kLogClamp));
        ++count;
    }
    if (count == 0) throw DataError("mask_ce: no labeled pixels");
    const double value = total / static_cast<double>(count);
    auto pp = mask_probs.node();
    auto cls_map = gt.class_map;
    return detail::make_result<S>(
        {1}, {static_cast<S>(value)}, {pp}, [pp, cls_map, C, count](TensorNode<S>& n) {
            if (!pp->requires_grad) return;
            pp->ensure_grad();
            const S g = n.grad[0] / static_cast<S>(count);
            for (size_t px = 0; px < cls_map.size(); ++px) {
                const int cls = cls_map[px];
                if (cls < 0) continue;
                const double p = std::max(
                    static_cast<double>(pp->value[px * C + static_cast<size_t>(cls)]), kLogClamp);
                pp->grad[px * C + static_cast<size_t>(cls)] -= g / static_cast<S>(p);
            }
        });
}

// Per-surface mean over valid columns of -log p[rasterized row], averaged over
// the surfaces that have any valid column. Rows rasterize to the nearest
// integer row, clamped into the image.
template <typename S>
Tensor<S> line_ce(const Tensor<S>& surface_probs, const SliceTruth& gt) {
    if (surface_probs.rank() != 3 || surface_probs.dim(0) != gt.height ||
        surface_probs.dim(1) != gt.width || surface_probs.dim(2) != gt.n_surfaces) {
        throw ShapeError("line_ce: prediction shape mismatch");
    }
    const size_t H = gt.height, W = gt.width, NS = gt.n_surfaces;
    const auto& pv = surface_probs.values();
    std::vector<size_t> target_rows(NS * W, 0);
    std::vector<size_t> valid_per_surface(NS, 0);
    double total = 0;
    size_t used_surfaces = 0;
    std::vector<double> surf_loss(NS, 0.0);
    for (size_t s = 0; s < NS; ++s) {
        for (size_t u = 0; u < W; ++u) {
            if (!gt.boundary_valid[s * W + u]) continue;
            long r = std::lround(gt.boundary_rows[s * W + u]);
            r = std::max<long>(0, std::min<long>(r, static_cast<long>(H) - 1));
            target_rows[s * W + u] = static_cast<size_t>(r);
            ++valid_per_surface[s];
            const double p = std::max(
                static_cast<double>(pv[(static_cast<size_t>(r) * W + u) * NS + s]), kLogClamp);
            surf_loss[s] -= std::log(p);
        }
        if (valid_per_surface[s] > 0) {
            total += surf_loss[s] / static_cast<double>(valid_per_surface[s]);
            ++used_surfaces;
        }
    }
    if (used_surfaces == 0) throw DataError("line_ce: no valid columns on any surface");
    const double value = total / static_cast<double>(used_surfaces);
    auto pp = surface_probs.node();
    auto valid = gt.boundary_valid;
    return detail::make_result<S>(
        {1}, {static_cast<S>(value)}, {pp},
        [pp, target_rows, valid, valid_per_surface, used_surfaces, H, W, NS](TensorNode<S>& n) {
            if (!pp->requires_grad) return;
            pp->ensure_grad();
            for (size_t s = 0; s < NS; ++s) {
                if (valid_per_surface[s] == 0) continue;
                const S g = n.grad[0] / static_cast<S>(used_surfaces * valid_per_surface[s]);
                for (size_t u = 0; u < W; ++u) {
                    if (!valid[s * W + u]) continue;
                    const size_t idx = (target_rows[s * W + u] * W + u) * NS + s;
                    const double p = std::max(static_cast<double>(pp->value[idx]), kLogClamp);
                    pp->grad[idx] -= g / static_cast<S>(p);
                }
            }
        });
}

// Per-surface mean smooth-L1 between predicted and true surface rows over
// valid columns, averaged over surfaces with any valid column.
template <typename S>
Tensor<S> line_l1(const Tensor<S>& surfaces, const SliceTruth& gt) {
    if (surfaces.rank() != 2 || surfaces.dim(0) != gt.n_surfaces || surfaces.dim(1) != gt.width) {
        throw ShapeError("line_l1: prediction shape mismatch");
    }
    const size_t W = gt.width, NS = gt.n_surfaces;
    const auto& sv = surfaces.values();
    if (!all_finite(sv)) throw NumericError("line_l1: non-finite surface positions");
    std::vector<size_t> valid_per_surface(NS, 0);
    double total = 0;
    size_t used_surfaces = 0;
    for (size_t s = 0; s < NS; ++s) {
        double acc = 0;
        for (size_t u = 0; u < W; ++u) {
            if (!gt.boundary_valid[s * W + u]) continue;
            ++valid_per_surface[s];
            acc += smooth_l1(static_cast<double>(sv[s * W + u]) - gt.boundary_rows[s * W + u]);
        }
        if (valid_per_surface[s] > 0) {
            total += acc / static_cast<double>(valid_per_surface[s]);
            ++used_surfaces;
        }
    }
    if (used_surfaces == 0) throw DataError("line_l1: no valid columns on any surface");
    const double value = total / static_cast<double>(used_surfaces);
    auto pp = surfaces.node();
    auto rows = gt.boundary_rows;
    auto valid = gt.boundary_valid;
    return detail::make_result<S>(
        {1}, {static_cast<S>(value)}, {pp},
        [pp, rows, valid, valid_per_surface, used_surfaces, W, NS](TensorNode<S>& n) {
            if (!pp->requires_grad) return;
            pp->ensure_grad();
            for (size_t s = 0; s < NS; ++s) {
                if (valid_per_surface[s] == 0) continue;
                const S g = n.grad[0] / static_cast<S>(used_surfaces * valid_per_surface[s]);
                for (size_t u = 0; u < W; ++u) {
                    if (!valid[s * W + u]) continue;
                    const double d = static_cast<double>(pp->value[s * W + u]) - rows[s * W + u];
                    const double slope = std::fabs(d) < 1.0 ? d : (d > 0 ? 1.0 : -1.0);
                    pp->grad[s * W + u] += g * static_cast<S>(slope);
                }
            }
        });
}

// lambda1 * mask CE + lambda2 * line CE + lambda3 * line L1.
template <typename S>
Tensor<S> total_loss(const Tensor<S>& mask_term, const Tensor<S>& line_ce_term,
                     const Tensor<S>& line_l1_term, const LossWeights& w) {
    for (const Tensor<S>* t : {&mask_term, &line_ce_term, &line_l1_term}) {
        if (t->numel() != 1) throw ShapeError("total_loss: terms must be scalars");
        if (!std::isfinite(static_cast<double>(t->item()))) {
            throw NumericError("total_loss: non-finite loss term");
        }
    }
    auto out = scale(mask_term, static_cast<S>(w.lambda1));
    out = add(out, scale(line_ce_term, static_cast<S>(w.lambda2)));
    out = add(out, scale(line_l1_term, static_cast<S>(w.lambda3)));
    return out;
}

}  // namespace olseg
