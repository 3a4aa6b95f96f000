#pragma once

#include "olseg/nn_ops.hpp"

namespace olseg {

// ---------------------------------------------------------------------------
// Cross-slice feature fusion: per-pixel softmax weights over the n slices,
// predicted by a 1x1 convolution of the channel-stacked per-slice features,
// then a weighted sum with an unweighted mean residual:
//   F_fused = sum_i W_i (*) F_i + (1/n) sum_i F_i
// Zero-initialized parameters start at uniform weights, i.e. 2x mean fusion.
// ---------------------------------------------------------------------------

template <typename S>
struct CffParams {
    Tensor<S> weight;  // (1, 1, n*c, n)
    Tensor<S> bias;    // (n)
    bool use_bias = true;
};

template <typename S>
CffParams<S> make_cff_params(size_t n_slices, size_t channels, bool use_bias = true,
                             bool requires_grad = true) {
    CffParams<S> p;
    p.weight = Tensor<S>::zeros({1, 1, n_slices * channels, n_slices}, requires_grad);
    p.bias = Tensor<S>::zeros({n_slices}, requires_grad);
    p.use_bias = use_bias;
    return p;
}

template <typename S>
void check_cff_stack(const std::vector<Tensor<S>>& features) {
    if (features.size() < 3 || features.size() % 2 == 0) {
        throw ShapeError("cff: slice count must be an odd integer >= 3, got " +
                         std::to_string(features.size()));
    }
    const auto& shape = features[0].shape();
    for (const auto& f : features) {
        if (f.rank() != 3 || f.shape() != shape) {
            throw ShapeError("cff: all slice feature maps must share one (h,w,c) shape");
        }
    }
}

// Eq.-style weight volume: 1x1 conv of the stacked features, softmax across
// the n slice channels at every pixel. Entries are positive and sum to 1.
template <typename S>
Tensor<S> compute_weights(const std::vector<Tensor<S>>& features, const CffParams<S>& p) {
    check_cff_stack(features);
    const size_t n = features.size();
    const size_t c = features[0].dim(2);
    if (p.weight.rank() != 4 || p.weight.dim(0) != 1 || p.weight.dim(1) != 1 ||
        p.weight.dim(2) != n * c || p.weight.dim(3) != n) {
        throw ShapeError("cff: weight kernel must be (1,1,n*c,n), got " +
                         shape_str(p.weight.shape()));
    }
    Tensor<S> stacked = concat_channels(features);
    Tensor<S> logits = conv2d(stacked, p.weight, Padding::kSame);
    if (p.use_bias) {
        if (p.bias.numel() != n) throw ShapeError("cff: bias must have n entries");
        logits = add_channel_bias(logits, p.bias);
    }
    return softmax(logits, 2);
}

// Pixel-wise weighted sum plus the mean residual; `weights` must be normalized.
template <typename S>
Tensor<S> fuse(const std::vector<Tensor<S>>& features, const Tensor<S>& weights) {
    check_cff_stack(features);
    return weighted_slice_sum(features, weights);
}

template <typename S>
Tensor<S> cff_forward(const std::vector<Tensor<S>>& features, const CffParams<S>& p) {
    return fuse(features, compute_weights(features, p));
}

}  // namespace olseg
