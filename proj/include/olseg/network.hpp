#pragma once

#include <string>
#include <vector>

#include "olseg/cff.hpp"
#include "olseg/nn_ops.hpp"
#include "olseg/rng.hpp"

namespace olseg {

// ---------------------------------------------------------------------------
// Residual encoder-decoder with a shared per-slice encoder, CFF modules in
// place of the skip connections, and two heads on the final decoder feature
// map: conv-m (pixel-wise class probabilities) and conv-s (column-wise surface
// positions via soft-argmax and an ordering guarantee).
// ---------------------------------------------------------------------------

struct ModelConfig {
    size_t levels = 4;
    size_t base_channels = 32;
    size_t n_slices = 3;
    size_t n_surfaces = 5;
    size_t input_height = 512;
    size_t input_width = 512;
    bool cff_bottleneck = false;
    bool cff_bias = true;
    bool plain_skip = false;  // ablation baseline: ordinary skip connections, no CFF

    size_t n_classes() const { return n_surfaces + 1; }
    size_t channels_at(size_t level) const { return base_channels << level; }

    void validate() const {
        if (levels < 2) throw ConfigError("model: levels must be >= 2");
        if (base_channels < 1) throw ConfigError("model: base_channels must be >= 1");
        if (n_slices % 2 == 0) throw ConfigError("model: n_slices must be odd");
        if (n_surfaces < 1) throw ConfigError("model: n_surfaces must be >= 1");
        const size_t div = size_t(1) << levels;
        if (input_height % div != 0 || input_width % div != 0) {
            throw ConfigError("model: input size must be divisible by 2^levels");
        }
    }
};

template <typename S>
struct ConvBlock {
    Tensor<S> kernel;       // (3,3,cin,cout)
    Tensor<S> gamma, beta;  // (cout)
    Tensor<S> slope;        // (cout)
    BnStats<S> stats;
};

template <typename S>
struct ResBlock {
    ConvBlock<S> conv1, conv2;
    Tensor<S> shortcut;  // (1,1,cin,cout); undefined when cin == cout
};

template <typename S>
struct ModelParams {
    ModelConfig config;
    std::vector<ResBlock<S>> encoder;    // one per level
    std::vector<ResBlock<S>> decoder;    // levels-1, index k consumes level-k skips
    std::vector<CffParams<S>> cff;       // levels-1, plus one more when cff_bottleneck
    Tensor<S> mask_kernel, mask_bias;
    Tensor<S> surf_kernel, surf_bias;
};

template <typename S>
struct NetworkOutput {
    Tensor<S> mask_probs;     // (H, W, n_classes), channel softmax
    Tensor<S> surface_probs;  // (H, W, n_surfaces), column softmax over rows
    Tensor<S> surfaces;       // (n_surfaces, W) after the ordering guarantee
};

// Column-wise ordering guarantee: cumulative max over the surface axis.
// Identity on feasible inputs, idempotent, differentiable off ties.
template <typename S>
Tensor<S> topology_guarantee(const Tensor<S>& raw_surfaces) {
    return cummax_surfaces(raw_surfaces);
}

namespace detail {

template <typename S>
Tensor<S> he_normal(std::vector<size_t> shape, size_t fan_in, Rng& rng) {
    std::vector<S> vals(shape_numel(shape));
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : vals) v = static_cast<S>(rng.normal(0.0, stddev));
    return Tensor<S>::from_vector(std::move(shape), std::move(vals), /*requires_grad=*/true);
}

template <typename S>
ConvBlock<S> make_conv_block(size_t cin, size_t cout, Rng& rng) {
    ConvBlock<S> b;
    b.kernel = he_normal<S>({3, 3, cin, cout}, 9 * cin, rng);
    b.gamma = Tensor<S>::filled({cout}, S(1), true);
    b.beta = Tensor<S>::zeros({cout}, true);
    b.slope = Tensor<S>::filled({cout}, S(0.25), true);
    b.stats.running_mean.assign(cout, S(0));
    b.stats.running_var.assign(cout, S(1));
    b.stats.initialized = true;
    return b;
}

template <typename S>
ResBlock<S> make_res_block(size_t cin, size_t cout, Rng& rng) {
    ResBlock<S> b;
    b.conv1 = make_conv_block<S>(cin, cout, rng);
    b.conv2 = make_conv_block<S>(cout, cout, rng);
    if (cin != cout) b.shortcut = he_normal<S>({1, 1, cin, cout}, cin, rng);
    return b;
}

}  // namespace detail

template <typename S>
ModelParams<S> build_model(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    ModelParams<S> p;
    p.config = cfg;
    size_t cin = 1;
    for (size_t k = 0; k < cfg.levels; ++k) {
        const size_t cout = cfg.channels_at(k);
        p.encoder.push_back(detail::make_res_block<S>(cin, cout, rng));
        cin = cout;
    }
    for (size_t k = 0; k + 1 < cfg.levels; ++k) {
        const size_t c_skip = cfg.channels_at(k);
        const size_t c_deep = cfg.channels_at(k + 1);
        p.decoder.push_back(detail::make_res_block<S>(c_skip + c_deep, c_skip, rng));
    }
    if (!cfg.plain_skip) {
        const size_t n_cff = (cfg.levels - 1) + (cfg.cff_bottleneck ? 1 : 0);
        for (size_t k = 0; k < n_cff; ++k) {
            p.cff.push_back(make_cff_params<S>(cfg.n_slices, cfg.channels_at(k), cfg.cff_bias));
        }
    }
    const size_t c0 = cfg.base_channels;
    p.mask_kernel = detail::he_normal<S>({1, 1, c0, cfg.n_classes()}, c0, rng);
    p.mask_bias = Tensor<S>::zeros({cfg.n_classes()}, true);
    p.surf_kernel = detail::he_normal<S>({1, 1, c0, cfg.n_surfaces}, c0, rng);
    p.surf_bias = Tensor<S>::zeros({cfg.n_surfaces}, true);
    return p;
}

template <typename S>
Tensor<S> apply_res_block(ResBlock<S>& blk, const Tensor<S>& x, BnMode mode) {
    auto h = conv2d(x, blk.conv1.kernel, Padding::kSame);
    h = batch_norm(h, blk.conv1.gamma, blk.conv1.beta, S(1e-5), mode, &blk.conv1.stats);
    h = prelu(h, blk.conv1.slope);
    h = conv2d(h, blk.conv2.kernel, Padding::kSame);
    h = batch_norm(h, blk.conv2.gamma, blk.conv2.beta, S(1e-5), mode, &blk.conv2.stats);
    h = prelu(h, blk.conv2.slope);
    if (blk.shortcut.defined()) {
        return add(h, conv2d(x, blk.shortcut, Padding::kSame));
    }
    return add(h, x);
}

namespace detail {

// per-level encoder features for one slice (shared weights across slices)
template <typename S>
std::vector<Tensor<S>> encode(ModelParams<S>& p, const Tensor<S>& slice, BnMode mode) {
    std::vector<Tensor<S>> feats;
    Tensor<S> x = slice;
    for (size_t k = 0; k < p.config.levels; ++k) {
        x = apply_res_block(p.encoder[k], x, mode);
        feats.push_back(x);
        if (k + 1 < p.config.levels) x = maxpool2(x);
    }
    return feats;
}

template <typename S>
NetworkOutput<S> decode_and_heads(ModelParams<S>& p, Tensor<S> bottom,
                                  const std::vector<Tensor<S>>& skips, BnMode mode) {
    Tensor<S> d = std::move(bottom);
    for (size_t k = p.config.levels - 1; k-- > 0;) {
        d = upsample_bilinear2(d);
        d = concat_channels<S>({d, skips[k]});
        d = apply_res_block(p.decoder[k], d, mode);
    }
    NetworkOutput<S> out;
    auto mask_logits = add_channel_bias(conv2d(d, p.mask_kernel, Padding::kSame), p.mask_bias);
    out.mask_probs = softmax(mask_logits, 2);
    auto surf_logits = add_channel_bias(conv2d(d, p.surf_kernel, Padding::kSame), p.surf_bias);
    out.surface_probs = softmax(surf_logits, 0);  // per (column, surface) over rows
    out.surfaces = topology_guarantee(soft_argmax_columns(out.surface_probs));
    return out;
}

}  // namespace detail

// 2.5D forward pass: every slice runs through the same encoder weights, the
// per-level stacks are fused by CFF, the decoder predicts the center slice.
template <typename S>
NetworkOutput<S> forward(ModelParams<S>& p, const std::vector<Tensor<S>>& slices, BnMode mode) {
    const auto& cfg = p.config;
    if (cfg.plain_skip) {
        throw ConfigError("forward: plain-skip model has no CFF modules, use baseline_forward");
    }
    if (slices.size() != cfg.n_slices) {
        throw ShapeError("forward: expected " + std::to_string(cfg.n_slices) + " slices, got " +
                         std::to_string(slices.size()));
    }
    for (const auto& s : slices) {
        if (s.rank() != 3 || s.dim(0) != cfg.input_height || s.dim(1) != cfg.input_width ||
            s.dim(2) != 1) {
            throw ShapeError("forward: each slice must be (" + std::to_string(cfg.input_height) +
                             "," + std::to_string(cfg.input_width) + ",1)");
        }
    }
    std::vector<std::vector<Tensor<S>>> feats;  // [slice][level]
    feats.reserve(slices.size());
    for (const auto& s : slices) feats.push_back(detail::encode(p, s, mode));

    std::vector<Tensor<S>> fused(cfg.levels - 1);
    for (size_t k = 0; k + 1 < cfg.levels; ++k) {
        std::vector<Tensor<S>> stack;
        for (size_t i = 0; i < slices.size(); ++i) stack.push_back(feats[i][k]);
        fused[k] = cff_forward(stack, p.cff[k]);
    }
    Tensor<S> bottom;
    if (cfg.cff_bottleneck) {
        std::vector<Tensor<S>> stack;
        for (size_t i = 0; i < slices.size(); ++i) stack.push_back(feats[i][cfg.levels - 1]);
        bottom = cff_forward(stack, p.cff[cfg.levels - 1]);
    } else {
        bottom = feats[slices.size() / 2][cfg.levels - 1];
    }
    return detail::decode_and_heads(p, std::move(bottom), fused, mode);
}

// Plain-skip ablation baseline: one slice, skip connections pass the encoder
// features straight through. skip_scale exists so tests can reproduce the
// identical-slices fixed point of the CFF model (fused = 2 x feature).
template <typename S>
NetworkOutput<S> baseline_forward(ModelParams<S>& p, const Tensor<S>& center_slice, BnMode mode,
                                  S skip_scale = S(1)) {
    const auto& cfg = p.config;
    if (center_slice.rank() != 3 || center_slice.dim(0) != cfg.input_height ||
        center_slice.dim(1) != cfg.input_width || center_slice.dim(2) != 1) {
        throw ShapeError("baseline_forward: slice shape mismatch");
    }
    auto feats = detail::encode(p, center_slice, mode);
    std::vector<Tensor<S>> skips(cfg.levels - 1);
    for (size_t k = 0; k + 1 < cfg.levels; ++k) {
        skips[k] = (skip_scale == S(1)) ? feats[k] : scale(feats[k], skip_scale);
    }
    return detail::decode_and_heads(p, feats[cfg.levels - 1], skips, mode);
}

// ---------------------------------------------------------------------------
// Named parameter access (checkpointing, optimizer).
// ---------------------------------------------------------------------------

template <typename S>
std::vector<std::pair<std::string, Tensor<S>>> named_parameters(ModelParams<S>& p) {
    std::vector<std::pair<std::string, Tensor<S>>> out;
    auto add_block = [&out](const std::string& prefix, ResBlock<S>& b) {
        out.emplace_back(prefix + ".conv1.kernel", b.conv1.kernel);
        out.emplace_back(prefix + ".bn1.gamma", b.conv1.gamma);
        out.emplace_back(prefix + ".bn1.beta", b.conv1.beta);
        out.emplace_back(prefix + ".prelu1.slope", b.conv1.slope);
        out.emplace_back(prefix + ".conv2.kernel", b.conv2.kernel);
        out.emplace_back(prefix + ".bn2.gamma", b.conv2.gamma);
        out.emplace_back(prefix + ".bn2.beta", b.conv2.beta);
        out.emplace_back(prefix + ".prelu2.slope", b.conv2.slope);
        if (b.shortcut.defined()) out.emplace_back(prefix + ".shortcut.kernel", b.shortcut);
    };
    for (size_t k = 0; k < p.encoder.size(); ++k)
        add_block("enc.level" + std::to_string(k), p.encoder[k]);
    for (size_t k = 0; k < p.decoder.size(); ++k)
        add_block("dec.level" + std::to_string(k), p.decoder[k]);
    for (size_t k = 0; k < p.cff.size(); ++k) {
        out.emplace_back("cff.level" + std::to_string(k) + ".weight", p.cff[k].weight);
        out.emplace_back("cff.level" + std::to_string(k) + ".bias", p.cff[k].bias);
    }
    out.emplace_back("head.mask.kernel", p.mask_kernel);
    out.emplace_back("head.mask.bias", p.mask_bias);
    out.emplace_back("head.surf.kernel", p.surf_kernel);
    out.emplace_back("head.surf.bias", p.surf_bias);
    return out;
}

// Non-trainable state that must persist across save/load (BN running stats).
template <typename S>
std::vector<std::pair<std::string, std::vector<S>*>> named_buffers(ModelParams<S>& p) {
    std::vector<std::pair<std::string, std::vector<S>*>> out;
    auto add_block = [&out](const std::string& prefix, ResBlock<S>& b) {
        out.emplace_back(prefix + ".bn1.running_mean", &b.conv1.stats.running_mean);
        out.emplace_back(prefix + ".bn1.running_var", &b.conv1.stats.running_var);
        out.emplace_back(prefix + ".bn2.running_mean", &b.conv2.stats.running_mean);
        out.emplace_back(prefix + ".bn2.running_var", &b.conv2.stats.running_var);
    };
    for (size_t k = 0; k < p.encoder.size(); ++k)
        add_block("enc.level" + std::to_string(k), p.encoder[k]);
    for (size_t k = 0; k < p.decoder.size(); ++k)
        add_block("dec.level" + std::to_string(k), p.decoder[k]);
    return out;
}

template <typename S>
std::vector<Tensor<S>> trainable_parameters(ModelParams<S>& p) {
    std::vector<Tensor<S>> out;
    for (auto& [name, t] : named_parameters(p)) out.push_back(t);
    return out;
}

// Independent deep copy (fresh graph nodes, same values and running stats).
// Workers build their per-sample graphs on such copies so a batch can run in
// parallel; gradients merge back in sample order.
template <typename S>
ModelParams<S> clone_params(ModelParams<S>& p) {
    ModelParams<S> out;
    out.config = p.config;
    auto clone_block = [](const ResBlock<S>& b) {
        ResBlock<S> c;
        auto ct = [](const Tensor<S>& t) {
            auto copy = t.clone_detached();
            copy.set_requires_grad(true);
            return copy;
        };
        c.conv1.kernel = ct(b.conv1.kernel);
        c.conv1.gamma = ct(b.conv1.gamma);
        c.conv1.beta = ct(b.conv1.beta);
        c.conv1.slope = ct(b.conv1.slope);
        c.conv1.stats = b.conv1.stats;
        c.conv2.kernel = ct(b.conv2.kernel);
        c.conv2.gamma = ct(b.conv2.gamma);
        c.conv2.beta = ct(b.conv2.beta);
        c.conv2.slope = ct(b.conv2.slope);
        c.conv2.stats = b.conv2.stats;
        if (b.shortcut.defined()) c.shortcut = ct(b.shortcut);
        return c;
    };
    for (auto& b : p.encoder) out.encoder.push_back(clone_block(b));
    for (auto& b : p.decoder) out.decoder.push_back(clone_block(b));
    for (auto& c : p.cff) {
        CffParams<S> cc;
        cc.weight = c.weight.clone_detached();
        cc.weight.set_requires_grad(true);
        cc.bias = c.bias.clone_detached();
        cc.bias.set_requires_grad(true);
        cc.use_bias = c.use_bias;
        out.cff.push_back(std::move(cc));
    }
    auto ct = [](const Tensor<S>& t) {
        auto copy = t.clone_detached();
        copy.set_requires_grad(true);
        return copy;
    };
    out.mask_kernel = ct(p.mask_kernel);
    out.mask_bias = ct(p.mask_bias);
    out.surf_kernel = ct(p.surf_kernel);
    out.surf_bias = ct(p.surf_bias);
    return out;
}

template <typename S>
void zero_gradients(ModelParams<S>& p) {
    for (auto& [name, t] : named_parameters(p)) t.zero_grad();
}

// Closed-form trainable parameter count for a config (testing aid).
inline size_t parameter_count(const ModelConfig& cfg) {
    auto block = [](size_t cin, size_t cout) {
        size_t n = 9 * cin * cout + 9 * cout * cout;  // conv kernels
        n += 4 * cout;                                // gamma/beta x2
        n += 2 * cout;                                // prelu slopes x2
        if (cin != cout) n += cin * cout;             // 1x1 shortcut
        return n;
    };
    size_t total = 0;
    size_t cin = 1;
    for (size_t k = 0; k < cfg.levels; ++k) {
        total += block(cin, cfg.channels_at(k));
        cin = cfg.channels_at(k);
    }
    for (size_t k = 0; k + 1 < cfg.levels; ++k) {
        total += block(cfg.channels_at(k) + cfg.channels_at(k + 1), cfg.channels_at(k));
    }
    if (!cfg.plain_skip) {
        const size_t n_cff = (cfg.levels - 1) + (cfg.cff_bottleneck ? 1 : 0);
        for (size_t k = 0; k < n_cff; ++k) {
            total += cfg.n_slices * cfg.channels_at(k) * cfg.n_slices + cfg.n_slices;
        }
    }
    total += cfg.base_channels * cfg.n_classes() + cfg.n_classes();
    total += cfg.base_channels * cfg.n_surfaces + cfg.n_surfaces;
    return total;
}

}  // namespace olseg
