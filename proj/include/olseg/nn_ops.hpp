#pragma once

#include <cmath>
#include <cstdint>

#include "olseg/parallel.hpp"
#include "olseg/tensor.hpp"

namespace olseg {

enum class Padding { kSame, kValid };
enum class BnMode { kTrain, kEval };

template <typename S>
void check_finite(const Tensor<S>& t, const char* what) {
    if (!all_finite(t.values())) {
        throw NumericError(std::string(what) + ": non-finite values");
    }
}

// ---------------------------------------------------------------------------
// conv2d: input (h, w, c_in) * kernel (k, k, c_in, c_out), stride 1.
// Row-parallel; all writes are disjoint so the result is thread-count invariant.
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
void conv2d_forward_kernel(const S* in_p, const S* kern_p, S* out_p, size_t h_a, size_t w_a,
                           size_t cin_a, size_t cout_a, size_t k_a, long pad_a, size_t oh,
                           size_t ow_a) {
    constexpr size_t kAccMax = 512;
    parallel_for(oh, 8, [=](size_t y0, size_t y1) {
        const S* __restrict in = in_p;
        const S* __restrict kern = kern_p;
        S* __restrict out = out_p;
        const size_t h = h_a, w = w_a, cin = cin_a, cout = cout_a, k = k_a, ow = ow_a;
        const long pad = pad_a;
        S acc0[kAccMax], acc1[kAccMax];
        std::vector<S> big;
        S* __restrict a0 = acc0;
        S* __restrict a1 = acc1;
        if (cout > kAccMax) {
            big.resize(2 * cout);
            a0 = big.data();
            a1 = big.data() + cout;
        }
        auto one_pixel = [&](size_t y, size_t x) {
            for (size_t co = 0; co < cout; ++co) a0[co] = S(0);
            for (size_t ky = 0; ky < k; ++ky) {
                const long yi = static_cast<long>(y + ky) - pad;
                if (yi < 0 || yi >= static_cast<long>(h)) continue;
                for (size_t kx = 0; kx < k; ++kx) {
                    const long xi = static_cast<long>(x + kx) - pad;
                    if (xi < 0 || xi >= static_cast<long>(w)) continue;
                    const S* __restrict ipx = in + (static_cast<size_t>(yi) * w + xi) * cin;
                    const S* __restrict kbase = kern + ((ky * k + kx) * cin) * cout;
                    for (size_t ci = 0; ci < cin; ++ci) {
                        const S s = ipx[ci];
                        const S* __restrict kr = kbase + ci * cout;
                        for (size_t co = 0; co < cout; ++co) a0[co] += s * kr[co];
                    }
                }
            }
            S* __restrict dst = out + (y * ow + x) * cout;
            for (size_t co = 0; co < cout; ++co) dst[co] = a0[co];
        };
        // interior output columns see every kernel tap in bounds
        const long x_lo = pad;
        const long x_hi = static_cast<long>(ow) + pad - static_cast<long>(k) + 1;
        for (size_t y = y0; y < y1; ++y) {
            const bool y_interior = (static_cast<long>(y) - pad >= 0) &&
                                    (static_cast<long>(y + k) - 1 - pad < static_cast<long>(h));
            if (!y_interior || x_lo >= x_hi) {
                for (size_t x = 0; x < ow; ++x) one_pixel(y, x);
                continue;
            }
            size_t x = 0;
            for (; x < static_cast<size_t>(x_lo); ++x) one_pixel(y, x);
            // pairs of interior pixels share the kernel-row loads
            for (; x + 1 < static_cast<size_t>(x_hi); x += 2) {
                for (size_t co = 0; co < cout; ++co) {
                    a0[co] = S(0);
                    a1[co] = S(0);
                }
                for (size_t ky = 0; ky < k; ++ky) {
                    const size_t yi = y + ky - static_cast<size_t>(pad);
                    for (size_t kx = 0; kx < k; ++kx) {
                        const size_t xi = x + kx - static_cast<size_t>(pad);
                        const S* __restrict ipx0 = in + (yi * w + xi) * cin;
                        const S* __restrict ipx1 = ipx0 + cin;
                        const S* __restrict kbase = kern + ((ky * k + kx) * cin) * cout;
                        for (size_t ci = 0; ci < cin; ++ci) {
                            const S s0 = ipx0[ci];
                            const S s1 = ipx1[ci];
                            const S* __restrict kr = kbase + ci * cout;
                            for (size_t co = 0; co < cout; ++co) {
                                const S kv = kr[co];
                                a0[co] += s0 * kv;
                                a1[co] += s1 * kv;
                            }
                        }
                    }
                }
                S* __restrict dst = out + (y * ow + x) * cout;
                for (size_t co = 0; co < cout; ++co) dst[co] = a0[co];
                dst += cout;
                for (size_t co = 0; co < cout; ++co) dst[co] = a1[co];
            }
            for (; x < ow; ++x) one_pixel(y, x);
        }
    });
}

template <typename S>
void conv2d_backward_input(const S* __restrict dout, const S* __restrict kern, S* __restrict din,
                           size_t h, size_t w, size_t cin, size_t cout, size_t k, long pad,
                           size_t oh, size_t ow) {
    constexpr size_t kAccMax = 512;
    parallel_for(h, 8, [&](size_t y0, size_t y1) {
        S acc[kAccMax];
        std::vector<S> acc_big;
        S* accp = acc;
        if (cin > kAccMax) {
            acc_big.resize(cin);
            accp = acc_big.data();
        }
        for (size_t yi = y0; yi < y1; ++yi) {
            for (size_t xi = 0; xi < w; ++xi) {
                for (size_t ci = 0; ci < cin; ++ci) accp[ci] = S(0);
                for (size_t ky = 0; ky < k; ++ky) {
                    const long y = static_cast<long>(yi) - static_cast<long>(ky) + pad;
                    if (y < 0 || y >= static_cast<long>(oh)) continue;
                    for (size_t kx = 0; kx < k; ++kx) {
                        const long x = static_cast<long>(xi) - static_cast<long>(kx) + pad;
                        if (x < 0 || x >= static_cast<long>(ow)) continue;
                        const S* __restrict dopx =
                            dout + (static_cast<size_t>(y) * ow + x) * cout;
                        const S* __restrict kbase = kern + ((ky * k + kx) * cin) * cout;
                        for (size_t ci = 0; ci < cin; ++ci) {
                            const S* __restrict kr = kbase + ci * cout;
                            S acc2 = 0;
                            for (size_t co = 0; co < cout; ++co) acc2 += dopx[co] * kr[co];
                            accp[ci] += acc2;
                        }
                    }
                }
                S* __restrict dst = din + (yi * w + xi) * cin;
                for (size_t ci = 0; ci < cin; ++ci) dst[ci] += accp[ci];
            }
        }
    });
}

template <typename S>
void conv2d_backward_kernel(const S* __restrict in, const S* __restrict dout, S* __restrict dkern,
                            size_t h, size_t w, size_t cin, size_t cout, size_t k, long pad,
                            size_t oh, size_t ow) {
    const size_t ksize = k * k * cin * cout;
    const size_t grain = 16;
    const size_t chunks = (oh + grain - 1) / grain;
    std::vector<std::vector<S>> partials(chunks);
    ThreadPool::instance().run_chunks(oh, grain, [&](size_t chunk, size_t y0, size_t y1) {
        auto& partial = partials[chunk];
        partial.assign(ksize, S(0));
        for (size_t y = y0; y < y1; ++y) {
            for (size_t x = 0; x < ow; ++x) {
                const S* __restrict dopx = dout + (y * ow + x) * cout;
                for (size_t ky = 0; ky < k; ++ky) {
                    const long yi = static_cast<long>(y + ky) - pad;
                    if (yi < 0 || yi >= static_cast<long>(h)) continue;
                    for (size_t kx = 0; kx < k; ++kx) {
                        const long xi = static_cast<long>(x + kx) - pad;
                        if (xi < 0 || xi >= static_cast<long>(w)) continue;
                        const S* __restrict ipx = in + (static_cast<size_t>(yi) * w + xi) * cin;
                        S* __restrict kbase = partial.data() + ((ky * k + kx) * cin) * cout;
                        for (size_t ci = 0; ci < cin; ++ci) {
                            const S s = ipx[ci];
                            S* __restrict kr = kbase + ci * cout;
                            for (size_t co = 0; co < cout; ++co) kr[co] += s * dopx[co];
                        }
                    }
                }
            }
        }
    });
    // Fixed chunk order keeps the reduction deterministic.
    for (size_t c = 0; c < chunks; ++c) {
        const auto& partial = partials[c];
        for (size_t i = 0; i < ksize; ++i) dkern[i] += partial[i];
    }
}

}  // namespace detail

template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& kernel, Padding padding) {
    if (input.rank() != 3) throw ShapeError("conv2d: input must be (h,w,c), got " + shape_str(input.shape()));
    if (kernel.rank() != 4) throw ShapeError("conv2d: kernel must be (k,k,c_in,c_out), got " + shape_str(kernel.shape()));
    const size_t h = input.dim(0), w = input.dim(1), cin = input.dim(2);
    const size_t k = kernel.dim(0);
    if (kernel.dim(1) != k) throw ShapeError("conv2d: kernel must be square");
    if (k % 2 == 0) throw ShapeError("conv2d: kernel size must be odd");
    if (kernel.dim(2) != cin) {
        throw ShapeError("conv2d: kernel expects " + std::to_string(kernel.dim(2)) +
                         " input channels, input has " + std::to_string(cin));
    }
    const size_t cout = kernel.dim(3);
    const bool same = (padding == Padding::kSame);
    if (!same && (h < k || w < k)) throw ShapeError("conv2d: input smaller than kernel");
    const long pad = same ? static_cast<long>(k / 2) : 0;
    const size_t oh = same ? h : h - k + 1;
    const size_t ow = same ? w : w - k + 1;

    std::vector<S> out(oh * ow * cout, S(0));
    detail::conv2d_forward_kernel(input.values().data(), kernel.values().data(), out.data(), h, w,
                                  cin, cout, k, pad, oh, ow);
    auto pin = input.node(), pk = kernel.node();
    return detail::make_result<S>(
        {oh, ow, cout}, std::move(out), {pin, pk},
        [pin, pk, h, w, cin, cout, k, pad, oh, ow](TensorNode<S>& n) {
            if (pin->requires_grad) {
                pin->ensure_grad();
                detail::conv2d_backward_input(n.grad.data(), pk->value.data(), pin->grad.data(), h,
                                              w, cin, cout, k, pad, oh, ow);
            }
            if (pk->requires_grad) {
                pk->ensure_grad();
                detail::conv2d_backward_kernel(pin->value.data(), n.grad.data(), pk->grad.data(),
                                               h, w, cin, cout, k, pad, oh, ow);
            }
        });
}

// y(h,w,c) = x(h,w,c) + b(c)
template <typename S>
Tensor<S> add_channel_bias(const Tensor<S>& x, const Tensor<S>& bias) {
    if (x.rank() != 3) throw ShapeError("add_channel_bias: input must be rank 3");
    const size_t c = x.dim(2);
    if (bias.numel() != c) throw ShapeError("add_channel_bias: bias size mismatch");
    std::vector<S> out(x.numel());
    const auto& xv = x.values();
    const auto& bv = bias.values();
    const size_t px = x.numel() / c;
    for (size_t p = 0; p < px; ++p)
        for (size_t i = 0; i < c; ++i) out[p * c + i] = xv[p * c + i] + bv[i];
    auto pxn = x.node(), pb = bias.node();
    return detail::make_result<S>(x.shape(), std::move(out), {pxn, pb},
                                  [pxn, pb, c, px](TensorNode<S>& n) {
                                      if (pxn->requires_grad) {
                                          pxn->ensure_grad();
                                          for (size_t i = 0; i < n.grad.size(); ++i)
                                              pxn->grad[i] += n.grad[i];
                                      }
                                      if (pb->requires_grad) {
                                          pb->ensure_grad();
                                          for (size_t p = 0; p < px; ++p)
                                              for (size_t i = 0; i < c; ++i)
                                                  pb->grad[i] += n.grad[p * c + i];
                                      }
                                  });
}

// ---------------------------------------------------------------------------
// Batch normalization over the spatial positions of one sample, per channel.
// Running statistics (population variance) feed eval mode.
// ---------------------------------------------------------------------------

template <typename S>
struct BnStats {
    std::vector<S> running_mean;
    std::vector<S> running_var;
    bool initialized = false;
};

template <typename S>
Tensor<S> batch_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, S eps,
                     BnMode mode, BnStats<S>* stats = nullptr, S momentum = S(0.1)) {
    if (x.rank() != 3) throw ShapeError("batch_norm: input must be (h,w,c)");
    if (x.numel() == 0) throw ShapeError("batch_norm: empty input");
    if (eps <= 0) throw NumericError("batch_norm: eps must be positive");
    const size_t c = x.dim(2);
    if (gamma.numel() != c || beta.numel() != c) throw ShapeError("batch_norm: gamma/beta size mismatch");
    const size_t npx = x.numel() / c;

    std::vector<S> m(c, S(0)), v(c, S(0));
    const auto& xv = x.values();
    if (mode == BnMode::kTrain) {
        for (size_t p = 0; p < npx; ++p)
            for (size_t i = 0; i < c; ++i) m[i] += xv[p * c + i];
        for (size_t i = 0; i < c; ++i) m[i] /= static_cast<S>(npx);
        for (size_t p = 0; p < npx; ++p)
            for (size_t i = 0; i < c; ++i) {
                const S d = xv[p * c + i] - m[i];
                v[i] += d * d;
            }
        for (size_t i = 0; i < c; ++i) v[i] /= static_cast<S>(npx);
        if (stats) {
            if (!stats->initialized) {
                stats->running_mean = m;
                stats->running_var = v;
                stats->initialized = true;
            } else {
                for (size_t i = 0; i < c; ++i) {
                    stats->running_mean[i] = (S(1) - momentum) * stats->running_mean[i] + momentum * m[i];
                    stats->running_var[i] = (S(1) - momentum) * stats->running_var[i] + momentum * v[i];
                }
            }
        }
    } else {
        if (!stats || !stats->initialized) {
            throw NumericError("batch_norm: eval mode requires running statistics");
        }
        m = stats->running_mean;
        v = stats->running_var;
    }

    std::vector<S> inv_std(c);
    for (size_t i = 0; i < c; ++i) inv_std[i] = S(1) / std::sqrt(v[i] + eps);

    std::vector<S> out(x.numel());
    const auto& gv = gamma.values();
    const auto& bv = beta.values();
    for (size_t p = 0; p < npx; ++p)
        for (size_t i = 0; i < c; ++i)
            out[p * c + i] = gv[i] * (xv[p * c + i] - m[i]) * inv_std[i] + bv[i];

    auto px = x.node(), pg = gamma.node(), pb = beta.node();
    const bool train = (mode == BnMode::kTrain);
    return detail::make_result<S>(
        x.shape(), std::move(out), {px, pg, pb},
        [px, pg, pb, m, inv_std, c, npx, train](TensorNode<S>& n) {
            const auto& xv = px->value;
            const auto& gv = pg->value;
            // per-channel reductions of dy and dy*xhat
            std::vector<S> sum_dy(c, S(0)), sum_dy_xhat(c, S(0));
            for (size_t p = 0; p < npx; ++p)
                for (size_t i = 0; i < c; ++i) {
                    const S dy = n.grad[p * c + i];
                    const S xhat = (xv[p * c + i] - m[i]) * inv_std[i];
                    sum_dy[i] += dy;
                    sum_dy_xhat[i] += dy * xhat;
                }
            if (pg->requires_grad) {
                pg->ensure_grad();
                for (size_t i = 0; i < c; ++i) pg->grad[i] += sum_dy_xhat[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (size_t i = 0; i < c; ++i) pb->grad[i] += sum_dy[i];
            }
            if (px->requires_grad) {
                px->ensure_grad();
                const S inv_n = S(1) / static_cast<S>(npx);
                for (size_t p = 0; p < npx; ++p)
                    for (size_t i = 0; i < c; ++i) {
                        const S dy = n.grad[p * c + i];
                        if (train) {
                            const S xhat = (xv[p * c + i] - m[i]) * inv_std[i];
                            px->grad[p * c + i] +=
                                gv[i] * inv_std[i] *
                                (dy - inv_n * sum_dy[i] - xhat * inv_n * sum_dy_xhat[i]);
                        } else {
                            px->grad[p * c + i] += gv[i] * inv_std[i] * dy;
                        }
                    }
            }
        });
}

// y = x for x >= 0, slope_c * x otherwise; one learnable slope per channel.
template <typename S>
Tensor<S> prelu(const Tensor<S>& x, const Tensor<S>& slope) {
    if (x.rank() != 3) throw ShapeError("prelu: input must be (h,w,c)");
    const size_t c = x.dim(2);
    if (slope.numel() != c) throw ShapeError("prelu: slope count must equal channel count");
    std::vector<S> out(x.numel());
    const auto& xv = x.values();
    const auto& av = slope.values();
    const size_t npx = x.numel() / c;
    for (size_t p = 0; p < npx; ++p)
        for (size_t i = 0; i < c; ++i) {
            const S v = xv[p * c + i];
            out[p * c + i] = v >= 0 ? v : av[i] * v;
        }
    auto px = x.node(), pa = slope.node();
    return detail::make_result<S>(
        x.shape(), std::move(out), {px, pa}, [px, pa, c, npx](TensorNode<S>& n) {
            const auto& xv = px->value;
            const auto& av = pa->value;
            if (px->requires_grad) {
                px->ensure_grad();
                for (size_t p = 0; p < npx; ++p)
                    for (size_t i = 0; i < c; ++i) {
                        const S v = xv[p * c + i];
                        px->grad[p * c + i] += n.grad[p * c + i] * (v >= 0 ? S(1) : av[i]);
                    }
            }
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (size_t p = 0; p < npx; ++p)
                    for (size_t i = 0; i < c; ++i) {
                        const S v = xv[p * c + i];
                        if (v < 0) pa->grad[i] += n.grad[p * c + i] * v;
                    }
            }
        });
}

// 2x2 max pooling, stride 2. Ties resolve to the first element in scan order.
template <typename S>
Tensor<S> maxpool2(const Tensor<S>& x) {
    if (x.rank() != 3) throw ShapeError("maxpool2: input must be (h,w,c)");
    const size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
    if (h % 2 != 0 || w % 2 != 0) {
        throw ShapeError("maxpool2: dimensions must be even, got " + shape_str(x.shape()));
    }
    const size_t oh = h / 2, ow = w / 2;
    std::vector<S> out(oh * ow * c);
    std::vector<uint32_t> argmax(oh * ow * c);
    const auto& xv = x.values();
    for (size_t y = 0; y < oh; ++y)
        for (size_t xo = 0; xo < ow; ++xo)
            for (size_t i = 0; i < c; ++i) {
                S best = xv[((2 * y) * w + 2 * xo) * c + i];
                uint32_t bi = static_cast<uint32_t>(((2 * y) * w + 2 * xo) * c + i);
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx) {
                        const size_t idx = ((2 * y + dy) * w + 2 * xo + dx) * c + i;
                        if (xv[idx] > best) {
                            best = xv[idx];
                            bi = static_cast<uint32_t>(idx);
                        }
                    }
                out[(y * ow + xo) * c + i] = best;
                argmax[(y * ow + xo) * c + i] = bi;
            }
    auto px = x.node();
    return detail::make_result<S>({oh, ow, c}, std::move(out), {px},
                                  [px, argmax](TensorNode<S>& n) {
                                      if (!px->requires_grad) return;
                                      px->ensure_grad();
                                      for (size_t i = 0; i < n.grad.size(); ++i)
                                          px->grad[argmax[i]] += n.grad[i];
                                  });
}

namespace detail {

// Half-pixel-center source coordinates for 2x upsampling of an axis of size n.
inline void upsample2_weights(size_t n, std::vector<size_t>& i0, std::vector<size_t>& i1,
                              std::vector<double>& w1) {
    i0.resize(2 * n);
    i1.resize(2 * n);
    w1.resize(2 * n);
    for (size_t o = 0; o < 2 * n; ++o) {
        double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
        if (src < 0) src = 0;
        if (src > static_cast<double>(n - 1)) src = static_cast<double>(n - 1);
        const size_t lo = static_cast<size_t>(src);
        i0[o] = lo;
        i1[o] = std::min(lo + 1, n - 1);
        w1[o] = src - static_cast<double>(lo);
    }
}

}  // namespace detail

// 2x bilinear upsampling with half-pixel centers; constants and ramps survive.
template <typename S>
Tensor<S> upsample_bilinear2(const Tensor<S>& x) {
    if (x.rank() != 3) throw ShapeError("upsample_bilinear2: input must be (h,w,c)");
    const size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
    std::vector<size_t> ry0, ry1, cx0, cx1;
    std::vector<double> rwy, cwx;
    detail::upsample2_weights(h, ry0, ry1, rwy);
    detail::upsample2_weights(w, cx0, cx1, cwx);
    const size_t oh = 2 * h, ow = 2 * w;
    std::vector<S> out(oh * ow * c);
    const auto& xv = x.values();
    for (size_t yo = 0; yo < oh; ++yo) {
        const size_t ya = ry0[yo], yb = ry1[yo];
        const S wy = static_cast<S>(rwy[yo]);
        for (size_t xo = 0; xo < ow; ++xo) {
            const size_t xa = cx0[xo], xb = cx1[xo];
            const S wx = static_cast<S>(cwx[xo]);
            const S w00 = (S(1) - wy) * (S(1) - wx), w01 = (S(1) - wy) * wx;
            const S w10 = wy * (S(1) - wx), w11 = wy * wx;
            const S* p00 = &xv[(ya * w + xa) * c];
            const S* p01 = &xv[(ya * w + xb) * c];
            const S* p10 = &xv[(yb * w + xa) * c];
            const S* p11 = &xv[(yb * w + xb) * c];
            S* dst = &out[(yo * ow + xo) * c];
            for (size_t i = 0; i < c; ++i)
                dst[i] = w00 * p00[i] + w01 * p01[i] + w10 * p10[i] + w11 * p11[i];
        }
    }
    auto px = x.node();
    return detail::make_result<S>(
        {oh, ow, c}, std::move(out), {px},
        [px, ry0, ry1, rwy, cx0, cx1, cwx, h, w, c, oh, ow](TensorNode<S>& n) {
            if (!px->requires_grad) return;
            px->ensure_grad();
            for (size_t yo = 0; yo < oh; ++yo) {
                const size_t ya = ry0[yo], yb = ry1[yo];
                const S wy = static_cast<S>(rwy[yo]);
                for (size_t xo = 0; xo < ow; ++xo) {
                    const size_t xa = cx0[xo], xb = cx1[xo];
                    const S wx = static_cast<S>(cwx[xo]);
                    const S w00 = (S(1) - wy) * (S(1) - wx), w01 = (S(1) - wy) * wx;
                    const S w10 = wy * (S(1) - wx), w11 = wy * wx;
                    const S* g = &n.grad[(yo * ow + xo) * c];
                    for (size_t i = 0; i < c; ++i) {
                        px->grad[(ya * w + xa) * c + i] += w00 * g[i];
                        px->grad[(ya * w + xb) * c + i] += w01 * g[i];
                        px->grad[(yb * w + xa) * c + i] += w10 * g[i];
                        px->grad[(yb * w + xb) * c + i] += w11 * g[i];
                    }
                }
            }
        });
}

// Numerically stable softmax along one axis (max subtraction). The axis-0
// case runs as sequential row sweeps with a line of accumulators so the large
// column-softmax in the surface head stays cache-friendly.
template <typename S>
Tensor<S> softmax(const Tensor<S>& x, size_t axis) {
    if (axis >= x.rank()) throw ShapeError("softmax: axis out of range");
    const auto& shape = x.shape();
    const size_t len = shape[axis];
    size_t stride = 1;
    for (size_t i = axis + 1; i < shape.size(); ++i) stride *= shape[i];
    const size_t outer = x.numel() / (len * stride);
    std::vector<S> out(x.numel());
    const auto& xv = x.values();
    if (axis == 0) {
        std::vector<S> mx(stride), total(stride, S(0));
        for (size_t s = 0; s < stride; ++s) mx[s] = xv[s];
        for (size_t i = 1; i < len; ++i) {
            const S* row = xv.data() + i * stride;
            for (size_t s = 0; s < stride; ++s) mx[s] = std::max(mx[s], row[s]);
        }
        for (size_t i = 0; i < len; ++i) {
            const S* row = xv.data() + i * stride;
            S* orow = out.data() + i * stride;
            for (size_t s = 0; s < stride; ++s) {
                const S e = std::exp(row[s] - mx[s]);
                orow[s] = e;
                total[s] += e;
            }
        }
        for (size_t s = 0; s < stride; ++s) total[s] = S(1) / total[s];
        for (size_t i = 0; i < len; ++i) {
            S* orow = out.data() + i * stride;
            for (size_t s = 0; s < stride; ++s) orow[s] *= total[s];
        }
    } else {
        for (size_t o = 0; o < outer; ++o) {
            for (size_t s = 0; s < stride; ++s) {
                const size_t base = o * len * stride + s;
                S mx = xv[base];
                for (size_t i = 1; i < len; ++i) mx = std::max(mx, xv[base + i * stride]);
                S total = 0;
                for (size_t i = 0; i < len; ++i) {
                    const S e = std::exp(xv[base + i * stride] - mx);
                    out[base + i * stride] = e;
                    total += e;
                }
                const S inv = S(1) / total;
                for (size_t i = 0; i < len; ++i) out[base + i * stride] *= inv;
            }
        }
    }
    auto px = x.node();
    return detail::make_result<S>(
        x.shape(), std::move(out), {px},
        [px, len, stride, outer, axis](TensorNode<S>& n) {
            if (!px->requires_grad) return;
            px->ensure_grad();
            const auto& y = n.value;  // softmax output
            if (axis == 0) {
                std::vector<S> dot(stride, S(0));
                for (size_t i = 0; i < len; ++i) {
                    const S* g = n.grad.data() + i * stride;
                    const S* yr = y.data() + i * stride;
                    for (size_t s = 0; s < stride; ++s) dot[s] += g[s] * yr[s];
                }
                for (size_t i = 0; i < len; ++i) {
                    const S* g = n.grad.data() + i * stride;
                    const S* yr = y.data() + i * stride;
                    S* d = px->grad.data() + i * stride;
                    for (size_t s = 0; s < stride; ++s) d[s] += yr[s] * (g[s] - dot[s]);
                }
                return;
            }
            for (size_t o = 0; o < outer; ++o)
                for (size_t s = 0; s < stride; ++s) {
                    const size_t base = o * len * stride + s;
                    S dot = 0;
                    for (size_t i = 0; i < len; ++i)
                        dot += n.grad[base + i * stride] * y[base + i * stride];
                    for (size_t i = 0; i < len; ++i) {
                        const size_t idx = base + i * stride;
                        px->grad[idx] += y[idx] * (n.grad[idx] - dot);
                    }
                }
        });
}

// Expectation of the index under a probability vector; the input must already
// be normalized (checked) and the result lies in [0, len-1].
template <typename S>
Tensor<S> soft_argmax(const Tensor<S>& p) {
    if (p.rank() != 1) throw ShapeError("soft_argmax: expects a probability vector");
    const auto& pv = p.values();
    S total = 0;
    for (S v : pv) {
        if (v < S(0)) throw NumericError("soft_argmax: negative probability");
        total += v;
    }
    if (std::abs(static_cast<double>(total) - 1.0) > 1e-6) {
        throw NumericError("soft_argmax: input not normalized");
    }
    S e = 0;
    for (size_t i = 0; i < pv.size(); ++i) e += static_cast<S>(i) * pv[i];
    auto pp = p.node();
    return detail::make_result<S>({1}, {e}, {pp}, [pp](TensorNode<S>& n) {
        if (!pp->requires_grad) return;
        pp->ensure_grad();
        for (size_t i = 0; i < pp->grad.size(); ++i)
            pp->grad[i] += n.grad[0] * static_cast<S>(i);
    });
}

// Column-wise soft-argmax of (h, w, s) row distributions -> (s, w) row positions.
template <typename S>
Tensor<S> soft_argmax_columns(const Tensor<S>& p) {
    if (p.rank() != 3) throw ShapeError("soft_argmax_columns: input must be (h,w,s)");
    const size_t h = p.dim(0), w = p.dim(1), ns = p.dim(2);
    std::vector<S> out(ns * w, S(0));
    const auto& pv = p.values();
    for (size_t v = 0; v < h; ++v)
        for (size_t u = 0; u < w; ++u)
            for (size_t s = 0; s < ns; ++s)
                out[s * w + u] += static_cast<S>(v) * pv[(v * w + u) * ns + s];
    auto pp = p.node();
    return detail::make_result<S>({ns, w}, std::move(out), {pp},
                                  [pp, h, w, ns](TensorNode<S>& n) {
                                      if (!pp->requires_grad) return;
                                      pp->ensure_grad();
                                      for (size_t v = 0; v < h; ++v)
                                          for (size_t u = 0; u < w; ++u)
                                              for (size_t s = 0; s < ns; ++s)
                                                  pp->grad[(v * w + u) * ns + s] +=
                                                      n.grad[s * w + u] * static_cast<S>(v);
                                  });
}

// Column-wise cumulative maximum over the surface axis of (s, w): enforces
// s_1 <= s_2 <= ... per column, is the identity on already-ordered input, and
// routes gradients to whichever surface won (ties prefer the current surface).
template <typename S>
Tensor<S> cummax_surfaces(const Tensor<S>& x) {
    if (x.rank() != 2) throw ShapeError("cummax_surfaces: input must be (s,w)");
    const size_t ns = x.dim(0), w = x.dim(1);
    std::vector<S> out(ns * w);
    std::vector<uint8_t> take_current(ns * w, 1);
    const auto& xv = x.values();
    for (size_t u = 0; u < w; ++u) {
        out[u] = xv[u];
        for (size_t s = 1; s < ns; ++s) {
            const S prev = out[(s - 1) * w + u];
            const S cur = xv[s * w + u];
            if (cur >= prev) {
                out[s * w + u] = cur;
            } else {
                out[s * w + u] = prev;
                take_current[s * w + u] = 0;
            }
        }
    }
    auto px = x.node();
    return detail::make_result<S>(
        {ns, w}, std::move(out), {px}, [px, take_current, ns, w](TensorNode<S>& n) {
            if (!px->requires_grad) return;
            px->ensure_grad();
            for (size_t u = 0; u < w; ++u) {
                S carry = 0;
                for (size_t s = ns; s-- > 0;) {
                    const S g = n.grad[s * w + u] + carry;
                    if (take_current[s * w + u]) {
                        px->grad[s * w + u] += g;
                        carry = 0;
                    } else {
                        carry = g;
                    }
                }
            }
        });
}

// Weighted fusion kernel behind the CFF module:
//   out = sum_i W_i (*) F_i + (1/n) sum_i F_i
// with W_i = weights(:,:,i) broadcast over the feature channels.
template <typename S>
Tensor<S> weighted_slice_sum(const std::vector<Tensor<S>>& features, const Tensor<S>& weights) {
    const size_t n = features.size();
    if (n == 0) throw ShapeError("weighted_slice_sum: no feature maps");
    const size_t h = features[0].dim(0), w = features[0].dim(1), c = features[0].dim(2);
    for (const auto& f : features) {
        if (f.rank() != 3 || f.dim(0) != h || f.dim(1) != w || f.dim(2) != c) {
            throw ShapeError("weighted_slice_sum: feature maps must share one shape");
        }
    }
    if (weights.rank() != 3 || weights.dim(0) != h || weights.dim(1) != w || weights.dim(2) != n) {
        throw ShapeError("weighted_slice_sum: weights must be (h,w,n)");
    }
    const auto& wv = weights.values();
    for (size_t p = 0; p < h * w; ++p) {
        S total = 0;
        for (size_t i = 0; i < n; ++i) total += wv[p * n + i];
        if (std::abs(static_cast<double>(total) - 1.0) > 1e-6) {
            throw NumericError("weighted_slice_sum: weights not normalized at pixel " +
                               std::to_string(p));
        }
    }
    const S inv_n = S(1) / static_cast<S>(n);
    std::vector<S> out(h * w * c, S(0));
    for (size_t i = 0; i < n; ++i) {
        const auto& fv = features[i].values();
        for (size_t p = 0; p < h * w; ++p) {
            const S wi = wv[p * n + i] + inv_n;
            for (size_t ch = 0; ch < c; ++ch) out[p * c + ch] += wi * fv[p * c + ch];
        }
    }
    std::vector<std::shared_ptr<TensorNode<S>>> parents;
    for (const auto& f : features) parents.push_back(f.node());
    parents.push_back(weights.node());
    return detail::make_result<S>(
        {h, w, c}, std::move(out), std::move(parents),
        [n, h, w, c, inv_n](TensorNode<S>& nd) {
            auto& pw = *nd.parents[n];
            for (size_t i = 0; i < n; ++i) {
                auto& pf = *nd.parents[i];
                if (!pf.requires_grad) continue;
                pf.ensure_grad();
                for (size_t p = 0; p < h * w; ++p) {
                    const S wi = pw.value[p * n + i] + inv_n;
                    for (size_t ch = 0; ch < c; ++ch)
                        pf.grad[p * c + ch] += wi * nd.grad[p * c + ch];
                }
            }
            if (pw.requires_grad) {
                pw.ensure_grad();
                for (size_t i = 0; i < n; ++i) {
                    const auto& fv = nd.parents[i]->value;
                    for (size_t p = 0; p < h * w; ++p) {
                        S acc = 0;
                        for (size_t ch = 0; ch < c; ++ch)
                            acc += fv[p * c + ch] * nd.grad[p * c + ch];
                        pw.grad[p * n + i] += acc;
                    }
                }
            }
        });
}

}  // namespace olseg
