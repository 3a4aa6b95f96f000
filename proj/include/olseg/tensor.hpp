#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "olseg/common.hpp"

namespace olseg {

namespace detail {
inline thread_local int nograd_depth = 0;
}

inline bool grad_enabled() { return detail::nograd_depth == 0; }

// RAII scope that suppresses graph recording (inference, statistics updates).
struct NoGradGuard {
    NoGradGuard() { ++detail::nograd_depth; }
    ~NoGradGuard() { --detail::nograd_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename S>
struct TensorNode {
    std::vector<size_t> shape;
    std::vector<S> value;
    std::vector<S> grad;  // allocated lazily; persists so leaves accumulate across passes
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode<S>>> parents;
    std::function<void(TensorNode<S>&)> backprop;

    size_t numel() const { return value.size(); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), S(0));
    }
};

// Value-semantics handle onto a graph node. Copies share the node.
template <typename S>
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode<S>> node) : node_(std::move(node)) {}

    static Tensor zeros(std::vector<size_t> shape, bool requires_grad = false) {
        return filled(std::move(shape), S(0), requires_grad);
    }

    static Tensor filled(std::vector<size_t> shape, S value, bool requires_grad = false) {
        auto n = std::make_shared<TensorNode<S>>();
        n->value.assign(shape_numel(shape), value);
        n->shape = std::move(shape);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor from_vector(std::vector<size_t> shape, std::vector<S> values,
                              bool requires_grad = false) {
        if (shape_numel(shape) != values.size()) {
            throw ShapeError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
        }
        auto n = std::make_shared<TensorNode<S>>();
        n->shape = std::move(shape);
        n->value = std::move(values);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor scalar(S value, bool requires_grad = false) {
        return from_vector({1}, {value}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const std::vector<size_t>& shape() const { return node_->shape; }
    size_t rank() const { return node_->shape.size(); }
    size_t dim(size_t i) const { return node_->shape[i]; }
    size_t numel() const { return node_->value.size(); }

    std::vector<S>& values() { return node_->value; }
    const std::vector<S>& values() const { return node_->value; }
    std::vector<S>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    bool has_grad() const { return node_->grad.size() == node_->value.size(); }
    void zero_grad() {
        if (has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), S(0));
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }

    S item() const {
        if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
        return node_->value[0];
    }

    // Rank-3 (h, w, c) accessors, the working layout of all feature maps.
    S& at(size_t y, size_t x, size_t c) {
        return node_->value[(y * node_->shape[1] + x) * node_->shape[2] + c];
    }
    S at(size_t y, size_t x, size_t c) const {
        return node_->value[(y * node_->shape[1] + x) * node_->shape[2] + c];
    }
    S& at(size_t i, size_t j) { return node_->value[i * node_->shape[1] + j]; }
    S at(size_t i, size_t j) const { return node_->value[i * node_->shape[1] + j]; }

    // Detached deep copy (no graph, no grad requirement).
    Tensor clone_detached() const {
        auto n = std::make_shared<TensorNode<S>>();
        n->shape = node_->shape;
        n->value = node_->value;
        return Tensor(std::move(n));
    }

    const std::shared_ptr<TensorNode<S>>& node() const { return node_; }

  private:
    std::shared_ptr<TensorNode<S>> node_;
};

namespace detail {

template <typename S>
Tensor<S> make_result(std::vector<size_t> shape, std::vector<S> value,
                      std::vector<std::shared_ptr<TensorNode<S>>> parents,
                      std::function<void(TensorNode<S>&)> backprop) {
    auto n = std::make_shared<TensorNode<S>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    bool needs = false;
    if (grad_enabled()) {
        for (const auto& p : parents) {
            if (p && p->requires_grad) needs = true;
        }
    }
    if (needs) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backprop = std::move(backprop);
    }
    return Tensor<S>(std::move(n));
}

}  // namespace detail

template <typename S>
inline void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    check_same_shape(a, b, "add");
    std::vector<S> out(a.numel());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    auto pa = a.node(), pb = b.node();
    return detail::make_result<S>(
        a.shape(), std::move(out), {pa, pb}, [pa, pb](TensorNode<S>& n) {
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] += n.grad[i];
            }
        });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    check_same_shape(a, b, "sub");
    std::vector<S> out(a.numel());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    auto pa = a.node(), pb = b.node();
    return detail::make_result<S>(
        a.shape(), std::move(out), {pa, pb}, [pa, pb](TensorNode<S>& n) {
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] -= n.grad[i];
            }
        });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    check_same_shape(a, b, "mul");
    std::vector<S> out(a.numel());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    auto pa = a.node(), pb = b.node();
    return detail::make_result<S>(
        a.shape(), std::move(out), {pa, pb}, [pa, pb](TensorNode<S>& n) {
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] * pb->value[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] += n.grad[i] * pa->value[i];
            }
        });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
    std::vector<S> out(a.numel());
    const auto& av = a.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
    auto pa = a.node();
    return detail::make_result<S>(a.shape(), std::move(out), {pa},
                                  [pa, factor](TensorNode<S>& n) {
                                      if (!pa->requires_grad) return;
                                      pa->ensure_grad();
                                      for (size_t i = 0; i < n.grad.size(); ++i)
                                          pa->grad[i] += n.grad[i] * factor;
                                  });
}

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
    S total = 0;
    for (S v : a.values()) total += v;
    auto pa = a.node();
    return detail::make_result<S>({1}, {total}, {pa}, [pa](TensorNode<S>& n) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        const S g = n.grad[0];
        for (size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += g;
    });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
    if (a.numel() == 0) throw ShapeError("mean of empty tensor");
    return scale(sum(a), S(1) / static_cast<S>(a.numel()));
}

// Channel concatenation of rank-3 (h, w, c_i) maps.
template <typename S>
Tensor<S> concat_channels(const std::vector<Tensor<S>>& parts) {
    if (parts.empty()) throw ShapeError("concat_channels: no inputs");
    const size_t h = parts[0].dim(0), w = parts[0].dim(1);
    size_t c_total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 3 || p.dim(0) != h || p.dim(1) != w) {
            throw ShapeError("concat_channels: incompatible input shape " + shape_str(p.shape()));
        }
        c_total += p.dim(2);
    }
    std::vector<S> out(h * w * c_total);
    std::vector<size_t> offsets(parts.size());
    {
        size_t off = 0;
        for (size_t k = 0; k < parts.size(); ++k) {
            offsets[k] = off;
            off += parts[k].dim(2);
        }
    }
    for (size_t k = 0; k < parts.size(); ++k) {
        const auto& pv = parts[k].values();
        const size_t c = parts[k].dim(2);
        for (size_t px = 0; px < h * w; ++px) {
            std::copy(pv.begin() + px * c, pv.begin() + (px + 1) * c,
                      out.begin() + px * c_total + offsets[k]);
        }
    }
    std::vector<std::shared_ptr<TensorNode<S>>> parents;
    for (const auto& p : parts) parents.push_back(p.node());
    auto offs = offsets;
    return detail::make_result<S>(
        {h, w, c_total}, std::move(out), std::move(parents),
        [offs, h, w, c_total](TensorNode<S>& n) {
            for (size_t k = 0; k < n.parents.size(); ++k) {
                auto& p = *n.parents[k];
                if (!p.requires_grad) continue;
                p.ensure_grad();
                const size_t c = p.shape[2];
                for (size_t px = 0; px < h * w; ++px) {
                    const S* g = n.grad.data() + px * c_total + offs[k];
                    S* dst = p.grad.data() + px * c;
                    for (size_t i = 0; i < c; ++i) dst[i] += g[i];
                }
            }
        });
}

// Reverse-mode sweep from a scalar loss; fills .grad on every reachable
// tensor that requires gradients.
template <typename S>
void backward(const Tensor<S>& loss) {
    if (!loss.defined()) throw NumericError("backward: undefined tensor");
    if (loss.numel() != 1) {
        throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    }
    auto root = loss.node();
    if (!root->requires_grad) {
        throw NumericError("backward: tensor is detached from any graph");
    }

    // Iterative post-order DFS.
    std::vector<TensorNode<S>*> order;
    std::unordered_set<TensorNode<S>*> seen;
    struct Frame {
        TensorNode<S>* node;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({root.get(), 0});
    seen.insert(root.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            TensorNode<S>* p = f.node->parents[f.next_parent++].get();
            if (p && p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] += S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode<S>* n = *it;
        if (n->backprop) {
            n->ensure_grad();
            n->backprop(*n);
        }
    }
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace olseg
