#pragma once

#include <algorithm>
#include <atomic>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "usketch/tensor.hpp"

namespace usketch {

// Reverse-mode autodiff over Tensor values. A forward pass builds a DAG of
// shared_ptr<Node>; backward() walks it in reverse creation order and calls
// each node's vjp to push cotangents into its parents. Graphs are dynamic
// and per-pass; parameters are long-lived leaf nodes reused across passes.
//
// `requires_grad` marks leaves we differentiate with respect to; `needs`
// marks nodes that transitively depend on such a leaf. vjps skip parents
// whose subgraph needs no gradient, so e.g. freezing model parameters makes
// a backward pass compute only the input gradient.
template <typename S>
class Node {
public:
    Tensor<S> val;
    Tensor<S> grad;  // empty until a cotangent arrives
    bool requires_grad = false;
    bool needs = false;
    uint64_t order = 0;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> vjp;

    bool has_grad() const { return !grad.v.empty(); }
    Tensor<S>& ensure_grad() {
        if (grad.v.empty()) grad = zeros_like(val);
        return grad;
    }
    void clear_grad() { grad = Tensor<S>(); }
};

template <typename S>
using Var = std::shared_ptr<Node<S>>;

namespace detail {
inline std::atomic<uint64_t>& node_counter() {
    static std::atomic<uint64_t> counter{0};
    return counter;
}
}  // namespace detail

template <typename S>
Var<S> make_leaf(Tensor<S> value, bool requires_grad = false) {
    auto n = std::make_shared<Node<S>>();
    n->val = std::move(value);
    n->requires_grad = requires_grad;
    n->needs = requires_grad;
    n->order = detail::node_counter().fetch_add(1, std::memory_order_relaxed);
    return n;
}

template <typename S>
Var<S> make_const(Tensor<S> value) {
    return make_leaf(std::move(value), false);
}

template <typename S>
Var<S> make_node(Tensor<S> value, std::vector<Var<S>> parents,
                 std::function<void(Node<S>&)> vjp) {
    auto n = std::make_shared<Node<S>>();
    n->val = std::move(value);
    n->parents = std::move(parents);
    n->vjp = std::move(vjp);
    for (const auto& p : n->parents) {
        if (p->needs) {
            n->needs = true;
            break;
        }
    }
    n->order = detail::node_counter().fetch_add(1, std::memory_order_relaxed);
    return n;
}

// Runs reverse-mode accumulation from `root`. The root's cotangent defaults
// to all-ones (the usual case is a scalar loss). Parameter leaves keep their
// accumulated grads until cleared by the caller/optimizer.
template <typename S>
void backward(const Var<S>& root, const Tensor<S>* cotangent = nullptr) {
    if (!root->needs) return;
    if (cotangent) {
        require_same_shape(root->val, *cotangent, "backward");
        root->ensure_grad();
        for (size_t i = 0; i < cotangent->v.size(); ++i) root->grad.v[i] += cotangent->v[i];
    } else {
        auto& g = root->ensure_grad();
        for (auto& x : g.v) x += S(1);
    }

    // Reachable subgraph, reverse topological by creation order.
    std::vector<Node<S>*> nodes;
    std::unordered_set<Node<S>*> seen;
    std::vector<Node<S>*> stack{root.get()};
    seen.insert(root.get());
    while (!stack.empty()) {
        Node<S>* n = stack.back();
        stack.pop_back();
        nodes.push_back(n);
        for (const auto& p : n->parents) {
            if (p->needs && seen.insert(p.get()).second) stack.push_back(p.get());
        }
    }
    std::sort(nodes.begin(), nodes.end(),
              [](const Node<S>* a, const Node<S>* b) { return a->order > b->order; });

    for (Node<S>* n : nodes) {
        if (n->vjp && n->has_grad()) n->vjp(*n);
    }
}

// ---------------------------------------------------------------------------
// Elementwise / structural ops
// ---------------------------------------------------------------------------

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
    require_same_shape(a->val, b->val, "add");
    Tensor<S> out = a->val;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += b->val.v[i];
    return make_node<S>(std::move(out), {a, b}, [](Node<S>& n) {
        for (int k = 0; k < 2; ++k) {
            auto& p = *n.parents[k];
            if (!p.needs) continue;
            auto& g = p.ensure_grad();
            for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += n.grad.v[i];
        }
    });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
    require_same_shape(a->val, b->val, "sub");
    Tensor<S> out = a->val;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] -= b->val.v[i];
    return make_node<S>(std::move(out), {a, b}, [](Node<S>& n) {
        if (n.parents[0]->needs) {
            auto& g = n.parents[0]->ensure_grad();
            for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += n.grad.v[i];
        }
        if (n.parents[1]->needs) {
            auto& g = n.parents[1]->ensure_grad();
            for (size_t i = 0; i < g.v.size(); ++i) g.v[i] -= n.grad.v[i];
        }
    });
}

template <typename S>
Var<S> scale(const Var<S>& a, S s) {
    Tensor<S> out = a->val;
    for (auto& x : out.v) x *= s;
    return make_node<S>(std::move(out), {a}, [s](Node<S>& n) {
        if (!n.parents[0]->needs) return;
        auto& g = n.parents[0]->ensure_grad();
        for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += s * n.grad.v[i];
    });
}

template <typename S>
Var<S> relu(const Var<S>& a) {
    Tensor<S> out = a->val;
    for (auto& x : out.v) x = x > S(0) ? x : S(0);
    return make_node<S>(std::move(out), {a}, [](Node<S>& n) {
        auto& p = *n.parents[0];
        if (!p.needs) return;
        auto& g = p.ensure_grad();
        for (size_t i = 0; i < g.v.size(); ++i) {
            if (p.val.v[i] > S(0)) g.v[i] += n.grad.v[i];
        }
    });
}

// Sum of squared entries, as a [1,1,1] scalar node. Accumulates in double.
template <typename S>
Var<S> sum_squares(const Var<S>& a) {
    Tensor<S> out = Tensor<S>::scalar(static_cast<S>(sum_of_squares(a->val)));
    return make_node<S>(std::move(out), {a}, [](Node<S>& n) {
        auto& p = *n.parents[0];
        if (!p.needs) return;
        const S g0 = n.grad.v[0];
        auto& g = p.ensure_grad();
        for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += S(2) * p.val.v[i] * g0;
    });
}

template <typename S>
Var<S> concat_channels(const std::vector<Var<S>>& xs) {
    if (xs.empty()) throw InputError("concat_channels: empty input list");
    const int h = xs[0]->val.h, w = xs[0]->val.w;
    int ctot = 0;
    for (const auto& x : xs) {
        if (x->val.h != h || x->val.w != w) {
            throw InputError("concat_channels: spatial dims differ: " + x->val.shape_str());
        }
        ctot += x->val.c;
    }
    Tensor<S> out(ctot, h, w);
    size_t off = 0;
    for (const auto& x : xs) {
        std::copy(x->val.v.begin(), x->val.v.end(), out.v.begin() + off);
        off += x->val.numel();
    }
    return make_node<S>(std::move(out), xs, [](Node<S>& n) {
        size_t off = 0;
        for (auto& pp : n.parents) {
            auto& p = *pp;
            const size_t sz = p.val.numel();
            if (p.needs) {
                auto& g = p.ensure_grad();
                for (size_t i = 0; i < sz; ++i) g.v[i] += n.grad.v[off + i];
            }
            off += sz;
        }
    });
}

template <typename S>
Var<S> slice_channels(const Var<S>& x, int c0, int count) {
    if (c0 < 0 || count < 1 || c0 + count > x->val.c) {
        throw InputError("slice_channels: range out of bounds");
    }
    Tensor<S> out(count, x->val.h, x->val.w);
    const size_t plane = x->val.plane_size();
    std::copy(x->val.v.begin() + c0 * plane, x->val.v.begin() + (c0 + count) * plane,
              out.v.begin());
    return make_node<S>(std::move(out), {x}, [c0, plane](Node<S>& n) {
        auto& p = *n.parents[0];
        if (!p.needs) return;
        auto& g = p.ensure_grad();
        for (size_t i = 0; i < n.grad.v.size(); ++i) g.v[c0 * plane + i] += n.grad.v[i];
    });
}

// Adds a per-channel bias vector [C,1,1] across the spatial extent of x.
template <typename S>
Var<S> channel_bias(const Var<S>& x, const Var<S>& v) {
    if (v->val.c != x->val.c || v->val.h != 1 || v->val.w != 1) {
        throw InputError("channel_bias: expected [C,1,1] bias, got " + v->val.shape_str());
    }
    Tensor<S> out = x->val;
    const size_t plane = out.plane_size();
    for (int c = 0; c < out.c; ++c) {
        const S b = v->val.v[c];
        S* p = out.plane(c);
        for (size_t i = 0; i < plane; ++i) p[i] += b;
    }
    return make_node<S>(std::move(out), {x, v}, [](Node<S>& n) {
        auto& x = *n.parents[0];
        auto& v = *n.parents[1];
        const size_t plane = n.val.plane_size();
        if (x.needs) {
            auto& g = x.ensure_grad();
            for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += n.grad.v[i];
        }
        if (v.needs) {
            auto& g = v.ensure_grad();
            for (int c = 0; c < n.val.c; ++c) {
                double acc = 0.0;
                const S* gp = n.grad.plane(c);
                for (size_t i = 0; i < plane; ++i) acc += static_cast<double>(gp[i]);
                g.v[c] += static_cast<S>(acc);
            }
        }
    });
}

// Table lookup: table [N,E,1] -> row as [E,1,1].
template <typename S>
Var<S> embed_row(const Var<S>& table, int row) {
    if (row < 0 || row >= table->val.c) throw InputError("embed_row: row out of range");
    const int e = table->val.h;
    Tensor<S> out(e, 1, 1);
    const S* src = table->val.plane(row);
    std::copy(src, src + e, out.v.begin());
    return make_node<S>(std::move(out), {table}, [row, e](Node<S>& n) {
        auto& p = *n.parents[0];
        if (!p.needs) return;
        auto& g = p.ensure_grad();
        S* dst = g.plane(row);
        for (int i = 0; i < e; ++i) dst[i] += n.grad.v[i];
    });
}

// Cuts the graph: returns a constant leaf holding a copy of x's value.
template <typename S>
Var<S> detach(const Var<S>& x) {
    return make_const<S>(x->val);
}

}  // namespace usketch
