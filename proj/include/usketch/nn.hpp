#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "usketch/autograd.hpp"
#include "usketch/rng.hpp"

namespace usketch {

namespace detail {

template <typename S>
using MatMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using CMatMap =
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// im2col for 3x3 kernel, stride 1, zero padding 1:
// cols[(ci*9 + dy*3 + dx)][y*W + x] = x[ci][y+dy-1][x+dx-1]
template <typename S>
void im2col3x3(const Tensor<S>& x, std::vector<S>& cols) {
    const int h = x.h, w = x.w;
    const size_t plane = static_cast<size_t>(h) * w;
    cols.assign(static_cast<size_t>(x.c) * 9 * plane, S(0));
    for (int ci = 0; ci < x.c; ++ci) {
        const S* src = x.plane(ci);
        for (int dy = 0; dy < 3; ++dy) {
            for (int dx = 0; dx < 3; ++dx) {
                S* dst = cols.data() + (static_cast<size_t>(ci) * 9 + dy * 3 + dx) * plane;
                const int x0 = std::max(0, 1 - dx);
                const int x1 = std::min(w, w + 1 - dx);
                if (x1 <= x0) continue;
                for (int y = 0; y < h; ++y) {
                    const int sy = y + dy - 1;
                    if (sy < 0 || sy >= h) continue;
                    std::memcpy(dst + static_cast<size_t>(y) * w + x0,
                                src + static_cast<size_t>(sy) * w + x0 + dx - 1,
                                static_cast<size_t>(x1 - x0) * sizeof(S));
                }
            }
        }
    }
}

// Transpose of im2col3x3: scatter-adds column gradients back to image layout.
template <typename S>
void col2im3x3(const std::vector<S>& cols, Tensor<S>& gx) {
    const int h = gx.h, w = gx.w;
    const size_t plane = static_cast<size_t>(h) * w;
    for (int ci = 0; ci < gx.c; ++ci) {
        S* dst = gx.plane(ci);
        for (int dy = 0; dy < 3; ++dy) {
            for (int dx = 0; dx < 3; ++dx) {
                const S* src = cols.data() + (static_cast<size_t>(ci) * 9 + dy * 3 + dx) * plane;
                const int x0 = std::max(0, 1 - dx);
                const int x1 = std::min(w, w + 1 - dx);
                if (x1 <= x0) continue;
                for (int y = 0; y < h; ++y) {
                    const int sy = y + dy - 1;
                    if (sy < 0 || sy >= h) continue;
                    S* drow = dst + static_cast<size_t>(sy) * w + dx - 1;
                    const S* srow = src + static_cast<size_t>(y) * w;
                    for (int xi = x0; xi < x1; ++xi) drow[xi] += srow[xi];
                }
            }
        }
    }
}

template <typename S>
void add_channel_bias_inplace(Tensor<S>& t, const Tensor<S>& b) {
    const size_t plane = t.plane_size();
    for (int c = 0; c < t.c; ++c) {
        const S bc = b.v[c];
        S* p = t.plane(c);
        for (size_t i = 0; i < plane; ++i) p[i] += bc;
    }
}

template <typename S>
void accumulate_bias_grad(const Tensor<S>& gy, Tensor<S>& gb) {
    const size_t plane = gy.plane_size();
    for (int c = 0; c < gy.c; ++c) {
        double acc = 0.0;
        const S* p = gy.plane(c);
        for (size_t i = 0; i < plane; ++i) acc += static_cast<double>(p[i]);
        gb.v[c] += static_cast<S>(acc);
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolutions (all GEMM-backed)
// ---------------------------------------------------------------------------

// 3x3 convolution, stride 1, zero padding 1. w: [Cout, Cin, 9], b: [Cout,1,1].
template <typename S>
Var<S> conv3x3(const Var<S>& x, const Var<S>& w, const Var<S>& b) {
    const int cin = x->val.c, h = x->val.h, wd = x->val.w;
    const int cout = w->val.c;
    if (w->val.h != cin || w->val.w != 9) {
        throw InputError("conv3x3: weight " + w->val.shape_str() + " does not match input " +
                         x->val.shape_str());
    }
    const size_t plane = static_cast<size_t>(h) * wd;

    auto cols = std::make_shared<std::vector<S>>();
    detail::im2col3x3(x->val, *cols);

    Tensor<S> out(cout, h, wd);
    {
        detail::CMatMap<S> wm(w->val.v.data(), cout, cin * 9);
        detail::CMatMap<S> cm(cols->data(), cin * 9, static_cast<Eigen::Index>(plane));
        detail::MatMap<S> om(out.v.data(), cout, static_cast<Eigen::Index>(plane));
        om.noalias() = wm * cm;
    }
    detail::add_channel_bias_inplace(out, b->val);

    // The cols buffer is only needed to form the weight gradient.
    if (!w->needs) cols.reset();

    return make_node<S>(std::move(out), {x, w, b}, [cols, cin, cout, plane](Node<S>& n) {
        auto& x = *n.parents[0];
        auto& w = *n.parents[1];
        auto& b = *n.parents[2];
        detail::CMatMap<S> gy(n.grad.v.data(), cout, static_cast<Eigen::Index>(plane));
        if (b.needs) detail::accumulate_bias_grad(n.grad, b.ensure_grad());
        if (w.needs) {
            detail::CMatMap<S> cm(cols->data(), cin * 9, static_cast<Eigen::Index>(plane));
            detail::MatMap<S> gw(w.ensure_grad().v.data(), cout, cin * 9);
            gw.noalias() += gy * cm.transpose();
        }
        if (x.needs) {
            std::vector<S> colsg(static_cast<size_t>(cin) * 9 * plane);
            detail::CMatMap<S> wm(w.val.v.data(), cout, cin * 9);
            detail::MatMap<S> gcm(colsg.data(), cin * 9, static_cast<Eigen::Index>(plane));
            gcm.noalias() = wm.transpose() * gy;
            detail::col2im3x3(colsg, x.ensure_grad());
        }
    });
}

// 1x1 convolution (per-pixel fully connected). w: [Cout, Cin, 1], b: [Cout,1,1].
template <typename S>
Var<S> conv1x1(const Var<S>& x, const Var<S>& w, const Var<S>& b) {
    const int cin = x->val.c, h = x->val.h, wd = x->val.w;
    const int cout = w->val.c;
    if (w->val.h != cin || w->val.w != 1) {
        throw InputError("conv1x1: weight " + w->val.shape_str() + " does not match input " +
                         x->val.shape_str());
    }
    const size_t plane = static_cast<size_t>(h) * wd;
    Tensor<S> out(cout, h, wd);
    {
        detail::CMatMap<S> wm(w->val.v.data(), cout, cin);
        detail::CMatMap<S> xm(x->val.v.data(), cin, static_cast<Eigen::Index>(plane));
        detail::MatMap<S> om(out.v.data(), cout, static_cast<Eigen::Index>(plane));
        om.noalias() = wm * xm;
    }
    detail::add_channel_bias_inplace(out, b->val);

    return make_node<S>(std::move(out), {x, w, b}, [cin, cout, plane](Node<S>& n) {
        auto& x = *n.parents[0];
        auto& w = *n.parents[1];
        auto& b = *n.parents[2];
        detail::CMatMap<S> gy(n.grad.v.data(), cout, static_cast<Eigen::Index>(plane));
        detail::CMatMap<S> xm(x.val.v.data(), cin, static_cast<Eigen::Index>(plane));
        if (b.needs) detail::accumulate_bias_grad(n.grad, b.ensure_grad());
        if (w.needs) {
            detail::MatMap<S> gw(w.ensure_grad().v.data(), cout, cin);
            gw.noalias() += gy * xm.transpose();
        }
        if (x.needs) {
            detail::CMatMap<S> wm(w.val.v.data(), cout, cin);
            detail::MatMap<S> gx(x.ensure_grad().v.data(), cin,
                                 static_cast<Eigen::Index>(plane));
            gx.noalias() += wm.transpose() * gy;
        }
    });
}

// Fully connected on a channel vector [Cin,1,1] -> [Cout,1,1].
template <typename S>
Var<S> dense(const Var<S>& x, const Var<S>& w, const Var<S>& b) {
    if (x->val.h != 1 || x->val.w != 1) {
        throw InputError("dense: expected [C,1,1] input, got " + x->val.shape_str());
    }
    return conv1x1(x, w, b);
}

// 2x2 transposed convolution, stride 2 (spatial dims double; no kernel
// overlap, so every output pixel is written exactly once).
// w: [Cin, Cout, 4], b: [Cout,1,1].
template <typename S>
Var<S> deconv2x2(const Var<S>& x, const Var<S>& w, const Var<S>& b) {
    const int cin = x->val.c, h = x->val.h, wd = x->val.w;
    if (w->val.c != cin || w->val.w != 4) {
        throw InputError("deconv2x2: weight " + w->val.shape_str() + " does not match input " +
                         x->val.shape_str());
    }
    const int cout = w->val.h;
    const size_t plane = static_cast<size_t>(h) * wd;

    std::vector<S> tmp(static_cast<size_t>(cout) * 4 * plane);
    {
        detail::CMatMap<S> wm(w->val.v.data(), cin, cout * 4);
        detail::CMatMap<S> xm(x->val.v.data(), cin, static_cast<Eigen::Index>(plane));
        detail::MatMap<S> tm(tmp.data(), cout * 4, static_cast<Eigen::Index>(plane));
        tm.noalias() = wm.transpose() * xm;
    }
    Tensor<S> out(cout, 2 * h, 2 * wd);
    for (int co = 0; co < cout; ++co) {
        S* op = out.plane(co);
        for (int k = 0; k < 4; ++k) {
            const int dy = k >> 1, dx = k & 1;
            const S* tp = tmp.data() + (static_cast<size_t>(co) * 4 + k) * plane;
            const S bias = b->val.v[co];
            for (int y = 0; y < h; ++y) {
                S* orow = op + (static_cast<size_t>(2 * y + dy)) * (2 * wd) + dx;
                const S* trow = tp + static_cast<size_t>(y) * wd;
                for (int xi = 0; xi < wd; ++xi) orow[2 * xi] = trow[xi] + bias;
            }
        }
    }

    return make_node<S>(std::move(out), {x, w, b}, [cin, cout, h, wd, plane](Node<S>& n) {
        auto& x = *n.parents[0];
        auto& w = *n.parents[1];
        auto& b = *n.parents[2];
        if (b.needs) detail::accumulate_bias_grad(n.grad, b.ensure_grad());
        if (!x.needs && !w.needs) return;
        // Gather dY back into the [Cout*4, H*W] layout.
        std::vector<S> gtmp(static_cast<size_t>(cout) * 4 * plane);
        for (int co = 0; co < cout; ++co) {
            const S* gp = n.grad.plane(co);
            for (int k = 0; k < 4; ++k) {
                const int dy = k >> 1, dx = k & 1;
                S* tp = gtmp.data() + (static_cast<size_t>(co) * 4 + k) * plane;
                for (int y = 0; y < h; ++y) {
                    const S* grow = gp + (static_cast<size_t>(2 * y + dy)) * (2 * wd) + dx;
                    S* trow = tp + static_cast<size_t>(y) * wd;
                    for (int xi = 0; xi < wd; ++xi) trow[xi] = grow[2 * xi];
                }
            }
        }
        detail::CMatMap<S> gtm(gtmp.data(), cout * 4, static_cast<Eigen::Index>(plane));
        if (w.needs) {
            detail::CMatMap<S> xm(x.val.v.data(), cin, static_cast<Eigen::Index>(plane));
            detail::MatMap<S> gw(w.ensure_grad().v.data(), cin, cout * 4);
            gw.noalias() += xm * gtm.transpose();
        }
        if (x.needs) {
            detail::CMatMap<S> wm(w.val.v.data(), cin, cout * 4);
            detail::MatMap<S> gx(x.ensure_grad().v.data(), cin,
                                 static_cast<Eigen::Index>(plane));
            gx.noalias() += wm * gtm;
        }
    });
}

// ---------------------------------------------------------------------------
// Pooling / resizing
// ---------------------------------------------------------------------------

template <typename S>
Var<S> maxpool2x2(const Var<S>& x) {
    const int c = x->val.c, h = x->val.h, w = x->val.w;
    if (h % 2 != 0 || w % 2 != 0) {
        throw InputError("maxpool2x2: spatial dims must be even, got " + x->val.shape_str());
    }
    const int oh = h / 2, ow = w / 2;
    Tensor<S> out(c, oh, ow);
    auto argmax = std::make_shared<std::vector<uint32_t>>(out.numel());
    for (int ci = 0; ci < c; ++ci) {
        const S* src = x->val.plane(ci);
        S* dst = out.plane(ci);
        uint32_t* am = argmax->data() + static_cast<size_t>(ci) * oh * ow;
        for (int y = 0; y < oh; ++y) {
            for (int xi = 0; xi < ow; ++xi) {
                // Ties resolve to the first (row-major) position.
                uint32_t best = static_cast<uint32_t>((2 * y) * w + 2 * xi);
                S bv = src[best];
                const uint32_t cands[3] = {static_cast<uint32_t>((2 * y) * w + 2 * xi + 1),
                                           static_cast<uint32_t>((2 * y + 1) * w + 2 * xi),
                                           static_cast<uint32_t>((2 * y + 1) * w + 2 * xi + 1)};
                for (uint32_t cand : cands) {
                    if (src[cand] > bv) {
                        bv = src[cand];
                        best = cand;
                    }
                }
                dst[static_cast<size_t>(y) * ow + xi] = bv;
                am[static_cast<size_t>(y) * ow + xi] = best;
            }
        }
    }
    return make_node<S>(std::move(out), {x}, [argmax](Node<S>& n) {
        auto& p = *n.parents[0];
        if (!p.needs) return;
        auto& g = p.ensure_grad();
        const size_t oplane = n.val.plane_size();
        const size_t iplane = g.plane_size();
        for (int ci = 0; ci < n.val.c; ++ci) {
            const S* gy = n.grad.plane(ci);
            S* gx = g.v.data() + static_cast<size_t>(ci) * iplane;
            const uint32_t* am = argmax->data() + static_cast<size_t>(ci) * oplane;
            for (size_t i = 0; i < oplane; ++i) gx[am[i]] += gy[i];
        }
    });
}

namespace detail {
struct ResizeAxis {
    std::vector<int> i0, i1;
    std::vector<double> frac;
};

inline ResizeAxis resize_axis(int src, int dst) {
    ResizeAxis a;
    a.i0.resize(dst);
    a.i1.resize(dst);
    a.frac.resize(dst);
    // Corner-aligned sampling; a single-element destination maps to index 0.
    const double scale = (dst > 1 && src > 1) ? static_cast<double>(src - 1) / (dst - 1) : 0.0;
    for (int d = 0; d < dst; ++d) {
        const double f = d * scale;
        int lo = static_cast<int>(std::floor(f));
        if (lo > src - 1) lo = src - 1;
        const int hi = std::min(lo + 1, src - 1);
        a.i0[d] = lo;
        a.i1[d] = hi;
        a.frac[d] = f - lo;
    }
    return a;
}
}  // namespace detail

// Bilinear spatial resize with corner alignment; exact identity (including
// the graph pass-through) when the target equals the source dims.
template <typename S>
Var<S> resize_bilinear(const Var<S>& x, int out_h, int out_w) {
    if (out_h < 1 || out_w < 1) throw InputError("resize_bilinear: target dims must be >= 1");
    const int c = x->val.c, h = x->val.h, w = x->val.w;
    if (out_h == h && out_w == w) {
        Tensor<S> out = x->val;
        return make_node<S>(std::move(out), {x}, [](Node<S>& n) {
            auto& p = *n.parents[0];
            if (!p.needs) return;
            auto& g = p.ensure_grad();
            for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += n.grad.v[i];
        });
    }
    auto ay = std::make_shared<detail::ResizeAxis>(detail::resize_axis(h, out_h));
    auto ax = std::make_shared<detail::ResizeAxis>(detail::resize_axis(w, out_w));
    Tensor<S> out(c, out_h, out_w);
    for (int ci = 0; ci < c; ++ci) {
        const S* src = x->val.plane(ci);
        S* dst = out.plane(ci);
        for (int y = 0; y < out_h; ++y) {
            const S* r0 = src + static_cast<size_t>(ay->i0[y]) * w;
            const S* r1 = src + static_cast<size_t>(ay->i1[y]) * w;
            const double fy = ay->frac[y];
            for (int xi = 0; xi < out_w; ++xi) {
                const int x0 = ax->i0[xi], x1 = ax->i1[xi];
                const double fx = ax->frac[xi];
                const double top = (1.0 - fx) * r0[x0] + fx * r0[x1];
                const double bot = (1.0 - fx) * r1[x0] + fx * r1[x1];
                dst[static_cast<size_t>(y) * out_w + xi] =
                    static_cast<S>((1.0 - fy) * top + fy * bot);
            }
        }
    }
    return make_node<S>(std::move(out), {x}, [ay, ax, out_h, out_w](Node<S>& n) {
        auto& p = *n.parents[0];
        if (!p.needs) return;
        auto& g = p.ensure_grad();
        const int w = g.w;
        for (int ci = 0; ci < g.c; ++ci) {
            S* gx = g.plane(ci);
            const S* gy = n.grad.plane(ci);
            for (int y = 0; y < out_h; ++y) {
                const double fy = ay->frac[y];
                S* r0 = gx + static_cast<size_t>(ay->i0[y]) * w;
                S* r1 = gx + static_cast<size_t>(ay->i1[y]) * w;
                for (int xi = 0; xi < out_w; ++xi) {
                    const int x0 = ax->i0[xi], x1 = ax->i1[xi];
                    const double fx = ax->frac[xi];
                    const double gv = gy[static_cast<size_t>(y) * out_w + xi];
                    r0[x0] += static_cast<S>((1.0 - fy) * (1.0 - fx) * gv);
                    r0[x1] += static_cast<S>((1.0 - fy) * fx * gv);
                    r1[x0] += static_cast<S>(fy * (1.0 - fx) * gv);
                    r1[x1] += static_cast<S>(fy * fx * gv);
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Batch normalization (statistics over the spatial extent, per channel)
// ---------------------------------------------------------------------------

// Training-mode batchnorm. Normalizes with the biased batch variance and
// updates the running stats in place (unbiased variance for the running
// estimate when more than one sample is present).
template <typename S>
Var<S> batchnorm_train(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, S eps,
                       S momentum, Tensor<S>& running_mean, Tensor<S>& running_var) {
    const int c = x->val.c;
    const size_t plane = x->val.plane_size();
    const double n_elem = static_cast<double>(plane);
    auto mean = std::make_shared<Tensor<S>>(c, 1, 1);
    auto invstd = std::make_shared<Tensor<S>>(c, 1, 1);
    Tensor<S> out(c, x->val.h, x->val.w);
    for (int ci = 0; ci < c; ++ci) {
        const S* src = x->val.plane(ci);
        double mu = 0.0;
        for (size_t i = 0; i < plane; ++i) mu += static_cast<double>(src[i]);
        mu /= n_elem;
        double var = 0.0;
        for (size_t i = 0; i < plane; ++i) {
            const double d = static_cast<double>(src[i]) - mu;
            var += d * d;
        }
        var /= n_elem;
        const double is = 1.0 / std::sqrt(var + static_cast<double>(eps));
        mean->v[ci] = static_cast<S>(mu);
        invstd->v[ci] = static_cast<S>(is);
        const S g = gamma->val.v[ci], b = beta->val.v[ci];
        S* dst = out.plane(ci);
        for (size_t i = 0; i < plane; ++i) {
            dst[i] = static_cast<S>((static_cast<double>(src[i]) - mu) * is) * g + b;
        }
        const double unbiased = plane > 1 ? var * n_elem / (n_elem - 1.0) : var;
        running_mean.v[ci] =
            static_cast<S>((1.0 - momentum) * running_mean.v[ci] + momentum * mu);
        running_var.v[ci] =
            static_cast<S>((1.0 - momentum) * running_var.v[ci] + momentum * unbiased);
    }
    return make_node<S>(std::move(out), {x, gamma, beta}, [mean, invstd, plane](Node<S>& n) {
        auto& x = *n.parents[0];
        auto& gamma = *n.parents[1];
        auto& beta = *n.parents[2];
        const double n_elem = static_cast<double>(plane);
        for (int ci = 0; ci < n.val.c; ++ci) {
            const S* gy = n.grad.plane(ci);
            const S* src = x.val.plane(ci);
            const double mu = mean->v[ci], is = invstd->v[ci];
            double sum_gy = 0.0, sum_gy_xhat = 0.0;
            for (size_t i = 0; i < plane; ++i) {
                const double xh = (static_cast<double>(src[i]) - mu) * is;
                sum_gy += static_cast<double>(gy[i]);
                sum_gy_xhat += static_cast<double>(gy[i]) * xh;
            }
            if (beta.needs) beta.ensure_grad().v[ci] += static_cast<S>(sum_gy);
            if (gamma.needs) gamma.ensure_grad().v[ci] += static_cast<S>(sum_gy_xhat);
            if (x.needs) {
                auto& gx = x.ensure_grad();
                S* gxp = gx.plane(ci);
                const double g = gamma.val.v[ci];
                const double mean_gy = sum_gy / n_elem;
                const double mean_gy_xhat = sum_gy_xhat / n_elem;
                for (size_t i = 0; i < plane; ++i) {
                    const double xh = (static_cast<double>(src[i]) - mu) * is;
                    gxp[i] += static_cast<S>(
                        g * is * (static_cast<double>(gy[i]) - mean_gy - xh * mean_gy_xhat));
                }
            }
        }
    });
}

// Evaluation-mode batchnorm: per-channel affine map with frozen statistics.
template <typename S>
Var<S> batchnorm_eval(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, S eps,
                      const Tensor<S>& running_mean, const Tensor<S>& running_var) {
    const int c = x->val.c;
    const size_t plane = x->val.plane_size();
    auto scale_v = std::make_shared<Tensor<S>>(c, 1, 1);
    auto mean_v = std::make_shared<Tensor<S>>(running_mean);
    auto invstd_v = std::make_shared<Tensor<S>>(c, 1, 1);
    Tensor<S> out(c, x->val.h, x->val.w);
    for (int ci = 0; ci < c; ++ci) {
        const double is =
            1.0 / std::sqrt(static_cast<double>(running_var.v[ci]) + static_cast<double>(eps));
        invstd_v->v[ci] = static_cast<S>(is);
        const double a = static_cast<double>(gamma->val.v[ci]) * is;
        scale_v->v[ci] = static_cast<S>(a);
        const double b = static_cast<double>(beta->val.v[ci]) -
                         a * static_cast<double>(running_mean.v[ci]);
        const S* src = x->val.plane(ci);
        S* dst = out.plane(ci);
        for (size_t i = 0; i < plane; ++i) {
            dst[i] = static_cast<S>(a * static_cast<double>(src[i]) + b);
        }
    }
    return make_node<S>(std::move(out), {x, gamma, beta},
                        [scale_v, mean_v, invstd_v, plane](Node<S>& n) {
                            auto& x = *n.parents[0];
                            auto& gamma = *n.parents[1];
                            auto& beta = *n.parents[2];
                            for (int ci = 0; ci < n.val.c; ++ci) {
                                const S* gy = n.grad.plane(ci);
                                if (x.needs) {
                                    S* gx = x.ensure_grad().plane(ci);
                                    const S a = scale_v->v[ci];
                                    for (size_t i = 0; i < plane; ++i) gx[i] += a * gy[i];
                                }
                                if (gamma.needs) {
                                    const S* src = x.val.plane(ci);
                                    const double mu = mean_v->v[ci], is = invstd_v->v[ci];
                                    double acc = 0.0;
                                    for (size_t i = 0; i < plane; ++i) {
                                        acc += static_cast<double>(gy[i]) *
                                               (static_cast<double>(src[i]) - mu) * is;
                                    }
                                    gamma.ensure_grad().v[ci] += static_cast<S>(acc);
                                }
                                if (beta.needs) {
                                    double acc = 0.0;
                                    for (size_t i = 0; i < plane; ++i) {
                                        acc += static_cast<double>(gy[i]);
                                    }
                                    beta.ensure_grad().v[ci] += static_cast<S>(acc);
                                }
                            }
                        });
}

// ---------------------------------------------------------------------------
// Parameter registry, initialization, optimizer
// ---------------------------------------------------------------------------

template <typename S>
struct ParamRegistry {
    std::vector<std::pair<std::string, Var<S>>> params;
    std::vector<std::pair<std::string, Tensor<S>*>> buffers;  // e.g. batchnorm running stats

    Var<S> add_param(const std::string& name, Tensor<S> init) {
        auto v = make_leaf<S>(std::move(init), true);
        params.emplace_back(name, v);
        return v;
    }
    void add_buffer(const std::string& name, Tensor<S>* t) { buffers.emplace_back(name, t); }

    void set_trainable(bool on) {
        for (auto& [name, p] : params) {
            p->requires_grad = on;
            p->needs = on;
        }
    }
    void zero_grad() {
        for (auto& [name, p] : params) p->clear_grad();
    }
    size_t parameter_count() const {
        size_t n = 0;
        for (const auto& [name, p] : params) n += p->val.numel();
        return n;
    }
};

// He-uniform fan-in initialization for rectifier networks.
template <typename S>
Tensor<S> he_uniform(int c, int h, int w, size_t fan_in, Rng& rng) {
    Tensor<S> t(c, h, w);
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& x : t.v) x = static_cast<S>(rng.uniform(-bound, bound));
    return t;
}

template <typename S>
struct AdamConfig {
    S lr = static_cast<S>(1e-4);
    S beta1 = static_cast<S>(0.9);
    S beta2 = static_cast<S>(0.999);
    S eps = static_cast<S>(1e-8);
};

template <typename S>
class Adam {
public:
    Adam(ParamRegistry<S>& reg, AdamConfig<S> cfg) : reg_(&reg), cfg_(cfg) {
        for (auto& [name, p] : reg.params) {
            m_.push_back(zeros_like(p->val));
            v_.push_back(zeros_like(p->val));
        }
    }

    // Applies accumulated gradients (scaled by `grad_scale`) and clears them.
    void step(S grad_scale = S(1)) {
        ++t_;
        const double b1 = cfg_.beta1, b2 = cfg_.beta2;
        const double bc1 = 1.0 - std::pow(b1, t_);
        const double bc2 = 1.0 - std::pow(b2, t_);
        for (size_t k = 0; k < reg_->params.size(); ++k) {
            auto& p = reg_->params[k].second;
            if (!p->has_grad()) continue;
            auto& m = m_[k];
            auto& v = v_[k];
            for (size_t i = 0; i < p->val.v.size(); ++i) {
                const double g = static_cast<double>(p->grad.v[i]) * grad_scale;
                m.v[i] = static_cast<S>(b1 * m.v[i] + (1.0 - b1) * g);
                v.v[i] = static_cast<S>(b2 * v.v[i] + (1.0 - b2) * g * g);
                const double mhat = m.v[i] / bc1;
                const double vhat = v.v[i] / bc2;
                p->val.v[i] -= static_cast<S>(cfg_.lr * mhat /
                                              (std::sqrt(vhat) + static_cast<double>(cfg_.eps)));
            }
        }
        reg_->zero_grad();
    }

private:
    ParamRegistry<S>* reg_;
    AdamConfig<S> cfg_;
    std::vector<Tensor<S>> m_, v_;
    long t_ = 0;
};

}  // namespace usketch
