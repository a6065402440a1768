#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "edalane/tensor.hpp"

namespace edalane {

struct ConvGeometry {
    int kh = 1, kw = 1;
    int sh = 1, sw = 1;
    int dh = 1, dw = 1;
    int ph = 0, pw = 0;

    static int out_size(int in, int k, int s, int d, int p) {
        return (in + 2 * p - d * (k - 1) - 1) / s + 1;
    }
    int out_h(int in_h) const { return out_size(in_h, kh, sh, dh, ph); }
    int out_w(int in_w) const { return out_size(in_w, kw, sw, dw, pw); }

    void validate(int in_h, int in_w) const {
        if (kh < 1 || kw < 1 || sh < 1 || sw < 1 || dh < 1 || dw < 1 || ph < 0 || pw < 0) {
            throw std::invalid_argument("conv geometry: kernel/stride/dilation must be positive, padding non-negative");
        }
        if (out_h(in_h) < 1) {
            throw std::invalid_argument("conv geometry: output height < 1 for input height " + std::to_string(in_h));
        }
        if (out_w(in_w) < 1) {
            throw std::invalid_argument("conv geometry: output width < 1 for input width " + std::to_string(in_w));
        }
    }
};

namespace detail {

template <typename S>
using MatMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using ConstMatMap = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// Unfolds one sample into a [Cin*kh*kw, Hout*Wout] patch matrix.
// Out-of-bounds taps are zero (zero-padding semantics).
template <typename S>
void im2col(const S* x, int c_in, int h, int w, const ConvGeometry& g, int out_h, int out_w, S* col) {
    const int patch = out_h * out_w;
    for (int ci = 0; ci < c_in; ++ci) {
        for (int u = 0; u < g.kh; ++u) {
            for (int v = 0; v < g.kw; ++v) {
                S* row = col + (static_cast<std::int64_t>((ci * g.kh + u) * g.kw + v)) * patch;
                const int off_w = v * g.dw - g.pw;
                for (int oy = 0; oy < out_h; ++oy) {
                    const int iy = oy * g.sh - g.ph + u * g.dh;
                    S* dst = row + static_cast<std::int64_t>(oy) * out_w;
                    if (iy < 0 || iy >= h) {
                        std::fill(dst, dst + out_w, S(0));
                        continue;
                    }
                    const S* src_row = x + (static_cast<std::int64_t>(ci) * h + iy) * w;
                    int ox_lo = off_w < 0 ? (-off_w + g.sw - 1) / g.sw : 0;
                    int ox_hi = (w - 1 - off_w) / g.sw;
                    if (ox_hi > out_w - 1) ox_hi = out_w - 1;
                    if (ox_lo > ox_hi) {
                        std::fill(dst, dst + out_w, S(0));
                        continue;
                    }
                    std::fill(dst, dst + ox_lo, S(0));
                    if (g.sw == 1) {
                        std::copy(src_row + ox_lo + off_w, src_row + ox_hi + 1 + off_w, dst + ox_lo);
                    } else {
                        for (int ox = ox_lo; ox <= ox_hi; ++ox) dst[ox] = src_row[ox * g.sw + off_w];
                    }
                    std::fill(dst + ox_hi + 1, dst + out_w, S(0));
                }
            }
        }
    }
}

// Scatter-add of a patch matrix back onto one sample (adjoint of im2col).
template <typename S>
void col2im_add(const S* col, int c_in, int h, int w, const ConvGeometry& g, int out_h, int out_w, S* x) {
    const int patch = out_h * out_w;
    for (int ci = 0; ci < c_in; ++ci) {
        for (int u = 0; u < g.kh; ++u) {
            for (int v = 0; v < g.kw; ++v) {
                const S* row = col + (static_cast<std::int64_t>((ci * g.kh + u) * g.kw + v)) * patch;
                const int off_w = v * g.dw - g.pw;
                for (int oy = 0; oy < out_h; ++oy) {
                    const int iy = oy * g.sh - g.ph + u * g.dh;
                    if (iy < 0 || iy >= h) continue;
                    S* dst_row = x + (static_cast<std::int64_t>(ci) * h + iy) * w;
                    const S* src = row + static_cast<std::int64_t>(oy) * out_w;
                    int ox_lo = off_w < 0 ? (-off_w + g.sw - 1) / g.sw : 0;
                    int ox_hi = (w - 1 - off_w) / g.sw;
                    if (ox_hi > out_w - 1) ox_hi = out_w - 1;
                    for (int ox = ox_lo; ox <= ox_hi; ++ox) dst_row[ox * g.sw + off_w] += src[ox];
                }
            }
        }
    }
}

template <typename S>
std::vector<S>& conv_scratch() {
    static thread_local std::vector<S> buf;
    return buf;
}

} // namespace detail

// y[n,co,i,j] = b[co] + sum_{ci,u,v} w[co,ci,u,v] * x[n,ci, i*sh-ph+u*dh, j*sw-pw+v*dw]
// with out-of-bounds x treated as zero. Weight layout [Cout, Cin, kh, kw].
template <typename S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>* bias, const ConvGeometry& g) {
    if (w.shape.h != g.kh || w.shape.w != g.kw) {
        throw std::invalid_argument("conv2d: kernel tensor is " + std::to_string(w.shape.h) + "x" +
                                    std::to_string(w.shape.w) + " but geometry says " + std::to_string(g.kh) + "x" +
                                    std::to_string(g.kw));
    }
    if (x.shape.c != w.shape.c) {
        throw std::invalid_argument("conv2d: channel axis mismatch, input has " + std::to_string(x.shape.c) +
                                    " channels, kernel expects " + std::to_string(w.shape.c));
    }
    g.validate(x.shape.h, x.shape.w);
    const int c_out = w.shape.n;
    if (bias && bias->numel() != c_out) {
        throw std::invalid_argument("conv2d: bias length " + std::to_string(bias->numel()) +
                                    " != output channels " + std::to_string(c_out));
    }

    const int oh = g.out_h(x.shape.h), ow = g.out_w(x.shape.w);
    const std::int64_t k = static_cast<std::int64_t>(x.shape.c) * g.kh * g.kw;
    const std::int64_t patch = static_cast<std::int64_t>(oh) * ow;

    TensorT<S> y(x.shape.n, c_out, oh, ow);
    auto& col = detail::conv_scratch<S>();
    col.resize(static_cast<std::size_t>(k * patch));

    detail::ConstMatMap<S> wm(w.data.data(), c_out, k);
    for (int n = 0; n < x.shape.n; ++n) {
        detail::im2col(x.data.data() + x.index(n, 0, 0, 0), x.shape.c, x.shape.h, x.shape.w, g, oh, ow, col.data());
        detail::ConstMatMap<S> cm(col.data(), k, patch);
        detail::MatMap<S> ym(y.data.data() + y.index(n, 0, 0, 0), c_out, patch);
        ym.noalias() = wm * cm;
        if (bias) {
            for (int co = 0; co < c_out; ++co) ym.row(co).array() += bias->data[static_cast<std::size_t>(co)];
        }
    }
    return y;
}

// Returns dx; accumulates the weight/bias gradients into dw (Cout*Cin*kh*kw
// elements) and db (Cout elements) when non-null.
template <typename S>
TensorT<S> conv2d_backward(const TensorT<S>& x, const TensorT<S>& w, const ConvGeometry& g, const TensorT<S>& dy,
                           S* dw, S* db) {
    const int c_out = w.shape.n;
    const int oh = g.out_h(x.shape.h), ow = g.out_w(x.shape.w);
    if (dy.shape.n != x.shape.n || dy.shape.c != c_out || dy.shape.h != oh || dy.shape.w != ow) {
        throw std::invalid_argument("conv2d_backward: upstream gradient shape " + dy.shape.to_string() +
                                    " does not match output " + Shape4{x.shape.n, c_out, oh, ow}.to_string());
    }
    const std::int64_t k = static_cast<std::int64_t>(x.shape.c) * g.kh * g.kw;
    const std::int64_t patch = static_cast<std::int64_t>(oh) * ow;

    TensorT<S> dx(x.shape);
    auto& col = detail::conv_scratch<S>();
    col.resize(static_cast<std::size_t>(k * patch));
    std::vector<S> dcol(static_cast<std::size_t>(k * patch));

    detail::ConstMatMap<S> wm(w.data.data(), c_out, k);
    for (int n = 0; n < x.shape.n; ++n) {
        detail::ConstMatMap<S> dym(dy.data.data() + dy.index(n, 0, 0, 0), c_out, patch);
        detail::MatMap<S> dcm(dcol.data(), k, patch);
        dcm.noalias() = wm.transpose() * dym;
        detail::col2im_add(dcol.data(), x.shape.c, x.shape.h, x.shape.w, g, oh, ow, dx.data.data() + dx.index(n, 0, 0, 0));
        if (dw) {
            detail::im2col(x.data.data() + x.index(n, 0, 0, 0), x.shape.c, x.shape.h, x.shape.w, g, oh, ow, col.data());
            detail::ConstMatMap<S> cm(col.data(), k, patch);
            detail::MatMap<S> dwm(dw, c_out, k);
            dwm.noalias() += dym * cm.transpose();
        }
        if (db) {
            for (int co = 0; co < c_out; ++co) db[co] += dym.row(co).sum();
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Batch normalization

template <typename S>
struct BnCache {
    Mode mode = Mode::Train;
    std::vector<S> inv_std;  // per channel
    TensorT<S> x_hat;        // normalized input
};

// Train mode normalizes by per-channel batch statistics (population variance)
// and updates the running stats in place: run = (1-momentum)*run + momentum*batch.
// Infer mode normalizes by the running stats.
template <typename S>
TensorT<S> batchnorm2d(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta, TensorT<S>& run_mean,
                       TensorT<S>& run_var, Mode mode, double momentum, double eps, BnCache<S>* cache) {
    const int c = x.shape.c;
    if (gamma.numel() != c || beta.numel() != c || run_mean.numel() != c || run_var.numel() != c) {
        throw std::invalid_argument("batchnorm2d: parameter length != channel count " + std::to_string(c));
    }
    if (eps <= 0.0) {
        throw std::invalid_argument("batchnorm2d: eps must be > 0");
    }
    const std::int64_t per_chan = static_cast<std::int64_t>(x.shape.n) * x.shape.h * x.shape.w;
    if (mode == Mode::Train && per_chan < 1) {
        throw std::invalid_argument("batchnorm2d: empty batch in train mode");
    }

    TensorT<S> y(x.shape);
    const std::int64_t plane = static_cast<std::int64_t>(x.shape.h) * x.shape.w;
    std::vector<S> mean(static_cast<std::size_t>(c)), inv_std(static_cast<std::size_t>(c));

    for (int ch = 0; ch < c; ++ch) {
        double mu, var;
        if (mode == Mode::Train) {
            double sum = 0.0;
            for (int n = 0; n < x.shape.n; ++n) {
                const S* p = x.data.data() + x.index(n, ch, 0, 0);
                for (std::int64_t i = 0; i < plane; ++i) sum += static_cast<double>(p[i]);
            }
            mu = sum / static_cast<double>(per_chan);
            double sq = 0.0;
            for (int n = 0; n < x.shape.n; ++n) {
                const S* p = x.data.data() + x.index(n, ch, 0, 0);
                for (std::int64_t i = 0; i < plane; ++i) {
                    const double d = static_cast<double>(p[i]) - mu;
                    sq += d * d;
                }
            }
            var = sq / static_cast<double>(per_chan);
            run_mean.data[static_cast<std::size_t>(ch)] =
                static_cast<S>((1.0 - momentum) * static_cast<double>(run_mean.data[static_cast<std::size_t>(ch)]) + momentum * mu);
            run_var.data[static_cast<std::size_t>(ch)] =
                static_cast<S>((1.0 - momentum) * static_cast<double>(run_var.data[static_cast<std::size_t>(ch)]) + momentum * var);
        } else {
            mu = static_cast<double>(run_mean.data[static_cast<std::size_t>(ch)]);
            var = static_cast<double>(run_var.data[static_cast<std::size_t>(ch)]);
        }
        mean[static_cast<std::size_t>(ch)] = static_cast<S>(mu);
        inv_std[static_cast<std::size_t>(ch)] = static_cast<S>(1.0 / std::sqrt(var + eps));
    }

    TensorT<S>* x_hat = nullptr;
    if (cache) {
        cache->mode = mode;
        cache->inv_std = inv_std;
        cache->x_hat = TensorT<S>(x.shape);
        x_hat = &cache->x_hat;
    }
    for (int n = 0; n < x.shape.n; ++n) {
        for (int ch = 0; ch < c; ++ch) {
            const S m = mean[static_cast<std::size_t>(ch)];
            const S is = inv_std[static_cast<std::size_t>(ch)];
            const S ga = gamma.data[static_cast<std::size_t>(ch)];
            const S be = beta.data[static_cast<std::size_t>(ch)];
            const S* px = x.data.data() + x.index(n, ch, 0, 0);
            S* py = y.data.data() + y.index(n, ch, 0, 0);
            S* ph = x_hat ? x_hat->data.data() + x_hat->index(n, ch, 0, 0) : nullptr;
            for (std::int64_t i = 0; i < plane; ++i) {
                const S xh = (px[i] - m) * is;
                if (ph) ph[i] = xh;
                py[i] = ga * xh + be;
            }
        }
    }
    return y;
}

template <typename S>
TensorT<S> batchnorm2d_backward(const BnCache<S>& cache, const TensorT<S>& gamma, const TensorT<S>& dy,
                                TensorT<S>* dgamma, TensorT<S>* dbeta) {
    const Shape4 shape = cache.x_hat.shape;
    if (dy.shape != shape) {
        throw std::invalid_argument("batchnorm2d_backward: gradient shape mismatch");
    }
    const int c = shape.c;
    const std::int64_t plane = static_cast<std::int64_t>(shape.h) * shape.w;
    const std::int64_t per_chan = static_cast<std::int64_t>(shape.n) * plane;

    TensorT<S> dx(shape);
    for (int ch = 0; ch < c; ++ch) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (int n = 0; n < shape.n; ++n) {
            const S* pdy = dy.data.data() + dy.index(n, ch, 0, 0);
            const S* ph = cache.x_hat.data.data() + cache.x_hat.index(n, ch, 0, 0);
            for (std::int64_t i = 0; i < plane; ++i) {
                sum_dy += static_cast<double>(pdy[i]);
                sum_dy_xhat += static_cast<double>(pdy[i]) * static_cast<double>(ph[i]);
            }
        }
        if (dgamma) dgamma->data[static_cast<std::size_t>(ch)] += static_cast<S>(sum_dy_xhat);
        if (dbeta) dbeta->data[static_cast<std::size_t>(ch)] += static_cast<S>(sum_dy);

        const double ga = static_cast<double>(gamma.data[static_cast<std::size_t>(ch)]);
        const double is = static_cast<double>(cache.inv_std[static_cast<std::size_t>(ch)]);
        const double mean_dy = sum_dy / static_cast<double>(per_chan);
        const double mean_dy_xhat = sum_dy_xhat / static_cast<double>(per_chan);
        for (int n = 0; n < shape.n; ++n) {
            const S* pdy = dy.data.data() + dy.index(n, ch, 0, 0);
            const S* ph = cache.x_hat.data.data() + cache.x_hat.index(n, ch, 0, 0);
            S* pdx = dx.data.data() + dx.index(n, ch, 0, 0);
            if (cache.mode == Mode::Train) {
                for (std::int64_t i = 0; i < plane; ++i) {
                    pdx[i] = static_cast<S>(ga * is *
                                            (static_cast<double>(pdy[i]) - mean_dy - static_cast<double>(ph[i]) * mean_dy_xhat));
                }
            } else {
                for (std::int64_t i = 0; i < plane; ++i) {
                    pdx[i] = static_cast<S>(ga * is * static_cast<double>(pdy[i]));
                }
            }
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// 2x2 stride-2 max pooling

template <typename S>
TensorT<S> maxpool2d(const TensorT<S>& x, std::vector<std::int64_t>* argmax) {
    if (x.shape.h % 2 != 0 || x.shape.w % 2 != 0) {
        throw std::invalid_argument("maxpool2d: spatial dims must be even, got " + std::to_string(x.shape.h) + "x" +
                                    std::to_string(x.shape.w));
    }
    const int oh = x.shape.h / 2, ow = x.shape.w / 2;
    TensorT<S> y(x.shape.n, x.shape.c, oh, ow);
    if (argmax) argmax->assign(static_cast<std::size_t>(y.numel()), 0);

    std::int64_t oi = 0;
    for (int n = 0; n < x.shape.n; ++n) {
        for (int c = 0; c < x.shape.c; ++c) {
            for (int i = 0; i < oh; ++i) {
                for (int j = 0; j < ow; ++j, ++oi) {
                    // ties resolve to the first occurrence in row-major scan
                    std::int64_t best_idx = x.index(n, c, 2 * i, 2 * j);
                    S best = x.data[static_cast<std::size_t>(best_idx)];
                    for (int u = 0; u < 2; ++u) {
                        for (int v = 0; v < 2; ++v) {
                            const std::int64_t idx = x.index(n, c, 2 * i + u, 2 * j + v);
                            const S val = x.data[static_cast<std::size_t>(idx)];
                            if (val > best) {
                                best = val;
                                best_idx = idx;
                            }
                        }
                    }
                    y.data[static_cast<std::size_t>(oi)] = best;
                    if (argmax) (*argmax)[static_cast<std::size_t>(oi)] = best_idx;
                }
            }
        }
    }
    return y;
}

template <typename S>
TensorT<S> maxpool2d_backward(const Shape4& in_shape, const std::vector<std::int64_t>& argmax, const TensorT<S>& dy) {
    if (static_cast<std::int64_t>(argmax.size()) != dy.numel()) {
        throw std::invalid_argument("maxpool2d_backward: argmax cache does not match gradient size");
    }
    TensorT<S> dx(in_shape);
    for (std::size_t i = 0; i < argmax.size(); ++i) {
        dx.data[static_cast<std::size_t>(argmax[i])] += dy.data[i];
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Bilinear upsampling with half-pixel-center coordinates and edge clamping.
// Source coordinate of output pixel i along an axis: (i + 0.5)/f - 0.5.

namespace detail {

struct LerpTap {
    int lo, hi;
    double t; // weight of hi
};

inline std::vector<LerpTap> bilinear_taps(int in, int factor) {
    std::vector<LerpTap> taps(static_cast<std::size_t>(in) * factor);
    for (int i = 0; i < in * factor; ++i) {
        double src = (i + 0.5) / factor - 0.5;
        if (src < 0.0) src = 0.0;
        if (src > in - 1) src = in - 1;
        const int lo = static_cast<int>(src);
        const int hi = std::min(lo + 1, in - 1);
        taps[static_cast<std::size_t>(i)] = {lo, hi, src - lo};
    }
    return taps;
}

} // namespace detail

template <typename S>
TensorT<S> upsample_bilinear(const TensorT<S>& x, int factor) {
    if (factor < 1) {
        throw std::invalid_argument("upsample_bilinear: factor must be >= 1");
    }
    if (factor == 1) return x;
    const auto ty = detail::bilinear_taps(x.shape.h, factor);
    const auto tx = detail::bilinear_taps(x.shape.w, factor);
    TensorT<S> y(x.shape.n, x.shape.c, x.shape.h * factor, x.shape.w * factor);
    for (int n = 0; n < x.shape.n; ++n) {
        for (int c = 0; c < x.shape.c; ++c) {
            const S* px = x.data.data() + x.index(n, c, 0, 0);
            S* py = y.data.data() + y.index(n, c, 0, 0);
            for (int i = 0; i < y.shape.h; ++i) {
                const auto& a = ty[static_cast<std::size_t>(i)];
                const S* r0 = px + static_cast<std::int64_t>(a.lo) * x.shape.w;
                const S* r1 = px + static_cast<std::int64_t>(a.hi) * x.shape.w;
                S* out = py + static_cast<std::int64_t>(i) * y.shape.w;
                for (int j = 0; j < y.shape.w; ++j) {
                    const auto& b = tx[static_cast<std::size_t>(j)];
                    const double top = static_cast<double>(r0[b.lo]) * (1.0 - b.t) + static_cast<double>(r0[b.hi]) * b.t;
                    const double bot = static_cast<double>(r1[b.lo]) * (1.0 - b.t) + static_cast<double>(r1[b.hi]) * b.t;
                    out[j] = static_cast<S>(top * (1.0 - a.t) + bot * a.t);
                }
            }
        }
    }
    return y;
}

template <typename S>
TensorT<S> upsample_bilinear_backward(const Shape4& in_shape, int factor, const TensorT<S>& dy) {
    if (factor == 1) return dy;
    const auto ty = detail::bilinear_taps(in_shape.h, factor);
    const auto tx = detail::bilinear_taps(in_shape.w, factor);
    TensorT<S> dx(in_shape);
    for (int n = 0; n < dy.shape.n; ++n) {
        for (int c = 0; c < dy.shape.c; ++c) {
            S* pdx = dx.data.data() + dx.index(n, c, 0, 0);
            const S* pdy = dy.data.data() + dy.index(n, c, 0, 0);
            for (int i = 0; i < dy.shape.h; ++i) {
                const auto& a = ty[static_cast<std::size_t>(i)];
                for (int j = 0; j < dy.shape.w; ++j) {
                    const auto& b = tx[static_cast<std::size_t>(j)];
                    const double g = static_cast<double>(pdy[static_cast<std::int64_t>(i) * dy.shape.w + j]);
                    pdx[static_cast<std::int64_t>(a.lo) * in_shape.w + b.lo] += static_cast<S>(g * (1.0 - a.t) * (1.0 - b.t));
                    pdx[static_cast<std::int64_t>(a.lo) * in_shape.w + b.hi] += static_cast<S>(g * (1.0 - a.t) * b.t);
                    pdx[static_cast<std::int64_t>(a.hi) * in_shape.w + b.lo] += static_cast<S>(g * a.t * (1.0 - b.t));
                    pdx[static_cast<std::int64_t>(a.hi) * in_shape.w + b.hi] += static_cast<S>(g * a.t * b.t);
                }
            }
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Channel concatenation and slicing

template <typename S>
TensorT<S> concat_channels(const std::vector<const TensorT<S>*>& xs) {
    if (xs.empty()) {
        throw std::invalid_argument("concat_channels: empty input list");
    }
    const Shape4 first = xs[0]->shape;
    int c_total = 0;
    for (const auto* t : xs) {
        if (t->shape.n != first.n || t->shape.h != first.h || t->shape.w != first.w) {
            throw std::invalid_argument("concat_channels: batch/spatial mismatch, " + t->shape.to_string() + " vs " +
                                        first.to_string());
        }
        c_total += t->shape.c;
    }
    TensorT<S> y(first.n, c_total, first.h, first.w);
    const std::int64_t plane = static_cast<std::int64_t>(first.h) * first.w;
    for (int n = 0; n < first.n; ++n) {
        int c_off = 0;
        for (const auto* t : xs) {
            std::copy(t->data.begin() + t->index(n, 0, 0, 0), t->data.begin() + t->index(n, 0, 0, 0) + t->shape.c * plane,
                      y.data.begin() + y.index(n, c_off, 0, 0));
            c_off += t->shape.c;
        }
    }
    return y;
}

template <typename S>
TensorT<S> slice_channels(const TensorT<S>& x, int c_begin, int c_end) {
    if (c_begin < 0 || c_end > x.shape.c || c_begin >= c_end) {
        throw std::invalid_argument("slice_channels: invalid range [" + std::to_string(c_begin) + ", " +
                                    std::to_string(c_end) + ") for " + std::to_string(x.shape.c) + " channels");
    }
    TensorT<S> y(x.shape.n, c_end - c_begin, x.shape.h, x.shape.w);
    const std::int64_t plane = static_cast<std::int64_t>(x.shape.h) * x.shape.w;
    for (int n = 0; n < x.shape.n; ++n) {
        std::copy(x.data.begin() + x.index(n, c_begin, 0, 0), x.data.begin() + x.index(n, c_begin, 0, 0) + (c_end - c_begin) * plane,
                  y.data.begin() + y.index(n, 0, 0, 0));
    }
    return y;
}

// ---------------------------------------------------------------------------
// ReLU

template <typename S>
TensorT<S> relu(const TensorT<S>& x) {
    TensorT<S> y(x.shape);
    for (std::size_t i = 0; i < x.data.size(); ++i) y.data[i] = x.data[i] > S(0) ? x.data[i] : S(0);
    return y;
}

// Subgradient 0 at exactly 0.
template <typename S>
TensorT<S> relu_backward(const TensorT<S>& x, const TensorT<S>& dy) {
    TensorT<S> dx(x.shape);
    for (std::size_t i = 0; i < x.data.size(); ++i) dx.data[i] = x.data[i] > S(0) ? dy.data[i] : S(0);
    return dx;
}

// ---------------------------------------------------------------------------
// Inverted dropout: train-time scale by 1/(1-p), identity at inference.

template <typename S>
TensorT<S> dropout(const TensorT<S>& x, double p, Mode mode, Rng* rng, std::vector<std::uint8_t>* mask_cache) {
    if (p < 0.0 || p >= 1.0) {
        throw std::invalid_argument("dropout: p must be in [0, 1)");
    }
    if (mode == Mode::Infer || p == 0.0) {
        if (mask_cache) mask_cache->assign(x.data.size(), 1);
        return x;
    }
    if (!rng) {
        throw std::invalid_argument("dropout: train mode needs an rng");
    }
    TensorT<S> y(x.shape);
    if (mask_cache) mask_cache->assign(x.data.size(), 0);
    const S scale = static_cast<S>(1.0 / (1.0 - p));
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        const bool keep = rng->uniform() >= p;
        if (keep) {
            y.data[i] = x.data[i] * scale;
            if (mask_cache) (*mask_cache)[i] = 1;
        }
    }
    return y;
}

template <typename S>
TensorT<S> dropout_backward(const TensorT<S>& dy, double p, const std::vector<std::uint8_t>& mask) {
    TensorT<S> dx(dy.shape);
    const S scale = static_cast<S>(1.0 / (1.0 - p));
    for (std::size_t i = 0; i < dy.data.size(); ++i) dx.data[i] = mask[i] ? dy.data[i] * scale : S(0);
    return dx;
}

// ---------------------------------------------------------------------------
// Softmax + cross entropy over the class axis of [N, K, H, W] logits.

template <typename S>
TensorT<S> softmax_channels(const TensorT<S>& logits) {
    TensorT<S> y(logits.shape);
    const int k = logits.shape.c;
    const std::int64_t plane = static_cast<std::int64_t>(logits.shape.h) * logits.shape.w;
    for (int n = 0; n < logits.shape.n; ++n) {
        const S* base = logits.data.data() + logits.index(n, 0, 0, 0);
        S* out = y.data.data() + y.index(n, 0, 0, 0);
        for (std::int64_t px = 0; px < plane; ++px) {
            double max_v = static_cast<double>(base[px]);
            for (int c = 1; c < k; ++c) max_v = std::max(max_v, static_cast<double>(base[c * plane + px]));
            double denom = 0.0;
            for (int c = 0; c < k; ++c) denom += std::exp(static_cast<double>(base[c * plane + px]) - max_v);
            for (int c = 0; c < k; ++c) {
                out[c * plane + px] = static_cast<S>(std::exp(static_cast<double>(base[c * plane + px]) - max_v) / denom);
            }
        }
    }
    return y;
}

template <typename S>
struct CeResult {
    double loss = 0.0;
    TensorT<S> dlogits;
};

// Weighted mean over non-ignored pixels of -w[y]*log softmax(logits)[y],
// normalized by the sum of w[y] over counted pixels. Gradient is zero at
// ignored pixels.
template <typename S>
CeResult<S> softmax_cross_entropy(const TensorT<S>& logits, const std::vector<std::uint8_t>& labels,
                                  const std::vector<S>* class_weights, int ignore_index) {
    const int k = logits.shape.c;
    const std::int64_t pixels = static_cast<std::int64_t>(logits.shape.n) * logits.shape.h * logits.shape.w;
    if (static_cast<std::int64_t>(labels.size()) != pixels) {
        throw std::invalid_argument("softmax_cross_entropy: label count " + std::to_string(labels.size()) +
                                    " != pixel count " + std::to_string(pixels));
    }
    if (class_weights && static_cast<int>(class_weights->size()) != k) {
        throw std::invalid_argument("softmax_cross_entropy: class_weights length != class count");
    }

    CeResult<S> res;
    res.dlogits = TensorT<S>(logits.shape);
    const std::int64_t plane = static_cast<std::int64_t>(logits.shape.h) * logits.shape.w;

    double weight_total = 0.0;
    double loss_total = 0.0;
    std::vector<double> prob(static_cast<std::size_t>(k));

    for (int n = 0; n < logits.shape.n; ++n) {
        const S* base = logits.data.data() + logits.index(n, 0, 0, 0);
        S* dbase = res.dlogits.data.data() + res.dlogits.index(n, 0, 0, 0);
        const std::uint8_t* lab = labels.data() + static_cast<std::int64_t>(n) * plane;
        for (std::int64_t px = 0; px < plane; ++px) {
            const int y = lab[px];
            if (y == ignore_index) continue;
            if (y < 0 || y >= k) {
                throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(y) + " out of range [0, " +
                                            std::to_string(k - 1) + "]");
            }
            double max_v = static_cast<double>(base[px]);
            for (int c = 1; c < k; ++c) max_v = std::max(max_v, static_cast<double>(base[c * plane + px]));
            double denom = 0.0;
            for (int c = 0; c < k; ++c) {
                prob[static_cast<std::size_t>(c)] = std::exp(static_cast<double>(base[c * plane + px]) - max_v);
                denom += prob[static_cast<std::size_t>(c)];
            }
            const double wc = class_weights ? static_cast<double>((*class_weights)[static_cast<std::size_t>(y)]) : 1.0;
            weight_total += wc;
            loss_total += wc * (std::log(denom) - (static_cast<double>(base[y * plane + px]) - max_v));
            for (int c = 0; c < k; ++c) {
                const double p = prob[static_cast<std::size_t>(c)] / denom;
                dbase[c * plane + px] = static_cast<S>(wc * (p - (c == y ? 1.0 : 0.0)));
            }
        }
    }
    if (weight_total <= 0.0) {
        throw std::invalid_argument("softmax_cross_entropy: all pixels ignored");
    }
    res.loss = loss_total / weight_total;
    const S inv = static_cast<S>(1.0 / weight_total);
    for (auto& g : res.dlogits.data) g *= inv;
    return res;
}

} // namespace edalane
