#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "edalane/ops.hpp"
#include "edalane/rng.hpp"
#include "edalane/tensor.hpp"

namespace edalane {

enum class ParamKind {
    ConvWeight,
    Bias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
};

// Running statistics are state, not learned weights.
inline bool param_is_trainable(ParamKind k) {
    return k != ParamKind::BnRunningMean && k != ParamKind::BnRunningVar;
}
// Weight decay applies to conv weights only; BN affine params and biases are exempt.
inline bool param_decays(ParamKind k) { return k == ParamKind::ConvWeight; }

template <typename S>
struct ParamRef {
    std::string name;
    TensorT<S>* tensor;
    std::vector<std::uint32_t> dims; // logical dims as stored in checkpoints
    ParamKind kind;
};

template <typename S>
using ParamList = std::vector<ParamRef<S>>;

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;

template <typename S>
struct BatchNormLayer {
    int channels = 0;
    TensorT<S> gamma, beta, run_mean, run_var;
    BnCache<S> cache;

    void init(int c) {
        channels = c;
        gamma = TensorT<S>(1, c, 1, 1);
        beta = TensorT<S>(1, c, 1, 1);
        run_mean = TensorT<S>(1, c, 1, 1);
        run_var = TensorT<S>(1, c, 1, 1);
        gamma.fill(S(1));
        run_var.fill(S(1));
        gamma.ensure_grad();
        beta.ensure_grad();
    }

    TensorT<S> forward(const TensorT<S>& x, Mode mode, bool keep_cache) {
        return batchnorm2d(x, gamma, beta, run_mean, run_var, mode, kBnMomentum, kBnEps, keep_cache ? &cache : nullptr);
    }

    TensorT<S> backward(const TensorT<S>& dy) {
        TensorT<S> dgamma(1, channels, 1, 1), dbeta(1, channels, 1, 1);
        TensorT<S> dx = batchnorm2d_backward(cache, gamma, dy, &dgamma, &dbeta);
        for (std::size_t c = 0; c < static_cast<std::size_t>(channels); ++c) {
            gamma.grad[c] += dgamma.data[c];
            beta.grad[c] += dbeta.data[c];
        }
        return dx;
    }

    void visit(const std::string& prefix, ParamList<S>& out) {
        const auto c = static_cast<std::uint32_t>(channels);
        out.push_back({prefix + ".gamma", &gamma, {c}, ParamKind::BnGamma});
        out.push_back({prefix + ".beta", &beta, {c}, ParamKind::BnBeta});
        out.push_back({prefix + ".running_mean", &run_mean, {c}, ParamKind::BnRunningMean});
        out.push_back({prefix + ".running_var", &run_var, {c}, ParamKind::BnRunningVar});
    }
};

namespace detail {

template <typename S>
TensorT<S> he_normal(int c_out, int c_in, int kh, int kw, Rng& rng) {
    TensorT<S> w(c_out, c_in, kh, kw);
    const double fan_in = static_cast<double>(c_in) * kh * kw;
    w.fill_normal(rng, std::sqrt(2.0 / fan_in));
    w.ensure_grad();
    return w;
}

// Probe initialization for receptive-field measurement: every weight is the
// same positive value 1/fan_in so activations stay near one and nothing cancels.
template <typename S>
TensorT<S> probe_weight(int c_out, int c_in, int kh, int kw) {
    TensorT<S> w(c_out, c_in, kh, kw);
    w.fill(static_cast<S>(1.0 / (static_cast<double>(c_in) * kh * kw)));
    w.ensure_grad();
    return w;
}

template <typename S>
void conv_param(ParamList<S>& out, const std::string& name, TensorT<S>* w) {
    out.push_back({name,
                   w,
                   {static_cast<std::uint32_t>(w->shape.n), static_cast<std::uint32_t>(w->shape.c),
                    static_cast<std::uint32_t>(w->shape.h), static_cast<std::uint32_t>(w->shape.w)},
                   ParamKind::ConvWeight});
}

} // namespace detail

// ---------------------------------------------------------------------------
// EDA module: pointwise conv, an asymmetric 3x1/1x3 pair, a dilated asymmetric
// pair, BN+ReLU after each group, dropout last, then dense concatenation of
// the input with the branch output. Output channels = input channels + growth.

template <typename S>
struct EdaModule {
    int in_channels = 0;
    int growth = 0;
    int dilation = 1;
    double dropout_p = 0.0;

    TensorT<S> w_point;      // [k, Cin, 1, 1]
    TensorT<S> w_a_v, w_a_h; // [k, k, 3, 1], [k, k, 1, 3], dilation 1
    TensorT<S> w_b_v, w_b_h; // same kernels at the module dilation
    BatchNormLayer<S> bn0, bn1, bn2;

    struct Cache {
        TensorT<S> x;
        TensorT<S> bn0_out, relu0_out;
        TensorT<S> a_v_out, bn1_out, relu1_out;
        TensorT<S> b_v_out, bn2_out;
        std::vector<std::uint8_t> drop_mask;
    };
    Cache cache;

    ConvGeometry geom_point() const { return {.kh = 1, .kw = 1}; }
    ConvGeometry geom_a_v() const { return {.kh = 3, .kw = 1, .ph = 1, .pw = 0}; }
    ConvGeometry geom_a_h() const { return {.kh = 1, .kw = 3, .ph = 0, .pw = 1}; }
    ConvGeometry geom_b_v() const { return {.kh = 3, .kw = 1, .dh = dilation, .dw = 1, .ph = dilation, .pw = 0}; }
    ConvGeometry geom_b_h() const { return {.kh = 1, .kw = 3, .dh = 1, .dw = dilation, .ph = 0, .pw = dilation}; }

    void init(int c_in, int k, int d, double p, Rng& rng, bool probe = false) {
        in_channels = c_in;
        growth = k;
        dilation = d;
        dropout_p = p;
        if (probe) {
            w_point = detail::probe_weight<S>(k, c_in, 1, 1);
            w_a_v = detail::probe_weight<S>(k, k, 3, 1);
            w_a_h = detail::probe_weight<S>(k, k, 1, 3);
            w_b_v = detail::probe_weight<S>(k, k, 3, 1);
            w_b_h = detail::probe_weight<S>(k, k, 1, 3);
        } else {
            w_point = detail::he_normal<S>(k, c_in, 1, 1, rng);
            w_a_v = detail::he_normal<S>(k, k, 3, 1, rng);
            w_a_h = detail::he_normal<S>(k, k, 1, 3, rng);
            w_b_v = detail::he_normal<S>(k, k, 3, 1, rng);
            w_b_h = detail::he_normal<S>(k, k, 1, 3, rng);
        }
        bn0.init(k);
        bn1.init(k);
        bn2.init(k);
    }

    int out_channels() const { return in_channels + growth; }

    TensorT<S> forward(const TensorT<S>& x, Mode mode, Rng* rng, bool keep_cache) {
        if (x.shape.c != in_channels) {
            throw std::invalid_argument("eda module: input has " + std::to_string(x.shape.c) + " channels, expected " +
                                        std::to_string(in_channels));
        }
        TensorT<S> t = conv2d(x, w_point, nullptr, geom_point());
        TensorT<S> bn0_out = bn0.forward(t, mode, keep_cache);
        TensorT<S> r0 = relu(bn0_out);

        TensorT<S> a_v = conv2d(r0, w_a_v, nullptr, geom_a_v());
        t = conv2d(a_v, w_a_h, nullptr, geom_a_h());
        TensorT<S> bn1_out = bn1.forward(t, mode, keep_cache);
        TensorT<S> r1 = relu(bn1_out);

        TensorT<S> b_v = conv2d(r1, w_b_v, nullptr, geom_b_v());
        t = conv2d(b_v, w_b_h, nullptr, geom_b_h());
        TensorT<S> bn2_out = bn2.forward(t, mode, keep_cache);
        TensorT<S> r2 = relu(bn2_out);

        TensorT<S> dropped = dropout(r2, dropout_p, mode, rng, keep_cache ? &cache.drop_mask : nullptr);
        TensorT<S> y = concat_channels<S>({&x, &dropped});

        if (keep_cache) {
            cache.x = x;
            cache.bn0_out = std::move(bn0_out);
            cache.relu0_out = std::move(r0);
            cache.a_v_out = std::move(a_v);
            cache.bn1_out = std::move(bn1_out);
            cache.relu1_out = std::move(r1);
            cache.b_v_out = std::move(b_v);
            cache.bn2_out = std::move(bn2_out);
        }
        return y;
    }

    TensorT<S> backward(const TensorT<S>& dy) {
        TensorT<S> dx_pass = slice_channels(dy, 0, in_channels);
        TensorT<S> d = slice_channels(dy, in_channels, in_channels + growth);

        d = dropout_backward(d, dropout_p, cache.drop_mask);
        d = relu_backward(cache.bn2_out, d);
        d = bn2.backward(d);
        d = conv2d_backward(cache.b_v_out, w_b_h, geom_b_h(), d, w_b_h.grad.data(), nullptr);
        d = conv2d_backward(cache.relu1_out, w_b_v, geom_b_v(), d, w_b_v.grad.data(), nullptr);

        d = relu_backward(cache.bn1_out, d);
        d = bn1.backward(d);
        d = conv2d_backward(cache.a_v_out, w_a_h, geom_a_h(), d, w_a_h.grad.data(), nullptr);
        d = conv2d_backward(cache.relu0_out, w_a_v, geom_a_v(), d, w_a_v.grad.data(), nullptr);

        d = relu_backward(cache.bn0_out, d);
        d = bn0.backward(d);
        d = conv2d_backward(cache.x, w_point, geom_point(), d, w_point.grad.data(), nullptr);

        for (std::size_t i = 0; i < d.data.size(); ++i) d.data[i] += dx_pass.data[i];
        return d;
    }

    void visit_params(const std::string& prefix, ParamList<S>& out) {
        detail::conv_param(out, prefix + ".point.w", &w_point);
        detail::conv_param(out, prefix + ".a_v.w", &w_a_v);
        detail::conv_param(out, prefix + ".a_h.w", &w_a_h);
        detail::conv_param(out, prefix + ".b_v.w", &w_b_v);
        detail::conv_param(out, prefix + ".b_h.w", &w_b_h);
        bn0.visit(prefix + ".bn0", out);
        bn1.visit(prefix + ".bn1", out);
        bn2.visit(prefix + ".bn2", out);
    }
};

// ---------------------------------------------------------------------------
// Downsampling block. When widening (Cout > Cin) a 3x3 stride-2 conv with
// Cout-Cin filters runs next to a 2x2 max pool and the two are concatenated;
// otherwise a plain 3x3 stride-2 conv with Cout filters. BN+ReLU afterwards.

template <typename S>
struct Downsampler {
    int in_channels = 0;
    int out_channels = 0;
    TensorT<S> w; // [filters, Cin, 3, 3]
    BatchNormLayer<S> bn;

    struct Cache {
        TensorT<S> x;
        std::vector<std::int64_t> pool_argmax;
        TensorT<S> bn_out;
    };
    Cache cache;

    bool widening() const { return out_channels > in_channels; }
    int conv_filters() const { return widening() ? out_channels - in_channels : out_channels; }
    ConvGeometry geom() const { return {.kh = 3, .kw = 3, .sh = 2, .sw = 2, .ph = 1, .pw = 1}; }

    void init(int c_in, int c_out, Rng& rng, bool probe = false) {
        in_channels = c_in;
        out_channels = c_out;
        w = probe ? detail::probe_weight<S>(conv_filters(), c_in, 3, 3) : detail::he_normal<S>(conv_filters(), c_in, 3, 3, rng);
        bn.init(c_out);
    }

    TensorT<S> forward(const TensorT<S>& x, Mode mode, bool keep_cache) {
        if (x.shape.c != in_channels) {
            throw std::invalid_argument("downsampler: input has " + std::to_string(x.shape.c) + " channels, expected " +
                                        std::to_string(in_channels));
        }
        if (x.shape.h % 2 != 0 || x.shape.w % 2 != 0) {
            throw std::invalid_argument("downsampler: spatial dims must be even, got " + std::to_string(x.shape.h) + "x" +
                                        std::to_string(x.shape.w));
        }
        TensorT<S> conv_out = conv2d(x, w, nullptr, geom());
        TensorT<S> t;
        if (widening()) {
            TensorT<S> pooled = maxpool2d(x, keep_cache ? &cache.pool_argmax : nullptr);
            t = concat_channels<S>({&conv_out, &pooled});
        } else {
            t = std::move(conv_out);
        }
        TensorT<S> bn_out = bn.forward(t, mode, keep_cache);
        TensorT<S> y = relu(bn_out);
        if (keep_cache) {
            cache.x = x;
            cache.bn_out = std::move(bn_out);
        }
        return y;
    }

    TensorT<S> backward(const TensorT<S>& dy) {
        TensorT<S> d = relu_backward(cache.bn_out, dy);
        d = bn.backward(d);
        if (widening()) {
            TensorT<S> d_conv = slice_channels(d, 0, conv_filters());
            TensorT<S> d_pool = slice_channels(d, conv_filters(), out_channels);
            TensorT<S> dx = conv2d_backward(cache.x, w, geom(), d_conv, w.grad.data(), nullptr);
            TensorT<S> dx_pool = maxpool2d_backward(cache.x.shape, cache.pool_argmax, d_pool);
            for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += dx_pool.data[i];
            return dx;
        }
        return conv2d_backward(cache.x, w, geom(), d, w.grad.data(), nullptr);
    }

    void visit_params(const std::string& prefix, ParamList<S>& out) {
        detail::conv_param(out, prefix + ".conv.w", &w);
        bn.visit(prefix + ".bn", out);
    }
};

// ---------------------------------------------------------------------------
// Classification head: 1x1 conv to num_classes (with bias), then bilinear
// upsample back to the input resolution.

template <typename S>
struct Head {
    int in_channels = 0;
    int num_classes = 0;
    int factor = 1;
    TensorT<S> w; // [classes, Cin, 1, 1]
    TensorT<S> b; // [classes]

    struct Cache {
        TensorT<S> x;
        Shape4 feat_shape;
    };
    Cache cache;

    ConvGeometry geom() const { return {.kh = 1, .kw = 1}; }

    void init(int c_in, int classes, int f, Rng& rng, bool probe = false) {
        in_channels = c_in;
        num_classes = classes;
        factor = f;
        w = probe ? detail::probe_weight<S>(classes, c_in, 1, 1) : detail::he_normal<S>(classes, c_in, 1, 1, rng);
        b = TensorT<S>(1, classes, 1, 1);
        b.ensure_grad();
    }

    TensorT<S> forward(const TensorT<S>& x, bool keep_cache) {
        TensorT<S> t = conv2d(x, w, &b, geom());
        if (keep_cache) {
            cache.x = x;
            cache.feat_shape = t.shape;
        }
        return upsample_bilinear(t, factor);
    }

    TensorT<S> backward(const TensorT<S>& dy) {
        TensorT<S> d = upsample_bilinear_backward(cache.feat_shape, factor, dy);
        return conv2d_backward(cache.x, w, geom(), d, w.grad.data(), b.grad.data());
    }

    void visit_params(const std::string& prefix, ParamList<S>& out) {
        detail::conv_param(out, prefix + ".conv.w", &w);
        out.push_back({prefix + ".conv.b", &b, {static_cast<std::uint32_t>(num_classes)}, ParamKind::Bias});
    }
};

} // namespace edalane
