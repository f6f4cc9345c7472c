#pragma once

#include <cmath>
#include <numbers>
#include <optional>

#include "vitkit/tensor.hpp"

namespace vitkit {

enum class Mode { train, eval };

// ---------------------------------------------------------------------------
// GELU, exact erf form: gelu(x) = x * Phi(x). The tanh approximation is
// deliberately not used so gradient checks have one less moving part.
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
    Tensor<S> out(x.shape());
    const auto xv = x.data();
    auto ov = out.data();
    const S inv_sqrt2 = static_cast<S>(1.0 / std::numbers::sqrt2);
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const S phi = S(0.5) * (S(1) + std::erf(xv[i] * inv_sqrt2));
        ov[i] = xv[i] * phi;
    }
    attach_backward(out, {x}, [o = out.node().get(), xn = x.node(), inv_sqrt2] {
        xn->ensure_grad();
        const S inv_sqrt2pi = static_cast<S>(1.0 / std::sqrt(2.0 * std::numbers::pi));
        for (std::size_t i = 0; i < o->grad.size(); ++i) {
            const S v = xn->value[i];
            const S phi = S(0.5) * (S(1) + std::erf(v * inv_sqrt2));
            const S pdf = inv_sqrt2pi * std::exp(S(-0.5) * v * v);
            xn->grad[i] += o->grad[i] * (phi + v * pdf);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// LayerNorm over the last dim with affine parameters gamma/beta of size d.
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     S eps = S(1e-6)) {
    const std::int64_t d = x.dim(x.ndim() - 1);
    if (gamma.numel() != d || beta.numel() != d)
        throw DimensionError("layer_norm: affine params " + shape_str(gamma.shape()) + "/" +
                             shape_str(beta.shape()) + " do not match width " + std::to_string(d));
    const std::int64_t rows = x.numel() / d;
    Tensor<S> out(x.shape());
    std::vector<S> inv_std(static_cast<std::size_t>(rows));
    std::vector<S> xhat(static_cast<std::size_t>(x.numel()));
    const auto xv = x.data(), gv = gamma.data(), bv = beta.data();
    auto ov = out.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* row = xv.data() + r * d;
        S mu = 0;
        for (std::int64_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<S>(d);
        S var = 0;
        for (std::int64_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<S>(d);
        const S istd = S(1) / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(r)] = istd;
        for (std::int64_t j = 0; j < d; ++j) {
            const S h = (row[j] - mu) * istd;
            xhat[static_cast<std::size_t>(r * d + j)] = h;
            ov[r * d + j] = h * gv[j] + bv[j];
        }
    }
    attach_backward(out, {x, gamma, beta},
                    [o = out.node().get(), xn = x.node(), gn = gamma.node(), bn = beta.node(),
                     rows, d, inv_std = std::move(inv_std), xhat = std::move(xhat)] {
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        if (xn->requires_grad) xn->ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
            const S* dy = o->grad.data() + r * d;
            const S* h = xhat.data() + r * d;
            if (gn->requires_grad || bn->requires_grad) {
                for (std::int64_t j = 0; j < d; ++j) {
                    if (gn->requires_grad) gn->grad[j] += dy[j] * h[j];
                    if (bn->requires_grad) bn->grad[j] += dy[j];
                }
            }
            if (xn->requires_grad) {
                // dxhat = dy*gamma; dx = istd*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                S m1 = 0, m2 = 0;
                for (std::int64_t j = 0; j < d; ++j) {
                    const S dh = dy[j] * gn->value[j];
                    m1 += dh;
                    m2 += dh * h[j];
                }
                m1 /= static_cast<S>(d);
                m2 /= static_cast<S>(d);
                const S istd = inv_std[static_cast<std::size_t>(r)];
                for (std::int64_t j = 0; j < d; ++j) {
                    const S dh = dy[j] * gn->value[j];
                    xn->grad[r * d + j] += istd * (dh - m1 - h[j] * m2);
                }
            }
        }
    });
    return out;
}

// Per-spatial-position LayerNorm on [b, c, h, w]: each (b, y, x) column is
// normalized across channels. This is the "ln" flavour used inside stems.
template <typename S>
Tensor<S> layer_norm_channels(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                              S eps = S(1e-6)) {
    const std::int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (gamma.numel() != c || beta.numel() != c)
        throw DimensionError("layer_norm_channels: params do not match channel count " +
                             std::to_string(c));
    Tensor<S> out(x.shape());
    std::vector<S> inv_std(static_cast<std::size_t>(b * hw));
    std::vector<S> xhat(static_cast<std::size_t>(x.numel()));
    const auto xv = x.data(), gv = gamma.data(), bv = beta.data();
    auto ov = out.data();
    for (std::int64_t i = 0; i < b; ++i)
        for (std::int64_t p = 0; p < hw; ++p) {
            S mu = 0;
            for (std::int64_t ch = 0; ch < c; ++ch) mu += xv[(i * c + ch) * hw + p];
            mu /= static_cast<S>(c);
            S var = 0;
            for (std::int64_t ch = 0; ch < c; ++ch) {
                const S dphi = xv[(i * c + ch) * hw + p] - mu;
                var += dphi * dphi;
            }
            var /= static_cast<S>(c);
            const S istd = S(1) / std::sqrt(var + eps);
            inv_std[static_cast<std::size_t>(i * hw + p)] = istd;
            for (std::int64_t ch = 0; ch < c; ++ch) {
                const std::int64_t idx = (i * c + ch) * hw + p;
                const S h = (xv[idx] - mu) * istd;
                xhat[static_cast<std::size_t>(idx)] = h;
                ov[idx] = h * gv[ch] + bv[ch];
            }
        }
    attach_backward(out, {x, gamma, beta},
                    [o = out.node().get(), xn = x.node(), gn = gamma.node(), bn = beta.node(), b,
                     c, hw, inv_std = std::move(inv_std), xhat = std::move(xhat)] {
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        if (xn->requires_grad) xn->ensure_grad();
        for (std::int64_t i = 0; i < b; ++i)
            for (std::int64_t p = 0; p < hw; ++p) {
                S m1 = 0, m2 = 0;
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    const std::int64_t idx = (i * c + ch) * hw + p;
                    const S dy = o->grad[static_cast<std::size_t>(idx)];
                    const S h = xhat[static_cast<std::size_t>(idx)];
                    if (gn->requires_grad) gn->grad[ch] += dy * h;
                    if (bn->requires_grad) bn->grad[ch] += dy;
                    const S dh = dy * gn->value[ch];
                    m1 += dh;
                    m2 += dh * h;
                }
                if (!xn->requires_grad) continue;
                m1 /= static_cast<S>(c);
                m2 /= static_cast<S>(c);
                const S istd = inv_std[static_cast<std::size_t>(i * hw + p)];
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    const std::int64_t idx = (i * c + ch) * hw + p;
                    const S dh = o->grad[static_cast<std::size_t>(idx)] * gn->value[ch];
                    xn->grad[idx] += istd * (dh - m1 - xhat[static_cast<std::size_t>(idx)] * m2);
                }
            }
    });
    return out;
}

// ---------------------------------------------------------------------------
// BatchNorm over [b, c, h, w]. Train mode normalizes per channel over
// (b, h, w) with biased variance and updates the running stats in `state`;
// eval mode applies the frozen stats. Running stats are buffers, not
// parameters, so they live outside the autodiff graph.
// ---------------------------------------------------------------------------
template <typename S>
struct BnState {
    std::vector<S> running_mean;
    std::vector<S> running_var; // biased batch estimate

    explicit BnState(std::int64_t channels = 0)
        : running_mean(static_cast<std::size_t>(channels), S(0)),
          running_var(static_cast<std::size_t>(channels), S(1)) {}
};

template <typename S>
Tensor<S> batch_norm_2d(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                        BnState<S>& state, Mode mode, S momentum = S(0.1), S eps = S(1e-5)) {
    if (x.ndim() != 4)
        throw DimensionError("batch_norm_2d: expected [b,c,h,w], got " + shape_str(x.shape()));
    const std::int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (gamma.numel() != c || beta.numel() != c ||
        static_cast<std::int64_t>(state.running_mean.size()) != c)
        throw DimensionError("batch_norm_2d: channel mismatch, x has " + std::to_string(c) +
                             " channels, params have " + std::to_string(gamma.numel()));
    const std::int64_t m = b * hw;
    Tensor<S> out(x.shape());
    std::vector<S> mean_c(static_cast<std::size_t>(c)), istd_c(static_cast<std::size_t>(c));
    const auto xv = x.data(), gv = gamma.data(), bv = beta.data();
    auto ov = out.data();
    for (std::int64_t ch = 0; ch < c; ++ch) {
        S mu, var;
        if (mode == Mode::train) {
            mu = 0;
            for (std::int64_t i = 0; i < b; ++i)
                for (std::int64_t p = 0; p < hw; ++p) mu += xv[(i * c + ch) * hw + p];
            mu /= static_cast<S>(m);
            var = 0;
            for (std::int64_t i = 0; i < b; ++i)
                for (std::int64_t p = 0; p < hw; ++p) {
                    const S dphi = xv[(i * c + ch) * hw + p] - mu;
                    var += dphi * dphi;
                }
            var /= static_cast<S>(m);
            state.running_mean[static_cast<std::size_t>(ch)] =
                (S(1) - momentum) * state.running_mean[static_cast<std::size_t>(ch)] + momentum * mu;
            state.running_var[static_cast<std::size_t>(ch)] =
                (S(1) - momentum) * state.running_var[static_cast<std::size_t>(ch)] + momentum * var;
        } else {
            mu = state.running_mean[static_cast<std::size_t>(ch)];
            var = state.running_var[static_cast<std::size_t>(ch)];
        }
        const S istd = S(1) / std::sqrt(var + eps);
        mean_c[static_cast<std::size_t>(ch)] = mu;
        istd_c[static_cast<std::size_t>(ch)] = istd;
        for (std::int64_t i = 0; i < b; ++i)
            for (std::int64_t p = 0; p < hw; ++p) {
                const std::int64_t idx = (i * c + ch) * hw + p;
                ov[idx] = (xv[idx] - mu) * istd * gv[ch] + bv[ch];
            }
    }
    const bool train = (mode == Mode::train);
    attach_backward(out, {x, gamma, beta},
                    [o = out.node().get(), xn = x.node(), gn = gamma.node(), bn = beta.node(), b,
                     c, hw, m, train, mean_c = std::move(mean_c), istd_c = std::move(istd_c)] {
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        if (xn->requires_grad) xn->ensure_grad();
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const S mu = mean_c[static_cast<std::size_t>(ch)];
            const S istd = istd_c[static_cast<std::size_t>(ch)];
            S sum_dy = 0, sum_dy_h = 0;
            for (std::int64_t i = 0; i < b; ++i)
                for (std::int64_t p = 0; p < hw; ++p) {
                    const std::int64_t idx = (i * c + ch) * hw + p;
                    const S dy = o->grad[static_cast<std::size_t>(idx)];
                    const S h = (xn->value[static_cast<std::size_t>(idx)] - mu) * istd;
                    sum_dy += dy;
                    sum_dy_h += dy * h;
                }
            if (gn->requires_grad) gn->grad[ch] += sum_dy_h;
            if (bn->requires_grad) bn->grad[ch] += sum_dy;
            if (!xn->requires_grad) continue;
            const S g = gn->value[ch];
            for (std::int64_t i = 0; i < b; ++i)
                for (std::int64_t p = 0; p < hw; ++p) {
                    const std::int64_t idx = (i * c + ch) * hw + p;
                    const S dy = o->grad[static_cast<std::size_t>(idx)];
                    if (train) {
                        const S h = (xn->value[static_cast<std::size_t>(idx)] - mu) * istd;
                        xn->grad[idx] += g * istd *
                                         (dy - sum_dy / static_cast<S>(m) -
                                          h * sum_dy_h / static_cast<S>(m));
                    } else {
                        xn->grad[idx] += g * istd * dy;
                    }
                }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// conv2d with cross-correlation semantics (no kernel flip), im2col + GEMM.
// x: [b, cin, h, w], kernel: [cout, cin, kh, kw], optional bias [cout].
// ---------------------------------------------------------------------------
namespace detail {

template <typename S>
void im2col(const S* x, std::int64_t cin, std::int64_t h, std::int64_t w, std::int64_t kh,
            std::int64_t kw, std::int64_t stride, std::int64_t pad, std::int64_t oh,
            std::int64_t ow, S* cols) {
    // cols is [cin*kh*kw, oh*ow]
    for (std::int64_t ch = 0; ch < cin; ++ch)
        for (std::int64_t ky = 0; ky < kh; ++ky)
            for (std::int64_t kx = 0; kx < kw; ++kx) {
                S* dst = cols + ((ch * kh + ky) * kw + kx) * oh * ow;
                for (std::int64_t oy = 0; oy < oh; ++oy) {
                    const std::int64_t iy = oy * stride - pad + ky;
                    for (std::int64_t ox = 0; ox < ow; ++ox) {
                        const std::int64_t ix = ox * stride - pad + kx;
                        dst[oy * ow + ox] = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                                ? x[(ch * h + iy) * w + ix]
                                                : S(0);
                    }
                }
            }
}

template <typename S>
void col2im_accum(const S* cols, std::int64_t cin, std::int64_t h, std::int64_t w, std::int64_t kh,
                  std::int64_t kw, std::int64_t stride, std::int64_t pad, std::int64_t oh,
                  std::int64_t ow, S* x) {
    for (std::int64_t ch = 0; ch < cin; ++ch)
        for (std::int64_t ky = 0; ky < kh; ++ky)
            for (std::int64_t kx = 0; kx < kw; ++kx) {
                const S* src = cols + ((ch * kh + ky) * kw + kx) * oh * ow;
                for (std::int64_t oy = 0; oy < oh; ++oy) {
                    const std::int64_t iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    for (std::int64_t ox = 0; ox < ow; ++ox) {
                        const std::int64_t ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= w) continue;
                        x[(ch * h + iy) * w + ix] += src[oy * ow + ox];
                    }
                }
            }
}

} // namespace detail

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& kernel,
                 const std::optional<Tensor<S>>& bias, std::int64_t stride, std::int64_t pad) {
    if (x.ndim() != 4 || kernel.ndim() != 4)
        throw DimensionError("conv2d: expected x[b,cin,h,w], kernel[cout,cin,kh,kw], got " +
                             shape_str(x.shape()) + " and " + shape_str(kernel.shape()));
    const std::int64_t b = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::int64_t cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    if (kernel.dim(1) != cin)
        throw DimensionError("conv2d: input channels " + std::to_string(cin) +
                             " do not match kernel " + shape_str(kernel.shape()));
    const std::int64_t oh = (h + 2 * pad - kh) / stride + 1;
    const std::int64_t ow = (w + 2 * pad - kw) / stride + 1;
    if (h + 2 * pad < kh || w + 2 * pad < kw)
        throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) +
                             " larger than padded input " + shape_str(x.shape()));
    const std::int64_t K = cin * kh * kw, P = oh * ow;
    Tensor<S> out({b, cout, oh, ow});
    std::vector<S> cols(static_cast<std::size_t>(K * P));
    const auto xv = x.data(), kv = kernel.data();
    auto ov = out.data();
    for (std::int64_t i = 0; i < b; ++i) {
        detail::im2col(xv.data() + i * cin * h * w, cin, h, w, kh, kw, stride, pad, oh, ow,
                       cols.data());
        // out[i] (cout x P) = kernel_flat (cout x K) * cols (K x P)
        gemm_nn(kv.data(), cols.data(), ov.data() + i * cout * P, cout, K, P, false);
    }
    if (bias) {
        const auto biasv = bias->data();
        for (std::int64_t i = 0; i < b; ++i)
            for (std::int64_t ch = 0; ch < cout; ++ch)
                for (std::int64_t p = 0; p < P; ++p) ov[(i * cout + ch) * P + p] += biasv[ch];
    }
    std::vector<Tensor<S>> parents{x, kernel};
    if (bias) parents.push_back(*bias);
    std::shared_ptr<TensorNode<S>> bias_node = bias ? bias->node() : nullptr;
    attach_backward_vec(out, parents,
                    [o = out.node().get(), xn = x.node(), kn = kernel.node(), bias_node, b, cin,
                     h, w, cout, kh, kw, stride, pad, oh, ow, K, P] {
        if (kn->requires_grad) kn->ensure_grad();
        if (xn->requires_grad) xn->ensure_grad();
        if (bias_node && bias_node->requires_grad) bias_node->ensure_grad();
        std::vector<S> cols(static_cast<std::size_t>(K * P));
        std::vector<S> dcols(static_cast<std::size_t>(K * P));
        for (std::int64_t i = 0; i < b; ++i) {
            const S* dy = o->grad.data() + i * cout * P;
            if (bias_node && bias_node->requires_grad)
                for (std::int64_t ch = 0; ch < cout; ++ch)
                    for (std::int64_t p = 0; p < P; ++p)
                        bias_node->grad[ch] += dy[ch * P + p];
            if (kn->requires_grad) {
                detail::im2col(xn->value.data() + i * cin * h * w, cin, h, w, kh, kw, stride,
                               pad, oh, ow, cols.data());
                // dK (cout x K) += dy (cout x P) * cols^T (P x K)
                gemm_nt(dy, cols.data(), kn->grad.data(), cout, P, K, true);
            }
            if (xn->requires_grad) {
                // dcols (K x P) = kernel^T (K x cout) * dy (cout x P)
                gemm_tn(kn->value.data(), dy, dcols.data(), K, cout, P, false);
                detail::col2im_accum(dcols.data(), cin, h, w, kh, kw, stride, pad, oh, ow,
                                     xn->grad.data() + i * cin * h * w);
            }
        }
    });
    return out;
}

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& kernel, std::int64_t stride,
                 std::int64_t pad) {
    return conv2d(x, kernel, std::optional<Tensor<S>>{}, stride, pad);
}

// ---------------------------------------------------------------------------
// Scaled dot-product attention over a fused qkv tensor [b, t, 3d] laid out
// as [q | k | v]. One graph node for the whole step; softmax probabilities
// are saved for the backward pass. Head slices are packed into contiguous
// scratch so every product goes through the counted GEMM helpers.
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> attention(const Tensor<S>& qkv, std::int64_t heads) {
    const std::int64_t b = qkv.dim(0), t = qkv.dim(1), d3 = qkv.dim(2);
    const std::int64_t d = d3 / 3;
    if (d3 % 3 != 0 || d % heads != 0)
        throw ConfigError("attention: width " + std::to_string(d) + " not divisible by " +
                          std::to_string(heads) + " heads");
    const std::int64_t dh = d / heads;
    const S alpha = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor<S> out({b, t, d});
    auto probs = std::make_shared<std::vector<S>>(static_cast<std::size_t>(b * heads * t * t));
    std::vector<S> q(static_cast<std::size_t>(t * dh)), k(q.size()), v(q.size());
    std::vector<S> scores(static_cast<std::size_t>(t * t)), ohead(q.size());
    const auto in = qkv.data();
    auto ov = out.data();
    auto pack = [&](std::int64_t i, std::int64_t hd, std::int64_t part, S* dst) {
        const S* base = in.data() + (i * t) * d3 + part * d + hd * dh;
        for (std::int64_t r = 0; r < t; ++r)
            for (std::int64_t j = 0; j < dh; ++j) dst[r * dh + j] = base[r * d3 + j];
    };
    for (std::int64_t i = 0; i < b; ++i)
        for (std::int64_t hd = 0; hd < heads; ++hd) {
            pack(i, hd, 0, q.data());
            pack(i, hd, 1, k.data());
            pack(i, hd, 2, v.data());
            gemm_nt(q.data(), k.data(), scores.data(), t, dh, t, false);
            S* p = probs->data() + (i * heads + hd) * t * t;
            for (std::int64_t r = 0; r < t; ++r) {
                const S* srow = scores.data() + r * t;
                S mx = srow[0] * alpha;
                for (std::int64_t j = 1; j < t; ++j) mx = std::max(mx, srow[j] * alpha);
                S denom = 0;
                for (std::int64_t j = 0; j < t; ++j) {
                    const S e = std::exp(srow[j] * alpha - mx);
                    p[r * t + j] = e;
                    denom += e;
                }
                for (std::int64_t j = 0; j < t; ++j) p[r * t + j] /= denom;
            }
            gemm_nn(p, v.data(), ohead.data(), t, t, dh, false);
            S* obase = ov.data() + (i * t) * d + hd * dh;
            for (std::int64_t r = 0; r < t; ++r)
                for (std::int64_t j = 0; j < dh; ++j) obase[r * d + j] = ohead[r * dh + j];
        }
    attach_backward(out, {qkv},
                    [o = out.node().get(), qn = qkv.node(), probs, b, t, d, d3, heads, dh, alpha] {
        qn->ensure_grad();
        std::vector<S> q(static_cast<std::size_t>(t * dh)), k(q.size()), v(q.size());
        std::vector<S> dohead(q.size()), dq(q.size()), dk(q.size()), dv(q.size());
        std::vector<S> dp(static_cast<std::size_t>(t * t)), ds(dp.size());
        auto pack = [&](std::int64_t i, std::int64_t hd, std::int64_t part, const std::vector<S>& src,
                        S* dst) {
            const S* base = src.data() + (i * t) * d3 + part * d + hd * dh;
            for (std::int64_t r = 0; r < t; ++r)
                for (std::int64_t j = 0; j < dh; ++j) dst[r * dh + j] = base[r * d3 + j];
        };
        for (std::int64_t i = 0; i < b; ++i)
            for (std::int64_t hd = 0; hd < heads; ++hd) {
                pack(i, hd, 0, qn->value, q.data());
                pack(i, hd, 1, qn->value, k.data());
                pack(i, hd, 2, qn->value, v.data());
                const S* dy = o->grad.data() + (i * t) * d + hd * dh;
                for (std::int64_t r = 0; r < t; ++r)
                    for (std::int64_t j = 0; j < dh; ++j) dohead[r * dh + j] = dy[r * d + j];
                const S* p = probs->data() + (i * heads + hd) * t * t;
                // dV = P^T * dO ; dP = dO * V^T
                gemm_tn(p, dohead.data(), dv.data(), t, t, dh, false);
                gemm_nt(dohead.data(), v.data(), dp.data(), t, dh, t, false);
                for (std::int64_t r = 0; r < t; ++r) {
                    S dot = 0;
                    for (std::int64_t j = 0; j < t; ++j) dot += dp[r * t + j] * p[r * t + j];
                    for (std::int64_t j = 0; j < t; ++j)
                        ds[r * t + j] = alpha * p[r * t + j] * (dp[r * t + j] - dot);
                }
                gemm_nn(ds.data(), k.data(), dq.data(), t, t, dh, false);
                gemm_tn(ds.data(), q.data(), dk.data(), t, t, dh, false);
                auto scatter = [&](std::int64_t part, const std::vector<S>& src) {
                    S* base = qn->grad.data() + (i * t) * d3 + part * d + hd * dh;
                    for (std::int64_t r = 0; r < t; ++r)
                        for (std::int64_t j = 0; j < dh; ++j) base[r * d3 + j] += src[r * dh + j];
                };
                scatter(0, dq);
                scatter(1, dk);
                scatter(2, dv);
            }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Mean cross-entropy between logits [b, classes] and integer labels.
template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, const std::vector<int>& labels) {
    const std::int64_t b = logits.dim(0), classes = logits.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != b)
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(b) + " rows");
    auto probs = std::make_shared<std::vector<S>>(static_cast<std::size_t>(b * classes));
    const auto lv = logits.data();
    S loss = 0;
    for (std::int64_t i = 0; i < b; ++i) {
        const S* row = lv.data() + i * classes;
        S mx = row[0];
        for (std::int64_t j = 1; j < classes; ++j) mx = std::max(mx, row[j]);
        S denom = 0;
        for (std::int64_t j = 0; j < classes; ++j) {
            const S e = std::exp(row[j] - mx);
            (*probs)[static_cast<std::size_t>(i * classes + j)] = e;
            denom += e;
        }
        for (std::int64_t j = 0; j < classes; ++j)
            (*probs)[static_cast<std::size_t>(i * classes + j)] /= denom;
        loss -= std::log((*probs)[static_cast<std::size_t>(i * classes + labels[static_cast<std::size_t>(i)])]);
    }
    loss /= static_cast<S>(b);
    Tensor<S> out = Tensor<S>::from({1}, {loss});
    attach_backward(out, {logits},
                    [o = out.node().get(), ln = logits.node(), probs, labels, b, classes] {
        ln->ensure_grad();
        const S g = o->grad[0] / static_cast<S>(b);
        for (std::int64_t i = 0; i < b; ++i)
            for (std::int64_t j = 0; j < classes; ++j) {
                S p = (*probs)[static_cast<std::size_t>(i * classes + j)];
                if (j == labels[static_cast<std::size_t>(i)]) p -= S(1);
                ln->grad[i * classes + j] += g * p;
            }
    });
    return out;
}

// MSE over the rows selected by `mask`, averaged over every selected element.
// `target` is a constant (no gradient flows into it).
template <typename S>
Tensor<S> masked_mse(const Tensor<S>& pred, const Tensor<S>& target,
                     const std::vector<std::uint8_t>& mask) {
    check_same_shape(pred, target, "masked_mse");
    const std::int64_t b = pred.dim(0), t = pred.dim(1), dpix = pred.dim(2);
    if (static_cast<std::int64_t>(mask.size()) != t)
        throw DimensionError("masked_mse: mask length " + std::to_string(mask.size()) +
                             " != token count " + std::to_string(t));
    std::int64_t selected = 0;
    for (auto m : mask) selected += m ? 1 : 0;
    if (selected == 0) throw ConfigError("masked_mse: empty mask, loss undefined");
    const S denom = static_cast<S>(b * selected * dpix);
    const auto pv = pred.data(), tv = target.data();
    S acc = 0;
    for (std::int64_t i = 0; i < b; ++i)
        for (std::int64_t r = 0; r < t; ++r) {
            if (!mask[static_cast<std::size_t>(r)]) continue;
            const S* prow = pv.data() + (i * t + r) * dpix;
            const S* trow = tv.data() + (i * t + r) * dpix;
            for (std::int64_t j = 0; j < dpix; ++j) {
                const S dphi = prow[j] - trow[j];
                acc += dphi * dphi;
            }
        }
    Tensor<S> out = Tensor<S>::from({1}, {acc / denom});
    attach_backward(out, {pred},
                    [o = out.node().get(), pn = pred.node(), tn = target.node(), mask, b, t, dpix,
                     denom] {
        pn->ensure_grad();
        const S g = o->grad[0] * S(2) / denom;
        for (std::int64_t i = 0; i < b; ++i)
            for (std::int64_t r = 0; r < t; ++r) {
                if (!mask[static_cast<std::size_t>(r)]) continue;
                for (std::int64_t j = 0; j < dpix; ++j) {
                    const std::int64_t idx = (i * t + r) * dpix + j;
                    pn->grad[idx] += g * (pn->value[static_cast<std::size_t>(idx)] -
                                          tn->value[static_cast<std::size_t>(idx)]);
                }
            }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Layout shuffles between image and token form
// ---------------------------------------------------------------------------

// [b, c, h, w] -> [b, h*w, c] (tokens in row-major spatial order).
template <typename S>
Tensor<S> chw_to_tokens(const Tensor<S>& x) {
    const std::int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor<S> out({b, hw, c});
    const auto xv = x.data();
    auto ov = out.data();
    for (std::int64_t i = 0; i < b; ++i)
        for (std::int64_t ch = 0; ch < c; ++ch)
            for (std::int64_t p = 0; p < hw; ++p)
                ov[(i * hw + p) * c + ch] = xv[(i * c + ch) * hw + p];
    attach_backward(out, {x}, [o = out.node().get(), xn = x.node(), b, c, hw] {
        xn->ensure_grad();
        for (std::int64_t i = 0; i < b; ++i)
            for (std::int64_t ch = 0; ch < c; ++ch)
                for (std::int64_t p = 0; p < hw; ++p)
                    xn->grad[(i * c + ch) * hw + p] += o->grad[(i * hw + p) * c + ch];
    });
    return out;
}

// [b, h*w, c] -> [b, c, h, w]; inverse of chw_to_tokens.
template <typename S>
Tensor<S> tokens_to_chw(const Tensor<S>& x, std::int64_t h, std::int64_t w) {
    const std::int64_t b = x.dim(0), hw = x.dim(1), c = x.dim(2);
    if (hw != h * w)
        throw DimensionError("tokens_to_chw: " + std::to_string(hw) + " tokens cannot form a " +
                             std::to_string(h) + "x" + std::to_string(w) + " grid");
    Tensor<S> out({b, c, h, w});
    const auto xv = x.data();
    auto ov = out.data();
    for (std::int64_t i = 0; i < b; ++i)
        for (std::int64_t ch = 0; ch < c; ++ch)
            for (std::int64_t p = 0; p < hw; ++p)
                ov[(i * c + ch) * hw + p] = xv[(i * hw + p) * c + ch];
    attach_backward(out, {x}, [o = out.node().get(), xn = x.node(), b, c, hw] {
        xn->ensure_grad();
        for (std::int64_t i = 0; i < b; ++i)
            for (std::int64_t ch = 0; ch < c; ++ch)
                for (std::int64_t p = 0; p < hw; ++p)
                    xn->grad[(i * hw + p) * c + ch] += o->grad[(i * c + ch) * hw + p];
    });
    return out;
}

// [b, 3, H, W] -> [b, T, patch*patch*3] with each patch flattened in
// (channel, y, x) order, matching a [d, 3, p, p] convolution kernel layout.
template <typename S>
Tensor<S> patchify(const Tensor<S>& x, std::int64_t patch) {
    const std::int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % patch != 0 || w % patch != 0)
        throw DimensionError("patchify: image " + shape_str(x.shape()) +
                             " not divisible into " + std::to_string(patch) + "-pixel patches");
    const std::int64_t gh = h / patch, gw = w / patch, T = gh * gw;
    const std::int64_t pd = c * patch * patch;
    Tensor<S> out({b, T, pd});
    const auto xv = x.data();
    auto ov = out.data();
    for (std::int64_t i = 0; i < b; ++i)
        for (std::int64_t py = 0; py < gh; ++py)
            for (std::int64_t px = 0; px < gw; ++px) {
                S* dst = ov.data() + (i * T + py * gw + px) * pd;
                for (std::int64_t ch = 0; ch < c; ++ch)
                    for (std::int64_t y = 0; y < patch; ++y)
                        for (std::int64_t xk = 0; xk < patch; ++xk)
                            dst[(ch * patch + y) * patch + xk] =
                                xv[((i * c + ch) * h + py * patch + y) * w + px * patch + xk];
            }
    attach_backward(out, {x}, [o = out.node().get(), xn = x.node(), b, c, h, w, patch] {
        xn->ensure_grad();
        const std::int64_t gh = h / patch, gw = w / patch, T = gh * gw;
        const std::int64_t pd = c * patch * patch;
        for (std::int64_t i = 0; i < b; ++i)
            for (std::int64_t py = 0; py < gh; ++py)
                for (std::int64_t px = 0; px < gw; ++px) {
                    const S* src = o->grad.data() + (i * T + py * gw + px) * pd;
                    for (std::int64_t ch = 0; ch < c; ++ch)
                        for (std::int64_t y = 0; y < patch; ++y)
                            for (std::int64_t xk = 0; xk < patch; ++xk)
                                xn->grad[((i * c + ch) * h + py * patch + y) * w + px * patch +
                                         xk] += src[(ch * patch + y) * patch + xk];
                }
    });
    return out;
}

} // namespace vitkit
