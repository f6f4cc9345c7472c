#pragma once

#include <optional>
#include <string>
#include <vector>

#include "vitkit/ops.hpp"

namespace vitkit {

// Patch pre-processing front-ends. All three map [b, 3, H, W] images to
// [b, T, d] tokens with T = (H/16)*(W/16):
//
//   linear  one projection per flattened 16x16x3 patch (the vanilla stem)
//   conv    four 3x3/stride-2 convolutions with overlapping kernels
//   hmlp    strided 4-2-2 convolutions whose receptive fields tile the
//           16x16 patches exactly, so tokens never mix across patches
//
// The conv stem exists as the counterexample: its overlap leaks information
// between neighbouring patches, which patch_independence_check detects.

enum class StemKind { linear, conv, hmlp };
enum class NormKind { none, bn, ln };

inline std::string to_string(StemKind k) {
    switch (k) {
        case StemKind::linear: return "linear";
        case StemKind::conv: return "conv";
        case StemKind::hmlp: return "hmlp";
    }
    return "?";
}

inline std::string to_string(NormKind k) {
    switch (k) {
        case NormKind::none: return "none";
        case NormKind::bn: return "bn";
        case NormKind::ln: return "ln";
    }
    return "?";
}

struct StemSpec {
    StemKind kind = StemKind::linear;
    NormKind norm = NormKind::none; // linear stems may also run norm-free
    bool gelu_nl = false;
    std::int64_t d = 768;
    std::int64_t patch_size = 16;
    std::int64_t in_channels = 3;

    void validate() const {
        if (d <= 0) throw ConfigError("stem: output width must be positive");
        if (kind == StemKind::hmlp && d % 4 != 0)
            throw ConfigError("hmlp stem: width " + std::to_string(d) +
                              " must be divisible by 4 (d/4 intermediate channels)");
        if (kind == StemKind::conv && d % 8 != 0)
            throw ConfigError("conv stem: width " + std::to_string(d) +
                              " must be divisible by 8 (d/8 first-stage channels)");
        if (kind != StemKind::linear && norm == NormKind::none)
            throw ConfigError("conv/hmlp stems require a norm (bn or ln)");
    }
};

// Norm applied between stem stages; BN carries running-stat buffers.
template <typename S>
struct StemNorm {
    NormKind kind = NormKind::none;
    Tensor<S> gamma, beta;
    BnState<S> bn;
};

template <typename S>
struct ConvStage {
    Tensor<S> w, b;
    std::int64_t stride = 1, pad = 0;
    StemNorm<S> norm;
    bool gelu_after = false;
};

template <typename S>
struct Stem {
    StemSpec spec;
    // linear path
    Tensor<S> proj_w, proj_b; // [p*p*3, d], [d]
    std::optional<StemNorm<S>> post_norm;
    // conv / hmlp path
    std::vector<ConvStage<S>> stages;
};

namespace detail {

template <typename S>
StemNorm<S> make_norm(NormKind kind, std::int64_t channels) {
    StemNorm<S> n;
    n.kind = kind;
    n.gamma = Tensor<S>::full({channels}, S(1));
    n.beta = Tensor<S>::zeros({channels});
    if (kind == NormKind::bn) n.bn = BnState<S>(channels);
    return n;
}

template <typename S>
Tensor<S> apply_chw_norm(const Tensor<S>& x, StemNorm<S>& n, Mode mode) {
    if (n.kind == NormKind::bn) return batch_norm_2d(x, n.gamma, n.beta, n.bn, mode);
    return layer_norm_channels(x, n.gamma, n.beta);
}

} // namespace detail

template <typename S>
Stem<S> build_stem(const StemSpec& spec, Rng& rng) {
    spec.validate();
    Stem<S> stem;
    stem.spec = spec;
    const std::int64_t d = spec.d, p = spec.patch_size, cin = spec.in_channels;
    auto weight = [&](Shape shape) { return Tensor<S>::trunc_normal(std::move(shape), rng, 0.02); };
    switch (spec.kind) {
        case StemKind::linear: {
            stem.proj_w = weight({cin * p * p, d});
            stem.proj_b = Tensor<S>::zeros({d});
            if (spec.norm != NormKind::none)
                stem.post_norm = detail::make_norm<S>(spec.norm, d);
            break;
        }
        case StemKind::hmlp: {
            const std::int64_t q = d / 4;
            auto stage = [&](std::int64_t ci, std::int64_t co, std::int64_t k, std::int64_t s,
                             bool gelu_after) {
                ConvStage<S> st;
                st.w = weight({co, ci, k, k});
                st.b = Tensor<S>::zeros({co});
                st.stride = s;
                st.pad = 0;
                st.norm = detail::make_norm<S>(spec.norm, co);
                st.gelu_after = gelu_after;
                return st;
            };
            stem.stages.push_back(stage(cin, q, 4, 4, true));
            stem.stages.push_back(stage(q, q, 2, 2, true));
            stem.stages.push_back(stage(q, d, 2, 2, false));
            break;
        }
        case StemKind::conv: {
            const std::int64_t chans[5] = {cin, d / 8, d / 4, d / 2, d};
            for (int i = 0; i < 4; ++i) {
                ConvStage<S> st;
                st.w = weight({chans[i + 1], chans[i], 3, 3});
                st.b = Tensor<S>::zeros({chans[i + 1]});
                st.stride = 2;
                st.pad = 1;
                st.norm = detail::make_norm<S>(spec.norm, chans[i + 1]);
                st.gelu_after = (i < 3);
                stem.stages.push_back(std::move(st));
            }
            break;
        }
    }
    return stem;
}

// [b, 3, H, W] -> [b, T, d]. Mutates BN running stats in train mode.
template <typename S>
Tensor<S> stem_forward(Stem<S>& stem, const Tensor<S>& images, Mode mode) {
    const std::int64_t p = stem.spec.patch_size;
    if (images.ndim() != 4 || images.dim(1) != stem.spec.in_channels)
        throw DimensionError("stem: expected [b," + std::to_string(stem.spec.in_channels) +
                             ",H,W] images, got " + shape_str(images.shape()));
    if (images.dim(2) % p != 0 || images.dim(3) % p != 0)
        throw DimensionError("stem: image " + shape_str(images.shape()) +
                             " not divisible into " + std::to_string(p) + "x" + std::to_string(p) +
                             " patches");
    if (stem.spec.kind == StemKind::linear) {
        auto tokens = add_rowvec(matmul(patchify(images, p), stem.proj_w), stem.proj_b);
        if (stem.post_norm) {
            if (stem.post_norm->kind == NormKind::ln) {
                tokens = layer_norm(tokens, stem.post_norm->gamma, stem.post_norm->beta);
            } else {
                const std::int64_t t = tokens.dim(1);
                auto chw = tokens_to_chw(tokens, t, 1);
                chw = batch_norm_2d(chw, stem.post_norm->gamma, stem.post_norm->beta,
                                    stem.post_norm->bn, mode);
                tokens = chw_to_tokens(chw);
            }
        }
        if (stem.spec.gelu_nl) tokens = gelu(tokens);
        return tokens;
    }
    Tensor<S> x = images;
    for (auto& st : stem.stages) {
        x = conv2d(x, st.w, std::optional<Tensor<S>>(st.b), st.stride, st.pad);
        x = detail::apply_chw_norm(x, st.norm, mode);
        if (st.gelu_after) x = gelu(x);
    }
    return chw_to_tokens(x);
}

// Named entry points for the three designs; each insists on its kind.
template <typename S>
Tensor<S> linear_stem(Stem<S>& stem, const Tensor<S>& images, Mode mode = Mode::eval) {
    if (stem.spec.kind != StemKind::linear) throw ConfigError("linear_stem: stem kind mismatch");
    return stem_forward(stem, images, mode);
}

template <typename S>
Tensor<S> hmlp_stem(Stem<S>& stem, const Tensor<S>& images, Mode mode = Mode::eval) {
    if (stem.spec.kind != StemKind::hmlp) throw ConfigError("hmlp_stem: stem kind mismatch");
    return stem_forward(stem, images, mode);
}

template <typename S>
Tensor<S> conv_stem(Stem<S>& stem, const Tensor<S>& images, Mode mode = Mode::eval) {
    if (stem.spec.kind != StemKind::conv) throw ConfigError("conv_stem: stem kind mismatch");
    return stem_forward(stem, images, mode);
}

// Canonical parameter enumeration used by checkpoints and tune scopes.
template <typename S, typename Fn>
void for_each_stem_param(Stem<S>& stem, const std::string& prefix, Fn&& fn) {
    if (stem.spec.kind == StemKind::linear) {
        fn(prefix + "proj.weight", stem.proj_w);
        fn(prefix + "proj.bias", stem.proj_b);
        if (stem.post_norm) {
            fn(prefix + "norm.gamma", stem.post_norm->gamma);
            fn(prefix + "norm.beta", stem.post_norm->beta);
        }
        return;
    }
    for (std::size_t i = 0; i < stem.stages.size(); ++i) {
        const std::string k = std::to_string(i + 1);
        fn(prefix + "conv" + k + ".weight", stem.stages[i].w);
        fn(prefix + "conv" + k + ".bias", stem.stages[i].b);
        fn(prefix + "norm" + k + ".gamma", stem.stages[i].norm.gamma);
        fn(prefix + "norm" + k + ".beta", stem.stages[i].norm.beta);
    }
}

template <typename S, typename Fn>
void for_each_stem_buffer(Stem<S>& stem, const std::string& prefix, Fn&& fn) {
    if (stem.spec.kind == StemKind::linear) {
        if (stem.post_norm && stem.post_norm->kind == NormKind::bn) {
            fn(prefix + "norm.running_mean", stem.post_norm->bn.running_mean);
            fn(prefix + "norm.running_var", stem.post_norm->bn.running_var);
        }
        return;
    }
    for (std::size_t i = 0; i < stem.stages.size(); ++i) {
        if (stem.stages[i].norm.kind != NormKind::bn) continue;
        const std::string k = std::to_string(i + 1);
        fn(prefix + "norm" + k + ".running_mean", stem.stages[i].norm.bn.running_mean);
        fn(prefix + "norm" + k + ".running_var", stem.stages[i].norm.bn.running_var);
    }
}

// ---------------------------------------------------------------------------
// Patch-independence oracle: perturb exactly one 16x16 patch and look for
// any change in the other tokens. Stems are probed in eval mode so BN uses
// frozen statistics (train-mode BN couples patches through the batch by
// construction, which is not what the receptive-field question asks).
// ---------------------------------------------------------------------------
struct IndependenceReport {
    bool independent = true;
    double max_leakage = 0.0;
};

template <typename S>
IndependenceReport patch_independence_check(Stem<S>& stem, Rng& rng, int trials,
                                            std::int64_t image_size = 64) {
    NoGradGuard ng;
    const std::int64_t p = stem.spec.patch_size;
    const std::int64_t grid = image_size / p, T = grid * grid;
    IndependenceReport rep;
    for (int trial = 0; trial < trials; ++trial) {
        auto x = Tensor<S>::randn({1, stem.spec.in_channels, image_size, image_size}, rng);
        const std::int64_t target = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(T)));
        const std::int64_t py = target / grid, px = target % grid;
        auto x2 = x.clone_detached();
        for (std::int64_t ch = 0; ch < stem.spec.in_channels; ++ch)
            for (std::int64_t y = 0; y < p; ++y)
                for (std::int64_t xx = 0; xx < p; ++xx)
                    x2.data()[(ch * image_size + py * p + y) * image_size + px * p + xx] +=
                        static_cast<S>(rng.normal());
        auto t1 = stem_forward(stem, x, Mode::eval);
        auto t2 = stem_forward(stem, x2, Mode::eval);
        const std::int64_t d = t1.dim(2);
        for (std::int64_t tok = 0; tok < T; ++tok) {
            if (tok == target) continue;
            for (std::int64_t j = 0; j < d; ++j) {
                const double diff = std::abs(static_cast<double>(t1.data()[tok * d + j]) -
                                             static_cast<double>(t2.data()[tok * d + j]));
                if (diff > rep.max_leakage) rep.max_leakage = diff;
            }
        }
    }
    rep.independent = (rep.max_leakage == 0.0);
    return rep;
}

} // namespace vitkit
