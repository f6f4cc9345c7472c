#pragma once

#include <cstdint>
#include <vector>

#include "vitkit/vit.hpp"

namespace vitkit {

// Patch masking and a pixel-regression masked-image-modeling pretext task.
// The mask token is inserted after the stem in every training path: the stem
// always sees the full image, and masked positions are overwritten at token
// level. With a patch-independent stem this is interchangeable with masking
// the pixels first, which commutation_check verifies.

struct PatchMask {
    std::vector<std::uint8_t> bits; // one per patch
    double ratio = 0.0;

    std::int64_t size() const { return static_cast<std::int64_t>(bits.size()); }
    std::int64_t masked_count() const {
        std::int64_t n = 0;
        for (auto b : bits) n += b ? 1 : 0;
        return n;
    }
};

// Uniform random subset of exactly round(ratio * T) patches.
inline PatchMask sample_mask(Rng& rng, std::int64_t T, double ratio) {
    if (ratio < 0.0 || ratio >= 1.0)
        throw ConfigError("sample_mask: ratio " + std::to_string(ratio) + " outside [0, 1)");
    const auto k = static_cast<std::int64_t>(std::llround(ratio * static_cast<double>(T)));
    PatchMask mask;
    mask.ratio = ratio;
    mask.bits.assign(static_cast<std::size_t>(T), 0);
    // partial Fisher-Yates: first k entries of a shuffled index array
    std::vector<std::int64_t> idx(static_cast<std::size_t>(T));
    for (std::int64_t i = 0; i < T; ++i) idx[static_cast<std::size_t>(i)] = i;
    for (std::int64_t i = 0; i < k; ++i) {
        const auto j = i + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(T - i)));
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
        mask.bits[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])] = 1;
    }
    return mask;
}

// Masked rows of tokens[b, T, d] replaced by the (trainable) mask token.
template <typename S>
Tensor<S> apply_mask_tokens(const Tensor<S>& tokens, const PatchMask& mask,
                            const Tensor<S>& mask_token) {
    const std::int64_t b = tokens.dim(0), T = tokens.dim(1), d = tokens.dim(2);
    if (mask.size() != T)
        throw DimensionError("apply_mask_tokens: mask length " + std::to_string(mask.size()) +
                             " != token count " + std::to_string(T));
    if (mask_token.numel() != d)
        throw DimensionError("apply_mask_tokens: mask token width " +
                             std::to_string(mask_token.numel()) + " != " + std::to_string(d));
    Tensor<S> out(tokens.shape());
    const auto tv = tokens.data(), mv = mask_token.data();
    auto ov = out.data();
    for (std::int64_t i = 0; i < b; ++i)
        for (std::int64_t t = 0; t < T; ++t) {
            const bool masked = mask.bits[static_cast<std::size_t>(t)] != 0;
            for (std::int64_t j = 0; j < d; ++j)
                ov[(i * T + t) * d + j] = masked ? mv[j] : tv[(i * T + t) * d + j];
        }
    attach_backward(out, {tokens, mask_token},
                    [o = out.node().get(), tn = tokens.node(), mn = mask_token.node(),
                     bits = mask.bits, b, T, d] {
        if (tn->requires_grad) tn->ensure_grad();
        if (mn->requires_grad) mn->ensure_grad();
        for (std::int64_t i = 0; i < b; ++i)
            for (std::int64_t t = 0; t < T; ++t) {
                const bool masked = bits[static_cast<std::size_t>(t)] != 0;
                for (std::int64_t j = 0; j < d; ++j) {
                    const S g = o->grad[static_cast<std::size_t>((i * T + t) * d + j)];
                    if (masked) {
                        if (mn->requires_grad) mn->grad[j] += g;
                    } else if (tn->requires_grad) {
                        tn->grad[(i * T + t) * d + j] += g;
                    }
                }
            }
    });
    return out;
}

// Masked patches' pixels zeroed; plain value op (targets and probes only).
template <typename S>
Tensor<S> apply_mask_pixels(const Tensor<S>& images, const PatchMask& mask,
                            std::int64_t patch = 16) {
    const std::int64_t b = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
    if (h % patch != 0 || w % patch != 0)
        throw DimensionError("apply_mask_pixels: image " + shape_str(images.shape()) +
                             " not divisible into " + std::to_string(patch) + "-pixel patches");
    const std::int64_t gh = h / patch, gw = w / patch;
    if (mask.size() != gh * gw)
        throw DimensionError("apply_mask_pixels: mask length " + std::to_string(mask.size()) +
                             " != patch count " + std::to_string(gh * gw));
    Tensor<S> out = images.clone_detached();
    auto ov = out.data();
    for (std::int64_t t = 0; t < gh * gw; ++t) {
        if (!mask.bits[static_cast<std::size_t>(t)]) continue;
        const std::int64_t py = t / gw, px = t % gw;
        for (std::int64_t i = 0; i < b; ++i)
            for (std::int64_t ch = 0; ch < c; ++ch)
                for (std::int64_t y = 0; y < patch; ++y)
                    for (std::int64_t x = 0; x < patch; ++x)
                        ov[((i * c + ch) * h + py * patch + y) * w + px * patch + x] = S(0);
    }
    return out;
}

// Max |difference| over unmasked token rows between mask-after-stem and
// mask-before-stem pipelines. Zero exactly iff the stem never mixes patches
// (probe in ln or bn-eval mode; train-mode BN statistics couple patches
// through the batch).
template <typename S>
double commutation_check(Stem<S>& stem, const Tensor<S>& image, const PatchMask& mask,
                         const Tensor<S>& mask_token) {
    NoGradGuard ng;
    auto after = apply_mask_tokens(stem_forward(stem, image, Mode::eval), mask, mask_token);
    auto before = apply_mask_tokens(
        stem_forward(stem, apply_mask_pixels(image, mask, stem.spec.patch_size), Mode::eval),
        mask, mask_token);
    const std::int64_t b = after.dim(0), T = after.dim(1), d = after.dim(2);
    double worst = 0.0;
    for (std::int64_t i = 0; i < b; ++i)
        for (std::int64_t t = 0; t < T; ++t) {
            if (mask.bits[static_cast<std::size_t>(t)]) continue;
            for (std::int64_t j = 0; j < d; ++j) {
                const double diff =
                    std::abs(static_cast<double>(after.data()[(i * T + t) * d + j]) -
                             static_cast<double>(before.data()[(i * T + t) * d + j]));
                if (diff > worst) worst = diff;
            }
        }
    return worst;
}

// ---------------------------------------------------------------------------
// MIM pretext head: trainable mask token plus a linear decoder from model
// width to the 768 pixel values of one 16x16x3 patch.
// ---------------------------------------------------------------------------
template <typename S>
struct MimHead {
    Tensor<S> mask_token; // [d]
    Tensor<S> dec_w;      // [d, patch*patch*3]
    Tensor<S> dec_b;      // [patch*patch*3]
};

template <typename S>
MimHead<S> build_mim_head(const ViTConfig& config, Rng& rng) {
    const std::int64_t pd = 3 * config.patch_size * config.patch_size;
    MimHead<S> head;
    head.mask_token = Tensor<S>::trunc_normal({config.width}, rng, 0.02);
    head.dec_w = Tensor<S>::trunc_normal({config.width, pd}, rng, 0.02);
    head.dec_b = Tensor<S>::zeros({pd});
    return head;
}

template <typename S, typename Fn>
void for_each_mim_param(MimHead<S>& head, Fn&& fn) {
    fn(std::string("mask_token"), head.mask_token);
    fn(std::string("decoder.weight"), head.dec_w);
    fn(std::string("decoder.bias"), head.dec_b);
}

// Ground-truth regression targets: each patch normalized to zero mean, unit
// variance over its own 768 pixels. Constant with respect to the graph.
template <typename S>
Tensor<S> patch_normalized_targets(const Tensor<S>& images, std::int64_t patch = 16,
                                   S eps = S(1e-6)) {
    NoGradGuard ng;
    auto patches = patchify(images, patch); // [b, T, pd]
    const std::int64_t rows = patches.dim(0) * patches.dim(1), pd = patches.dim(2);
    auto pv = patches.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        S* row = pv.data() + r * pd;
        S mu = 0;
        for (std::int64_t j = 0; j < pd; ++j) mu += row[j];
        mu /= static_cast<S>(pd);
        S var = 0;
        for (std::int64_t j = 0; j < pd; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<S>(pd);
        const S istd = S(1) / std::sqrt(var + eps);
        for (std::int64_t j = 0; j < pd; ++j) row[j] = (row[j] - mu) * istd;
    }
    return patches;
}

// Decoded pixel predictions for every patch token: stem -> mask tokens ->
// blocks -> final norm -> linear decoder. Depends on masked-patch pixels
// only through the stem, i.e. not at all when the stem is patch-independent.
template <typename S>
Tensor<S> mim_predict(Model<S>& model, MimHead<S>& head, const Tensor<S>& images,
                      const PatchMask& mask, Mode mode = Mode::train, Rng* rng = nullptr) {
    auto tokens = stem_forward(model.stem, images, mode);
    tokens = apply_mask_tokens(tokens, mask, head.mask_token);
    auto x = prepend_token(tokens, model.cls_token);
    x = add_broadcast0(x, model.pos_embed);
    x = run_blocks_parallel(model, x, mode, rng);
    x = layer_norm(x, model.final_norm_g, model.final_norm_b);
    auto features = slice_tokens(x, 1); // drop the class token
    return add_rowvec(matmul(features, head.dec_w), head.dec_b);
}

// MSE between decoded predictions and per-patch-normalized target pixels,
// masked positions only. `target_images` defaults to the stem input; passing
// the clean image while corrupting `images` at masked patches expresses the
// mask-before/after equivalence as a loss-level invariance.
template <typename S>
Tensor<S> mim_loss(Model<S>& model, MimHead<S>& head, const Tensor<S>& images,
                   const PatchMask& mask, Mode mode = Mode::train, Rng* rng = nullptr,
                   const Tensor<S>* target_images = nullptr) {
    if (mask.masked_count() == 0)
        throw ConfigError("mim_loss: empty mask, loss undefined");
    auto pred = mim_predict(model, head, images, mask, mode, rng);
    auto targets =
        patch_normalized_targets(target_images ? *target_images : images, model.config.patch_size);
    return masked_mse(pred, targets, mask.bits);
}

} // namespace vitkit
