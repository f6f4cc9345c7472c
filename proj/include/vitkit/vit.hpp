#pragma once

#include <optional>
#include <string>
#include <vector>

#include "vitkit/stems.hpp"

namespace vitkit {

// ---------------------------------------------------------------------------
// Configuration. A layout N x P means N layers each holding P parallel
// (MHSA, FFN) branch pairs; N x 1 is the classic sequential ViT.
// ---------------------------------------------------------------------------
struct ViTConfig {
    std::int64_t width = 192;
    std::int64_t depth = 12;    // N
    std::int64_t branches = 1;  // P
    std::int64_t heads = 3;
    std::int64_t patch_size = 16;
    std::int64_t image_size = 224;
    std::int64_t num_classes = 1000;
    double sd_rate = 0.0;
    bool layerscale = false;
    double layerscale_init = 1e-4;
    StemKind stem_kind = StemKind::linear;
    NormKind stem_norm = NormKind::bn;
    std::string dtype = "f32";

    std::int64_t tokens() const {
        return (image_size / patch_size) * (image_size / patch_size);
    }

    void validate() const {
        if (width <= 0 || depth <= 0 || heads <= 0 || num_classes <= 0)
            throw ConfigError("config: width/depth/heads/num_classes must be positive");
        if (branches < 1) throw ConfigError("config: branches must be >= 1");
        if (width % heads != 0)
            throw ConfigError("config: width " + std::to_string(width) +
                              " not divisible by heads " + std::to_string(heads));
        if (image_size % patch_size != 0)
            throw ConfigError("config: image size " + std::to_string(image_size) +
                              " not divisible by patch size " + std::to_string(patch_size));
        if (sd_rate < 0.0 || sd_rate >= 1.0)
            throw ConfigError("config: sd_rate must lie in [0, 1)");
        if (stem_kind == StemKind::hmlp && width % 4 != 0)
            throw ConfigError("config: hmlp stem requires width divisible by 4");
        if (stem_kind == StemKind::conv && width % 8 != 0)
            throw ConfigError("config: conv stem requires width divisible by 8");
        if (dtype != "f32" && dtype != "f64")
            throw ConfigError("config: dtype must be f32 or f64");
    }

    StemSpec stem_spec() const {
        StemSpec s;
        s.kind = stem_kind;
        s.norm = (stem_kind == StemKind::linear) ? NormKind::none : stem_norm;
        s.gelu_nl = false; // non-linearities inside conv/hmlp stems are structural
        s.d = width;
        s.patch_size = patch_size;
        return s;
    }
};

// One (MHSA, FFN) pair with its pre-norms and optional LayerScale.
template <typename S>
struct Block {
    Tensor<S> norm1_g, norm1_b;
    Tensor<S> qkv_w, qkv_b;   // [d, 3d], [3d]
    Tensor<S> proj_w, proj_b; // [d, d], [d]
    std::optional<Tensor<S>> gamma1;
    Tensor<S> norm2_g, norm2_b;
    Tensor<S> fc1_w, fc1_b; // [d, 4d], [4d]
    Tensor<S> fc2_w, fc2_b; // [4d, d], [d]
    std::optional<Tensor<S>> gamma2;
    double sd_rate = 0.0;
};

template <typename S>
struct Model {
    ViTConfig config;
    Stem<S> stem;
    Tensor<S> cls_token; // [d]
    Tensor<S> pos_embed; // [T+1, d]; row 0 belongs to the class token
    std::vector<std::vector<Block<S>>> layers; // [N][P]
    Tensor<S> final_norm_g, final_norm_b;
    Tensor<S> head_w, head_b; // [d, classes], [classes]
};

// ---------------------------------------------------------------------------
// Canonical parameter inventory. Order and names are deterministic functions
// of the config; checkpoints, optimizers and tune scopes all rely on it.
// ---------------------------------------------------------------------------
template <typename S, typename Fn>
void for_each_param(Model<S>& m, Fn&& fn) {
    for_each_stem_param(m.stem, "stem.", fn);
    fn(std::string("cls_token"), m.cls_token);
    fn(std::string("pos_embed"), m.pos_embed);
    for (std::size_t l = 0; l < m.layers.size(); ++l)
        for (std::size_t p = 0; p < m.layers[l].size(); ++p) {
            const std::string pre =
                "layers." + std::to_string(l) + ".branches." + std::to_string(p) + ".";
            Block<S>& blk = m.layers[l][p];
            fn(pre + "norm1.gamma", blk.norm1_g);
            fn(pre + "norm1.beta", blk.norm1_b);
            fn(pre + "mhsa.qkv.weight", blk.qkv_w);
            fn(pre + "mhsa.qkv.bias", blk.qkv_b);
            fn(pre + "mhsa.proj.weight", blk.proj_w);
            fn(pre + "mhsa.proj.bias", blk.proj_b);
            if (blk.gamma1) fn(pre + "gamma1", *blk.gamma1);
            fn(pre + "norm2.gamma", blk.norm2_g);
            fn(pre + "norm2.beta", blk.norm2_b);
            fn(pre + "ffn.fc1.weight", blk.fc1_w);
            fn(pre + "ffn.fc1.bias", blk.fc1_b);
            fn(pre + "ffn.fc2.weight", blk.fc2_w);
            fn(pre + "ffn.fc2.bias", blk.fc2_b);
            if (blk.gamma2) fn(pre + "gamma2", *blk.gamma2);
        }
    fn(std::string("final_norm.gamma"), m.final_norm_g);
    fn(std::string("final_norm.beta"), m.final_norm_b);
    fn(std::string("head.weight"), m.head_w);
    fn(std::string("head.bias"), m.head_b);
}

template <typename S>
struct NamedParam {
    std::string name;
    Tensor<S> tensor;
};

template <typename S>
std::vector<NamedParam<S>> named_params(Model<S>& m) {
    std::vector<NamedParam<S>> out;
    for_each_param(m, [&](const std::string& name, Tensor<S>& t) { out.push_back({name, t}); });
    return out;
}

template <typename S>
std::int64_t param_count(Model<S>& m) {
    std::int64_t n = 0;
    for_each_param(m, [&](const std::string&, Tensor<S>& t) { n += t.numel(); });
    return n;
}

// Non-trainable state (BN running stats); persisted alongside parameters.
template <typename S, typename Fn>
void for_each_buffer(Model<S>& m, Fn&& fn) {
    for_each_stem_buffer(m.stem, "stem.", fn);
}

// ---------------------------------------------------------------------------
// build_model: truncated-normal (sigma = 0.02) weights, zero biases, unit
// norm scales, LayerScale gamma = layerscale_init when enabled. Parameters
// are drawn in inventory order from the given generator.
// ---------------------------------------------------------------------------
template <typename S>
Model<S> build_model(const ViTConfig& config, Rng& rng) {
    config.validate();
    const std::int64_t d = config.width;
    Model<S> m;
    m.config = config;
    m.stem = build_stem<S>(config.stem_spec(), rng);
    m.cls_token = Tensor<S>::trunc_normal({d}, rng, 0.02);
    m.pos_embed = Tensor<S>::trunc_normal({config.tokens() + 1, d}, rng, 0.02);
    m.layers.resize(static_cast<std::size_t>(config.depth));
    for (auto& layer : m.layers) {
        layer.reserve(static_cast<std::size_t>(config.branches));
        for (std::int64_t p = 0; p < config.branches; ++p) {
            Block<S> blk;
            blk.norm1_g = Tensor<S>::full({d}, S(1));
            blk.norm1_b = Tensor<S>::zeros({d});
            blk.qkv_w = Tensor<S>::trunc_normal({d, 3 * d}, rng, 0.02);
            blk.qkv_b = Tensor<S>::zeros({3 * d});
            blk.proj_w = Tensor<S>::trunc_normal({d, d}, rng, 0.02);
            blk.proj_b = Tensor<S>::zeros({d});
            blk.norm2_g = Tensor<S>::full({d}, S(1));
            blk.norm2_b = Tensor<S>::zeros({d});
            blk.fc1_w = Tensor<S>::trunc_normal({d, 4 * d}, rng, 0.02);
            blk.fc1_b = Tensor<S>::zeros({4 * d});
            blk.fc2_w = Tensor<S>::trunc_normal({4 * d, d}, rng, 0.02);
            blk.fc2_b = Tensor<S>::zeros({d});
            if (config.layerscale) {
                blk.gamma1 = Tensor<S>::full({d}, static_cast<S>(config.layerscale_init));
                blk.gamma2 = Tensor<S>::full({d}, static_cast<S>(config.layerscale_init));
            }
            blk.sd_rate = config.sd_rate;
            layer.push_back(std::move(blk));
        }
    }
    m.final_norm_g = Tensor<S>::full({d}, S(1));
    m.final_norm_b = Tensor<S>::zeros({d});
    m.head_w = Tensor<S>::trunc_normal({d, config.num_classes}, rng, 0.02);
    m.head_b = Tensor<S>::zeros({config.num_classes});
    return m;
}

// Deep copy: fresh tensors with identical values, detached from any graph.
template <typename S>
Model<S> clone_model(Model<S>& m) {
    Model<S> c = m; // shares tensors; now replace them
    for_each_param(c, [](const std::string&, Tensor<S>& t) { t = t.clone_detached(); });
    return c;
}

// ---------------------------------------------------------------------------
// Block forwards. Both return the residual-branch output only; the caller
// owns the residual add, which is where Eq-style sequential and parallel
// compositions differ.
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> mhsa_forward(const Block<S>& blk, const Tensor<S>& x, std::int64_t heads) {
    auto h = layer_norm(x, blk.norm1_g, blk.norm1_b);
    auto qkv = add_rowvec(matmul(h, blk.qkv_w), blk.qkv_b);
    auto attn = attention(qkv, heads);
    auto out = add_rowvec(matmul(attn, blk.proj_w), blk.proj_b);
    if (blk.gamma1) out = mul_rowvec(out, *blk.gamma1);
    return out;
}

template <typename S>
Tensor<S> ffn_forward(const Block<S>& blk, const Tensor<S>& x) {
    auto h = layer_norm(x, blk.norm2_g, blk.norm2_b);
    h = gelu(add_rowvec(matmul(h, blk.fc1_w), blk.fc1_b));
    auto out = add_rowvec(matmul(h, blk.fc2_w), blk.fc2_b);
    if (blk.gamma2) out = mul_rowvec(out, *blk.gamma2);
    return out;
}

// Per-sample branch dropping with expectation-preserving 1/(1-rate) rescale.
// Identity in eval mode and at rate 0.
template <typename S>
Tensor<S> stochastic_depth(const Tensor<S>& branch, double rate, Mode mode, Rng* rng) {
    if (rate == 0.0 || mode == Mode::eval) return branch;
    if (rng == nullptr) throw ConfigError("stochastic_depth: train mode needs an rng");
    const std::int64_t b = branch.dim(0);
    Tensor<S> keep({b});
    const S kept = static_cast<S>(1.0 / (1.0 - rate));
    for (std::int64_t i = 0; i < b; ++i)
        keep.data()[i] = (rng->uniform() >= rate) ? kept : S(0);
    return mul_per_sample(branch, keep);
}

// ---------------------------------------------------------------------------
// Model forwards
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> embed_tokens(Model<S>& m, const Tensor<S>& images, Mode mode) {
    if (images.ndim() != 4 || images.dim(2) != m.config.image_size ||
        images.dim(3) != m.config.image_size)
        throw DimensionError("forward: images " + shape_str(images.shape()) +
                             " do not match configured size " +
                             std::to_string(m.config.image_size));
    auto tokens = stem_forward(m.stem, images, mode);
    auto x = prepend_token(tokens, m.cls_token);
    return add_broadcast0(x, m.pos_embed);
}

// Eq-(1) composition: every branch pair of every layer applied in sequence,
// branch index ascending within a layer.
template <typename S>
Tensor<S> run_blocks_sequential(Model<S>& m, Tensor<S> x, Mode mode, Rng* rng) {
    for (auto& layer : m.layers)
        for (auto& blk : layer) {
            x = add(x, stochastic_depth(mhsa_forward(blk, x, m.config.heads), blk.sd_rate, mode, rng));
            x = add(x, stochastic_depth(ffn_forward(blk, x), blk.sd_rate, mode, rng));
        }
    return x;
}

// Eq-(2) composition generalized to P branches: all MHSA branch outputs of a
// layer are summed into the residual stream (ascending branch index), then
// all FFN branch outputs.
template <typename S>
Tensor<S> run_blocks_parallel(Model<S>& m, Tensor<S> x, Mode mode, Rng* rng) {
    for (auto& layer : m.layers) {
        Tensor<S> acc = x;
        for (auto& blk : layer)
            acc = add(acc, stochastic_depth(mhsa_forward(blk, x, m.config.heads), blk.sd_rate, mode, rng));
        x = acc;
        acc = x;
        for (auto& blk : layer)
            acc = add(acc, stochastic_depth(ffn_forward(blk, x), blk.sd_rate, mode, rng));
        x = acc;
    }
    return x;
}

template <typename S>
Tensor<S> head_logits(Model<S>& m, const Tensor<S>& x) {
    auto cls = select_token(x, 0);
    cls = layer_norm(cls, m.final_norm_g, m.final_norm_b);
    return add_rowvec(matmul(cls, m.head_w), m.head_b);
}

template <typename S>
Tensor<S> forward_sequential(Model<S>& m, const Tensor<S>& images, Mode mode, Rng* rng = nullptr) {
    return head_logits(m, run_blocks_sequential(m, embed_tokens(m, images, mode), mode, rng));
}

template <typename S>
Tensor<S> forward_parallel(Model<S>& m, const Tensor<S>& images, Mode mode, Rng* rng = nullptr) {
    return head_logits(m, run_blocks_parallel(m, embed_tokens(m, images, mode), mode, rng));
}

// Layout-aware default: parallel composition, which degenerates to the
// sequential one when P = 1.
template <typename S>
Tensor<S> forward(Model<S>& m, const Tensor<S>& images, Mode mode, Rng* rng = nullptr) {
    return forward_parallel(m, images, mode, rng);
}

// Final-normed per-token features [b, T+1, d], for heads other than the
// classifier (masked-patch decoding).
template <typename S>
Tensor<S> forward_features(Model<S>& m, const Tensor<S>& images, Mode mode, Rng* rng = nullptr) {
    auto x = run_blocks_parallel(m, embed_tokens(m, images, mode), mode, rng);
    return layer_norm(x, m.final_norm_g, m.final_norm_b);
}

// ---------------------------------------------------------------------------
// regroup: consecutive blocks (l, l+1, ..., l+P-1) of a sequential model
// become branches (1..P) of one parallel layer. The parameter tensors are
// shared, not copied; only the layout labels change.
// ---------------------------------------------------------------------------
template <typename S>
Model<S> regroup(const Model<S>& seq, std::int64_t P) {
    if (seq.config.branches != 1)
        throw ConfigError("regroup: source model must be sequential (P=1), has P=" +
                          std::to_string(seq.config.branches));
    if (P < 1 || seq.config.depth % P != 0)
        throw ConfigError("regroup: depth " + std::to_string(seq.config.depth) +
                          " not divisible by " + std::to_string(P) + " branches");
    Model<S> par = seq;
    par.config.depth = seq.config.depth / P;
    par.config.branches = P;
    par.layers.clear();
    par.layers.resize(static_cast<std::size_t>(par.config.depth));
    for (std::int64_t l = 0; l < par.config.depth; ++l)
        for (std::int64_t p = 0; p < P; ++p)
            par.layers[static_cast<std::size_t>(l)].push_back(
                seq.layers[static_cast<std::size_t>(l * P + p)][0]);
    return par;
}

// ---------------------------------------------------------------------------
// Positional-embedding resampling for resolution changes. The class-token
// row is copied; the grid rows are resampled with a separable Catmull-Rom
// bicubic kernel (bilinear available) on align-corners coordinates.
// ---------------------------------------------------------------------------
enum class Interp { bicubic, bilinear };

namespace detail {

inline void cubic_weights(double t, double w[4]) {
    // Catmull-Rom
    const double t2 = t * t, t3 = t2 * t;
    w[0] = -0.5 * t + t2 - 0.5 * t3;
    w[1] = 1.0 - 2.5 * t2 + 1.5 * t3;
    w[2] = 0.5 * t + 2.0 * t2 - 1.5 * t3;
    w[3] = -0.5 * t2 + 0.5 * t3;
}

} // namespace detail

template <typename S>
Tensor<S> resample_grid(const Tensor<S>& grid, std::int64_t g_old, std::int64_t g_new,
                        Interp interp) {
    const std::int64_t d = grid.dim(1);
    Tensor<S> out({g_new * g_new, d});
    const auto src = grid.data();
    auto dst = out.data();
    const double ratio = (g_new > 1 && g_old > 1)
                             ? static_cast<double>(g_old - 1) / static_cast<double>(g_new - 1)
                             : 0.0;
    auto clamp_idx = [&](std::int64_t i) { return std::min(std::max<std::int64_t>(i, 0), g_old - 1); };
    for (std::int64_t oy = 0; oy < g_new; ++oy) {
        const double sy = oy * ratio;
        const std::int64_t iy = static_cast<std::int64_t>(std::floor(sy));
        const double ty = sy - iy;
        for (std::int64_t ox = 0; ox < g_new; ++ox) {
            const double sx = ox * ratio;
            const std::int64_t ix = static_cast<std::int64_t>(std::floor(sx));
            const double tx = sx - ix;
            double wy[4], wx[4];
            int taps;
            std::int64_t y0, x0;
            if (interp == Interp::bicubic) {
                detail::cubic_weights(ty, wy);
                detail::cubic_weights(tx, wx);
                taps = 4;
                y0 = iy - 1;
                x0 = ix - 1;
            } else {
                wy[0] = 1.0 - ty; wy[1] = ty;
                wx[0] = 1.0 - tx; wx[1] = tx;
                taps = 2;
                y0 = iy;
                x0 = ix;
            }
            double wsum = 0;
            for (int a = 0; a < taps; ++a)
                for (int b2 = 0; b2 < taps; ++b2) wsum += wy[a] * wx[b2];
            for (std::int64_t j = 0; j < d; ++j) {
                double acc = 0;
                for (int a = 0; a < taps; ++a)
                    for (int b2 = 0; b2 < taps; ++b2) {
                        const std::int64_t yy = clamp_idx(y0 + a), xx = clamp_idx(x0 + b2);
                        acc += wy[a] * wx[b2] *
                               static_cast<double>(src[(yy * g_old + xx) * d + j]);
                    }
                dst[(oy * g_new + ox) * d + j] = static_cast<S>(acc / wsum);
            }
        }
    }
    return out;
}

template <typename S>
Model<S> interpolate_pos_embed(const Model<S>& m, std::int64_t new_image_size,
                               Interp interp = Interp::bicubic) {
    if (new_image_size % m.config.patch_size != 0)
        throw ConfigError("interpolate_pos_embed: size " + std::to_string(new_image_size) +
                          " not divisible by patch size " + std::to_string(m.config.patch_size));
    if (new_image_size == m.config.image_size) return m;
    const std::int64_t d = m.config.width;
    const std::int64_t g_old = m.config.image_size / m.config.patch_size;
    const std::int64_t g_new = new_image_size / m.config.patch_size;
    Tensor<S> old_grid({g_old * g_old, d});
    const auto pv = m.pos_embed.data();
    std::copy(pv.begin() + d, pv.end(), old_grid.data().begin());
    auto new_grid = resample_grid(old_grid, g_old, g_new, interp);
    Tensor<S> pos({g_new * g_new + 1, d});
    std::copy(pv.begin(), pv.begin() + d, pos.data().begin()); // class-token row unchanged
    std::copy(new_grid.data().begin(), new_grid.data().end(), pos.data().begin() + d);
    pos.set_requires_grad(m.pos_embed.requires_grad());
    Model<S> out = m;
    out.pos_embed = pos;
    out.config.image_size = new_image_size;
    return out;
}

} // namespace vitkit
