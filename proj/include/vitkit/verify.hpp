#pragma once

#include <functional>
#include <string>
#include <vector>

#include "vitkit/grad_check.hpp"
#include "vitkit/masking.hpp"

namespace vitkit {

// The f64 gradient-verification suite: every layer type, a full two-block
// Ti-scale model, and the masked-image-modeling loss, each over randomized
// trials against central finite differences.
struct CheckResult {
    std::string name;
    double max_rel_err = 0.0;
    int trials = 0;
    bool pass = false;
};

inline std::vector<CheckResult> run_gradcheck_suite(int trials, std::uint64_t seed,
                                                    double tolerance = 1e-4,
                                                    int probes_per_param = 3) {
    std::vector<CheckResult> results;
    Rng rng(seed);
    const GradCheckOptions opts{.probes_per_param = probes_per_param};

    auto record = [&](const std::string& name, const std::function<double(Rng&)>& one_trial) {
        CheckResult r;
        r.name = name;
        r.trials = trials;
        for (int t = 0; t < trials; ++t) r.max_rel_err = std::max(r.max_rel_err, one_trial(rng));
        r.pass = r.max_rel_err < tolerance;
        results.push_back(r);
    };

    record("matmul", [&](Rng& r) {
        auto a = Tensor<double>::randn({7, 5}, r);
        auto b = Tensor<double>::randn({5, 3}, r);
        auto w = Tensor<double>::randn({7, 3}, r);
        return grad_check([&] { return sum(mul(matmul(a, b), w)); }, {a, b}, r, opts).max_rel_err;
    });
    record("gelu", [&](Rng& r) {
        auto x = Tensor<double>::randn({24}, r);
        auto w = Tensor<double>::randn({24}, r);
        return grad_check([&] { return sum(mul(gelu(x), w)); }, {x}, r, opts).max_rel_err;
    });
    record("layer_norm", [&](Rng& r) {
        auto x = Tensor<double>::randn({4, 12}, r);
        auto g = Tensor<double>::randn({12}, r);
        auto b = Tensor<double>::randn({12}, r);
        auto w = Tensor<double>::randn({4, 12}, r);
        return grad_check([&] { return sum(mul(layer_norm(x, g, b), w)); }, {x, g, b}, r, opts)
            .max_rel_err;
    });
    record("batch_norm_2d", [&](Rng& r) {
        auto x = Tensor<double>::randn({2, 3, 4, 4}, r);
        auto g = Tensor<double>::randn({3}, r);
        auto b = Tensor<double>::randn({3}, r);
        auto w = Tensor<double>::randn({2, 3, 4, 4}, r);
        return grad_check(
                   [&] {
                       BnState<double> st(3);
                       return sum(mul(batch_norm_2d(x, g, b, st, Mode::train), w));
                   },
                   {x, g, b}, r, opts)
            .max_rel_err;
    });
    record("softmax", [&](Rng& r) {
        auto x = Tensor<double>::randn({3, 9}, r);
        auto w = Tensor<double>::randn({3, 9}, r);
        return grad_check([&] { return sum(mul(softmax(x), w)); }, {x}, r, opts).max_rel_err;
    });
    record("conv2d", [&](Rng& r) {
        auto x = Tensor<double>::randn({1, 3, 8, 8}, r);
        auto k = Tensor<double>::randn({4, 3, 2, 2}, r);
        auto b = Tensor<double>::randn({4}, r);
        std::optional<Tensor<double>> ob(b);
        auto w = Tensor<double>::randn({1, 4, 4, 4}, r);
        return grad_check([&] { return sum(mul(conv2d(x, k, ob, 2, 0), w)); }, {x, k, b}, r, opts)
            .max_rel_err;
    });
    record("attention", [&](Rng& r) {
        auto qkv = Tensor<double>::randn({2, 5, 24}, r);
        auto w = Tensor<double>::randn({2, 5, 8}, r);
        return grad_check([&] { return sum(mul(attention(qkv, 2), w)); }, {qkv}, r, opts)
            .max_rel_err;
    });
    record("transformer_block", [&](Rng& r) {
        ViTConfig c;
        c.width = 16;
        c.depth = 1;
        c.heads = 2;
        c.image_size = 32;
        c.num_classes = 10;
        Rng build(r.next_u64());
        auto m = build_model<double>(c, build);
        auto& blk = m.layers[0][0];
        auto x = Tensor<double>::randn({1, 5, 16}, r);
        auto w = Tensor<double>::randn({1, 5, 16}, r);
        std::vector<Tensor<double>> params{blk.qkv_w, blk.qkv_b, blk.proj_w, blk.proj_b,
                                           blk.norm1_g, blk.norm1_b, blk.norm2_g, blk.norm2_b,
                                           blk.fc1_w, blk.fc1_b, blk.fc2_w, blk.fc2_b, x};
        auto loss_fn = [&] {
            auto y = add(x, mhsa_forward(blk, x, c.heads));
            y = add(y, ffn_forward(blk, y));
            return sum(mul(y, w));
        };
        return grad_check(loss_fn, params, r, opts).max_rel_err;
    });
    record("ti_model_2block", [&](Rng& r) {
        ViTConfig c;
        c.width = 192;
        c.depth = 2;
        c.heads = 3;
        c.image_size = 32;
        c.num_classes = 10;
        c.sd_rate = 0.0; // stochastic depth disabled for determinism
        Rng build(r.next_u64());
        auto m = build_model<double>(c, build);
        auto images = Tensor<double>::randn({1, 3, 32, 32}, r);
        std::vector<int> labels{static_cast<int>(r.below(10))};
        std::vector<Tensor<double>> params;
        for (auto& [name, t] : named_params(m)) params.push_back(t);
        auto loss_fn = [&] {
            return cross_entropy(forward_sequential(m, images, Mode::eval), labels);
        };
        GradCheckOptions model_opts = opts;
        model_opts.probes_per_param = 1;
        return grad_check(loss_fn, params, r, model_opts).max_rel_err;
    });
    record("mim_loss", [&](Rng& r) {
        ViTConfig c;
        c.width = 192;
        c.depth = 1;
        c.heads = 3;
        c.image_size = 32;
        c.num_classes = 10;
        c.stem_kind = StemKind::hmlp;
        c.stem_norm = NormKind::ln;
        Rng build(r.next_u64());
        auto m = build_model<double>(c, build);
        auto head = build_mim_head<double>(c, build);
        auto images = Tensor<double>::randn({1, 3, 32, 32}, r);
        auto mask = sample_mask(r, 4, 0.5);
        std::vector<Tensor<double>> params;
        for (auto& [name, t] : named_params(m)) params.push_back(t);
        for_each_mim_param(head,
                           [&](const std::string&, Tensor<double>& t) { params.push_back(t); });
        auto loss_fn = [&] { return mim_loss(m, head, images, mask, Mode::eval); };
        GradCheckOptions model_opts = opts;
        model_opts.probes_per_param = 1;
        return grad_check(loss_fn, params, r, model_opts).max_rel_err;
    });
    return results;
}

} // namespace vitkit
