#include <doctest.h>

#include "vitkit/finetune.hpp"
#include "vitkit/grad_check.hpp"
#include "vitkit/masking.hpp"

using namespace vitkit;

namespace {

ViTConfig mini_config(StemKind stem = StemKind::linear, NormKind norm = NormKind::ln) {
    ViTConfig c;
    c.width = 16;
    c.depth = 2;
    c.heads = 2;
    c.image_size = 64;
    c.num_classes = 10;
    c.stem_kind = stem;
    c.stem_norm = norm;
    return c;
}

} // namespace

TEST_CASE("sample_mask: counts, determinism, errors") {
    Rng rng(1);
    auto empty = sample_mask(rng, 196, 0.0);
    CHECK(empty.masked_count() == 0);

    auto m = sample_mask(rng, 196, 0.4);
    CHECK(m.masked_count() == 78); // round(78.4)

    Rng a(42), b(42);
    auto ma = sample_mask(a, 64, 0.25);
    auto mb = sample_mask(b, 64, 0.25);
    CHECK(ma.bits == mb.bits);

    CHECK_THROWS_AS(sample_mask(rng, 10, 1.0), ConfigError);
    CHECK_THROWS_AS(sample_mask(rng, 10, -0.1), ConfigError);
}

TEST_CASE("sample_mask: popcount tracks the ratio within 1/T") {
    Rng rng(7);
    for (int trial = 0; trial < 30; ++trial) {
        const std::int64_t T = 16 + static_cast<std::int64_t>(rng.below(200));
        const double ratio = rng.uniform() * 0.9;
        auto m = sample_mask(rng, T, ratio);
        const double got = static_cast<double>(m.masked_count()) / static_cast<double>(T);
        CHECK(std::abs(got - ratio) <= 1.0 / static_cast<double>(T) + 1e-12);
    }
}

TEST_CASE("apply_mask_tokens: identity, survivors, bitwise contract") {
    Rng rng(3);
    auto tokens = Tensor<float>::randn({2, 6, 8}, rng);
    auto mt = Tensor<float>::full({8}, 9.0f);

    PatchMask none;
    none.bits.assign(6, 0);
    auto same = apply_mask_tokens(tokens, none, mt);
    CHECK(max_abs_diff(same, tokens) == 0.0);

    PatchMask all_but_one;
    all_but_one.bits.assign(6, 1);
    all_but_one.bits[4] = 0;
    auto out = apply_mask_tokens(tokens, all_but_one, mt);
    for (std::int64_t i = 0; i < 2; ++i)
        for (std::int64_t t = 0; t < 6; ++t)
            for (std::int64_t j = 0; j < 8; ++j) {
                const float v = out.data()[(i * 6 + t) * 8 + j];
                if (t == 4)
                    CHECK(v == tokens.data()[(i * 6 + t) * 8 + j]);
                else
                    CHECK(v == 9.0f);
            }

    PatchMask wrong;
    wrong.bits.assign(5, 0);
    CHECK_THROWS_AS(apply_mask_tokens(tokens, wrong, mt), DimensionError);
}

TEST_CASE("apply_mask_pixels: identity, zeroing, untouched patches") {
    Rng rng(5);
    auto img = Tensor<float>::randn({1, 3, 32, 32}, rng);

    PatchMask none;
    none.bits.assign(4, 0);
    CHECK(max_abs_diff(apply_mask_pixels(img, none), img) == 0.0);

    PatchMask all;
    all.bits.assign(4, 1);
    auto zeroed = apply_mask_pixels(img, all);
    for (auto v : zeroed.data()) CHECK(v == 0.0f);

    PatchMask one;
    one.bits.assign(4, 0);
    one.bits[2] = 1; // patch (1,0) of the 2x2 grid
    auto part = apply_mask_pixels(img, one);
    for (std::int64_t ch = 0; ch < 3; ++ch)
        for (std::int64_t y = 0; y < 32; ++y)
            for (std::int64_t x = 0; x < 32; ++x) {
                const float v = part.data()[(ch * 32 + y) * 32 + x];
                const bool in_masked = (y >= 16) && (x < 16);
                if (in_masked)
                    CHECK(v == 0.0f);
                else
                    CHECK(v == img.data()[(ch * 32 + y) * 32 + x]);
            }
}

TEST_CASE("commutation: exact for patch-independent stems, broken by conv") {
    Rng rng(11);
    auto mt = Tensor<float>::randn({16}, rng);

    auto run = [&](StemKind kind, NormKind norm) {
        StemSpec spec;
        spec.kind = kind;
        spec.norm = (kind == StemKind::linear) ? NormKind::none : norm;
        spec.d = 16;
        auto stem = build_stem<float>(spec, rng);
        double worst = 0.0;
        for (int trial = 0; trial < 10; ++trial) {
            auto img = Tensor<float>::randn({1, 3, 64, 64}, rng);
            auto mask = sample_mask(rng, 16, 0.4);
            worst = std::max(worst, commutation_check(stem, img, mask, mt));
        }
        return worst;
    };

    CHECK(run(StemKind::hmlp, NormKind::ln) == 0.0);
    CHECK(run(StemKind::hmlp, NormKind::bn) == 0.0); // bn-eval: frozen stats
    CHECK(run(StemKind::linear, NormKind::none) == 0.0);
    CHECK(run(StemKind::conv, NormKind::ln) > 0.0);
}

TEST_CASE("patch independence: hmlp and linear pass, conv leaks") {
    Rng rng(13);
    StemSpec hm;
    hm.kind = StemKind::hmlp;
    hm.norm = NormKind::ln;
    hm.d = 16;
    auto hstem = build_stem<float>(hm, rng);
    auto hrep = patch_independence_check(hstem, rng, 20, 64);
    CHECK(hrep.independent);
    CHECK(hrep.max_leakage == 0.0);

    StemSpec lin;
    lin.d = 16;
    auto lstem = build_stem<float>(lin, rng);
    auto lrep = patch_independence_check(lstem, rng, 20, 64);
    CHECK(lrep.independent);

    StemSpec cv;
    cv.kind = StemKind::conv;
    cv.norm = NormKind::ln;
    cv.d = 16;
    auto cstem = build_stem<float>(cv, rng);
    auto crep = patch_independence_check(cstem, rng, 10, 64);
    CHECK_FALSE(crep.independent);
    CHECK(crep.max_leakage > 0.0);
}

TEST_CASE("linear stem equals a 16x16 stride-16 convolution on shared weights") {
    Rng rng(43);
    StemSpec spec;
    spec.d = 12;
    auto stem = build_stem<double>(spec, rng);
    auto img = Tensor<double>::randn({2, 3, 64, 64}, rng);
    auto tokens = stem_forward(stem, img, Mode::eval);

    // kernel[o][c][ky][kx] = proj_w[(c*16+ky)*16+kx][o]
    auto kernel = Tensor<double>::zeros({12, 3, 16, 16});
    for (std::int64_t o = 0; o < 12; ++o)
        for (std::int64_t k = 0; k < 768; ++k)
            kernel.data()[o * 768 + k] = stem.proj_w.data()[k * 12 + o];
    std::optional<Tensor<double>> bias(stem.proj_b);
    auto conv_tokens = chw_to_tokens(conv2d(img, kernel, bias, 16, 0));
    CHECK(max_abs_diff(tokens, conv_tokens) < 1e-6);
}

TEST_CASE("degenerate stems: zero weights and biases give zero tokens") {
    Rng rng(47);
    StemSpec lin;
    lin.d = 8;
    auto lstem = build_stem<double>(lin, rng);
    auto zero_img = Tensor<double>::zeros({1, 3, 32, 32});
    auto lt = stem_forward(lstem, zero_img, Mode::eval);
    for (auto v : lt.data()) CHECK(v == 0.0);

    StemSpec cv;
    cv.kind = StemKind::conv;
    cv.norm = NormKind::ln;
    cv.d = 8;
    auto cstem = build_stem<double>(cv, rng);
    for (auto& st : cstem.stages) {
        for (auto& v : st.w.data()) v = 0.0;
        for (auto& v : st.b.data()) v = 0.0;
        for (auto& v : st.norm.beta.data()) v = 0.0; // gamma * 0 + beta
    }
    auto img = Tensor<double>::randn({1, 3, 32, 32}, rng);
    auto ct = stem_forward(cstem, img, Mode::eval);
    for (auto v : ct.data()) CHECK(v == 0.0);
}

TEST_CASE("linear stem variants: optional norm and GELU still patch-independent") {
    Rng rng(59);
    for (auto norm : {NormKind::none, NormKind::bn, NormKind::ln}) {
        StemSpec spec;
        spec.d = 16;
        spec.norm = norm;
        spec.gelu_nl = true;
        auto stem = build_stem<float>(spec, rng);
        auto img = Tensor<float>::randn({2, 3, 32, 32}, rng);
        auto tokens = stem_forward(stem, img, Mode::eval);
        CHECK(tokens.shape() == Shape{2, 4, 16});
        auto rep = patch_independence_check(stem, rng, 5, 32);
        CHECK(rep.independent); // bn probed in eval mode
    }
}

TEST_CASE("hmlp stem at d=768: the published channel schedule") {
    Rng rng(53);
    StemSpec spec;
    spec.kind = StemKind::hmlp;
    spec.norm = NormKind::bn;
    spec.d = 768;
    auto stem = build_stem<float>(spec, rng);
    REQUIRE(stem.stages.size() == 3);
    CHECK(stem.stages[0].w.shape() == Shape{192, 3, 4, 4});   // 3 -> d/4, k4 s4
    CHECK(stem.stages[0].stride == 4);
    CHECK(stem.stages[1].w.shape() == Shape{192, 192, 2, 2}); // d/4 -> d/4, k2 s2
    CHECK(stem.stages[1].stride == 2);
    CHECK(stem.stages[2].w.shape() == Shape{768, 192, 2, 2}); // d/4 -> d, k2 s2
    CHECK(stem.stages[2].stride == 2);
    CHECK(stem.stages[0].gelu_after);
    CHECK(stem.stages[1].gelu_after);
    CHECK_FALSE(stem.stages[2].gelu_after); // final stage: norm only
}

TEST_CASE("hmlp stem: stage extents tile 16x16 patches") {
    Rng rng(17);
    StemSpec spec;
    spec.kind = StemKind::hmlp;
    spec.norm = NormKind::ln;
    spec.d = 64;
    auto stem = build_stem<float>(spec, rng);
    auto img = Tensor<float>::randn({1, 3, 224, 224}, rng);
    auto tokens = stem_forward(stem, img, Mode::eval);
    CHECK(tokens.shape() == Shape{1, 196, 64}); // 56->28->14 grid, T = 196
}

TEST_CASE("mim_loss: unit-normalized targets, zero decoder gives loss of one") {
    ViTConfig c = mini_config(StemKind::hmlp, NormKind::ln);
    Rng rng(19);
    auto model = build_model<float>(c, rng);
    auto head = build_mim_head<float>(c, rng);
    for (auto& v : head.dec_w.data()) v = 0.0f;
    for (auto& v : head.dec_b.data()) v = 0.0f;

    Rng data(20);
    auto images = Tensor<float>::randn({2, 3, 64, 64}, data);
    auto mask = sample_mask(data, 16, 0.4);
    auto loss = mim_loss(model, head, images, mask, Mode::eval);
    CHECK(std::abs(loss.item() - 1.0f) < 1e-2);

    PatchMask empty;
    empty.bits.assign(16, 0);
    CHECK_THROWS_AS(mim_loss(model, head, images, empty, Mode::eval), ConfigError);
}

TEST_CASE("mim predictions ignore masked-patch content for independent stems") {
    ViTConfig c = mini_config(StemKind::hmlp, NormKind::ln);
    Rng rng(23);
    auto model = build_model<float>(c, rng);
    auto head = build_mim_head<float>(c, rng);
    Rng data(24);
    auto clean = Tensor<float>::randn({1, 3, 64, 64}, data);
    auto mask = sample_mask(data, 16, 0.4);

    // corrupt the masked patches arbitrarily
    auto corrupted = clean.clone_detached();
    for (std::int64_t t = 0; t < 16; ++t) {
        if (!mask.bits[static_cast<std::size_t>(t)]) continue;
        const std::int64_t py = t / 4, px = t % 4;
        for (std::int64_t ch = 0; ch < 3; ++ch)
            for (std::int64_t y = 0; y < 16; ++y)
                for (std::int64_t x = 0; x < 16; ++x)
                    corrupted.data()[(ch * 64 + py * 16 + y) * 64 + px * 16 + x] =
                        static_cast<float>(data.normal() * 5.0);
    }

    NoGradGuard ng;
    auto p1 = mim_predict(model, head, clean, mask, Mode::eval);
    auto p2 = mim_predict(model, head, corrupted, mask, Mode::eval);
    CHECK(max_abs_diff(p1, p2) == 0.0);

    auto l1 = mim_loss(model, head, clean, mask, Mode::eval);
    auto l2 = mim_loss(model, head, corrupted, mask, Mode::eval, nullptr, &clean);
    CHECK(l1.item() == l2.item());
}

TEST_CASE("mim_loss: gradient check through the full pretext path") {
    ViTConfig c = mini_config(StemKind::hmlp, NormKind::ln);
    c.image_size = 32;
    Rng rng(29);
    auto model = build_model<double>(c, rng);
    auto head = build_mim_head<double>(c, rng);
    Rng data(30);
    auto images = Tensor<double>::randn({1, 3, 32, 32}, data);
    auto mask = sample_mask(data, 4, 0.5);

    std::vector<Tensor<double>> params;
    for (auto& [name, t] : named_params(model)) params.push_back(t);
    for_each_mim_param(head, [&](const std::string&, Tensor<double>& t) { params.push_back(t); });
    auto loss_fn = [&] { return mim_loss(model, head, images, mask, Mode::eval); };
    auto rep = grad_check(loss_fn, params, data, {.probes_per_param = 2});
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("mim overfit: loss halves within 200 steps on a fixed batch") {
    ViTConfig c = mini_config(StemKind::hmlp, NormKind::ln);
    c.image_size = 32;
    c.depth = 1;
    Rng rng(31);
    auto model = build_model<float>(c, rng);
    auto head = build_mim_head<float>(c, rng);
    Rng data(32);
    auto images = Tensor<float>::randn({4, 3, 32, 32}, data);
    auto mask = sample_mask(data, 4, 0.5);

    std::vector<Tensor<float>> params;
    for (auto& [name, t] : named_params(model)) {
        t.set_requires_grad(true);
        params.push_back(t);
    }
    for_each_mim_param(head, [&](const std::string&, Tensor<float>& t) {
        t.set_requires_grad(true);
        params.push_back(t);
    });
    AdamW<float> opt(params, {.lr = 1e-3});
    double initial = 0.0, final = 0.0;
    for (int step = 0; step < 200; ++step) {
        opt.zero_grad();
        auto loss = mim_loss(model, head, images, mask, Mode::eval);
        if (step == 0) initial = loss.item();
        final = loss.item();
        loss.backward();
        opt.step();
    }
    CHECK(final < 0.5 * initial);
}
