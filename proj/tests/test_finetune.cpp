#include <doctest.h>

#include "vitkit/analyzer.hpp"
#include "vitkit/finetune.hpp"
#include "vitkit/ops.hpp"

using namespace vitkit;

namespace {

ViTConfig small_config(std::int64_t d = 16, std::int64_t depth = 2) {
    ViTConfig c;
    c.width = d;
    c.depth = depth;
    c.heads = 2;
    c.image_size = 32;
    c.num_classes = 10;
    return c;
}

// A few optimizer steps of classification training on random data.
template <typename Opt>
void train_steps(Model<float>& m, Opt& opt, int steps, std::uint64_t seed) {
    Rng data(seed);
    for (int s = 0; s < steps; ++s) {
        auto images = Tensor<float>::randn({4, 3, 32, 32}, data);
        std::vector<int> labels;
        for (int i = 0; i < 4; ++i) labels.push_back(static_cast<int>(data.below(10)));
        opt.zero_grad();
        auto loss = cross_entropy(forward_parallel(m, images, Mode::eval), labels);
        loss.backward();
        opt.step();
    }
}

} // namespace

TEST_CASE("select_trainable: scope accounting") {
    // the block-parameter split depends on width only; probe the widths the
    // named models use
    for (std::int64_t d : {192L, 384L, 768L, 1024L}) {
        ViTConfig c = small_config(d, 1);
        c.heads = d / 64;
        Rng rng(1);
        auto m = build_model<float>(c, rng);
        auto attn = select_trainable(m, {Scope::attn});
        CHECK(attn.block_fraction() > 0.32);
        CHECK(attn.block_fraction() < 0.35);
        auto ffn = select_trainable(m, {Scope::ffn});
        const double ratio = static_cast<double>(ffn.block_trainable) /
                             static_cast<double>(attn.block_trainable);
        CHECK(ratio > 1.95);
        CHECK(ratio < 2.05);
        auto full = select_trainable(m, {Scope::full});
        CHECK(full.frozen_params == 0);
        CHECK(full.total_params == full.trainable_params);
        CHECK(attn.total_params == attn.trainable_params + attn.frozen_params);
    }
}

TEST_CASE("scope partition: attn and ffn split the block inventory exactly") {
    ViTConfig c = small_config();
    c.layerscale = true;
    Rng rng(2);
    auto m = build_model<float>(c, rng);
    TuneScope attn{Scope::attn}, ffn{Scope::ffn};
    std::int64_t both = 0, neither = 0, blocks_total = 0;
    for (auto& [name, t] : named_params(m)) {
        if (name.rfind("layers.", 0) != 0) continue;
        blocks_total += t.numel();
        const bool a = attn.selects(name), f = ffn.selects(name);
        if (a && f) both += t.numel();
        if (!a && !f) neither += t.numel();
    }
    CHECK(both == 0);
    CHECK(neither == 0);
    CHECK(blocks_total == count_params(c).params_by_component.at("blocks"));
}

TEST_CASE("sgd: hand traces and contracts") {
    auto p = Tensor<double>::from({1}, {1.0});
    p.set_requires_grad(true);

    SUBCASE("single step, no momentum") {
        Sgd<double> opt({p}, {.lr = 0.1, .momentum = 0.0});
        p.node()->grad = {1.0};
        opt.step();
        CHECK(p.data()[0] == doctest::Approx(0.9).epsilon(1e-12));
    }
    SUBCASE("momentum trace") {
        Sgd<double> opt({p}, {.lr = 0.1, .momentum = 0.9});
        const double grads[3] = {0.5, -0.2, 0.1};
        const double expect[3] = {0.95, 0.925, 0.8925};
        for (int t = 0; t < 3; ++t) {
            p.node()->grad = {grads[t]};
            opt.step();
            CHECK(p.data()[0] == doctest::Approx(expect[t]).epsilon(1e-12));
        }
    }
    SUBCASE("lr validation and scheduled zero") {
        CHECK_THROWS_AS(Sgd<double>({p}, {.lr = 0.0}), ConfigError);
        CHECK_THROWS_AS(Sgd<double>({p}, {.lr = -1.0}), ConfigError);
        Sgd<double> opt({p}, {.lr = 0.1});
        opt.set_lr(0.0); // cosine schedules may land here on the final step
        p.node()->grad = {5.0};
        opt.step();
        CHECK(p.data()[0] == 1.0);
    }
}

TEST_CASE("adamw: frozen scalar trace") {
    // independently computed: p0=1, g=(0.5,-0.2,0.1), lr=0.01,
    // betas=(0.9,0.999), eps=1e-8
    auto p = Tensor<double>::from({1}, {1.0});
    p.set_requires_grad(true);
    AdamW<double> opt({p}, {.lr = 0.01});
    const double grads[3] = {0.5, -0.2, 0.1};
    const double expect[3] = {0.9900000002, 0.9865439418116511, 0.9827500240835696};
    for (int t = 0; t < 3; ++t) {
        p.node()->grad = {grads[t]};
        opt.step();
        CHECK(p.data()[0] == doctest::Approx(expect[t]).epsilon(1e-12));
    }

    // same trace with decoupled weight decay 0.1
    auto q = Tensor<double>::from({1}, {1.0});
    q.set_requires_grad(true);
    AdamW<double> opt2({q}, {.lr = 0.01, .weight_decay = 0.1});
    for (int t = 0; t < 3; ++t) {
        q.node()->grad = {grads[t]};
        opt2.step();
    }
    CHECK(q.data()[0] == doctest::Approx(0.9797764691415581).epsilon(1e-12));
}

TEST_CASE("adamw: first step moves by about -lr, zero grads hold still") {
    for (double g : {3.0, -0.004, 17.5}) {
        auto p = Tensor<double>::from({1}, {2.0});
        p.set_requires_grad(true);
        AdamW<double> opt({p}, {.lr = 0.01});
        p.node()->grad = {g};
        opt.step();
        CHECK(p.data()[0] == doctest::Approx(2.0 - 0.01 * (g > 0 ? 1.0 : -1.0)).epsilon(1e-6));
    }

    auto p = Tensor<double>::from({2}, {1.5, -0.5});
    p.set_requires_grad(true);
    AdamW<double> opt({p}, {.lr = 0.1});
    for (int t = 0; t < 50; ++t) {
        p.node()->grad = {0.0, 0.0};
        opt.step();
    }
    CHECK(p.data()[0] == 1.5);
    CHECK(p.data()[1] == -0.5);
}

TEST_CASE("optimizers: quadratic bowl decreases monotonically") {
    Rng rng(3);
    auto run = [&](auto make_opt) {
        auto x = Tensor<double>::randn({8}, rng);
        x.set_requires_grad(true);
        auto opt = make_opt(x);
        double prev = 1e300;
        for (int t = 0; t < 20; ++t) {
            opt.zero_grad();
            auto loss = sum(mul(x, x));
            const double v = loss.item();
            CHECK(v < prev);
            prev = v;
            loss.backward();
            opt.step();
        }
    };
    run([](Tensor<double>& x) { return Sgd<double>({x}, {.lr = 0.05, .momentum = 0.0}); });
    run([](Tensor<double>& x) { return AdamW<double>({x}, {.lr = 0.05}); });
}

TEST_CASE("freeze soundness: scoped training leaves the complement bitwise") {
    ViTConfig c = small_config();
    Rng rng(5);
    auto m = build_model<float>(c, rng);
    auto snapshot = clone_model(m);

    TuneScope attn{Scope::attn};
    CHECK(freeze_verify(snapshot, m, attn));                  // untouched
    CHECK(freeze_verify(snapshot, m, TuneScope{Scope::ffn})); // every scope
    CHECK(freeze_verify(snapshot, m, TuneScope{Scope::full}));

    select_trainable(m, attn);
    std::vector<Tensor<float>> params;
    for (auto& [name, t] : named_params(m)) params.push_back(t);
    AdamW<float> opt(params, {.lr = 1e-3});
    train_steps(m, opt, 20, 6);
    CHECK(freeze_verify(snapshot, m, attn));

    // every FFN tensor is bitwise unchanged
    for (auto& [name, t] : named_params(m))
        if (name.find(".ffn.") != std::string::npos) {
            auto& before = snapshot;
            for (auto& [bn, bt] : named_params(before))
                if (bn == name)
                    for (std::int64_t j = 0; j < t.numel(); ++j)
                        CHECK(bt.data()[j] == t.data()[j]);
        }
}

TEST_CASE("freeze contrapositive: full training fails the attn check") {
    ViTConfig c = small_config();
    Rng rng(7);
    auto m = build_model<float>(c, rng);
    auto snapshot = clone_model(m);
    select_trainable(m, {Scope::full});
    std::vector<Tensor<float>> params;
    for (auto& [name, t] : named_params(m)) params.push_back(t);
    Sgd<float> opt(params, {.lr = 1e-2});
    train_steps(m, opt, 5, 8);
    CHECK_FALSE(freeze_verify(snapshot, m, TuneScope{Scope::attn})); // FFN moved
    CHECK(freeze_verify(snapshot, m, TuneScope{Scope::full}));
}

TEST_CASE("property: random scopes and step counts never move frozen params") {
    Rng rng(9);
    for (int trial = 0; trial < 6; ++trial) {
        ViTConfig c = small_config(16, 1 + static_cast<std::int64_t>(rng.below(2)));
        c.layerscale = (rng.below(2) == 1);
        Rng build_rng(rng.next_u64());
        auto m = build_model<float>(c, build_rng);
        auto snapshot = clone_model(m);
        const Scope scope = static_cast<Scope>(rng.below(3));
        select_trainable(m, {scope});
        std::vector<Tensor<float>> params;
        for (auto& [name, t] : named_params(m)) params.push_back(t);
        const int steps = 1 + static_cast<int>(rng.below(8));
        if (rng.below(2) == 0) {
            AdamW<float> opt(params, {.lr = 1e-3});
            train_steps(m, opt, steps, rng.next_u64());
        } else {
            Sgd<float> opt(params, {.lr = 1e-2});
            train_steps(m, opt, steps, rng.next_u64());
        }
        CHECK(freeze_verify(snapshot, m, TuneScope{scope}));
    }
}
