// Acceptance suite: one self-contained check per criterion, one PASS/FAIL
// line each, nonzero exit if anything fails.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "vitkit/analyzer.hpp"
#include "vitkit/bench.hpp"
#include "vitkit/checkpoint.hpp"
#include "vitkit/train.hpp"
#include "vitkit/verify.hpp"

using namespace vitkit;

namespace {

int failures = 0;

void criterion(int idx, const std::string& name, const std::function<bool(std::string&)>& fn) {
    std::string detail;
    bool ok = false;
    try {
        ok = fn(detail);
    } catch (const std::exception& e) {
        detail = std::string("exception: ") + e.what();
    }
    std::printf("[%s] %2d. %s%s%s\n", ok ? "PASS" : "FAIL", idx, name.c_str(),
                detail.empty() ? "" : " -- ", detail.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
}

ViTConfig paper_model(char which) {
    ViTConfig c;
    switch (which) {
        case 't': c.width = 192; c.depth = 12; c.heads = 3; break;
        case 's': c.width = 384; c.depth = 12; c.heads = 6; break;
        case 'b': c.width = 768; c.depth = 12; c.heads = 12; break;
        case 'l': c.width = 1024; c.depth = 24; c.heads = 16; break;
    }
    return c;
}

ViTConfig desk(std::int64_t d, std::int64_t depth, std::int64_t branches = 1,
               std::int64_t img = 32) {
    ViTConfig c;
    c.width = d;
    c.depth = depth;
    c.branches = branches;
    c.heads = 4;
    c.image_size = img;
    c.num_classes = 10;
    return c;
}

double elapsed_ms(const std::chrono::steady_clock::time_point& start) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
        .count();
}

} // namespace

int main() {
    criterion(1, "parameter counts reproduce Ti 5.7M / S 22.1M / B 86.6M / L 304.4M", [](std::string& d) {
        const auto start = std::chrono::steady_clock::now();
        const double expect[4] = {5.7e6, 22.1e6, 86.6e6, 304.4e6};
        const char tags[4] = {'t', 's', 'b', 'l'};
        bool ok = true;
        std::ostringstream os;
        for (int i = 0; i < 4; ++i) {
            const auto got = count_params(paper_model(tags[i])).params_total;
            ok = ok && std::abs(static_cast<double>(got) - expect[i]) <= 0.1e6;
            os << tags[i] << "=" << got / 1e6 << "M ";
        }
        const double ms = elapsed_ms(start);
        ok = ok && ms < 1000.0;
        os << "in " << ms << " ms";
        d = os.str();
        return ok;
    });

    criterion(2, "FLOP counts reproduce 17.58G / 17.73G / 19.04G (1%), conv 19.07G (5%)", [](std::string& d) {
        const auto start = std::chrono::steady_clock::now();
        auto b12 = paper_model('b');
        auto hmlp = b12;
        hmlp.stem_kind = StemKind::hmlp;
        auto b13 = b12;
        b13.depth = 13;
        auto conv = b12;
        conv.stem_kind = StemKind::conv;
        const double lin_g = count_flops(b12, 224).flops_total / 1e9;
        const double hmlp_g = count_flops(hmlp, 224).flops_total / 1e9;
        const double b13_g = count_flops(b13, 224).flops_total / 1e9;
        const double conv_g = count_flops(conv, 224).flops_total / 1e9;
        bool ok = std::abs(lin_g - 17.58) / 17.58 < 0.01;
        ok = ok && std::abs(hmlp_g - 17.73) / 17.73 < 0.01;
        ok = ok && std::abs(b13_g - 19.04) / 19.04 < 0.01;
        ok = ok && std::abs(conv_g - 19.07) / 19.07 < 0.05;
        const double ms = elapsed_ms(start);
        ok = ok && ms < 1000.0;
        std::ostringstream os;
        os << "linear=" << lin_g << " hmlp=" << hmlp_g << " b13=" << b13_g << " conv=" << conv_g
           << " in " << ms << " ms";
        d = os.str();
        return ok;
    });

    criterion(3, "params and FLOPs exactly invariant across layouts with equal N*P", [](std::string& d) {
        bool ok = true;
        for (std::int64_t total : {24L, 36L, 48L}) {
            std::int64_t ref_p = -1, ref_f = -1;
            for (std::int64_t P : {1L, 2L, 3L, 4L}) {
                if (total % P != 0) continue;
                ViTConfig c = paper_model('s');
                c.depth = total / P;
                c.branches = P;
                const auto p = count_params(c).params_total;
                const auto f = count_flops(c, 224).flops_total;
                if (ref_p < 0) {
                    ref_p = p;
                    ref_f = f;
                }
                ok = ok && p == ref_p && f == ref_f;
            }
        }
        // instrumented-oracle cross-check at toy scale, 24 total pairs
        std::int64_t ref_macs = -1, ref_params = -1;
        for (std::int64_t P : {1L, 2L, 3L, 4L}) {
            ViTConfig c = desk(16, 24 / P, P);
            Rng rng(3);
            auto m = build_model<float>(c, rng);
            const auto macs = flops_oracle(m);
            const auto params = param_count(m);
            if (ref_macs < 0) {
                ref_macs = macs;
                ref_params = params;
            }
            ok = ok && macs == ref_macs && params == ref_params;
            ok = ok && macs == count_flops(c, c.image_size).flops_total;
        }
        d = "oracle macs=" + std::to_string(ref_macs) + " identical for P in {1,2,3,4}";
        return ok;
    });

    criterion(4, "P=1 parallel==sequential bitwise; regroup gap ratio in [3.5,4.5]", [](std::string& d) {
        bool ok = true;
        Rng rng(5);
        for (int trial = 0; trial < 5; ++trial) {
            ViTConfig c = desk(16, 3);
            Rng build(rng.next_u64());
            auto m = build_model<float>(c, build);
            auto images = Tensor<float>::randn({2, 3, 32, 32}, rng);
            ok = ok && max_abs_diff(forward_sequential(m, images, Mode::eval),
                                    forward_parallel(m, images, Mode::eval)) == 0.0;
        }
        // second-order closeness of the regrouped two-block model
        ViTConfig c = desk(16, 2);
        c.layerscale = true;
        Rng build(19);
        auto model = build_model<double>(c, build);
        Rng data(20);
        auto images = Tensor<double>::randn({2, 3, 32, 32}, data);
        auto gap = [&](double eps) {
            for (auto& layer : model.layers)
                for (auto& blk : layer) {
                    for (auto& v : blk.gamma1->data()) v = eps;
                    for (auto& v : blk.gamma2->data()) v = eps;
                }
            auto x = embed_tokens(model, images, Mode::eval);
            auto seq_out = run_blocks_sequential(model, x, Mode::eval, nullptr);
            auto par = regroup(model, 2);
            auto par_out = run_blocks_parallel(par, x, Mode::eval, nullptr);
            return l2_diff(seq_out, par_out);
        };
        std::ostringstream os;
        os << "ratios:";
        for (double eps : {1e-1, 1e-2}) {
            const double ratio = gap(eps) / gap(eps / 2);
            os << " " << ratio;
            ok = ok && ratio >= 3.5 && ratio <= 4.5;
        }
        d = os.str();
        return ok;
    });

    criterion(5, "patch independence exact for hMLP/linear, violated by conv; commutation 0", [](std::string& d) {
        Rng rng(7);
        bool ok = true;
        auto make = [&](StemKind k, NormKind n) {
            StemSpec spec;
            spec.kind = k;
            spec.norm = n;
            spec.d = 64;
            return build_stem<float>(spec, rng);
        };
        auto hm_ln = make(StemKind::hmlp, NormKind::ln);
        auto hm_bn = make(StemKind::hmlp, NormKind::bn); // probed in eval: frozen stats
        auto lin = make(StemKind::linear, NormKind::none);
        auto cv = make(StemKind::conv, NormKind::ln);
        const auto r1 = patch_independence_check(hm_ln, rng, 100, 64);
        const auto r2 = patch_independence_check(hm_bn, rng, 100, 64);
        const auto r3 = patch_independence_check(lin, rng, 100, 64);
        ok = ok && r1.independent && r1.max_leakage == 0.0;
        ok = ok && r2.independent && r2.max_leakage == 0.0;
        ok = ok && r3.independent && r3.max_leakage == 0.0;
        // the conv stem must fail within 10 trials
        int conv_failures = 0;
        for (int t = 0; t < 10; ++t)
            if (!patch_independence_check(cv, rng, 1, 64).independent) ++conv_failures;
        ok = ok && conv_failures >= 1;
        // commutation over 100 random masks at ratio 0.4
        auto mask_token = Tensor<float>::randn({64}, rng);
        double worst = 0.0;
        for (int t = 0; t < 100; ++t) {
            auto img = Tensor<float>::randn({1, 3, 64, 64}, rng);
            auto mask = sample_mask(rng, 16, 0.4);
            worst = std::max(worst, commutation_check(hm_ln, img, mask, mask_token));
        }
        ok = ok && worst == 0.0;
        d = "hmlp/linear leakage 0, conv failures " + std::to_string(conv_failures) +
            "/10, commutation max dev " + std::to_string(worst);
        return ok;
    });

    criterion(6, "attn scope is ~1/3 of block params, ffn/attn ~2x, freezes hold for 100 steps", [](std::string& d) {
        Rng rng(11);
        auto vitb = build_model<float>(paper_model('b'), rng);
        const auto attn_rep = select_trainable(vitb, {Scope::attn});
        const auto ffn_rep = select_trainable(vitb, {Scope::ffn});
        const double frac = attn_rep.block_fraction();
        const double ratio = static_cast<double>(ffn_rep.block_trainable) /
                             static_cast<double>(attn_rep.block_trainable);
        bool ok = frac >= 0.32 && frac <= 0.35 && ratio >= 1.95 && ratio <= 2.05;

        // 100 optimizer steps under every scope on a desk-scale model
        auto data = synth_dataset(13, 64, 32, 10);
        for (Scope scope : {Scope::full, Scope::attn, Scope::ffn}) {
            ViTConfig c = desk(32, 2);
            Rng build(17);
            auto m = build_model<float>(c, build);
            auto snapshot = clone_model(m);
            select_trainable(m, {scope});
            std::vector<Tensor<float>> params;
            for (auto& [name, t] : named_params(m)) params.push_back(t);
            AdamW<float> opt(params, {.lr = 1e-3});
            Rng order(19);
            for (int step = 0; step < 100; ++step) {
                std::vector<std::int64_t> idx;
                for (int i = 0; i < 16; ++i)
                    idx.push_back(static_cast<std::int64_t>(order.below(64)));
                opt.zero_grad();
                auto loss = cross_entropy(
                    forward_parallel(m, batch_images<float>(data, idx), Mode::train, &order),
                    batch_labels(data, idx));
                loss.backward();
                opt.step();
            }
            ok = ok && freeze_verify(snapshot, m, TuneScope{scope});
        }
        std::ostringstream os;
        os << "attn fraction " << frac << ", ffn/attn " << ratio;
        d = os.str();
        return ok;
    });

    criterion(7, "gradients within 1e-4 of finite differences, 20 trials per check", [](std::string& d) {
        auto results = run_gradcheck_suite(20, 0);
        bool ok = true;
        double worst = 0.0;
        std::string worst_name;
        for (const auto& r : results) {
            ok = ok && r.pass;
            if (r.max_rel_err > worst) {
                worst = r.max_rel_err;
                worst_name = r.name;
            }
        }
        d = "worst " + worst_name + " at " + std::to_string(worst);
        return ok;
    });

    criterion(8, "desk-scale: 4x1 beats 3x chance; 4x2 from scratch within 10 points", [](std::string& d) {
        auto train_set = synth_dataset(21, 512, 32, 10);
        auto test_set = synth_dataset(22, 256, 32, 10);
        TrainConfig tc;
        tc.epochs = 20;
        tc.batch_size = 32;
        tc.lr = 2e-3;
        tc.seed = 9;
        ViTConfig seq_cfg = desk(64, 4, 1);
        Rng r1(31);
        auto seq_model = build_model<float>(seq_cfg, r1);
        train_classifier(seq_model, train_set, tc);
        const double acc_seq = evaluate(seq_model, test_set);

        ViTConfig par_cfg = desk(64, 4, 2);
        Rng r2(32);
        auto par_model = build_model<float>(par_cfg, r2);
        train_classifier(par_model, train_set, tc);
        const double acc_par = evaluate(par_model, test_set);

        std::ostringstream os;
        os << "acc 4x1=" << acc_seq << " 4x2=" << acc_par;
        d = os.str();
        return acc_seq > 0.30 && acc_par >= acc_seq - 0.10;
    });

    criterion(9, "bench seq/par agree within 1e-5; exact CSV schema", [](std::string& d) {
        ViTConfig base = desk(32, 1);
        BenchConfig bc;
        bc.layouts = {{2, 2}, {4, 1}};
        bc.exec_modes = {"seq", "par"};
        bc.batch_sizes = {1, 2};
        bc.repeats = 5;
        bool ok = true;
        BenchReport report;
        try {
            // par on 4x1 must be rejected; run it layout-by-layout
            BenchConfig only_par = bc;
            only_par.layouts = {{2, 2}};
            report = bench(base, only_par); // internally cross-checks seq vs par
            BenchConfig only_seq = bc;
            only_seq.layouts = {{4, 1}};
            only_seq.exec_modes = {"seq"};
            auto more = bench(base, only_seq);
            report.rows.insert(report.rows.end(), more.rows.begin(), more.rows.end());
        } catch (const ConsistencyError&) {
            ok = false;
        }
        const auto csv = report.to_csv();
        ok = ok && csv.rfind("layout,exec,batch,ips,stddev,repeats\n", 0) == 0;
        ok = ok && report.rows.size() == 6;
        for (const auto& row : report.rows) ok = ok && row.ips > 0 && row.repeats >= 5;
        bool rejected = false;
        try {
            BenchConfig bad;
            bad.layouts = {{4, 1}};
            bad.exec_modes = {"par"};
            bench(base, bad);
        } catch (const ConfigError&) {
            rejected = true;
        }
        ok = ok && rejected;
        d = std::to_string(report.rows.size()) + " rows, par-on-P1 rejected";
        return ok;
    });

    criterion(10, "checkpoint bitwise round trip; CIFAR rejection; same-seed CSV identity", [](std::string& d) {
        bool ok = true;
        // bitwise round trip across model shapes, including BN-stem buffers
        for (auto kind : {StemKind::linear, StemKind::hmlp, StemKind::conv}) {
            ViTConfig c = desk(32, 2);
            c.stem_kind = kind;
            c.stem_norm = NormKind::bn;
            c.layerscale = true;
            Rng rng(41);
            auto m = build_model<float>(c, rng);
            Rng data(42);
            auto images = Tensor<float>::randn({2, 3, 32, 32}, data);
            (void)forward_parallel(m, images, Mode::train, &data); // move BN stats
            const auto path =
                (std::filesystem::temp_directory_path() / "vitkit_acc_ckpt.vtc").string();
            save_checkpoint(m, path);
            auto loaded = load_checkpoint<float>(path);
            auto pa = named_params(m), pb = named_params(loaded);
            for (std::size_t i = 0; i < pa.size(); ++i) {
                const auto av = pa[i].tensor.data(), bv = pb[i].tensor.data();
                for (std::int64_t j = 0; j < pa[i].tensor.numel(); ++j)
                    ok = ok && av[j] == bv[j];
            }
            ok = ok && max_abs_diff(forward_parallel(m, images, Mode::eval),
                                    forward_parallel(loaded, images, Mode::eval)) == 0.0;
        }
        // CIFAR loader rejects malformed files with positioned errors
        const auto bad_path = std::filesystem::temp_directory_path() / "vitkit_acc_cifar.bin";
        {
            std::ofstream out(bad_path, std::ios::binary | std::ios::trunc);
            for (int i = 0; i < 3073 + 10; ++i) out.put('\x01');
        }
        bool rejected = false;
        try {
            load_cifar10(bad_path.string());
        } catch (const FormatError& e) {
            rejected = std::string(e.what()).find("3073") != std::string::npos;
        }
        ok = ok && rejected;
        {
            std::ofstream out(bad_path, std::ios::binary | std::ios::trunc);
            out.put('\x0B'); // label 11
            for (int i = 0; i < 3072; ++i) out.put('\x01');
        }
        bool rejected_label = false;
        try {
            load_cifar10(bad_path.string());
        } catch (const FormatError& e) {
            rejected_label = std::string(e.what()).find("label") != std::string::npos;
        }
        ok = ok && rejected_label;
        // same seed, same config -> identical metrics CSV
        auto data_set = synth_dataset(5, 64, 32, 10);
        TrainConfig tc;
        tc.epochs = 2;
        tc.batch_size = 16;
        tc.lr = 1e-3;
        tc.seed = 77;
        ViTConfig c = desk(32, 1);
        Rng ra(55), rb(55);
        auto ma = build_model<float>(c, ra);
        auto mb = build_model<float>(c, rb);
        const auto csv_a = metrics_to_csv(train_classifier(ma, data_set, tc));
        const auto csv_b = metrics_to_csv(train_classifier(mb, data_set, tc));
        ok = ok && csv_a == csv_b;
        d = "round trips bitwise, malformed files rejected, CSVs identical";
        return ok;
    });

    if (failures == 0)
        std::printf("acceptance: all 10 criteria passed\n");
    else
        std::printf("acceptance: %d criteria FAILED\n", failures);
    return failures == 0 ? 0 : 1;
}
