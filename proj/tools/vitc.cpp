// vitc: build, analyze, train, fine-tune and benchmark small vision
// transformers with sequential or parallel block layouts.
//
// Exit codes: 0 success, 1 invalid request (flags/config), 2 runtime failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <iostream>
#include <optional>

#include "vitkit/analyzer.hpp"
#include "vitkit/bench.hpp"
#include "vitkit/checkpoint.hpp"
#include "vitkit/train.hpp"
#include "vitkit/verify.hpp"

using namespace vitkit;
using nlohmann::ordered_json;

namespace {

struct ModelArgs {
    std::string model = "ti";
    std::string layout;
    std::int64_t width = 0;
    std::int64_t heads = 0;
    std::string stem = "linear";
    std::string stem_norm = "bn";
    std::int64_t res = 224;
    std::int64_t classes = 1000;
    double sd = -1.0; // negative -> preset default
    bool layerscale = false;
    double ls_init = 1e-4;
    std::uint64_t seed = 0;
};

struct Preset {
    std::int64_t width, depth, heads;
    double sd, lr;
};

Preset preset_for(const std::string& model) {
    if (model == "ti") return {192, 12, 3, 0.0, 4e-3};
    if (model == "s") return {384, 12, 6, 0.05, 4e-3};
    if (model == "b") return {768, 12, 12, 0.1, 3e-3};
    if (model == "l") return {1024, 24, 16, 0.4, 3e-3};
    if (model == "custom") return {0, 12, 0, 0.0, 1e-3};
    throw ConfigError("unknown model '" + model + "' (expected ti|s|b|l|custom)");
}

std::pair<std::int64_t, std::int64_t> parse_layout(const std::string& layout) {
    const auto x = layout.find('x');
    if (x == std::string::npos)
        throw ConfigError("layout '" + layout + "' is not of the form NxP");
    try {
        const std::int64_t n = std::stoll(layout.substr(0, x));
        const std::int64_t p = std::stoll(layout.substr(x + 1));
        if (n < 1 || p < 1) throw ConfigError("layout '" + layout + "' needs N,P >= 1");
        return {n, p};
    } catch (const std::invalid_argument&) {
        throw ConfigError("layout '" + layout + "' is not of the form NxP");
    }
}

void add_model_flags(CLI::App* cmd, ModelArgs& a) {
    cmd->add_option("--model", a.model, "Model preset: ti|s|b|l|custom")
        ->check(CLI::IsMember({"ti", "s", "b", "l", "custom"}));
    cmd->add_option("--layout", a.layout, "Block layout NxP, e.g. 12x2");
    cmd->add_option("--width", a.width, "Width d (custom model)");
    cmd->add_option("--heads", a.heads, "Attention heads (custom model)");
    cmd->add_option("--stem", a.stem, "Patch stem: linear|conv|hmlp")
        ->check(CLI::IsMember({"linear", "conv", "hmlp"}));
    cmd->add_option("--stem-norm", a.stem_norm, "Stem norm: bn|ln")
        ->check(CLI::IsMember({"bn", "ln"}));
    cmd->add_option("--res", a.res, "Input resolution in pixels");
    cmd->add_option("--classes", a.classes, "Number of classes");
    cmd->add_option("--sd", a.sd, "Stochastic depth rate (preset default if unset)");
    cmd->add_flag("--layerscale", a.layerscale, "Enable LayerScale");
    cmd->add_option("--ls-init", a.ls_init, "LayerScale init epsilon");
    cmd->add_option("--seed", a.seed, "Seed for init/training/data");
}

ViTConfig build_config(const ModelArgs& a) {
    const Preset p = preset_for(a.model);
    ViTConfig c;
    c.width = a.width > 0 ? a.width : p.width;
    c.heads = a.heads > 0 ? a.heads : p.heads;
    c.depth = p.depth;
    if (c.width <= 0 || c.heads <= 0)
        throw ConfigError("custom model requires --width and --heads");
    if (!a.layout.empty()) {
        auto [n, br] = parse_layout(a.layout);
        c.depth = n;
        c.branches = br;
    }
    c.image_size = a.res;
    c.num_classes = a.classes;
    c.sd_rate = a.sd >= 0.0 ? a.sd : p.sd;
    c.layerscale = a.layerscale;
    c.layerscale_init = a.ls_init;
    c.stem_kind = stem_kind_from_string(a.stem);
    c.stem_norm = norm_kind_from_string(a.stem_norm);
    c.validate();
    return c;
}

double preset_lr(const ModelArgs& a) { return preset_for(a.model).lr; }

struct DataArgs {
    std::string dataset = "synthetic";
    std::string data_path;
    std::string test_path;
    std::int64_t train_n = 512;
    std::int64_t test_n = 256;
};

void add_data_flags(CLI::App* cmd, DataArgs& d) {
    cmd->add_option("--dataset", d.dataset, "Dataset: synthetic|cifar10")
        ->check(CLI::IsMember({"synthetic", "cifar10"}));
    cmd->add_option("--data-path", d.data_path, "CIFAR-10 binary batch file (train)");
    cmd->add_option("--test-path", d.test_path, "CIFAR-10 binary batch file (eval)");
    cmd->add_option("--train-n", d.train_n, "Synthetic training samples");
    cmd->add_option("--test-n", d.test_n, "Synthetic eval samples");
}

Dataset make_train_set(const DataArgs& d, const ViTConfig& c, std::uint64_t seed) {
    if (d.dataset == "cifar10") {
        if (d.data_path.empty()) throw ConfigError("cifar10 dataset requires --data-path");
        if (c.image_size != 32 || c.num_classes != 10)
            throw ConfigError("cifar10 requires --res 32 and --classes 10");
        return load_cifar10(d.data_path);
    }
    return synth_dataset(seed ^ 0x5EEDULL, d.train_n, c.image_size, c.num_classes);
}

std::optional<Dataset> make_test_set(const DataArgs& d, const ViTConfig& c, std::uint64_t seed) {
    if (d.dataset == "cifar10") {
        if (d.test_path.empty()) return std::nullopt;
        return load_cifar10(d.test_path);
    }
    return synth_dataset(seed ^ 0x7E57ULL, d.test_n, c.image_size, c.num_classes);
}

void emit(const std::string& out_path, const std::string& content) {
    if (out_path.empty())
        std::cout << content << "\n";
    else
        write_text_file(out_path, content);
}

ordered_json metrics_summary(const std::vector<EpochMetrics>& log) {
    ordered_json j;
    j["epochs"] = log.size();
    if (!log.empty()) {
        j["final_loss"] = log.back().loss;
        j["final_accuracy"] = log.back().accuracy;
    }
    return j;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

int cmd_analyze(const ModelArgs& margs, std::int64_t batch, const std::string& sweep_axis,
                const std::string& sweep_values, const std::string& format,
                const std::string& out) {
    ViTConfig c = build_config(margs);
    auto report = count_flops(c, c.image_size);
    auto mem = memory_estimate(c, c.image_size, batch);
    if (format == "text") {
        std::string text = report.to_text();
        if (!sweep_axis.empty()) {
            std::vector<std::int64_t> values;
            for (const auto& tok : CLI::detail::split(sweep_values, ','))
                values.push_back(std::stoll(tok));
            const auto axis = sweep_axis == "depth" ? ScalingAxis::depth : ScalingAxis::width;
            text += scaling_table(c, axis, values).to_text();
        }
        emit(out, text);
        return 0;
    }
    ordered_json j = report.to_json();
    j["config"] = config_to_json(c);
    j["memory"] = mem.to_json();
    if (!sweep_axis.empty()) {
        std::vector<std::int64_t> values;
        for (const auto& tok : CLI::detail::split(sweep_values, ','))
            values.push_back(std::stoll(tok));
        const auto axis = sweep_axis == "depth" ? ScalingAxis::depth : ScalingAxis::width;
        j["sweep"] = scaling_table(c, axis, values).to_json();
    }
    emit(out, j.dump(2));
    return 0;
}

int cmd_train(const ModelArgs& margs, const DataArgs& dargs, TrainConfig tc,
              const std::string& out, const std::string& checkpoint) {
    ViTConfig c = build_config(margs);
    if (tc.lr <= 0.0) tc.lr = preset_lr(margs);
    tc.seed = margs.seed;
    Rng rng(margs.seed);
    auto model = build_model<float>(c, rng);
    auto train_set = make_train_set(dargs, c, margs.seed);
    auto log = train_classifier(model, train_set, tc);
    if (!out.empty()) write_text_file(out, metrics_to_csv(log));
    ordered_json j;
    j["schema_version"] = "1";
    j["command"] = "train";
    j["metrics"] = metrics_summary(log);
    if (auto test_set = make_test_set(dargs, c, margs.seed))
        j["test_accuracy"] = evaluate(model, *test_set);
    if (!checkpoint.empty()) {
        save_checkpoint(model, checkpoint);
        j["checkpoint"] = checkpoint;
    }
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_pretrain_mim(const ModelArgs& margs, const DataArgs& dargs, TrainConfig tc,
                     double mask_ratio, const std::string& out, const std::string& checkpoint) {
    ViTConfig c = build_config(margs);
    if (tc.lr <= 0.0) tc.lr = 1e-3;
    tc.seed = margs.seed;
    Rng rng(margs.seed);
    auto model = build_model<float>(c, rng);
    auto head = build_mim_head<float>(c, rng);
    auto data = make_train_set(dargs, c, margs.seed);
    auto log = train_mim(model, head, data, tc, mask_ratio);
    if (!out.empty()) write_text_file(out, metrics_to_csv(log));
    ordered_json j;
    j["schema_version"] = "1";
    j["command"] = "pretrain-mim";
    j["mask_ratio"] = mask_ratio;
    j["metrics"] = metrics_summary(log);
    if (!checkpoint.empty()) {
        save_checkpoint(model, checkpoint);
        j["checkpoint"] = checkpoint;
    }
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_finetune(const std::string& checkpoint_in, std::int64_t res, const std::string& tune,
                 const DataArgs& dargs, TrainConfig tc, std::uint64_t seed,
                 const std::string& out, const std::string& checkpoint_out) {
    auto model = load_checkpoint<float>(checkpoint_in);
    TuneScope scope{scope_from_string(tune)};
    if (tc.lr <= 0.0) tc.lr = (tc.optimizer == "sgd") ? 1e-2 : 1e-4;
    tc.seed = seed;
    ViTConfig target = model.config;
    target.image_size = res;
    auto data = make_train_set(dargs, target, seed);
    std::vector<EpochMetrics> log;
    auto [tuned, report] = finetune_resolution(model, res, scope, tc, data, &log);
    if (!out.empty()) write_text_file(out, metrics_to_csv(log));
    ordered_json j;
    j["schema_version"] = "1";
    j["command"] = "finetune";
    j["scope"] = tune;
    j["resolution"] = res;
    j["total_params"] = report.total_params;
    j["trainable_params"] = report.trainable_params;
    j["frozen_params"] = report.frozen_params;
    j["trainable_fraction"] = report.trainable_fraction;
    j["block_trainable_fraction"] = report.block_fraction();
    ordered_json groups;
    for (const auto& [name, g] : report.groups)
        groups[name] = {{"total", g.total}, {"trainable", g.trainable}};
    j["groups"] = groups;
    j["metrics"] = metrics_summary(log);
    if (auto test_set = make_test_set(dargs, target, seed))
        j["test_accuracy"] = evaluate(tuned, *test_set);
    if (!checkpoint_out.empty()) {
        save_checkpoint(tuned, checkpoint_out);
        j["checkpoint"] = checkpoint_out;
    }
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_bench(const ModelArgs& margs, const std::string& layouts, const std::string& execs,
              const std::string& batches, int repeats, const std::string& out) {
    ViTConfig base = build_config(margs);
    BenchConfig bc;
    for (const auto& tok : CLI::detail::split(layouts, ','))
        bc.layouts.push_back(parse_layout(tok));
    bc.exec_modes = CLI::detail::split(execs, ',');
    bc.batch_sizes.clear();
    for (const auto& tok : CLI::detail::split(batches, ','))
        bc.batch_sizes.push_back(std::stoll(tok));
    bc.repeats = repeats;
    bc.seed = margs.seed;
    auto report = bench(base, bc);
    emit(out, report.to_csv());
    return 0;
}

int cmd_masktest(const ModelArgs& margs, int trials, double mask_ratio, const std::string& out) {
    StemSpec spec;
    spec.kind = stem_kind_from_string(margs.stem);
    spec.norm = (spec.kind == StemKind::linear) ? NormKind::none
                                                : norm_kind_from_string(margs.stem_norm);
    spec.d = margs.width > 0 ? margs.width : preset_for(margs.model).width;
    Rng rng(margs.seed);
    auto stem = build_stem<float>(spec, rng);

    auto independence = patch_independence_check(stem, rng, trials, margs.res);

    const std::int64_t T = (margs.res / 16) * (margs.res / 16);
    auto mask_token = Tensor<float>::randn({spec.d}, rng);
    double worst_dev = 0.0;
    for (int t = 0; t < trials; ++t) {
        auto image = Tensor<float>::randn({1, 3, margs.res, margs.res}, rng);
        auto mask = sample_mask(rng, T, mask_ratio);
        worst_dev = std::max(worst_dev, commutation_check(stem, image, mask, mask_token));
    }

    ordered_json j;
    j["schema_version"] = "1";
    j["command"] = "masktest";
    j["stem"] = margs.stem;
    j["norm"] = to_string(spec.norm);
    j["width"] = spec.d;
    j["resolution"] = margs.res;
    j["trials"] = trials;
    j["independent"] = independence.independent;
    j["max_leakage"] = independence.max_leakage;
    j["mask_ratio"] = mask_ratio;
    j["commutation_max_deviation"] = worst_dev;
    emit(out, j.dump(2));
    return 0;
}

int cmd_gradcheck(int trials, std::uint64_t seed, const std::string& out) {
    auto results = run_gradcheck_suite(trials, seed);
    ordered_json j;
    j["schema_version"] = "1";
    j["command"] = "gradcheck";
    j["tolerance"] = 1e-4;
    j["trials"] = trials;
    bool all_pass = true;
    ordered_json checks = ordered_json::array();
    for (const auto& r : results) {
        checks.push_back({{"name", r.name}, {"max_rel_err", r.max_rel_err}, {"pass", r.pass}});
        all_pass = all_pass && r.pass;
    }
    j["checks"] = checks;
    j["all_pass"] = all_pass;
    emit(out, j.dump(2));
    if (!all_pass) throw EvalError("gradcheck: at least one check exceeded tolerance 1e-4");
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"vitc: miniature vision-transformer toolkit"};
    app.require_subcommand(1);

    // analyze
    ModelArgs an_margs;
    std::int64_t an_batch = 1;
    std::string an_sweep, an_sweep_values = "12,24,36,48", an_format = "json", an_out;
    auto* analyze = app.add_subcommand("analyze", "Parameter/FLOP/memory accounting");
    add_model_flags(analyze, an_margs);
    analyze->add_option("--batch", an_batch, "Batch size for the memory estimate");
    analyze->add_option("--sweep", an_sweep, "Scaling sweep axis: depth|width")
        ->check(CLI::IsMember({"depth", "width"}));
    analyze->add_option("--sweep-values", an_sweep_values, "Comma-separated sweep values");
    analyze->add_option("--format", an_format, "json|text")->check(CLI::IsMember({"json", "text"}));
    analyze->add_option("--out", an_out, "Write the report here instead of stdout");

    // train
    ModelArgs tr_margs;
    DataArgs tr_dargs;
    TrainConfig tr_tc;
    tr_tc.lr = 0.0;
    std::string tr_out, tr_ckpt;
    auto* train = app.add_subcommand("train", "Supervised training");
    add_model_flags(train, tr_margs);
    add_data_flags(train, tr_dargs);
    train->add_option("--epochs", tr_tc.epochs, "Training epochs");
    train->add_option("--batch", tr_tc.batch_size, "Batch size");
    train->add_option("--lr", tr_tc.lr, "Peak learning rate (preset default if unset)");
    train->add_option("--optimizer", tr_tc.optimizer, "adamw|sgd")
        ->check(CLI::IsMember({"adamw", "sgd"}));
    train->add_option("--weight-decay", tr_tc.weight_decay, "Weight decay");
    train->add_option("--out", tr_out, "Metrics CSV path");
    train->add_option("--checkpoint", tr_ckpt, "Checkpoint output path");

    // pretrain-mim
    ModelArgs mim_margs;
    DataArgs mim_dargs;
    TrainConfig mim_tc;
    mim_tc.lr = 0.0;
    double mim_ratio = 0.4;
    std::string mim_out, mim_ckpt;
    auto* mim = app.add_subcommand("pretrain-mim", "Masked-patch pixel-regression pre-training");
    add_model_flags(mim, mim_margs);
    add_data_flags(mim, mim_dargs);
    mim->add_option("--epochs", mim_tc.epochs, "Epochs");
    mim->add_option("--batch", mim_tc.batch_size, "Batch size");
    mim->add_option("--lr", mim_tc.lr, "Peak learning rate");
    mim->add_option("--mask-ratio", mim_ratio, "Fraction of patches masked");
    mim->add_option("--out", mim_out, "Metrics CSV path");
    mim->add_option("--checkpoint", mim_ckpt, "Checkpoint output path");

    // finetune
    DataArgs ft_dargs;
    TrainConfig ft_tc;
    ft_tc.lr = 0.0;
    std::string ft_ckpt_in, ft_tune = "attn", ft_out, ft_ckpt_out;
    std::int64_t ft_res = 384;
    std::uint64_t ft_seed = 0;
    auto* ft = app.add_subcommand("finetune", "Scoped fine-tuning at a new resolution");
    ft->add_option("--checkpoint", ft_ckpt_in, "Pre-trained checkpoint")->required();
    ft->add_option("--res", ft_res, "Target resolution");
    ft->add_option("--tune", ft_tune, "Scope: full|attn|ffn")
        ->check(CLI::IsMember({"full", "attn", "ffn"}));
    add_data_flags(ft, ft_dargs);
    ft->add_option("--epochs", ft_tc.epochs, "Epochs");
    ft->add_option("--batch", ft_tc.batch_size, "Batch size");
    ft->add_option("--lr", ft_tc.lr, "Learning rate (1e-4 adamw / 1e-2 sgd default)");
    ft->add_option("--optimizer", ft_tc.optimizer, "adamw|sgd")
        ->check(CLI::IsMember({"adamw", "sgd"}));
    ft->add_option("--seed", ft_seed, "Seed");
    ft->add_option("--out", ft_out, "Metrics CSV path");
    ft->add_option("--checkpoint-out", ft_ckpt_out, "Fine-tuned checkpoint path");

    // bench
    ModelArgs be_margs;
    std::string be_layouts = "12x2", be_exec = "seq,par", be_batches = "1,4", be_out;
    int be_repeats = 5;
    auto* be = app.add_subcommand("bench", "Sequential vs parallel throughput");
    add_model_flags(be, be_margs);
    be->add_option("--layouts", be_layouts, "Comma-separated NxP layouts");
    be->add_option("--exec", be_exec, "Comma-separated exec modes from {seq,par}");
    be->add_option("--batch-sizes", be_batches, "Comma-separated batch sizes");
    be->add_option("--repeats", be_repeats, "Timed repeats per row (>=5)");
    be->add_option("--out", be_out, "CSV output path");

    // masktest
    ModelArgs mt_margs;
    mt_margs.res = 64;
    int mt_trials = 100;
    double mt_ratio = 0.4;
    std::string mt_out;
    auto* mt = app.add_subcommand("masktest", "Patch independence and masking commutation");
    add_model_flags(mt, mt_margs);
    mt->add_option("--trials", mt_trials, "Perturbation/mask trials");
    mt->add_option("--mask-ratio", mt_ratio, "Mask ratio for commutation");
    mt->add_option("--out", mt_out, "JSON output path");

    // gradcheck
    int gc_trials = 20;
    std::uint64_t gc_seed = 0;
    std::string gc_out;
    auto* gc = app.add_subcommand("gradcheck", "f64 finite-difference gradient verification");
    gc->add_option("--trials", gc_trials, "Trials per check");
    gc->add_option("--seed", gc_seed, "Seed");
    gc->add_option("--out", gc_out, "JSON output path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (*analyze)
            return cmd_analyze(an_margs, an_batch, an_sweep, an_sweep_values, an_format, an_out);
        if (*train) return cmd_train(tr_margs, tr_dargs, tr_tc, tr_out, tr_ckpt);
        if (*mim) return cmd_pretrain_mim(mim_margs, mim_dargs, mim_tc, mim_ratio, mim_out, mim_ckpt);
        if (*ft)
            return cmd_finetune(ft_ckpt_in, ft_res, ft_tune, ft_dargs, ft_tc, ft_seed, ft_out,
                                ft_ckpt_out);
        if (*be) return cmd_bench(be_margs, be_layouts, be_exec, be_batches, be_repeats, be_out);
        if (*mt) return cmd_masktest(mt_margs, mt_trials, mt_ratio, mt_out);
        if (*gc) return cmd_gradcheck(gc_trials, gc_seed, gc_out);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const DimensionError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
