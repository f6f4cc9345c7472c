#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "vitkit/dataset.hpp"
#include "vitkit/finetune.hpp"
#include "vitkit/masking.hpp"

namespace vitkit {

struct TrainConfig {
    int epochs = 20;
    std::int64_t batch_size = 32;
    std::string optimizer = "adamw"; // adamw | sgd
    double lr = 4e-3;                // model presets override
    double weight_decay = 0.05;
    double momentum = 0.9; // sgd only
    bool cosine_decay = true;
    std::uint64_t seed = 0;
};

struct EpochMetrics {
    int epoch = 0;
    double loss = 0.0;
    double accuracy = 0.0;
};

// CSV schema: epoch,loss,accuracy
inline std::string metrics_to_csv(const std::vector<EpochMetrics>& log) {
    std::ostringstream os;
    os << "epoch,loss,accuracy\n";
    for (const auto& m : log) os << m.epoch << ',' << m.loss << ',' << m.accuracy << '\n';
    return os.str();
}

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("cannot open '" + path + "' for writing");
    out << content;
}

namespace detail {

inline double cosine_lr(double base, std::int64_t step, std::int64_t total_steps) {
    if (total_steps <= 1) return base;
    const double t = static_cast<double>(step) / static_cast<double>(total_steps - 1);
    return 0.5 * base * (1.0 + std::cos(std::numbers::pi * t));
}

inline std::vector<std::int64_t> shuffled_indices(std::int64_t n, Rng& rng) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    for (std::int64_t i = n - 1; i > 0; --i)
        std::swap(idx[static_cast<std::size_t>(i)],
                  idx[static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(i + 1)))]);
    return idx;
}

template <typename S>
double grad_norm(std::vector<Tensor<S>>& params) {
    double acc = 0;
    for (auto& p : params) {
        if (!p.has_grad()) continue;
        for (auto g : p.grad()) acc += static_cast<double>(g) * static_cast<double>(g);
    }
    return std::sqrt(acc);
}

} // namespace detail

template <typename S>
double evaluate(Model<S>& model, const Dataset& data, std::int64_t batch_size = 64) {
    NoGradGuard ng;
    std::int64_t correct = 0;
    for (std::int64_t at = 0; at < data.size(); at += batch_size) {
        std::vector<std::int64_t> idx;
        for (std::int64_t i = at; i < std::min(at + batch_size, data.size()); ++i)
            idx.push_back(i);
        auto logits = forward_parallel(model, batch_images<S>(data, idx), Mode::eval);
        const auto labels = batch_labels(data, idx);
        const std::int64_t classes = logits.dim(1);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            std::int64_t best = 0;
            for (std::int64_t j = 1; j < classes; ++j)
                if (logits.data()[static_cast<std::int64_t>(i) * classes + j] >
                    logits.data()[static_cast<std::int64_t>(i) * classes + best])
                    best = j;
            if (best == labels[i]) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

// Supervised training with seeded shuffling, cosine lr decay and per-epoch
// loss/accuracy logging. Aborts on a non-finite loss with the lr, step and
// last gradient norm in the message. When `scope` is given only its
// selection is updated (fine-tuning); otherwise everything trains.
template <typename S>
std::vector<EpochMetrics> train_classifier(Model<S>& model, const Dataset& data,
                                           const TrainConfig& cfg,
                                           const TuneScope* scope = nullptr) {
    if (data.image_size != model.config.image_size)
        throw DimensionError("train: dataset images " + std::to_string(data.image_size) +
                             " do not match model resolution " +
                             std::to_string(model.config.image_size));
    std::vector<Tensor<S>> params;
    for (auto& [name, t] : named_params(model)) params.push_back(t);
    if (scope)
        select_trainable(model, *scope);
    else
        for (auto& p : params) p.set_requires_grad(true);

    std::optional<Sgd<S>> sgd;
    std::optional<AdamW<S>> adamw;
    if (cfg.optimizer == "sgd")
        sgd.emplace(params, SgdConfig{cfg.lr, cfg.momentum, cfg.weight_decay});
    else if (cfg.optimizer == "adamw")
        adamw.emplace(params, AdamWConfig{.lr = cfg.lr, .weight_decay = cfg.weight_decay});
    else
        throw ConfigError("train: unknown optimizer '" + cfg.optimizer + "'");

    Rng rng(cfg.seed);
    const std::int64_t steps_per_epoch =
        (data.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::int64_t total_steps = steps_per_epoch * cfg.epochs;
    std::int64_t step = 0;
    double last_grad_norm = 0.0;
    std::vector<EpochMetrics> log;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng = rng.fork(static_cast<std::uint64_t>(epoch) + 1);
        auto order = detail::shuffled_indices(data.size(), shuffle_rng);
        double loss_sum = 0.0;
        std::int64_t seen = 0, correct = 0;
        for (std::int64_t at = 0; at < data.size(); at += cfg.batch_size, ++step) {
            std::vector<std::int64_t> idx(order.begin() + at,
                                          order.begin() +
                                              std::min(at + cfg.batch_size, data.size()));
            auto images = batch_images<S>(data, idx);
            auto labels = batch_labels(data, idx);
            const double lr = cfg.cosine_decay ? detail::cosine_lr(cfg.lr, step, total_steps)
                                               : cfg.lr;
            if (sgd) sgd->set_lr(lr);
            if (adamw) adamw->set_lr(lr);
            if (sgd) sgd->zero_grad();
            if (adamw) adamw->zero_grad();
            auto logits = forward_parallel(model, images, Mode::train, &rng);
            auto loss = cross_entropy(logits, labels);
            const double lv = static_cast<double>(loss.item());
            if (!std::isfinite(lv))
                throw EvalError("train: non-finite loss at step " + std::to_string(step) +
                                " (lr=" + std::to_string(lr) +
                                ", last grad norm=" + std::to_string(last_grad_norm) + ")");
            loss.backward();
            last_grad_norm = detail::grad_norm(params);
            if (sgd) sgd->step();
            if (adamw) adamw->step();
            loss_sum += lv * static_cast<double>(idx.size());
            const std::int64_t classes = logits.dim(1);
            for (std::size_t i = 0; i < idx.size(); ++i, ++seen) {
                std::int64_t best = 0;
                for (std::int64_t j = 1; j < classes; ++j)
                    if (logits.data()[static_cast<std::int64_t>(i) * classes + j] >
                        logits.data()[static_cast<std::int64_t>(i) * classes + best])
                        best = j;
                if (best == labels[i]) ++correct;
            }
        }
        log.push_back({epoch + 1, loss_sum / static_cast<double>(seen),
                       static_cast<double>(correct) / static_cast<double>(seen)});
    }
    return log;
}

// Masked-image-modeling pre-training on the dataset's images (labels
// unused). A fresh mask is sampled per step and shared across the batch.
template <typename S>
std::vector<EpochMetrics> train_mim(Model<S>& model, MimHead<S>& head, const Dataset& data,
                                    const TrainConfig& cfg, double mask_ratio = 0.4) {
    std::vector<Tensor<S>> params;
    for (auto& [name, t] : named_params(model)) {
        t.set_requires_grad(true);
        params.push_back(t);
    }
    for_each_mim_param(head, [&](const std::string&, Tensor<S>& t) {
        t.set_requires_grad(true);
        params.push_back(t);
    });
    AdamW<S> opt(params, {.lr = cfg.lr, .weight_decay = cfg.weight_decay});
    Rng rng(cfg.seed);
    const std::int64_t T = model.config.tokens();
    const std::int64_t steps_per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::int64_t total_steps = steps_per_epoch * cfg.epochs;
    std::int64_t step = 0;
    std::vector<EpochMetrics> log;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng = rng.fork(static_cast<std::uint64_t>(epoch) + 1);
        auto order = detail::shuffled_indices(data.size(), shuffle_rng);
        double loss_sum = 0.0;
        std::int64_t seen = 0;
        for (std::int64_t at = 0; at < data.size(); at += cfg.batch_size, ++step) {
            std::vector<std::int64_t> idx(order.begin() + at,
                                          order.begin() +
                                              std::min(at + cfg.batch_size, data.size()));
            auto images = batch_images<S>(data, idx);
            auto mask = sample_mask(rng, T, mask_ratio);
            opt.set_lr(cfg.cosine_decay ? detail::cosine_lr(cfg.lr, step, total_steps) : cfg.lr);
            opt.zero_grad();
            auto loss = mim_loss(model, head, images, mask, Mode::train, &rng);
            const double lv = static_cast<double>(loss.item());
            if (!std::isfinite(lv))
                throw EvalError("pretrain-mim: non-finite loss at step " + std::to_string(step));
            loss.backward();
            opt.step();
            loss_sum += lv * static_cast<double>(idx.size());
            seen += static_cast<std::int64_t>(idx.size());
        }
        log.push_back({epoch + 1, loss_sum / static_cast<double>(seen), 0.0});
    }
    return log;
}

// Resolution/transfer fine-tuning: resample positional embeddings to the
// dataset resolution, restrict training to the scope, run the usual loop.
template <typename S>
std::pair<Model<S>, ParamGroupReport> finetune_resolution(Model<S>& pretrained,
                                                          std::int64_t new_size,
                                                          const TuneScope& scope,
                                                          const TrainConfig& cfg,
                                                          const Dataset& data,
                                                          std::vector<EpochMetrics>* log_out = nullptr) {
    Model<S> model = interpolate_pos_embed(pretrained, new_size);
    auto report = select_trainable(model, scope);
    auto log = train_classifier(model, data, cfg, &scope);
    if (log_out) *log_out = std::move(log);
    return {std::move(model), report};
}

} // namespace vitkit
