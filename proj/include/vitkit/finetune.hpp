#pragma once

#include <map>
#include <string>
#include <vector>

#include "vitkit/vit.hpp"

namespace vitkit {

// Parameter-scope selection for fine-tuning. `attn` updates the MHSA path of
// every block (qkv, proj, its pre-norm and LayerScale), `ffn` the
// feed-forward path; the two partition the block inventory. The classifier
// head, final norm, positional embeddings, class token and mask token stay
// trainable in every scope: a resolution or label-set change needs them live.
enum class Scope { full, attn, ffn };

inline std::string to_string(Scope s) {
    switch (s) {
        case Scope::full: return "full";
        case Scope::attn: return "attn";
        case Scope::ffn: return "ffn";
    }
    return "?";
}

inline Scope scope_from_string(const std::string& s) {
    if (s == "full") return Scope::full;
    if (s == "attn") return Scope::attn;
    if (s == "ffn") return Scope::ffn;
    throw ConfigError("unknown tune scope '" + s + "' (expected full|attn|ffn)");
}

struct TuneScope {
    Scope scope = Scope::full;
    std::vector<std::string> always_trainable = {"head.", "final_norm.", "pos_embed",
                                                 "cls_token", "mask_token"};

    bool is_always_trainable(const std::string& name) const {
        for (const auto& pat : always_trainable)
            if (name.rfind(pat, 0) == 0) return true;
        return false;
    }

    bool selects(const std::string& name) const {
        if (scope == Scope::full) return true;
        if (is_always_trainable(name)) return true;
        if (name.rfind("layers.", 0) != 0) return false; // stem is frozen outside full scope
        const bool attn_side = name.find(".mhsa.") != std::string::npos ||
                               name.find(".norm1.") != std::string::npos ||
                               name.find(".gamma1") != std::string::npos;
        return (scope == Scope::attn) ? attn_side : !attn_side;
    }
};

struct ParamGroupEntry {
    std::int64_t total = 0;
    std::int64_t trainable = 0;
};

struct ParamGroupReport {
    std::int64_t total_params = 0;
    std::int64_t trainable_params = 0;
    std::int64_t frozen_params = 0;
    double trainable_fraction = 0.0;
    // block-only view, the quantity the one-third claim is about
    std::int64_t block_params = 0;
    std::int64_t block_trainable = 0;
    std::map<std::string, ParamGroupEntry> groups;

    double block_fraction() const {
        return block_params ? static_cast<double>(block_trainable) /
                                  static_cast<double>(block_params)
                            : 0.0;
    }
};

namespace detail {

inline std::string group_of(const std::string& name) {
    if (name.rfind("stem.", 0) == 0) return "stem";
    if (name == "cls_token" || name == "pos_embed") return "embed";
    if (name.rfind("layers.", 0) == 0) {
        const bool attn_side = name.find(".mhsa.") != std::string::npos ||
                               name.find(".norm1.") != std::string::npos ||
                               name.find(".gamma1") != std::string::npos;
        return attn_side ? "blocks.attn" : "blocks.ffn";
    }
    if (name.rfind("final_norm.", 0) == 0) return "final_norm";
    return "head";
}

} // namespace detail

// Marks requires_grad on every model parameter per the scope and reports the
// resulting split.
template <typename S>
ParamGroupReport select_trainable(Model<S>& model, const TuneScope& scope) {
    ParamGroupReport report;
    for_each_param(model, [&](const std::string& name, Tensor<S>& t) {
        const bool on = scope.selects(name);
        t.set_requires_grad(on);
        const std::int64_t n = t.numel();
        report.total_params += n;
        auto& g = report.groups[detail::group_of(name)];
        g.total += n;
        if (on) {
            report.trainable_params += n;
            g.trainable += n;
        }
        if (name.rfind("layers.", 0) == 0) {
            report.block_params += n;
            if (on) report.block_trainable += n;
        }
    });
    report.frozen_params = report.total_params - report.trainable_params;
    report.trainable_fraction =
        static_cast<double>(report.trainable_params) / static_cast<double>(report.total_params);
    return report;
}

// True iff every parameter outside the scope's trainable set is bitwise
// identical between the two models. Selected parameters are ignored
// entirely; a resolution change legitimately resizes pos_embed, which is
// always trainable.
template <typename S>
bool freeze_verify(Model<S>& before, Model<S>& after, const TuneScope& scope) {
    auto a = named_params(before);
    auto b = named_params(after);
    if (a.size() != b.size())
        throw ConfigError("freeze_verify: models have different inventories");
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].name != b[i].name)
            throw ConfigError("freeze_verify: inventory mismatch at " + a[i].name);
        if (scope.selects(a[i].name)) continue;
        if (a[i].tensor.shape() != b[i].tensor.shape())
            throw ConfigError("freeze_verify: frozen tensor " + a[i].name +
                              " changed shape between models");
        const auto av = a[i].tensor.data(), bv = b[i].tensor.data();
        for (std::int64_t j = 0; j < a[i].tensor.numel(); ++j)
            if (av[j] != bv[j]) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// Optimizers. Both update only parameters that carry requires_grad and a
// gradient; frozen tensors are never touched.
// ---------------------------------------------------------------------------
struct SgdConfig {
    double lr = 1e-2;
    double momentum = 0.9;
    double weight_decay = 0.0;
};

template <typename S>
class Sgd {
public:
    Sgd(std::vector<Tensor<S>> params, SgdConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        if (cfg.lr <= 0.0) throw ConfigError("sgd: lr must be positive");
        vel_.resize(params_.size());
    }

    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    void step() {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            if (!p.requires_grad() || !p.has_grad()) continue;
            auto& v = vel_[i];
            if (v.empty()) v.assign(static_cast<std::size_t>(p.numel()), S(0));
            auto pv = p.data();
            const auto gv = p.grad();
            const S lr = static_cast<S>(cfg_.lr), mu = static_cast<S>(cfg_.momentum);
            const S wd = static_cast<S>(cfg_.weight_decay);
            for (std::int64_t j = 0; j < p.numel(); ++j) {
                const S g = gv[j] + wd * pv[j];
                v[static_cast<std::size_t>(j)] = mu * v[static_cast<std::size_t>(j)] + g;
                pv[j] -= lr * v[static_cast<std::size_t>(j)];
            }
        }
    }

private:
    std::vector<Tensor<S>> params_;
    std::vector<std::vector<S>> vel_;
    SgdConfig cfg_;
};

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

template <typename S>
class AdamW {
public:
    AdamW(std::vector<Tensor<S>> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        if (cfg.lr <= 0.0) throw ConfigError("adamw: lr must be positive");
        m_.resize(params_.size());
        v_.resize(params_.size());
    }

    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            if (!p.requires_grad() || !p.has_grad()) continue;
            auto& m = m_[i];
            auto& v = v_[i];
            if (m.empty()) {
                m.assign(static_cast<std::size_t>(p.numel()), S(0));
                v.assign(static_cast<std::size_t>(p.numel()), S(0));
            }
            auto pv = p.data();
            const auto gv = p.grad();
            for (std::int64_t j = 0; j < p.numel(); ++j) {
                const double g = static_cast<double>(gv[j]);
                // decoupled decay first, then bias-corrected moments
                pv[j] -= static_cast<S>(cfg_.lr * cfg_.weight_decay) * pv[j];
                m[static_cast<std::size_t>(j)] =
                    static_cast<S>(cfg_.beta1 * m[static_cast<std::size_t>(j)] + (1.0 - cfg_.beta1) * g);
                v[static_cast<std::size_t>(j)] =
                    static_cast<S>(cfg_.beta2 * v[static_cast<std::size_t>(j)] + (1.0 - cfg_.beta2) * g * g);
                const double mhat = static_cast<double>(m[static_cast<std::size_t>(j)]) / bc1;
                const double vhat = static_cast<double>(v[static_cast<std::size_t>(j)]) / bc2;
                pv[j] -= static_cast<S>(cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
            }
        }
    }

private:
    std::vector<Tensor<S>> params_;
    std::vector<std::vector<S>> m_, v_;
    AdamWConfig cfg_;
    long t_ = 0;
};

} // namespace vitkit
