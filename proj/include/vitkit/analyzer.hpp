#pragma once

#include <json.hpp>

#include <iomanip>
#include <map>
#include <sstream>
#include <string>

#include "vitkit/vit.hpp"

namespace vitkit {

// Analytic complexity accounting. FLOPs follow the MAC convention: one
// multiply-accumulate counts as one FLOP, and only matmul/convolution inner
// products are counted (softmax, GELU, norms and bias adds are excluded).
// This is the convention under which ViT-B12 at 224x224 costs 17.58 G.
struct ComplexityReport {
    std::int64_t params_total = 0;
    std::map<std::string, std::int64_t> params_by_component;
    std::int64_t flops_total = 0;
    std::map<std::string, std::int64_t> flops_by_component;
    std::int64_t resolution = 0;
    std::int64_t token_count = 0; // grid tokens + class token

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["schema_version"] = "1";
        j["convention"] = "1 MAC = 1 FLOP; matmul/conv products only";
        j["resolution"] = resolution;
        j["token_count"] = token_count;
        j["params_total"] = params_total;
        j["params_by_component"] = params_by_component;
        j["flops_total"] = flops_total;
        j["flops_by_component"] = flops_by_component;
        return j;
    }

    std::string to_text() const {
        std::ostringstream os;
        os << "component            params            flops\n";
        auto row = [&](const std::string& name, std::int64_t p, std::int64_t f) {
            os << std::left << std::setw(18) << name << std::right << std::setw(14) << p
               << std::setw(17) << f << "\n";
        };
        std::map<std::string, std::int64_t> names = params_by_component;
        for (const auto& [k, v] : flops_by_component) names.emplace(k, 0);
        for (const auto& [k, _] : names) {
            const auto pit = params_by_component.find(k);
            const auto fit = flops_by_component.find(k);
            row(k, pit == params_by_component.end() ? 0 : pit->second,
                fit == flops_by_component.end() ? 0 : fit->second);
        }
        row("total", params_total, flops_total);
        return os.str();
    }
};

namespace detail {

inline std::int64_t stem_param_count(const ViTConfig& c) {
    const std::int64_t d = c.width, p = c.patch_size;
    switch (c.stem_kind) {
        case StemKind::linear:
            return 3 * p * p * d + d;
        case StemKind::hmlp: {
            const std::int64_t q = d / 4;
            return (q * 3 * 16 + q) + 2 * q    // conv 3->d/4 k4 + norm
                 + (q * q * 4 + q) + 2 * q     // conv d/4->d/4 k2 + norm
                 + (d * q * 4 + d) + 2 * d;    // conv d/4->d k2 + norm
        }
        case StemKind::conv: {
            const std::int64_t ch[5] = {3, d / 8, d / 4, d / 2, d};
            std::int64_t n = 0;
            for (int i = 0; i < 4; ++i) n += ch[i + 1] * ch[i] * 9 + ch[i + 1] + 2 * ch[i + 1];
            return n;
        }
    }
    return 0;
}

inline std::int64_t stem_flop_count(const ViTConfig& c, std::int64_t res) {
    const std::int64_t d = c.width, p = c.patch_size;
    const std::int64_t T = (res / p) * (res / p);
    switch (c.stem_kind) {
        case StemKind::linear:
            return T * 3 * p * p * d;
        case StemKind::hmlp: {
            const std::int64_t q = d / 4;
            return (res / 4) * (res / 4) * q * (3 * 16)  // 4x4 stride 4
                 + (res / 8) * (res / 8) * q * (q * 4)   // 2x2 stride 2
                 + T * d * (q * 4);                      // 2x2 stride 2
        }
        case StemKind::conv: {
            const std::int64_t ch[5] = {3, d / 8, d / 4, d / 2, d};
            std::int64_t n = 0;
            for (int i = 0; i < 4; ++i) {
                const std::int64_t hw = res >> (i + 1);
                n += hw * hw * ch[i + 1] * (ch[i] * 9);
            }
            return n;
        }
    }
    return 0;
}

} // namespace detail

// Per block: MHSA 4d^2+4d, FFN 8d^2+5d, norms 4d, LayerScale 2d if enabled.
inline std::int64_t block_param_count(const ViTConfig& c) {
    const std::int64_t d = c.width;
    return 12 * d * d + 13 * d + (c.layerscale ? 2 * d : 0);
}

inline ComplexityReport count_params(const ViTConfig& config) {
    config.validate();
    const std::int64_t d = config.width;
    ComplexityReport r;
    r.resolution = config.image_size;
    r.token_count = config.tokens() + 1;
    r.params_by_component["stem"] = detail::stem_param_count(config);
    r.params_by_component["cls+pos"] = d + (config.tokens() + 1) * d;
    r.params_by_component["blocks"] = config.depth * config.branches * block_param_count(config);
    r.params_by_component["final_norm"] = 2 * d;
    r.params_by_component["head"] = d * config.num_classes + config.num_classes;
    for (const auto& [k, v] : r.params_by_component) r.params_total += v;
    return r;
}

// Per block: 12*d^2*T' + 2*T'^2*d with T' = tokens incl. class token, plus
// stem and classifier head.
inline ComplexityReport count_flops(const ViTConfig& config, std::int64_t resolution) {
    config.validate();
    if (resolution % config.patch_size != 0)
        throw ConfigError("count_flops: resolution " + std::to_string(resolution) +
                          " not divisible by patch size");
    const std::int64_t d = config.width;
    const std::int64_t T = (resolution / config.patch_size) * (resolution / config.patch_size);
    const std::int64_t Tp = T + 1;
    ComplexityReport r = count_params(config);
    r.resolution = resolution;
    r.token_count = Tp;
    r.flops_by_component["stem"] = detail::stem_flop_count(config, resolution);
    r.flops_by_component["blocks"] =
        config.depth * config.branches * (12 * d * d * Tp + 2 * Tp * Tp * d);
    r.flops_by_component["head"] = d * config.num_classes;
    for (const auto& [k, v] : r.flops_by_component) r.flops_total += v;
    return r;
}

// Brute-force oracle: runs one single-image eval forward with the MAC
// counter installed and reports the exact integer count.
template <typename S>
std::int64_t flops_oracle(Model<S>& model) {
    std::int64_t macs = 0;
    Rng rng(0);
    auto image = Tensor<S>::randn({1, 3, model.config.image_size, model.config.image_size}, rng);
    NoGradGuard ng;
    MacCounterGuard guard(&macs);
    (void)forward(model, image, Mode::eval);
    return macs;
}

// ---------------------------------------------------------------------------
// Scaling sweeps: block parameters/FLOPs are linear in depth and quadratic
// in width. scaling_table fits the dominant term and reports R^2.
// ---------------------------------------------------------------------------
enum class ScalingAxis { depth, width };

struct ScalingRow {
    std::int64_t value = 0; // depth or width
    std::int64_t params_total = 0;
    std::int64_t block_params = 0;
    std::int64_t flops_total = 0;
    std::int64_t block_flops = 0;
};

struct ScalingTable {
    ScalingAxis axis = ScalingAxis::depth;
    std::vector<ScalingRow> rows;
    double r2_params = 0.0; // fit of block params against N (depth) or d^2 (width)
    double r2_flops = 0.0;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["schema_version"] = "1";
        j["axis"] = (axis == ScalingAxis::depth) ? "depth" : "width";
        j["r2_params"] = r2_params;
        j["r2_flops"] = r2_flops;
        j["rows"] = nlohmann::ordered_json::array();
        for (const auto& r : rows)
            j["rows"].push_back({{"value", r.value},
                                 {"params_total", r.params_total},
                                 {"block_params", r.block_params},
                                 {"flops_total", r.flops_total},
                                 {"block_flops", r.block_flops}});
        return j;
    }

    std::string to_text() const {
        std::ostringstream os;
        os << ((axis == ScalingAxis::depth) ? "depth" : "width")
           << "      params       block_params        flops       block_flops\n";
        for (const auto& r : rows)
            os << std::setw(5) << r.value << std::setw(14) << r.params_total << std::setw(15)
               << r.block_params << std::setw(17) << r.flops_total << std::setw(15)
               << r.block_flops << "\n";
        os << "r2(params dominant term) = " << r2_params
           << ", r2(flops dominant term) = " << r2_flops << "\n";
        return os.str();
    }
};

namespace detail {

// R^2 of the least-squares line y = a*x + b.
inline double r_squared(const std::vector<double>& x, const std::vector<double>& y) {
    const std::size_t n = x.size();
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sx += x[i];
        sy += y[i];
        sxx += x[i] * x[i];
        sxy += x[i] * y[i];
    }
    const double denom = n * sxx - sx * sx;
    if (denom == 0) return 1.0;
    const double a = (n * sxy - sx * sy) / denom;
    const double b = (sy - a * sx) / n;
    double ss_res = 0, ss_tot = 0;
    const double ybar = sy / n;
    for (std::size_t i = 0; i < n; ++i) {
        const double fit = a * x[i] + b;
        ss_res += (y[i] - fit) * (y[i] - fit);
        ss_tot += (y[i] - ybar) * (y[i] - ybar);
    }
    return ss_tot == 0 ? 1.0 : 1.0 - ss_res / ss_tot;
}

} // namespace detail

inline ScalingTable scaling_table(const ViTConfig& base, ScalingAxis axis,
                                  const std::vector<std::int64_t>& values) {
    ScalingTable table;
    table.axis = axis;
    std::vector<double> xs, p_ys, f_ys;
    for (auto v : values) {
        ViTConfig c = base;
        if (axis == ScalingAxis::depth)
            c.depth = v;
        else {
            c.width = v;
            if (c.width % c.heads != 0) c.heads = std::max<std::int64_t>(1, c.width / 64);
        }
        auto fl = count_flops(c, c.image_size);
        ScalingRow row;
        row.value = v;
        row.params_total = fl.params_total;
        row.block_params = fl.params_by_component.at("blocks");
        row.flops_total = fl.flops_total;
        row.block_flops = fl.flops_by_component.at("blocks");
        table.rows.push_back(row);
        xs.push_back(axis == ScalingAxis::depth ? static_cast<double>(v)
                                                : static_cast<double>(v) * static_cast<double>(v));
        p_ys.push_back(static_cast<double>(row.block_params));
        f_ys.push_back(static_cast<double>(row.block_flops));
    }
    table.r2_params = detail::r_squared(xs, p_ys);
    table.r2_flops = detail::r_squared(xs, f_ys);
    return table;
}

// ---------------------------------------------------------------------------
// Analytic peak-memory estimate at inference time: parameter storage plus
// the largest set of live activations inside one block,
//
//   per image: 3*T'*d (qkv) + heads*T'^2 (attention probs)
//            + 4*T'*d (ffn hidden) + 2*T'*d (stream + branch)
//
// in the configured dtype. Depth-independent by construction (the peak is a
// max over blocks, not a sum). This is a documented model of our own
// implementation, not a reproduction of any measured table.
// ---------------------------------------------------------------------------
struct MemoryEstimate {
    std::int64_t bytes_params = 0;
    std::int64_t bytes_activations = 0;
    std::int64_t bytes_attention = 0; // part of activations: heads * T'^2
    std::int64_t bytes_token = 0;     // part of activations: 9 * T' * d
    std::int64_t total() const { return bytes_params + bytes_activations; }

    nlohmann::ordered_json to_json() const {
        return {{"schema_version", "1"},
                {"bytes_params", bytes_params},
                {"bytes_activations", bytes_activations},
                {"bytes_attention", bytes_attention},
                {"bytes_token", bytes_token},
                {"bytes_total", total()}};
    }
};

inline MemoryEstimate memory_estimate(const ViTConfig& config, std::int64_t resolution,
                                      std::int64_t batch) {
    config.validate();
    const std::int64_t d = config.width;
    const std::int64_t T = (resolution / config.patch_size) * (resolution / config.patch_size);
    const std::int64_t Tp = T + 1;
    const std::int64_t elem = (config.dtype == "f64") ? 8 : 4;
    MemoryEstimate e;
    e.bytes_params = count_params(config).params_total * elem;
    e.bytes_attention = batch * config.heads * Tp * Tp * elem;
    e.bytes_token = batch * 9 * Tp * d * elem;
    e.bytes_activations = e.bytes_attention + e.bytes_token;
    return e;
}

} // namespace vitkit
