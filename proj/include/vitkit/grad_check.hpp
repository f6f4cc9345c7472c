#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "vitkit/tensor.hpp"

namespace vitkit {

// Finite-difference verification of reverse-mode gradients. The loss
// function is re-evaluated from scratch at perturbed parameter values, so it
// must be a pure function of the listed parameters (fix seeds and modes
// before calling). Meant to run in f64; central differences in f32 drown in
// rounding noise.
// The comparison divides by max(|fd|, |ad|, floor). With step h a central
// difference carries rounding noise of order k * eps * |f| / h, where k
// grows with the length of the computation graph (k ~ 10..100 for a
// transformer block in f64). At the default h = 1e-5 this makes gradient
// coordinates below roughly 1e-5 * |f| unresolvable to 1e-4 relative
// accuracy by the oracle itself, so the floor scales with the loss
// magnitude at that resolution limit. Sign or scale errors anywhere above
// it still register loudly.
struct GradCheckOptions {
    double step = 1e-5;        // relative step: h = step * max(1, |x|)
    int probes_per_param = 8;  // coordinates sampled per parameter tensor
    double denom_floor = 1e-5; // multiplied by max(1, |loss|)
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::int64_t probes = 0;
};

template <typename LossFn>
GradCheckReport grad_check(LossFn&& loss_fn, std::vector<Tensor<double>> params, Rng& rng,
                           GradCheckOptions opts = {}) {
    for (auto& p : params) {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    Tensor<double> loss = loss_fn();
    const double base = loss.item();
    if (!std::isfinite(base)) throw EvalError("grad_check: non-finite loss at probe point");
    loss.backward();

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params) {
        if (p.has_grad())
            analytic.emplace_back(p.grad().begin(), p.grad().end());
        else
            analytic.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
    }

    GradCheckReport report;
    const double floor = opts.denom_floor * std::max(1.0, std::abs(base));
    NoGradGuard ng; // finite-difference evaluations need no graph
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        const std::int64_t n = p.numel();
        const int probes = static_cast<int>(std::min<std::int64_t>(n, opts.probes_per_param));
        for (int probe = 0; probe < probes; ++probe) {
            const std::int64_t idx =
                (n == probes) ? probe : static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n)));
            double& x = p.data()[static_cast<std::size_t>(idx)];
            const double saved = x;
            const double h = opts.step * std::max(1.0, std::abs(saved));
            x = saved + h;
            const double fp = loss_fn().item();
            x = saved - h;
            const double fm = loss_fn().item();
            x = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw EvalError("grad_check: non-finite loss during finite differences");
            const double fd = (fp - fm) / (2.0 * h);
            const double ad = analytic[pi][static_cast<std::size_t>(idx)];
            const double denom = std::max({std::abs(fd), std::abs(ad), floor});
            const double err = std::abs(fd - ad) / denom;
            report.max_rel_err = std::max(report.max_rel_err, err);
            ++report.probes;
        }
    }
    return report;
}

} // namespace vitkit
