#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <functional>
#include <future>
#include <mutex>
#include <queue>
#include <sstream>
#include <thread>
#include <vector>

#include "vitkit/vit.hpp"

namespace vitkit {

// Fixed-size worker pool for branch-parallel forwards.
class ThreadPool {
public:
    explicit ThreadPool(std::size_t workers) {
        for (std::size_t i = 0; i < workers; ++i)
            threads_.emplace_back([this] { run(); });
    }

    ~ThreadPool() {
        {
            std::lock_guard<std::mutex> lock(mu_);
            done_ = true;
        }
        cv_.notify_all();
        for (auto& t : threads_) t.join();
    }

    std::size_t size() const { return threads_.size(); }

    std::future<void> submit(std::function<void()> task) {
        auto packaged = std::make_shared<std::packaged_task<void()>>(std::move(task));
        auto fut = packaged->get_future();
        {
            std::lock_guard<std::mutex> lock(mu_);
            queue_.push([packaged] { (*packaged)(); });
        }
        cv_.notify_one();
        return fut;
    }

private:
    void run() {
        for (;;) {
            std::function<void()> task;
            {
                std::unique_lock<std::mutex> lock(mu_);
                cv_.wait(lock, [this] { return done_ || !queue_.empty(); });
                if (done_ && queue_.empty()) return;
                task = std::move(queue_.front());
                queue_.pop();
            }
            task();
        }
    }

    std::vector<std::thread> threads_;
    std::queue<std::function<void()>> queue_;
    std::mutex mu_;
    std::condition_variable cv_;
    bool done_ = false;
};

// Worker-pool size: min(P, hardware), optionally capped by VTC_THREADS.
inline std::size_t bench_worker_count(std::int64_t branches) {
    std::size_t n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* cap = std::getenv("VTC_THREADS")) {
        const long v = std::strtol(cap, nullptr, 10);
        if (v >= 1) n = std::min<std::size_t>(n, static_cast<std::size_t>(v));
    }
    return std::min<std::size_t>(n, static_cast<std::size_t>(branches));
}

// Eval forward of a parallel-layout model with the P branches of each layer
// dispatched to the pool. The reduction into the residual stream happens on
// the calling thread in ascending branch order, so the arithmetic matches
// the single-threaded forward exactly.
template <typename S>
Tensor<S> forward_threaded(Model<S>& m, const Tensor<S>& images, ThreadPool& pool) {
    NoGradGuard ng;
    auto x = embed_tokens(m, images, Mode::eval);
    const std::int64_t heads = m.config.heads;
    for (auto& layer : m.layers) {
        const std::size_t P = layer.size();
        std::vector<Tensor<S>> outs(P);
        std::vector<std::future<void>> futs;
        futs.reserve(P);
        for (std::size_t p = 0; p < P; ++p)
            futs.push_back(pool.submit([&, p] {
                NoGradGuard worker_ng;
                outs[p] = mhsa_forward(layer[p], x, heads);
            }));
        for (auto& f : futs) f.get();
        Tensor<S> acc = x;
        for (std::size_t p = 0; p < P; ++p) acc = add(acc, outs[p]);
        x = acc;

        futs.clear();
        for (std::size_t p = 0; p < P; ++p)
            futs.push_back(pool.submit([&, p] {
                NoGradGuard worker_ng;
                outs[p] = ffn_forward(layer[p], x);
            }));
        for (auto& f : futs) f.get();
        acc = x;
        for (std::size_t p = 0; p < P; ++p) acc = add(acc, outs[p]);
        x = acc;
    }
    return head_logits(m, x);
}

struct BenchRow {
    std::string layout; // "NxP"
    std::string exec;   // seq | par
    std::int64_t batch = 0;
    double ips = 0.0;
    double stddev = 0.0;
    int repeats = 0;
};

struct BenchReport {
    std::vector<BenchRow> rows;

    std::string to_csv() const {
        std::ostringstream os;
        os << "layout,exec,batch,ips,stddev,repeats\n";
        for (const auto& r : rows)
            os << r.layout << ',' << r.exec << ',' << r.batch << ',' << r.ips << ','
               << r.stddev << ',' << r.repeats << '\n';
        return os.str();
    }
};

inline double max_rel_diff(std::span<const float> a, std::span<const float> b) {
    double worst = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double diff = std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
        const double denom = std::max({std::abs(static_cast<double>(a[i])),
                                       std::abs(static_cast<double>(b[i])), 1.0});
        worst = std::max(worst, diff / denom);
    }
    return worst;
}

// Throughput benchmark over layouts x exec modes x batch sizes. Timed on
// eval-mode forwards with >=2 warmups and >=5 repeats; seq and par outputs
// of each layout are cross-checked to 1e-5 relative before timing.
struct BenchConfig {
    std::vector<std::pair<std::int64_t, std::int64_t>> layouts; // (N, P)
    std::vector<std::string> exec_modes = {"seq", "par"};
    std::vector<std::int64_t> batch_sizes = {1, 4};
    int repeats = 5;
    int warmups = 2;
    std::uint64_t seed = 0;
};

inline BenchReport bench(ViTConfig base, const BenchConfig& cfg) {
    BenchReport report;
    for (auto [N, P] : cfg.layouts) {
        ViTConfig c = base;
        c.depth = N;
        c.branches = P;
        c.validate();
        Rng rng(cfg.seed);
        auto model = build_model<float>(c, rng);
        ThreadPool pool(bench_worker_count(P));
        const std::string layout = std::to_string(N) + "x" + std::to_string(P);

        for (const auto& exec : cfg.exec_modes) {
            if (exec == "par" && P < 2)
                throw ConfigError("bench: par execution needs P > 1, layout " + layout);
            if (exec != "seq" && exec != "par")
                throw ConfigError("bench: unknown exec mode '" + exec + "'");
            for (auto batch : cfg.batch_sizes) {
                Rng data(cfg.seed + 17);
                auto images =
                    Tensor<float>::randn({batch, 3, c.image_size, c.image_size}, data);
                // numerical consistency gate (same math, same reduction order)
                {
                    NoGradGuard ng;
                    auto ref = forward_parallel(model, images, Mode::eval);
                    auto alt = (exec == "par") ? forward_threaded(model, images, pool)
                                               : forward_parallel(model, images, Mode::eval);
                    const double rel = max_rel_diff(ref.data(), alt.data());
                    if (rel > 1e-5)
                        throw ConsistencyError("bench: seq/par outputs diverge, rel diff " +
                                               std::to_string(rel) + " on layout " + layout);
                }
                auto run_once = [&] {
                    NoGradGuard ng;
                    if (exec == "par")
                        (void)forward_threaded(model, images, pool);
                    else
                        (void)forward_parallel(model, images, Mode::eval);
                };
                for (int w = 0; w < cfg.warmups; ++w) run_once();
                std::vector<double> ips;
                for (int r = 0; r < cfg.repeats; ++r) {
                    const auto start = std::chrono::steady_clock::now();
                    run_once();
                    const double sec =
                        std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
                            .count();
                    ips.push_back(static_cast<double>(batch) / sec);
                }
                double mean = 0;
                for (double v : ips) mean += v;
                mean /= static_cast<double>(ips.size());
                double var = 0;
                for (double v : ips) var += (v - mean) * (v - mean);
                var /= static_cast<double>(ips.size() - 1);
                report.rows.push_back(
                    {layout, exec, batch, mean, std::sqrt(var), cfg.repeats});
            }
        }
    }
    return report;
}

} // namespace vitkit
