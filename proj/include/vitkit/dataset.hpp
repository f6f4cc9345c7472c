#pragma once

#include <cstdint>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "vitkit/tensor.hpp"

namespace vitkit {

// In-memory dataset of channel-normalized images. Pixels are stored as f32
// regardless of the model's compute dtype; batches convert on extraction.
struct Dataset {
    std::string source;
    std::int64_t image_size = 32;
    std::int64_t channels = 3;
    std::int64_t num_classes = 10;
    std::vector<float> images; // n * channels * size * size, row-major
    std::vector<int> labels;

    std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
    std::int64_t image_elems() const { return channels * image_size * image_size; }
};

namespace detail {

// Normalize to zero mean / unit std per channel, statistics taken over the
// dataset itself.
inline void channel_normalize(Dataset& ds) {
    const std::int64_t hw = ds.image_size * ds.image_size;
    for (std::int64_t ch = 0; ch < ds.channels; ++ch) {
        double mean = 0;
        std::int64_t count = 0;
        for (std::int64_t i = 0; i < ds.size(); ++i)
            for (std::int64_t p = 0; p < hw; ++p, ++count)
                mean += ds.images[static_cast<std::size_t>((i * ds.channels + ch) * hw + p)];
        mean /= static_cast<double>(count);
        double var = 0;
        for (std::int64_t i = 0; i < ds.size(); ++i)
            for (std::int64_t p = 0; p < hw; ++p) {
                const double d =
                    ds.images[static_cast<std::size_t>((i * ds.channels + ch) * hw + p)] - mean;
                var += d * d;
            }
        var /= static_cast<double>(count);
        const double istd = 1.0 / std::sqrt(var + 1e-12);
        for (std::int64_t i = 0; i < ds.size(); ++i)
            for (std::int64_t p = 0; p < hw; ++p) {
                auto& v = ds.images[static_cast<std::size_t>((i * ds.channels + ch) * hw + p)];
                v = static_cast<float>((v - mean) * istd);
            }
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// CIFAR-10 binary batch format: records of 3073 bytes, one label byte
// (0-9) followed by 3072 pixel bytes in CHW planes (R, G, B), 32x32
// row-major. Pixels are scaled to [0,1] and then channel-normalized;
// record order is preserved.
// ---------------------------------------------------------------------------
inline Dataset load_cifar10(const std::string& path) {
    constexpr std::int64_t kRecord = 3073;
    constexpr std::int64_t kPixels = 3072;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cifar10: cannot open '" + path + "'");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    const auto size = static_cast<std::int64_t>(bytes.size());
    if (size == 0 || size % kRecord != 0)
        throw FormatError("cifar10: '" + path + "' size " + std::to_string(size) +
                          " is not a multiple of 3073; truncated record at byte offset " +
                          std::to_string((size / kRecord) * kRecord));
    const std::int64_t n = size / kRecord;
    Dataset ds;
    ds.source = "cifar10";
    ds.image_size = 32;
    ds.num_classes = 10;
    ds.images.resize(static_cast<std::size_t>(n * kPixels));
    ds.labels.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        const unsigned char label = bytes[static_cast<std::size_t>(i * kRecord)];
        if (label > 9)
            throw FormatError("cifar10: label byte " + std::to_string(int{label}) +
                              " out of range at byte offset " + std::to_string(i * kRecord));
        ds.labels[static_cast<std::size_t>(i)] = label;
        for (std::int64_t j = 0; j < kPixels; ++j)
            ds.images[static_cast<std::size_t>(i * kPixels + j)] =
                static_cast<float>(bytes[static_cast<std::size_t>(i * kRecord + 1 + j)]) / 255.0f;
    }
    detail::channel_normalize(ds);
    return ds;
}

// ---------------------------------------------------------------------------
// Deterministic synthetic classification set: class c is a fixed
// low-frequency sinusoid pattern (frequencies indexed by c, evaluated on
// normalized coordinates so the same classes exist at any resolution) plus
// Gaussian noise. Labels are balanced round-robin.
// ---------------------------------------------------------------------------
inline Dataset synth_dataset(std::uint64_t seed, std::int64_t n, std::int64_t image_size,
                             std::int64_t num_classes) {
    if (n <= 0) throw ConfigError("synth_dataset: n must be positive");
    Dataset ds;
    ds.source = "synthetic";
    ds.image_size = image_size;
    ds.num_classes = num_classes;
    ds.images.resize(static_cast<std::size_t>(n * 3 * image_size * image_size));
    ds.labels.resize(static_cast<std::size_t>(n));
    Rng rng(seed);
    const double tau = 2.0 * std::numbers::pi;
    for (std::int64_t i = 0; i < n; ++i) {
        const int c = static_cast<int>(i % num_classes);
        ds.labels[static_cast<std::size_t>(i)] = c;
        const double fx = 1.0 + static_cast<double>(c % 3);
        const double fy = 1.0 + static_cast<double>((c / 3) % 4);
        for (std::int64_t ch = 0; ch < 3; ++ch) {
            const double phase_x = 0.7 * c + 2.1 * static_cast<double>(ch);
            const double phase_y = 1.3 * c + 0.9 * static_cast<double>(ch);
            for (std::int64_t y = 0; y < image_size; ++y)
                for (std::int64_t x = 0; x < image_size; ++x) {
                    const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(image_size);
                    const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(image_size);
                    const double pattern =
                        std::sin(tau * fx * u + phase_x) * std::cos(tau * fy * v + phase_y);
                    ds.images[static_cast<std::size_t>(
                        ((i * 3 + ch) * image_size + y) * image_size + x)] =
                        static_cast<float>(pattern + 0.5 * rng.normal());
                }
        }
    }
    detail::channel_normalize(ds);
    return ds;
}

// Batch extraction in the model's scalar type.
template <typename S>
Tensor<S> batch_images(const Dataset& ds, const std::vector<std::int64_t>& idx) {
    const std::int64_t elems = ds.image_elems();
    Tensor<S> out({static_cast<std::int64_t>(idx.size()), ds.channels, ds.image_size, ds.image_size});
    auto ov = out.data();
    for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::int64_t j = 0; j < elems; ++j)
            ov[static_cast<std::int64_t>(i) * elems + j] =
                static_cast<S>(ds.images[static_cast<std::size_t>(idx[i] * elems + j)]);
    return out;
}

inline std::vector<int> batch_labels(const Dataset& ds, const std::vector<std::int64_t>& idx) {
    std::vector<int> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(ds.labels[static_cast<std::size_t>(i)]);
    return out;
}

} // namespace vitkit
