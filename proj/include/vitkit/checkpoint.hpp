#pragma once

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "vitkit/vit.hpp"

namespace vitkit {

// Checkpoint format "VTC1":
//
//   bytes 0-3   magic "VTC1"
//   bytes 4-11  u64 LE header length H
//   H bytes     header JSON: {schema_version, config, dtype, manifest}
//               manifest = ordered [{name, shape, dtype, offset}], offsets
//               relative to the payload start, ascending, 64-byte aligned
//   padding     zeros up to the next 64-byte file offset
//   payload     raw little-endian values (params first, then buffers)
//
// Values round-trip bitwise. Little-endian hosts only.
static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian");

inline constexpr char kCheckpointMagic[4] = {'V', 'T', 'C', '1'};

inline nlohmann::ordered_json config_to_json(const ViTConfig& c) {
    nlohmann::ordered_json j;
    j["width"] = c.width;
    j["depth"] = c.depth;
    j["branches"] = c.branches;
    j["heads"] = c.heads;
    j["patch_size"] = c.patch_size;
    j["image_size"] = c.image_size;
    j["num_classes"] = c.num_classes;
    j["sd_rate"] = c.sd_rate;
    j["layerscale"] = c.layerscale;
    j["layerscale_init"] = c.layerscale_init;
    j["stem_kind"] = to_string(c.stem_kind);
    j["stem_norm"] = to_string(c.stem_norm);
    j["dtype"] = c.dtype;
    return j;
}

inline StemKind stem_kind_from_string(const std::string& s) {
    if (s == "linear") return StemKind::linear;
    if (s == "conv") return StemKind::conv;
    if (s == "hmlp") return StemKind::hmlp;
    throw ConfigError("unknown stem kind '" + s + "'");
}

inline NormKind norm_kind_from_string(const std::string& s) {
    if (s == "none") return NormKind::none;
    if (s == "bn") return NormKind::bn;
    if (s == "ln") return NormKind::ln;
    throw ConfigError("unknown norm kind '" + s + "'");
}

inline ViTConfig config_from_json(const nlohmann::json& j) {
    ViTConfig c;
    c.width = j.at("width").get<std::int64_t>();
    c.depth = j.at("depth").get<std::int64_t>();
    c.branches = j.at("branches").get<std::int64_t>();
    c.heads = j.at("heads").get<std::int64_t>();
    c.patch_size = j.at("patch_size").get<std::int64_t>();
    c.image_size = j.at("image_size").get<std::int64_t>();
    c.num_classes = j.at("num_classes").get<std::int64_t>();
    c.sd_rate = j.at("sd_rate").get<double>();
    c.layerscale = j.at("layerscale").get<bool>();
    c.layerscale_init = j.at("layerscale_init").get<double>();
    c.stem_kind = stem_kind_from_string(j.at("stem_kind").get<std::string>());
    c.stem_norm = norm_kind_from_string(j.at("stem_norm").get<std::string>());
    c.dtype = j.at("dtype").get<std::string>();
    return c;
}

namespace detail {

template <typename S>
const char* dtype_name() {
    return sizeof(S) == 4 ? "f32" : "f64";
}

inline std::int64_t align64(std::int64_t v) { return (v + 63) & ~std::int64_t{63}; }

// The full persisted state: parameters then buffers, inventory order.
template <typename S>
struct StateEntry {
    std::string name;
    Shape shape;
    S* data;
    std::int64_t numel;
};

template <typename S>
std::vector<StateEntry<S>> state_entries(Model<S>& m) {
    std::vector<StateEntry<S>> entries;
    for_each_param(m, [&](const std::string& name, Tensor<S>& t) {
        entries.push_back({name, t.shape(), t.data().data(), t.numel()});
    });
    for_each_buffer(m, [&](const std::string& name, std::vector<S>& v) {
        entries.push_back({name, Shape{static_cast<std::int64_t>(v.size())}, v.data(),
                           static_cast<std::int64_t>(v.size())});
    });
    return entries;
}

} // namespace detail

template <typename S>
void save_checkpoint(Model<S>& model, const std::string& path) {
    auto entries = detail::state_entries(model);
    nlohmann::ordered_json manifest = nlohmann::ordered_json::array();
    std::int64_t offset = 0;
    for (const auto& e : entries) {
        offset = detail::align64(offset);
        manifest.push_back({{"name", e.name},
                            {"shape", e.shape},
                            {"dtype", detail::dtype_name<S>()},
                            {"offset", offset}});
        offset += e.numel * static_cast<std::int64_t>(sizeof(S));
    }
    nlohmann::ordered_json header;
    header["schema_version"] = "1";
    header["config"] = config_to_json(model.config);
    header["dtype"] = detail::dtype_name<S>();
    header["manifest"] = manifest;
    const std::string header_str = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("checkpoint: cannot open '" + path + "' for writing");
    out.write(kCheckpointMagic, 4);
    const std::uint64_t hlen = header_str.size();
    out.write(reinterpret_cast<const char*>(&hlen), 8);
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    const std::int64_t payload_start = detail::align64(12 + static_cast<std::int64_t>(hlen));
    for (std::int64_t at = 12 + static_cast<std::int64_t>(hlen); at < payload_start; ++at)
        out.put('\0');
    std::int64_t written = 0;
    for (const auto& e : entries) {
        const std::int64_t aligned = detail::align64(written);
        for (std::int64_t at = written; at < aligned; ++at) out.put('\0');
        out.write(reinterpret_cast<const char*>(e.data),
                  static_cast<std::streamsize>(e.numel * static_cast<std::int64_t>(sizeof(S))));
        written = aligned + e.numel * static_cast<std::int64_t>(sizeof(S));
    }
    if (!out) throw FormatError("checkpoint: write to '" + path + "' failed");
}

template <typename S>
Model<S> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("checkpoint: cannot open '" + path + "'");
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
        throw FormatError("checkpoint: bad magic in '" + path + "' (expected VTC1)");
    std::uint64_t hlen = 0;
    std::memcpy(&hlen, bytes.data() + 4, 8);
    if (12 + hlen > bytes.size())
        throw FormatError("checkpoint: header extends past end of file");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(hlen));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint: malformed header JSON: ") + e.what());
    }
    const ViTConfig config = config_from_json(header.at("config"));
    const std::string dtype = header.at("dtype").get<std::string>();
    if (dtype != detail::dtype_name<S>())
        throw FormatError("checkpoint: stored dtype " + dtype + " does not match requested " +
                          detail::dtype_name<S>());

    Rng rng(0);
    Model<S> model = build_model<S>(config, rng);
    auto entries = detail::state_entries(model);
    const auto& manifest = header.at("manifest");
    if (manifest.size() != entries.size())
        throw FormatError("checkpoint: manifest holds " + std::to_string(manifest.size()) +
                          " tensors, model inventory needs " + std::to_string(entries.size()));

    const std::int64_t payload_start = detail::align64(12 + static_cast<std::int64_t>(hlen));
    const std::int64_t payload_size = static_cast<std::int64_t>(bytes.size()) - payload_start;
    std::int64_t prev_end = 0;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& entry = manifest[i];
        const std::string name = entry.at("name").get<std::string>();
        if (name != entries[i].name)
            throw FormatError("checkpoint: tensor '" + name + "' out of order, expected '" +
                              entries[i].name + "'");
        const Shape shape = entry.at("shape").get<Shape>();
        if (shape != entries[i].shape)
            throw FormatError("checkpoint: tensor '" + name + "' has shape " + shape_str(shape) +
                              ", config implies " + shape_str(entries[i].shape));
        const std::int64_t offset = entry.at("offset").get<std::int64_t>();
        const std::int64_t nbytes = entries[i].numel * static_cast<std::int64_t>(sizeof(S));
        if (offset < prev_end)
            throw FormatError("checkpoint: tensor '" + name + "' overlaps the previous tensor");
        if (offset + nbytes > payload_size)
            throw FormatError("checkpoint: tensor '" + name + "' extends past end of payload");
        std::memcpy(entries[i].data, bytes.data() + payload_start + offset,
                    static_cast<std::size_t>(nbytes));
        prev_end = offset + nbytes;
    }
    return model;
}

} // namespace vitkit
