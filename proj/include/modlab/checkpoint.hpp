#pragma once

// Checkpoint file: one line of JSON manifest, then the raw little-endian
// arrays in manifest order.
//
//   {"format":"modlab-checkpoint","version":1,"dtype":"f32",
//    "config":{...},"config_hash":"...",
//    "tensors":[{"name":"embed.token","shape":[155,64],"offset":0,"count":9920},...],
//    ...extra keys...}\n
//   <bytes>
//
// offset counts elements from the start of the array section.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"
#include "modlab/binary_io.hpp"
#include "modlab/model.hpp"
#include "modlab/tensor.hpp"

namespace modlab::checkpoint {

inline constexpr int kVersion = 1;

template <class T>
constexpr const char* dtype_name() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? "f32" : "f64";
}

template <class T>
struct NamedTensor {
    std::string name;
    const Tensor<T>* tensor;
};

/// Writes named tensors with a manifest; extra keys are merged into it.
template <class T>
void write(const std::filesystem::path& path, const model::ModelConfig& config,
           const std::vector<NamedTensor<T>>& tensors, const nlohmann::json& extra = nlohmann::json::object()) {
    nlohmann::json manifest = extra;
    manifest["format"] = "modlab-checkpoint";
    manifest["version"] = kVersion;
    manifest["dtype"] = dtype_name<T>();
    manifest["config"] = config;
    manifest["config_hash"] = model::config_hash(config);
    nlohmann::json list = nlohmann::json::array();
    std::size_t offset = 0;
    std::string body;
    for (const auto& t : tensors) {
        list.push_back({{"name", t.name}, {"shape", t.tensor->shape()}, {"offset", offset}, {"count", t.tensor->size()}});
        offset += t.tensor->size();
        for (T v : t.tensor->values()) io::put_le(body, v);
    }
    manifest["tensors"] = list;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("checkpoint: cannot open '" + path.string() + "' for writing");
    out << manifest.dump() << '\n';
    out.write(body.data(), static_cast<std::streamsize>(body.size()));
    if (!out) throw FormatError("checkpoint: write failed for '" + path.string() + "'");
}

template <class T>
void save_model(const std::filesystem::path& path, const model::Model<T>& m,
                const nlohmann::json& extra = nlohmann::json::object()) {
    std::vector<NamedTensor<T>> list;
    for (const auto& p : m.parameters()) list.push_back({p.name, &p.value});
    write(path, m.config(), list, extra);
}

/// Parsed checkpoint, values widened to double.
struct Contents {
    nlohmann::json manifest;
    model::ModelConfig config;
    std::map<std::string, Tensor<double>> tensors;
    std::vector<std::string> order;
};

inline Contents read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("checkpoint: cannot open '" + path.string() + "'");
    Contents c;
    try {
        c.manifest = nlohmann::json::parse(io::read_header_line(in, "checkpoint"));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint: malformed manifest: ") + e.what());
    }
    if (c.manifest.value("format", "") != "modlab-checkpoint")
        throw FormatError("checkpoint: '" + path.string() + "' is not a checkpoint file");
    if (c.manifest.value("version", 0) != kVersion)
        throw FormatError("checkpoint: unsupported version " + c.manifest.value("version", nlohmann::json()).dump());
    const std::string dtype = c.manifest.at("dtype");
    const std::size_t width = dtype == "f32" ? 4 : dtype == "f64" ? 8 : 0;
    if (width == 0) throw FormatError("checkpoint: unknown dtype '" + dtype + "'");
    c.config = c.manifest.at("config").get<model::ModelConfig>();
    if (model::config_hash(c.config) != c.manifest.at("config_hash"))
        throw FormatError("checkpoint: config hash does not match embedded config");
    std::vector<char> raw;
    for (const auto& t : c.manifest.at("tensors")) {
        const auto shape = t.at("shape").get<std::vector<std::size_t>>();
        const auto count = t.at("count").get<std::size_t>();
        if (Tensor<double>::element_count(shape) != count) throw FormatError("checkpoint: shape/count mismatch");
        raw.resize(count * width);
        io::read_exact(in, raw.data(), raw.size(), "checkpoint");
        std::vector<double> values(count);
        for (std::size_t i = 0; i < count; ++i)
            values[i] = width == 4 ? static_cast<double>(io::get_le<float>(raw.data() + 4 * i))
                                   : io::get_le<double>(raw.data() + 8 * i);
        const std::string name = t.at("name");
        c.order.push_back(name);
        c.tensors.emplace(name, Tensor<double>(shape, std::move(values)));
    }
    return c;
}

/// Copies every parameter of m from the checkpoint; names and shapes must match.
template <class T>
void restore(model::Model<T>& m, const Contents& c) {
    for (auto& p : m.parameters()) {
        const auto it = c.tensors.find(p.name);
        if (it == c.tensors.end()) throw FormatError("checkpoint: missing tensor '" + p.name + "'");
        if (it->second.shape() != p.value.shape())
            throw FormatError("checkpoint: shape mismatch for '" + p.name + "'");
        for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] = static_cast<T>(it->second[i]);
    }
}

template <class T>
model::Model<T> load_model(const std::filesystem::path& path) {
    const Contents c = read(path);
    model::Model<T> m(c.config);
    restore(m, c);
    return m;
}

}  // namespace modlab::checkpoint
