#pragma once

// Dataset file: one JSON header line, then `count` fixed-width rows of
//   N x uint32 entries, uint64 y_q, uint64 quotient   (little-endian)

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "modlab/binary_io.hpp"
#include "modlab/error.hpp"
#include "modlab/sampling.hpp"

namespace modlab::io {

inline constexpr int kDatasetVersion = 1;

inline nlohmann::json dataset_header(const sampling::DatasetMeta& m) {
    return {{"format", "modlab-dataset"},
            {"version", kDatasetVersion},
            {"n", m.n},
            {"q", m.q},
            {"distribution", std::string(sampling::to_string(m.distribution))},
            {"seed", m.seed},
            {"count", m.count},
            {"strict_nonzero_fill", m.strict_nonzero_fill},
            {"manifest_hash", m.manifest_hash},
            {"row_layout", "u32[n] entries, u64 y_q, u64 quotient"}};
}

inline void write_dataset(const std::filesystem::path& path, const sampling::Dataset& ds) {
    if (static_cast<std::int64_t>(ds.size()) != ds.meta.count)
        throw InvalidArgument("write_dataset: meta.count does not match the number of examples");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("write_dataset: cannot open '" + path.string() + "' for writing");
    out << dataset_header(ds.meta).dump() << '\n';
    std::string row;
    for (const auto& e : ds.examples) {
        row.clear();
        for (auto v : e.x.entries) put_le(row, static_cast<std::uint32_t>(v));
        put_le(row, static_cast<std::uint64_t>(e.y_q));
        put_le(row, static_cast<std::uint64_t>(e.quotient));
        out.write(row.data(), static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw FormatError("write_dataset: write failed for '" + path.string() + "'");
}

inline sampling::Dataset read_dataset(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("read_dataset: cannot open '" + path.string() + "'");
    nlohmann::json h;
    try {
        h = nlohmann::json::parse(read_header_line(in, "read_dataset"));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("read_dataset: malformed header: ") + e.what());
    }
    if (h.value("format", "") != "modlab-dataset")
        throw FormatError("read_dataset: '" + path.string() + "' is not a dataset file");
    if (h.value("version", 0) != kDatasetVersion)
        throw FormatError("read_dataset: unsupported schema version " + h.value("version", nlohmann::json()).dump());
    sampling::Dataset ds;
    try {
        ds.meta.n = h.at("n");
        ds.meta.q = h.at("q");
        ds.meta.distribution = sampling::parse_distribution(h.at("distribution").get<std::string>());
        ds.meta.seed = h.at("seed");
        ds.meta.count = h.at("count");
        ds.meta.strict_nonzero_fill = h.value("strict_nonzero_fill", false);
        ds.meta.manifest_hash = h.value("manifest_hash", "");
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("read_dataset: bad header field: ") + e.what());
    }
    if (ds.meta.n < 1 || ds.meta.q < 2 || ds.meta.count < 0) throw FormatError("read_dataset: invalid header values");

    const auto n = static_cast<std::size_t>(ds.meta.n);
    const std::size_t width = 4 * n + 16;
    std::vector<char> row(width);
    ds.examples.reserve(static_cast<std::size_t>(ds.meta.count));
    for (std::int64_t i = 0; i < ds.meta.count; ++i) {
        read_exact(in, row.data(), width, "read_dataset: row " + std::to_string(i));
        sampling::LabeledExample e;
        e.x.entries.resize(n);
        std::int64_t sum = 0;
        for (std::size_t j = 0; j < n; ++j) {
            const auto v = static_cast<std::int64_t>(get_le<std::uint32_t>(row.data() + 4 * j));
            if (v >= ds.meta.q)
                throw FormatError("read_dataset: row " + std::to_string(i) + " entry " + std::to_string(j) + " = " +
                                  std::to_string(v) + " is not below q = " + std::to_string(ds.meta.q));
            e.x.entries[j] = v;
            sum += v;
        }
        const auto y = get_le<std::uint64_t>(row.data() + 4 * n);
        const auto c = get_le<std::uint64_t>(row.data() + 4 * n + 8);
        if (y >= static_cast<std::uint64_t>(ds.meta.q))
            throw FormatError("read_dataset: row " + std::to_string(i) + " label y_q out of range");
        e.y_q = static_cast<std::int64_t>(y);
        e.quotient = static_cast<std::int64_t>(c);
        if (e.total(ds.meta.q) != sum)
            throw FormatError("read_dataset: row " + std::to_string(i) + " labels do not reconstruct the sum");
        ds.examples.push_back(std::move(e));
    }
    if (in.peek() != std::char_traits<char>::eof()) throw FormatError("read_dataset: trailing bytes after last row");
    return ds;
}

}  // namespace modlab::io
