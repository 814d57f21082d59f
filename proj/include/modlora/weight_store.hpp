// SPDX-License-Identifier: Apache-2.0
//
// safetensors reader/writer.
//
// Layout: u64 little-endian header length N, N bytes of compact JSON, then the
// tensor bytes. Keys are written in lexicographic order and tensors are packed
// in that same order, so identical inputs produce identical files.
#pragma once

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <system_error>
#include <vector>

#include <nlohmann/json.hpp>

#include "modlora/errors.hpp"
#include "modlora/tensor.hpp"

namespace modlora {

using TensorMap = std::map<std::string, Matrix>;

inline constexpr const char* kMetadataKey = "__metadata__";

enum class Dtype { F32, F64 };

inline std::size_t dtype_size(Dtype d) { return d == Dtype::F32 ? 4 : 8; }

struct TensorRecord {
    std::string name;
    Dtype dtype = Dtype::F64;
    std::vector<std::size_t> shape;
    std::uint64_t begin = 0;
    std::uint64_t end = 0;
};

enum class CheckpointKind { BaseWeights, Adapter };

struct CheckpointManifest {
    CheckpointKind kind = CheckpointKind::BaseWeights;
    std::optional<std::size_t> rank;
    std::optional<double> scale;
    std::map<std::string, std::string> provenance;

    void validate() const {
        if (kind == CheckpointKind::Adapter && (!rank || !scale)) {
            throw ValidationError("adapter manifest requires rank and scale");
        }
        if (kind == CheckpointKind::BaseWeights && (rank || scale)) {
            throw ValidationError("base-weights manifest must not carry rank or scale");
        }
        if (rank && *rank == 0) throw ValidationError("adapter rank must be positive");
        for (const auto& [k, v] : provenance) {
            if (k == "kind" || k == "rank" || k == "scale") {
                throw ValidationError("provenance key '" + k + "' is reserved");
            }
        }
    }

    friend bool operator==(const CheckpointManifest&, const CheckpointManifest&) = default;
};

struct Checkpoint {
    TensorMap tensors;
    CheckpointManifest manifest;
};

/// Shortest decimal that parses back to exactly `v`.
inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline std::optional<double> parse_double(const std::string& s) {
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) return std::nullopt;
    return v;
}

namespace detail {

inline void put_u64_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

inline nlohmann::json manifest_to_json(const CheckpointManifest& m) {
    nlohmann::json meta = nlohmann::json::object();
    for (const auto& [k, v] : m.provenance) meta[k] = v;
    meta["kind"] = m.kind == CheckpointKind::Adapter ? "adapter" : "base_weights";
    if (m.rank) meta["rank"] = std::to_string(*m.rank);
    if (m.scale) meta["scale"] = format_double(*m.scale);
    return meta;
}

inline CheckpointManifest manifest_from_json(const nlohmann::json& meta) {
    using K = FormatError::Kind;
    if (!meta.is_object()) throw FormatError(K::BadMetadata, "__metadata__ must be an object");
    CheckpointManifest m;
    bool have_kind = false;
    for (const auto& [k, v] : meta.items()) {
        if (!v.is_string()) throw FormatError(K::BadMetadata, "metadata value for '" + k + "' is not a string");
        const auto s = v.get<std::string>();
        if (k == "kind") {
            if (s == "adapter") m.kind = CheckpointKind::Adapter;
            else if (s == "base_weights") m.kind = CheckpointKind::BaseWeights;
            else throw FormatError(K::BadMetadata, "unknown checkpoint kind '" + s + "'");
            have_kind = true;
        } else if (k == "rank") {
            std::size_t r = 0;
            auto res = std::from_chars(s.data(), s.data() + s.size(), r);
            if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
                throw FormatError(K::BadMetadata, "rank '" + s + "' is not an integer");
            }
            m.rank = r;
        } else if (k == "scale") {
            auto d = parse_double(s);
            if (!d) throw FormatError(K::BadMetadata, "scale '" + s + "' is not a number");
            m.scale = *d;
        } else {
            m.provenance[k] = s;
        }
    }
    if (!have_kind) throw FormatError(K::BadMetadata, "metadata lacks 'kind'");
    try {
        m.validate();
    } catch (const ValidationError& e) {
        throw FormatError(K::BadMetadata, e.what());
    }
    return m;
}

inline Dtype parse_dtype(const std::string& s) {
    if (s == "F64") return Dtype::F64;
    if (s == "F32") return Dtype::F32;
    throw FormatError(FormatError::Kind::UnsupportedDtype, "unsupported dtype '" + s + "' (only F32/F64)");
}

}  // namespace detail

/// Serializes to the exact byte image written by `write_checkpoint`.
inline std::string encode_checkpoint(const TensorMap& tensors, const CheckpointManifest& manifest) {
    manifest.validate();
    nlohmann::json header = nlohmann::json::object();
    std::uint64_t offset = 0;
    for (const auto& [name, m] : tensors) {
        if (name.empty()) throw ValidationError("tensor names must be non-empty");
        if (name == kMetadataKey) throw ValidationError("tensor name collides with reserved key __metadata__");
        if (m.empty()) throw ValidationError("tensor '" + name + "' is empty");
        const std::uint64_t bytes = m.size() * 8;
        header[name] = {{"dtype", "F64"},
                        {"shape", {m.rows(), m.cols()}},
                        {"data_offsets", {offset, offset + bytes}}};
        offset += bytes;
    }
    header[kMetadataKey] = detail::manifest_to_json(manifest);
    const std::string json = header.dump();

    std::string out;
    out.reserve(8 + json.size() + offset);
    detail::put_u64_le(out, json.size());
    out += json;
    for (const auto& [name, m] : tensors) {
        for (double v : m.values()) detail::put_u64_le(out, std::bit_cast<std::uint64_t>(v));
    }
    return out;
}

/// Parses a full file image. Rejects anything that does not match the layout.
inline Checkpoint decode_checkpoint(const std::string& bytes) {
    using K = FormatError::Kind;
    if (bytes.size() < 8) throw FormatError(K::Truncated, "file shorter than the 8-byte header length");
    const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::uint64_t n = detail::get_u64_le(raw);
    if (n > bytes.size() - 8) {
        throw FormatError(K::Truncated, "header length " + std::to_string(n) + " exceeds file size " +
                                            std::to_string(bytes.size()));
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(n));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(K::HeaderJson, std::string("header JSON: ") + e.what());
    }
    if (!header.is_object()) throw FormatError(K::HeaderJson, "header is not a JSON object");

    const std::uint64_t data_size = bytes.size() - 8 - n;
    const unsigned char* data = raw + 8 + n;

    Checkpoint ck;
    bool have_meta = false;
    std::vector<TensorRecord> records;
    for (const auto& [name, entry] : header.items()) {
        if (name == kMetadataKey) {
            ck.manifest = detail::manifest_from_json(entry);
            have_meta = true;
            continue;
        }
        if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") ||
            !entry.contains("data_offsets") || entry.size() != 3) {
            throw FormatError(K::BadEntry, "tensor '" + name + "' must have exactly dtype, shape, data_offsets");
        }
        TensorRecord rec;
        rec.name = name;
        if (!entry["dtype"].is_string()) throw FormatError(K::BadEntry, "dtype of '" + name + "' is not a string");
        rec.dtype = detail::parse_dtype(entry["dtype"].get<std::string>());
        const auto& shape = entry["shape"];
        if (!shape.is_array() || shape.size() > 2) {
            throw FormatError(K::BadEntry, "shape of '" + name + "' must be an array of rank <= 2");
        }
        for (const auto& d : shape) {
            if (!d.is_number_unsigned()) throw FormatError(K::BadEntry, "shape of '" + name + "' has a bad extent");
            rec.shape.push_back(d.get<std::size_t>());
        }
        const auto& offs = entry["data_offsets"];
        if (!offs.is_array() || offs.size() != 2 || !offs[0].is_number_unsigned() || !offs[1].is_number_unsigned()) {
            throw FormatError(K::BadEntry, "data_offsets of '" + name + "' must be two unsigned integers");
        }
        rec.begin = offs[0].get<std::uint64_t>();
        rec.end = offs[1].get<std::uint64_t>();
        std::uint64_t count = 1;
        for (auto d : rec.shape) count *= d;
        if (rec.end < rec.begin || rec.end - rec.begin != count * dtype_size(rec.dtype)) {
            throw FormatError(K::BadEntry, "data_offsets of '" + name + "' disagree with shape and dtype");
        }
        if (count == 0) throw FormatError(K::BadEntry, "tensor '" + name + "' has no elements");
        records.push_back(std::move(rec));
    }
    if (!have_meta) throw FormatError(K::BadMetadata, "header lacks __metadata__");

    std::sort(records.begin(), records.end(),
              [](const TensorRecord& a, const TensorRecord& b) { return a.begin < b.begin; });
    std::uint64_t cursor = 0;
    for (const auto& rec : records) {
        if (rec.begin < cursor) throw FormatError(K::OverlappingOffsets, "tensor '" + rec.name + "' overlaps its predecessor");
        if (rec.begin > cursor) throw FormatError(K::BadEntry, "gap before tensor '" + rec.name + "'");
        if (rec.end > data_size) throw FormatError(K::Truncated, "data section ends before tensor '" + rec.name + "'");
        cursor = rec.end;
    }
    if (cursor != data_size) throw FormatError(K::BadEntry, "trailing bytes after the last tensor");

    for (const auto& rec : records) {
        std::size_t rows = 1, cols = 1;
        if (rec.shape.size() == 1) cols = rec.shape[0];
        if (rec.shape.size() == 2) rows = rec.shape[0], cols = rec.shape[1];
        Matrix m(rows, cols);
        auto v = m.values();
        const unsigned char* p = data + rec.begin;
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (rec.dtype == Dtype::F64) {
                v[i] = std::bit_cast<double>(detail::get_u64_le(p + 8 * i));
            } else {
                std::uint32_t u = 0;
                for (int b = 3; b >= 0; --b) u = (u << 8) | p[4 * i + static_cast<std::size_t>(b)];
                v[i] = static_cast<double>(std::bit_cast<float>(u));
            }
        }
        ck.tensors.emplace(rec.name, std::move(m));
    }
    return ck;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failed on '" + path.string() + "'");
    return bytes;
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    std::error_code ec;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) throw IoError("write failed on '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw IoError("cannot move checkpoint into place at '" + path.string() + "'");
    }
}

inline void write_checkpoint(const TensorMap& tensors, const CheckpointManifest& manifest,
                             const std::filesystem::path& path) {
    write_file_atomic(path, encode_checkpoint(tensors, manifest));
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(read_file_bytes(path));
}

}  // namespace modlora
