// Checkpoints are flat maps from parameter path to tensor. Two on-disk
// formats share one loader: a binary format that round-trips doubles
// bit-exactly, and a JSON format for inspection by hand.
//
// Binary layout, little-endian:
//   "DCKP" | u32 version | u64 entry count | entries...
//   entry: u32 path length | path bytes | u32 rank | u64 dims... | f64 values
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "deconf/neural.hpp"
#include "deconf/tensor.hpp"

namespace deconf {

enum class CheckpointFormat { binary, json };

using CheckpointMap = std::map<std::string, Tensor>;

namespace detail {

template <class T>
void write_raw(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_raw(std::istream& is, const std::string& path) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("checkpoint: truncated file " + path);
    return v;
}

inline constexpr char kMagic[4] = {'D', 'C', 'K', 'P'};
inline constexpr std::uint32_t kVersion = 1;

}  // namespace detail

inline void save_checkpoint(const std::string& path, const CheckpointMap& entries,
                            CheckpointFormat format) {
    if (format == CheckpointFormat::binary) {
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
        os.write(detail::kMagic, 4);
        detail::write_raw(os, detail::kVersion);
        detail::write_raw(os, static_cast<std::uint64_t>(entries.size()));
        for (const auto& [name, t] : entries) {
            detail::write_raw(os, static_cast<std::uint32_t>(name.size()));
            os.write(name.data(), static_cast<std::streamsize>(name.size()));
            detail::write_raw(os, static_cast<std::uint32_t>(t.shape.size()));
            for (std::size_t d : t.shape) detail::write_raw(os, static_cast<std::uint64_t>(d));
            os.write(reinterpret_cast<const char*>(t.data.data()),
                     static_cast<std::streamsize>(t.data.size() * sizeof(double)));
        }
        if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
    } else {
        nlohmann::json doc;
        doc["format"] = "deconf-checkpoint";
        doc["version"] = detail::kVersion;
        nlohmann::json params = nlohmann::json::object();
        for (const auto& [name, t] : entries) {
            nlohmann::json entry;
            entry["shape"] = t.shape;
            entry["data"] = t.data;
            params[name] = std::move(entry);
        }
        doc["params"] = std::move(params);
        std::ofstream os(path, std::ios::trunc);
        if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
        os << doc.dump(2) << "\n";
        if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
    }
}

// Detects the format from the file's first byte: binary starts with the
// magic, JSON with '{'.
inline CheckpointMap load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
    char head[4] = {0, 0, 0, 0};
    is.read(head, 4);
    if (is.gcount() == 4 && std::memcmp(head, detail::kMagic, 4) == 0) {
        const auto version = detail::read_raw<std::uint32_t>(is, path);
        if (version != detail::kVersion)
            throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version) +
                                     " in " + path);
        const auto count = detail::read_raw<std::uint64_t>(is, path);
        CheckpointMap out;
        for (std::uint64_t i = 0; i < count; ++i) {
            const auto name_len = detail::read_raw<std::uint32_t>(is, path);
            std::string name(name_len, '\0');
            is.read(name.data(), name_len);
            if (!is) throw std::runtime_error("checkpoint: truncated file " + path);
            const auto rank = detail::read_raw<std::uint32_t>(is, path);
            Shape shape(rank);
            for (std::uint32_t d = 0; d < rank; ++d)
                shape[d] = static_cast<std::size_t>(detail::read_raw<std::uint64_t>(is, path));
            Tensor t = Tensor::zeros(shape);
            is.read(reinterpret_cast<char*>(t.data.data()),
                    static_cast<std::streamsize>(t.data.size() * sizeof(double)));
            if (!is) throw std::runtime_error("checkpoint: truncated file " + path);
            out.emplace(std::move(name), std::move(t));
        }
        return out;
    }

    is.clear();
    is.seekg(0);
    nlohmann::json doc;
    try {
        is >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("checkpoint: " + path + " is neither binary nor JSON (" +
                                 e.what() + ")");
    }
    if (!doc.contains("format") || doc["format"] != "deconf-checkpoint")
        throw std::runtime_error("checkpoint: " + path + " is not a checkpoint file");
    CheckpointMap out;
    for (const auto& [name, entry] : doc.at("params").items()) {
        Shape shape = entry.at("shape").get<Shape>();
        std::vector<double> data = entry.at("data").get<std::vector<double>>();
        if (data.size() != numel(shape))
            throw std::runtime_error("checkpoint: entry " + name + " has " +
                                     std::to_string(data.size()) + " values for shape " +
                                     shape_str(shape));
        out.emplace(name, Tensor(shape, std::move(data)));
    }
    return out;
}

inline CheckpointMap snapshot_params(const std::vector<ParamRef>& params) {
    CheckpointMap out;
    for (const ParamRef& p : params) out.emplace(p.name, *p.tensor);
    return out;
}

// Strict restore: every referenced parameter must be present with a matching
// shape. Extra entries in the map (optimizer state, counters) are ignored.
inline void restore_params(const std::vector<ParamRef>& params, const CheckpointMap& entries) {
    for (const ParamRef& p : params) {
        auto it = entries.find(p.name);
        if (it == entries.end())
            throw std::runtime_error("checkpoint: missing parameter " + p.name);
        if (it->second.shape != p.tensor->shape)
            throw std::runtime_error("checkpoint: shape mismatch for " + p.name + ": file has " +
                                     shape_str(it->second.shape) + ", model has " +
                                     shape_str(p.tensor->shape));
        p.tensor->data = it->second.data;
    }
}

}  // namespace deconf
