#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "respeak/tensor.hpp"

namespace respeak {

// Checkpoint directory layout: config.json (versioned, carries the weights
// hash) + weights.bin (named tensor blob). Loads refuse version, kind or
// hash mismatches.

inline constexpr int kCheckpointVersion = 1;
inline constexpr char kWeightsMagic[4] = {'R', 'S', 'P', 'W'};

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const uint8_t*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hash_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

inline void write_weights_blob(const std::string& path, const std::map<std::string, nn::Tensor>& tensors) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
    out.write(kWeightsMagic, 4);
    const uint32_t version = kCheckpointVersion;
    out.write(reinterpret_cast<const char*>(&version), 4);
    const uint32_t count = static_cast<uint32_t>(tensors.size());
    out.write(reinterpret_cast<const char*>(&count), 4);
    for (const auto& [name, t] : tensors) {
        const uint32_t name_len = static_cast<uint32_t>(name.size());
        out.write(reinterpret_cast<const char*>(&name_len), 4);
        out.write(name.data(), name_len);
        const uint32_t ndim = static_cast<uint32_t>(t.shape.size());
        out.write(reinterpret_cast<const char*>(&ndim), 4);
        for (int64_t d : t.shape) out.write(reinterpret_cast<const char*>(&d), 8);
        out.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * 4));
    }
    if (!out) throw std::runtime_error("checkpoint: write failed: " + path);
}

inline std::map<std::string, nn::Tensor> read_weights_blob(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kWeightsMagic, 4) != 0)
        throw std::runtime_error("checkpoint: bad weights magic in " + path);
    uint32_t version = 0, count = 0;
    in.read(reinterpret_cast<char*>(&version), 4);
    in.read(reinterpret_cast<char*>(&count), 4);
    if (version != kCheckpointVersion)
        throw std::runtime_error("checkpoint: unsupported weights version " + std::to_string(version));
    std::map<std::string, nn::Tensor> out;
    for (uint32_t i = 0; i < count; ++i) {
        uint32_t name_len = 0;
        in.read(reinterpret_cast<char*>(&name_len), 4);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        uint32_t ndim = 0;
        in.read(reinterpret_cast<char*>(&ndim), 4);
        std::vector<int64_t> shape(ndim);
        for (auto& d : shape) in.read(reinterpret_cast<char*>(&d), 8);
        nn::Tensor t(shape);
        in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * 4));
        if (!in) throw std::runtime_error("checkpoint: truncated weights blob " + path);
        out.emplace(std::move(name), std::move(t));
    }
    return out;
}

inline uint64_t file_hash(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
    uint64_t h = 0xcbf29ce484222325ull;
    char buf[1 << 16];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        h = fnv1a64(buf, static_cast<size_t>(in.gcount()), h);
        if (in.eof()) break;
    }
    return h;
}

inline void save_checkpoint(const std::string& dir, const std::string& kind, const nlohmann::json& config,
                            const std::map<std::string, nn::Tensor>& tensors) {
    std::filesystem::create_directories(dir);
    const std::string wpath = dir + "/weights.bin";
    write_weights_blob(wpath, tensors);
    nlohmann::json meta{{"format_version", kCheckpointVersion},
                        {"kind", kind},
                        {"config", config},
                        {"weights_hash", hash_hex(file_hash(wpath))}};
    std::ofstream out(dir + "/config.json");
    if (!out) throw std::runtime_error("checkpoint: cannot write " + dir + "/config.json");
    out << meta.dump(2) << "\n";
}

struct Checkpoint {
    nlohmann::json config;
    std::map<std::string, nn::Tensor> tensors;
    std::string weights_hash;
};

inline Checkpoint load_checkpoint(const std::string& dir, const std::string& expected_kind) {
    std::ifstream in(dir + "/config.json");
    if (!in) throw std::runtime_error("checkpoint: cannot open " + dir + "/config.json");
    nlohmann::json meta;
    try {
        in >> meta;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("checkpoint: malformed config.json in " + dir + ": " + e.what());
    }
    if (meta.at("format_version").get<int>() != kCheckpointVersion)
        throw std::runtime_error("checkpoint: version mismatch in " + dir);
    if (meta.at("kind").get<std::string>() != expected_kind)
        throw std::runtime_error("checkpoint: expected kind '" + expected_kind + "' but found '" +
                                 meta.at("kind").get<std::string>() + "' in " + dir);
    const std::string wpath = dir + "/weights.bin";
    const std::string actual = hash_hex(file_hash(wpath));
    const std::string expected = meta.at("weights_hash").get<std::string>();
    if (actual != expected)
        throw std::runtime_error("checkpoint: weights hash mismatch in " + dir + " (expected " + expected +
                                 ", found " + actual + ")");
    Checkpoint ck;
    ck.config = meta.at("config");
    ck.tensors = read_weights_blob(wpath);
    ck.weights_hash = actual;
    return ck;
}

} // namespace respeak
