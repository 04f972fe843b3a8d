#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "usketch/error.hpp"
#include "usketch/tensor.hpp"

namespace usketch {

// Versioned weight container: an 8-byte magic, a format version, a JSON
// metadata document (architecture, tap registry, codec spec, provenance),
// and named row-major little-endian float32 blocks.
struct Checkpoint {
    static constexpr char magic[8] = {'U', 'S', 'K', 'C', 'K', 'P', 'T', '\0'};
    static constexpr uint32_t format_version = 1;

    nlohmann::json meta;
    std::vector<std::pair<std::string, Tensor<float>>> blocks;

    const Tensor<float>& block(const std::string& name) const {
        for (const auto& [n, t] : blocks) {
            if (n == name) return t;
        }
        throw IncompatibilityError("checkpoint is missing block '" + name + "'");
    }
    bool has_block(const std::string& name) const {
        for (const auto& [n, t] : blocks) {
            if (n == name) return true;
        }
        return false;
    }
};

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

inline void write_u32(std::ostream& os, uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}
inline void write_i32(std::ostream& os, int32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}
inline void write_u64(std::ostream& os, uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), 8);
}
inline uint32_t read_u32(std::istream& is) {
    uint32_t v;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
inline int32_t read_i32(std::istream& is) {
    int32_t v;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
inline uint64_t read_u64(std::istream& is) {
    uint64_t v;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw IoError("cannot open '" + tmp + "' for writing");
        os.write(Checkpoint::magic, 8);
        detail::write_u32(os, Checkpoint::format_version);
        const std::string meta = ck.meta.dump();
        detail::write_u64(os, meta.size());
        os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
        detail::write_u32(os, static_cast<uint32_t>(ck.blocks.size()));
        for (const auto& [name, t] : ck.blocks) {
            detail::write_u32(os, static_cast<uint32_t>(name.size()));
            os.write(name.data(), static_cast<std::streamsize>(name.size()));
            detail::write_i32(os, t.c);
            detail::write_i32(os, t.h);
            detail::write_i32(os, t.w);
            os.write(reinterpret_cast<const char*>(t.v.data()),
                     static_cast<std::streamsize>(t.v.size() * sizeof(float)));
        }
        if (!os) throw IoError("write failed for '" + tmp + "'");
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint '" + path + "'");
    // Every declared length is bounded by the file size before it is
    // trusted, so a truncated or bit-flipped file fails cleanly instead of
    // driving a huge allocation from a garbage length field.
    const uint64_t file_size = std::filesystem::file_size(path);
    const auto truncated = [&](const char* where) {
        return IoError("checkpoint '" + path + "' is truncated or corrupt (" + where + ")");
    };

    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, Checkpoint::magic, 8) != 0) {
        throw IoError("'" + path + "' is not a checkpoint file");
    }
    const uint32_t version = detail::read_u32(is);
    if (!is) throw truncated("header");
    if (version != Checkpoint::format_version) {
        throw IncompatibilityError("checkpoint '" + path + "' has format version " +
                                   std::to_string(version) + ", expected " +
                                   std::to_string(Checkpoint::format_version));
    }
    Checkpoint ck;
    const uint64_t meta_len = detail::read_u64(is);
    if (!is || meta_len > file_size) throw truncated("metadata length");
    std::string meta(meta_len, '\0');
    is.read(meta.data(), static_cast<std::streamsize>(meta_len));
    if (!is) throw truncated("metadata");
    try {
        ck.meta = nlohmann::json::parse(meta);
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError("checkpoint '" + path + "' has corrupt metadata: " + e.what());
    }
    const uint32_t n_blocks = detail::read_u32(is);
    if (!is) throw truncated("block count");
    ck.blocks.reserve(n_blocks);
    for (uint32_t i = 0; i < n_blocks; ++i) {
        const uint32_t name_len = detail::read_u32(is);
        if (!is || name_len > file_size) throw truncated("block name length");
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const int c = detail::read_i32(is);
        const int h = detail::read_i32(is);
        const int w = detail::read_i32(is);
        if (!is || c < 1 || h < 1 || w < 1 ||
            static_cast<uint64_t>(c) * h * w * sizeof(float) > file_size) {
            throw IoError("checkpoint '" + path + "' is truncated or corrupt at block " +
                          std::to_string(i));
        }
        Tensor<float> t(c, h, w);
        is.read(reinterpret_cast<char*>(t.v.data()),
                static_cast<std::streamsize>(t.v.size() * sizeof(float)));
        if (!is) throw IoError("checkpoint '" + path + "' is truncated in block '" + name + "'");
        ck.blocks.emplace_back(std::move(name), std::move(t));
    }
    return ck;
}

}  // namespace usketch
