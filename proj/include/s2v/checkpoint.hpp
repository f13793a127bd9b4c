#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "matrix.hpp"
#include "param_store.hpp"

namespace s2v {

// Binary checkpoint container. Little-endian layout:
//   magic "S2VC" | u32 version | u32 entry count
//   per entry: u16 name length | name bytes | u32 rows | u32 cols | f32 data
// Writing is byte-deterministic: entries appear in the order given.

inline constexpr uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'S', '2', 'V', 'C'};

namespace detail {

inline void put_u16(std::ostream & os, uint16_t v) {
    unsigned char b[2] = {(unsigned char) (v & 0xFF), (unsigned char) (v >> 8)};
    os.write((const char *) b, 2);
}

inline void put_u32(std::ostream & os, uint32_t v) {
    unsigned char b[4] = {(unsigned char) (v & 0xFF), (unsigned char) ((v >> 8) & 0xFF),
                          (unsigned char) ((v >> 16) & 0xFF), (unsigned char) ((v >> 24) & 0xFF)};
    os.write((const char *) b, 4);
}

inline void put_f32(std::ostream & os, float v) {
    uint32_t u;
    std::memcpy(&u, &v, 4);
    put_u32(os, u);
}

inline uint16_t get_u16(std::istream & is) {
    unsigned char b[2];
    is.read((char *) b, 2);
    if (!is) throw IoError("checkpoint truncated");
    return (uint16_t) (b[0] | (b[1] << 8));
}

inline uint32_t get_u32(std::istream & is) {
    unsigned char b[4];
    is.read((char *) b, 4);
    if (!is) throw IoError("checkpoint truncated");
    return (uint32_t) b[0] | ((uint32_t) b[1] << 8) | ((uint32_t) b[2] << 16) | ((uint32_t) b[3] << 24);
}

} // namespace detail

struct CheckpointEntry {
    std::string name;
    Matrix value;
};

inline void save_checkpoint(const std::string & path, const std::vector<CheckpointEntry> & entries) {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw IoError("cannot open '" + path + "' for writing");
    }
    os.write(kCheckpointMagic, 4);
    detail::put_u32(os, kCheckpointVersion);
    detail::put_u32(os, (uint32_t) entries.size());
    for (const auto & e : entries) {
        if (e.name.size() > 0xFFFF) {
            throw InputError("checkpoint entry name too long");
        }
        detail::put_u16(os, (uint16_t) e.name.size());
        os.write(e.name.data(), (std::streamsize) e.name.size());
        detail::put_u32(os, (uint32_t) e.value.rows);
        detail::put_u32(os, (uint32_t) e.value.cols);
        for (float v : e.value.data) detail::put_f32(os, v);
    }
    if (!os) {
        throw IoError("write failed for '" + path + "'");
    }
}

inline std::vector<CheckpointEntry> load_checkpoint(const std::string & path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw IoError("cannot open '" + path + "'");
    }
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
        throw IoError("'" + path + "' is not a checkpoint file");
    }
    uint32_t version = detail::get_u32(is);
    if (version != kCheckpointVersion) {
        throw IoError("unsupported checkpoint version " + std::to_string(version));
    }
    uint32_t count = detail::get_u32(is);
    std::vector<CheckpointEntry> out;
    out.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        uint16_t nlen = detail::get_u16(is);
        std::string name((size_t) nlen, '\0');
        is.read(name.data(), nlen);
        uint32_t rows = detail::get_u32(is);
        uint32_t cols = detail::get_u32(is);
        if (!is) throw IoError("checkpoint truncated");
        if ((uint64_t) rows * cols > (1ull << 28)) {
            throw IoError("checkpoint entry '" + name + "' implausibly large");
        }
        Matrix m((int) rows, (int) cols);
        for (size_t k = 0; k < m.data.size(); ++k) {
            uint32_t u = detail::get_u32(is);
            float v;
            std::memcpy(&v, &u, 4);
            m.data[k] = v;
        }
        out.push_back({std::move(name), std::move(m)});
    }
    return out;
}

inline std::vector<CheckpointEntry> store_entries(const ParamStore & store) {
    std::vector<CheckpointEntry> out;
    out.reserve(store.size());
    for (size_t i = 0; i < store.size(); ++i) {
        out.push_back({store.at(i).name, store.at(i).value});
    }
    return out;
}

inline void save_store(const std::string & path, const ParamStore & store) {
    save_checkpoint(path, store_entries(store));
}

// Copies matching entries into the store; every store entry must be present
// with the right shape.
inline void load_into_store(const std::vector<CheckpointEntry> & entries, ParamStore & store) {
    for (size_t i = 0; i < store.size(); ++i) {
        auto & dst = store.at(i);
        const CheckpointEntry * found = nullptr;
        for (const auto & e : entries) {
            if (e.name == dst.name) {
                found = &e;
                break;
            }
        }
        if (!found) {
            throw IoError("checkpoint is missing entry '" + dst.name + "'");
        }
        if (!found->value.same_shape(dst.value)) {
            throw IoError("checkpoint entry '" + dst.name + "' has shape " +
                          std::to_string(found->value.rows) + "x" + std::to_string(found->value.cols) +
                          ", expected " + std::to_string(dst.value.rows) + "x" +
                          std::to_string(dst.value.cols));
        }
        dst.value = found->value;
    }
}

} // namespace s2v
