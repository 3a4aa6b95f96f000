#pragma once

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>

#include "olseg/network.hpp"

namespace olseg {

// ---------------------------------------------------------------------------
// Checkpoint format: magic "OLSCKPT1", then for each named array in
// lexicographic name order: u64le name length, UTF-8 name, u64le rank,
// u64le dims, raw little-endian float32 data. Trainable parameters and BN
// running statistics are both stored.
// ---------------------------------------------------------------------------

using CheckpointData = std::map<std::string, std::pair<std::vector<size_t>, std::vector<float>>>;

namespace detail {

inline void put_u64(std::ofstream& f, uint64_t v) {
    uint8_t b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<uint8_t>(v >> (8 * i));
    f.write(reinterpret_cast<const char*>(b), 8);
}

inline uint64_t get_u64(std::ifstream& f) {
    uint8_t b[8];
    f.read(reinterpret_cast<char*>(b), 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace detail

inline void write_checkpoint_raw(const CheckpointData& data, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("write_checkpoint: cannot open " + path);
    f.write("OLSCKPT1", 8);
    for (const auto& [name, entry] : data) {  // std::map iterates in sorted order
        const auto& [shape, values] = entry;
        detail::put_u64(f, name.size());
        f.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_u64(f, shape.size());
        for (size_t d : shape) detail::put_u64(f, d);
        f.write(reinterpret_cast<const char*>(values.data()),
                static_cast<std::streamsize>(values.size() * 4));
    }
    if (!f) throw DataError("write_checkpoint: write failed for " + path);
}

inline CheckpointData read_checkpoint_raw(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("read_checkpoint: cannot open " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, "OLSCKPT1", 8) != 0) {
        throw DataError("read_checkpoint: bad magic in " + path);
    }
    CheckpointData data;
    for (;;) {
        const uint64_t name_len = detail::get_u64(f);
        if (f.eof()) break;
        if (!f || name_len > 4096) throw DataError("read_checkpoint: corrupt entry in " + path);
        std::string name(name_len, '\0');
        f.read(name.data(), static_cast<std::streamsize>(name_len));
        const uint64_t rank = detail::get_u64(f);
        if (!f || rank > 8) throw DataError("read_checkpoint: corrupt rank in " + path);
        std::vector<size_t> shape(rank);
        size_t numel = 1;
        for (uint64_t i = 0; i < rank; ++i) {
            shape[i] = static_cast<size_t>(detail::get_u64(f));
            numel *= shape[i];
        }
        std::vector<float> values(numel);
        f.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(numel * 4));
        if (!f) throw DataError("read_checkpoint: truncated data in " + path);
        data[name] = {std::move(shape), std::move(values)};
    }
    return data;
}

template <typename S>
void save_checkpoint(ModelParams<S>& params, const std::string& path) {
    CheckpointData data;
    for (auto& [name, t] : named_parameters(params)) {
        std::vector<float> vals(t.numel());
        for (size_t i = 0; i < vals.size(); ++i) vals[i] = static_cast<float>(t.values()[i]);
        data[name] = {t.shape(), std::move(vals)};
    }
    for (auto& [name, buf] : named_buffers(params)) {
        std::vector<float> vals(buf->size());
        for (size_t i = 0; i < vals.size(); ++i) vals[i] = static_cast<float>((*buf)[i]);
        data[name] = {{buf->size()}, std::move(vals)};
    }
    write_checkpoint_raw(data, path);
}

// Loads into an already-built model; every current array must be present with
// a matching shape, and unknown names are rejected.
template <typename S>
void load_checkpoint(ModelParams<S>& params, const std::string& path) {
    CheckpointData data = read_checkpoint_raw(path);
    size_t used = 0;
    for (auto& [name, t] : named_parameters(params)) {
        auto it = data.find(name);
        if (it == data.end()) throw DataError("load_checkpoint: missing parameter " + name);
        if (it->second.first != t.shape()) {
            throw DataError("load_checkpoint: shape mismatch for " + name);
        }
        for (size_t i = 0; i < t.numel(); ++i) {
            t.values()[i] = static_cast<S>(it->second.second[i]);
        }
        ++used;
    }
    for (auto& [name, buf] : named_buffers(params)) {
        auto it = data.find(name);
        if (it == data.end()) throw DataError("load_checkpoint: missing buffer " + name);
        buf->assign(it->second.second.size(), S(0));
        for (size_t i = 0; i < buf->size(); ++i) (*buf)[i] = static_cast<S>(it->second.second[i]);
        ++used;
    }
    if (used != data.size()) {
        throw DataError("load_checkpoint: checkpoint holds arrays unknown to this model");
    }
    // running stats are now authoritative
    for (auto& blk : params.encoder) {
        blk.conv1.stats.initialized = true;
        blk.conv2.stats.initialized = true;
    }
    for (auto& blk : params.decoder) {
        blk.conv1.stats.initialized = true;
        blk.conv2.stats.initialized = true;
    }
}

}  // namespace olseg
