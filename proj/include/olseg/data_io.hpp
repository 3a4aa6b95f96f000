#pragma once

#include <array>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "olseg/image.hpp"

namespace olseg {

inline const std::array<std::string, 5> kSurfaceNames = {"ILM", "RNFL-GCL", "IPL-INL",
                                                         "OPL-ONL", "ONL-IS"};

inline int surface_index(const std::string& name) {
    for (size_t i = 0; i < kSurfaceNames.size(); ++i) {
        if (kSurfaceNames[i] == name) return static_cast<int>(i);
    }
    return -1;
}

// Ordered stack of B-scans with physical spacing.
struct Volume {
    size_t slices = 0, height = 0, width = 0;
    std::vector<float> data;  // slice-major, row-major within a slice, [0,1]
    double row_spacing_um = 0, col_spacing_um = 0, slice_spacing_um = 0;

    Volume() = default;
    Volume(size_t s, size_t h, size_t w) : slices(s), height(h), width(w), data(s * h * w, 0.0f) {}

    float& at(size_t s, size_t y, size_t x) { return data[(s * height + y) * width + x]; }
    float at(size_t s, size_t y, size_t x) const { return data[(s * height + y) * width + x]; }

    Image slice(size_t s) const {
        Image img(height, width);
        std::copy(data.begin() + s * height * width, data.begin() + (s + 1) * height * width,
                  img.pixels.begin());
        return img;
    }
    void set_slice(size_t s, const Image& img) {
        std::copy(img.pixels.begin(), img.pixels.end(), data.begin() + s * height * width);
    }
};

// Per-slice, per-surface, per-column boundary rows with a validity mask.
struct BoundarySet {
    size_t n_slices = 0, n_surfaces = 5, width = 0;
    std::vector<double> rows;
    std::vector<uint8_t> valid;

    BoundarySet() = default;
    BoundarySet(size_t s, size_t ns, size_t w)
        : n_slices(s), n_surfaces(ns), width(w), rows(s * ns * w, 0.0), valid(s * ns * w, 0) {}

    size_t idx(size_t s, size_t k, size_t u) const { return (s * n_surfaces + k) * width + u; }
    double row(size_t s, size_t k, size_t u) const { return rows[idx(s, k, u)]; }
    bool is_valid(size_t s, size_t k, size_t u) const { return valid[idx(s, k, u)] != 0; }
    void set(size_t s, size_t k, size_t u, double r, bool v = true) {
        rows[idx(s, k, u)] = r;
        valid[idx(s, k, u)] = v ? 1 : 0;
    }
};

// ---------------------------------------------------------------------------
// VolumeFile: magic "OCTVOL01", u32le S,H,W,dtype (0=uint8, 1=float32),
// f64le row/col/slice spacing in um, then S*H*W raw little-endian samples.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
inline void put_f64(std::vector<uint8_t>& out, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(bits >> (8 * i)));
}
inline uint32_t get_u32(const uint8_t* p) {
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
           (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}
inline double get_f64(const uint8_t* p) {
    uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(p[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

}  // namespace detail

enum class VolumeDtype : uint32_t { kUint8 = 0, kFloat32 = 1 };

inline void write_volume(const Volume& vol, const std::string& path,
                         VolumeDtype dtype = VolumeDtype::kFloat32) {
    std::vector<uint8_t> out;
    const char magic[8] = {'O', 'C', 'T', 'V', 'O', 'L', '0', '1'};
    out.insert(out.end(), magic, magic + 8);
    detail::put_u32(out, static_cast<uint32_t>(vol.slices));
    detail::put_u32(out, static_cast<uint32_t>(vol.height));
    detail::put_u32(out, static_cast<uint32_t>(vol.width));
    detail::put_u32(out, static_cast<uint32_t>(dtype));
    detail::put_f64(out, vol.row_spacing_um);
    detail::put_f64(out, vol.col_spacing_um);
    detail::put_f64(out, vol.slice_spacing_um);
    if (dtype == VolumeDtype::kUint8) {
        for (float v : vol.data) {
            const float c = std::min(std::max(v, 0.0f), 1.0f);
            out.push_back(static_cast<uint8_t>(std::lround(c * 255.0f)));
        }
    } else {
        const size_t base = out.size();
        out.resize(base + vol.data.size() * 4);
        std::memcpy(out.data() + base, vol.data.data(), vol.data.size() * 4);
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("write_volume: cannot open " + path);
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw DataError("write_volume: short write to " + path);
}

inline Volume read_volume(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw DataError("read_volume: cannot open " + path);
    const std::streamsize size = f.tellg();
    f.seekg(0);
    if (size < 48) throw DataError("read_volume: truncated header in " + path);
    std::vector<uint8_t> buf(static_cast<size_t>(size));
    f.read(reinterpret_cast<char*>(buf.data()), size);
    if (!f) throw DataError("read_volume: read failed for " + path);
    if (std::memcmp(buf.data(), "OCTVOL01", 8) != 0) {
        throw DataError("read_volume: bad magic in " + path);
    }
    Volume vol;
    vol.slices = detail::get_u32(buf.data() + 8);
    vol.height = detail::get_u32(buf.data() + 12);
    vol.width = detail::get_u32(buf.data() + 16);
    const uint32_t dtype = detail::get_u32(buf.data() + 20);
    vol.row_spacing_um = detail::get_f64(buf.data() + 24);
    vol.col_spacing_um = detail::get_f64(buf.data() + 32);
    vol.slice_spacing_um = detail::get_f64(buf.data() + 40);
    const size_t n = vol.slices * vol.height * vol.width;
    size_t elem = 0;
    if (dtype == static_cast<uint32_t>(VolumeDtype::kUint8)) elem = 1;
    else if (dtype == static_cast<uint32_t>(VolumeDtype::kFloat32)) elem = 4;
    else throw DataError("read_volume: unknown dtype code " + std::to_string(dtype));
    if (static_cast<size_t>(size) != 48 + n * elem) {
        throw DataError("read_volume: truncated file " + path + " (expected " +
                        std::to_string(48 + n * elem) + " bytes, got " + std::to_string(size) + ")");
    }
    vol.data.resize(n);
    if (elem == 1) {
        for (size_t i = 0; i < n; ++i) vol.data[i] = static_cast<float>(buf[48 + i]) / 255.0f;
    } else {
        std::memcpy(vol.data.data(), buf.data() + 48, n * 4);
    }
    return vol;
}

// ---------------------------------------------------------------------------
// AnnotationFile: CSV with header slice,surface,column,row,valid. Only valid
// entries are written; absent (slice,surface,column) combinations read back
// as invalid.
// ---------------------------------------------------------------------------

inline void write_annotations(const BoundarySet& b, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw DataError("write_annotations: cannot open " + path);
    f << "slice,surface,column,row,valid\n";
    char buf[128];
    for (size_t s = 0; s < b.n_slices; ++s)
        for (size_t k = 0; k < b.n_surfaces; ++k)
            for (size_t u = 0; u < b.width; ++u) {
                if (!b.is_valid(s, k, u)) continue;
                std::snprintf(buf, sizeof(buf), "%zu,%s,%zu,%.6f,1\n", s,
                              kSurfaceNames[k].c_str(), u, b.row(s, k, u));
                f << buf;
            }
    if (!f) throw DataError("write_annotations: write failed for " + path);
}

inline BoundarySet read_annotations(const std::string& path, size_t n_slices, size_t width,
                                    size_t image_height) {
    std::ifstream f(path);
    if (!f) throw DataError("read_annotations: cannot open " + path);
    std::string line;
    if (!std::getline(f, line) || line.rfind("slice,surface,column,row,valid", 0) != 0) {
        throw DataError("read_annotations: missing header in " + path);
    }
    BoundarySet b(n_slices, 5, width);
    size_t lineno = 1;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string fields[5];
        for (int i = 0; i < 5; ++i) {
            if (!std::getline(ss, fields[i], ',')) {
                throw DataError("read_annotations: malformed line " + std::to_string(lineno));
            }
        }
        const size_t s = std::stoul(fields[0]);
        const int k = surface_index(fields[1]);
        const size_t u = std::stoul(fields[2]);
        const double row = std::stod(fields[3]);
        const int valid = std::stoi(fields[4]);
        if (k < 0) throw DataError("read_annotations: unknown surface '" + fields[1] + "'");
        if (s >= n_slices || u >= width) {
            throw DataError("read_annotations: index out of range at line " + std::to_string(lineno));
        }
        if (valid && (row < 0 || row >= static_cast<double>(image_height))) {
            throw DataError("read_annotations: row out of range at line " + std::to_string(lineno));
        }
        if (valid && b.is_valid(s, static_cast<size_t>(k), u)) {
            throw DataError("read_annotations: duplicate entry at line " + std::to_string(lineno));
        }
        if (valid) b.set(s, static_cast<size_t>(k), u, row, true);
    }
    return b;
}

// ---------------------------------------------------------------------------
// SplitManifest: plain text with [train]/[val]/[test] sections, one volume id
// per line. Sets must be disjoint.
// ---------------------------------------------------------------------------

struct SplitManifest {
    std::vector<std::string> train, val, test;
};

inline void write_split(const SplitManifest& m, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw DataError("write_split: cannot open " + path);
    f << "[train]\n";
    for (const auto& s : m.train) f << s << "\n";
    f << "[val]\n";
    for (const auto& s : m.val) f << s << "\n";
    f << "[test]\n";
    for (const auto& s : m.test) f << s << "\n";
}

inline SplitManifest read_split(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("read_split: cannot open " + path);
    SplitManifest m;
    std::vector<std::string>* section = nullptr;
    std::string line;
    while (std::getline(f, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (line.empty()) continue;
        if (line == "[train]") section = &m.train;
        else if (line == "[val]") section = &m.val;
        else if (line == "[test]") section = &m.test;
        else if (line.front() == '[') throw DataError("read_split: unknown section " + line);
        else if (!section) throw DataError("read_split: entry before any section: " + line);
        else section->push_back(line);
    }
    std::set<std::string> seen;
    for (const auto* v : {&m.train, &m.val, &m.test}) {
        for (const auto& id : *v) {
            if (!seen.insert(id).second) {
                throw DataError("read_split: volume '" + id + "' appears in multiple sets");
            }
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// 2.5D windowing and mask synthesis.
// ---------------------------------------------------------------------------

// n consecutive slices centered on `center`, replicating the first/last slice
// past the volume edges.
inline std::vector<Image> window_slices(const Volume& vol, size_t center, size_t n) {
    if (n % 2 == 0 || n == 0) throw ConfigError("window_slices: n must be odd");
    if (center >= vol.slices) throw DataError("window_slices: center index out of range");
    if (n >= 2 * vol.slices) throw DataError("window_slices: window larger than volume allows");
    std::vector<Image> out;
    const long half = static_cast<long>(n / 2);
    for (long off = -half; off <= half; ++off) {
        long idx = static_cast<long>(center) + off;
        idx = std::max<long>(0, std::min<long>(idx, static_cast<long>(vol.slices) - 1));
        out.push_back(vol.slice(static_cast<size_t>(idx)));
    }
    return out;
}

// Class map from ordered boundary rows: class 0 above ILM, class k between
// surface k and k+1, class n_surfaces below the last surface; columns with any
// invalid surface are wholly -1 (ignore).
inline std::vector<int> mask_from_boundaries(const double* rows, const uint8_t* valid,
                                             size_t n_surfaces, size_t height, size_t width) {
    std::vector<int> mask(height * width, -1);
    for (size_t u = 0; u < width; ++u) {
        bool ok = true;
        for (size_t k = 0; k < n_surfaces; ++k) {
            if (!valid[k * width + u]) ok = false;
        }
        if (!ok) continue;
        for (size_t k = 0; k + 1 < n_surfaces; ++k) {
            if (rows[k * width + u] > rows[(k + 1) * width + u]) {
                throw DataError("mask_from_boundaries: unordered boundaries at column " +
                                std::to_string(u));
            }
        }
        for (size_t v = 0; v < height; ++v) {
            int cls = static_cast<int>(n_surfaces);
            for (size_t k = 0; k < n_surfaces; ++k) {
                if (static_cast<double>(v) < rows[k * width + u]) {
                    cls = static_cast<int>(k);
                    break;
                }
            }
            mask[v * width + u] = cls;
        }
    }
    return mask;
}

inline std::vector<int> mask_from_boundaries(const BoundarySet& b, size_t slice, size_t height) {
    const size_t base = b.idx(slice, 0, 0);
    return mask_from_boundaries(b.rows.data() + base, b.valid.data() + base, b.n_surfaces, height,
                                b.width);
}

}  // namespace olseg
