#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "olseg/data_io.hpp"
#include "olseg/rng.hpp"

using namespace olseg;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    auto dir = fs::temp_directory_path() / "olseg_data_io_test";
    fs::create_directories(dir);
    return dir;
}

Volume random_volume(size_t s, size_t h, size_t w, uint64_t seed) {
    Volume vol(s, h, w);
    Rng rng(seed);
    for (auto& v : vol.data) v = static_cast<float>(rng.uniform());
    vol.row_spacing_um = 5.9;
    vol.col_spacing_um = 11.7;
    vol.slice_spacing_um = 47.0;
    return vol;
}

}  // namespace

// ------------------------------------------------------------ volume file ---

TEST(VolumeFile, Float32RoundTripIsLossless) {
    const auto path = (temp_dir() / "vol_f32.oct").string();
    Volume vol = random_volume(3, 32, 24, 100);
    write_volume(vol, path, VolumeDtype::kFloat32);
    Volume back = read_volume(path);
    EXPECT_EQ(back.slices, vol.slices);
    EXPECT_EQ(back.height, vol.height);
    EXPECT_EQ(back.width, vol.width);
    EXPECT_EQ(back.data, vol.data);  // bit-identical
    EXPECT_DOUBLE_EQ(back.row_spacing_um, vol.row_spacing_um);
    EXPECT_DOUBLE_EQ(back.slice_spacing_um, vol.slice_spacing_um);
}

TEST(VolumeFile, Uint8RoundTripOnQuantizedData) {
    const auto path = (temp_dir() / "vol_u8.oct").string();
    Volume vol = random_volume(2, 16, 16, 101);
    for (auto& v : vol.data) v = std::round(v * 255.0f) / 255.0f;  // already quantized
    write_volume(vol, path, VolumeDtype::kUint8);
    Volume back = read_volume(path);
    for (size_t i = 0; i < vol.data.size(); ++i) EXPECT_FLOAT_EQ(back.data[i], vol.data[i]);
}

TEST(VolumeFile, SizeArithmetic) {
    const auto path = (temp_dir() / "vol_size.oct").string();
    Volume vol(128, 1024, 512);
    write_volume(vol, path, VolumeDtype::kUint8);
    EXPECT_EQ(fs::file_size(path), 48u + 67108864u);
}

TEST(VolumeFile, TruncationAndBadMagic) {
    const auto dir = temp_dir();
    const auto path = (dir / "vol_trunc.oct").string();
    Volume vol = random_volume(2, 16, 16, 102);
    write_volume(vol, path);
    // truncate
    fs::resize_file(path, fs::file_size(path) - 17);
    EXPECT_THROW(read_volume(path), DataError);
    // bad magic
    const auto path2 = (dir / "vol_magic.oct").string();
    std::ofstream f(path2, std::ios::binary);
    f << "NOTAVOLUME_PADDING_PADDING_PADDING_PADDING_PADDING";
    f.close();
    EXPECT_THROW(read_volume(path2), DataError);
    EXPECT_THROW(read_volume((dir / "missing.oct").string()), DataError);
}

// ------------------------------------------------------------ annotations ---

TEST(Annotations, RoundTrip) {
    const auto path = (temp_dir() / "ann.csv").string();
    BoundarySet b(3, 5, 40);
    Rng rng(103);
    for (size_t s = 0; s < 3; ++s)
        for (size_t k = 0; k < 5; ++k)
            for (size_t u = 0; u < 40; ++u) {
                if (rng.uniform() < 0.1) continue;  // leave some columns invalid
                b.set(s, k, u, 10.0 + 5.0 * k + rng.uniform(), true);
            }
    write_annotations(b, path);
    BoundarySet back = read_annotations(path, 3, 40, 128);
    EXPECT_EQ(back.valid, b.valid);
    for (size_t i = 0; i < b.rows.size(); ++i) {
        if (b.valid[i]) EXPECT_NEAR(back.rows[i], b.rows[i], 1e-5);
    }
}

TEST(Annotations, RejectsBadContent) {
    const auto dir = temp_dir();
    const auto path = (dir / "bad_ann.csv").string();
    {
        std::ofstream f(path);
        f << "slice,surface,column,row,valid\n0,NOT-A-SURFACE,0,10,1\n";
    }
    EXPECT_THROW(read_annotations(path, 2, 8, 64), DataError);
    {
        std::ofstream f(path);
        f << "slice,surface,column,row,valid\n0,ILM,0,1000,1\n";  // row out of range
    }
    EXPECT_THROW(read_annotations(path, 2, 8, 64), DataError);
    {
        std::ofstream f(path);
        f << "wrong header\n";
    }
    EXPECT_THROW(read_annotations(path, 2, 8, 64), DataError);
}

// ------------------------------------------------------------------ splits ---

TEST(SplitManifest, RoundTripAndDisjointness) {
    const auto path = (temp_dir() / "splits.txt").string();
    SplitManifest m;
    m.train = {"vol_000", "vol_001"};
    m.val = {"vol_002"};
    m.test = {"vol_003", "vol_004"};
    write_split(m, path);
    SplitManifest back = read_split(path);
    EXPECT_EQ(back.train, m.train);
    EXPECT_EQ(back.val, m.val);
    EXPECT_EQ(back.test, m.test);

    m.test.push_back("vol_000");  // now overlaps train
    write_split(m, path);
    EXPECT_THROW(read_split(path), DataError);
}

// --------------------------------------------------------------- windowing ---

TEST(WindowSlices, InteriorWindow) {
    Volume vol = random_volume(8, 16, 16, 104);
    auto win = window_slices(vol, 4, 3);
    ASSERT_EQ(win.size(), 3u);
    EXPECT_EQ(win[0].pixels, vol.slice(3).pixels);
    EXPECT_EQ(win[1].pixels, vol.slice(4).pixels);
    EXPECT_EQ(win[2].pixels, vol.slice(5).pixels);
}

TEST(WindowSlices, EdgeReplication) {
    Volume vol = random_volume(8, 16, 16, 105);
    auto first = window_slices(vol, 0, 3);
    EXPECT_EQ(first[0].pixels, vol.slice(0).pixels);
    EXPECT_EQ(first[1].pixels, vol.slice(0).pixels);
    EXPECT_EQ(first[2].pixels, vol.slice(1).pixels);
    auto last = window_slices(vol, 7, 3);
    EXPECT_EQ(last[1].pixels, vol.slice(7).pixels);
    EXPECT_EQ(last[2].pixels, vol.slice(7).pixels);
}

TEST(WindowSlices, DegenerateAndErrors) {
    Volume vol = random_volume(4, 16, 16, 106);
    auto one = window_slices(vol, 2, 1);
    ASSERT_EQ(one.size(), 1u);
    EXPECT_EQ(one[0].pixels, vol.slice(2).pixels);
    EXPECT_THROW(window_slices(vol, 2, 2), ConfigError);   // even n
    EXPECT_THROW(window_slices(vol, 9, 3), DataError);     // bad center
    EXPECT_THROW(window_slices(vol, 0, 9), DataError);     // n >= 2S
}

// ---------------------------------------------------- mask_from_boundaries ---

TEST(MaskFromBoundaries, FlatBoundaries) {
    const size_t H = 64, W = 8;
    std::vector<double> rows(5 * W);
    std::vector<uint8_t> valid(5 * W, 1);
    const double layer_rows[5] = {10, 20, 30, 40, 50};
    for (size_t k = 0; k < 5; ++k)
        for (size_t u = 0; u < W; ++u) rows[k * W + u] = layer_rows[k];
    auto mask = mask_from_boundaries(rows.data(), valid.data(), 5, H, W);
    EXPECT_EQ(mask[5 * W + 0], 0);
    EXPECT_EQ(mask[15 * W + 0], 1);
    EXPECT_EQ(mask[25 * W + 0], 2);
    EXPECT_EQ(mask[35 * W + 0], 3);
    EXPECT_EQ(mask[45 * W + 0], 4);
    EXPECT_EQ(mask[60 * W + 0], 5);
}

TEST(MaskFromBoundaries, TouchingBoundariesGiveEmptyClass) {
    const size_t H = 32, W = 4;
    std::vector<double> rows = {
        5, 5, 5, 5,
        10, 10, 10, 10,
        10, 10, 10, 10,  // surface 3 touches surface 2
        20, 20, 20, 20,
        25, 25, 25, 25,
    };
    std::vector<uint8_t> valid(5 * W, 1);
    auto mask = mask_from_boundaries(rows.data(), valid.data(), 5, H, W);
    for (size_t v = 0; v < H; ++v) EXPECT_NE(mask[v * W + 0], 2);  // class 2 has zero height
}

TEST(MaskFromBoundaries, RoundTripRecoverseCeil) {
    const size_t H = 64, W = 6;
    std::vector<double> rows(5 * W);
    std::vector<uint8_t> valid(5 * W, 1);
    Rng rng(107);
    for (size_t u = 0; u < W; ++u) {
        double r = 5.0 + rng.uniform(0.0, 3.0);
        for (size_t k = 0; k < 5; ++k) {
            rows[k * W + u] = r;
            r += 6.0 + rng.uniform(0.0, 3.0);
        }
    }
    auto mask = mask_from_boundaries(rows.data(), valid.data(), 5, H, W);
    for (size_t k = 1; k <= 5; ++k)
        for (size_t u = 0; u < W; ++u) {
            size_t first = H;
            for (size_t v = 0; v < H; ++v) {
                if (mask[v * W + u] == static_cast<int>(k)) {
                    first = v;
                    break;
                }
            }
            ASSERT_LT(first, H);
            EXPECT_EQ(static_cast<double>(first), std::ceil(rows[(k - 1) * W + u]));
        }
}

TEST(MaskFromBoundaries, InvalidColumnsIgnored) {
    const size_t H = 16, W = 4;
    std::vector<double> rows(5 * W, 0.0);
    std::vector<uint8_t> valid(5 * W, 1);
    for (size_t k = 0; k < 5; ++k) {
        for (size_t u = 0; u < W; ++u) rows[k * W + u] = 2.0 + 2.0 * k;
    }
    valid[2 * W + 1] = 0;  // one invalid surface in column 1
    auto mask = mask_from_boundaries(rows.data(), valid.data(), 5, H, W);
    for (size_t v = 0; v < H; ++v) {
        EXPECT_EQ(mask[v * W + 1], -1);
        EXPECT_NE(mask[v * W + 0], -1);
    }
}

TEST(MaskFromBoundaries, UnorderedThrows) {
    const size_t H = 16, W = 2;
    std::vector<double> rows = {8, 8, 4, 4, 9, 9, 10, 10, 12, 12};  // s2 < s1
    std::vector<uint8_t> valid(5 * W, 1);
    EXPECT_THROW(mask_from_boundaries(rows.data(), valid.data(), 5, H, W), DataError);
}
