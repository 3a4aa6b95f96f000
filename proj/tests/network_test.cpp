#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "olseg/checkpoint.hpp"
#include "olseg/data_io.hpp"
#include "olseg/loss.hpp"
#include "olseg/network.hpp"
#include "olseg/rng.hpp"

using namespace olseg;

namespace {

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.levels = 3;
    cfg.base_channels = 4;
    cfg.n_slices = 3;
    cfg.n_surfaces = 5;
    cfg.input_height = 32;
    cfg.input_width = 32;
    return cfg;
}

template <typename S>
std::vector<Tensor<S>> random_slices(const ModelConfig& cfg, uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor<S>> out;
    for (size_t i = 0; i < cfg.n_slices; ++i) {
        std::vector<S> vals(cfg.input_height * cfg.input_width);
        for (auto& v : vals) v = static_cast<S>(rng.uniform());
        out.push_back(Tensor<S>::from_vector({cfg.input_height, cfg.input_width, 1},
                                             std::move(vals)));
    }
    return out;
}

}  // namespace

TEST(BuildModel, DeterministicPerSeed) {
    auto cfg = small_config();
    auto a = build_model<float>(cfg, 7);
    auto b = build_model<float>(cfg, 7);
    auto na = named_parameters(a);
    auto nb = named_parameters(b);
    ASSERT_EQ(na.size(), nb.size());
    for (size_t i = 0; i < na.size(); ++i) {
        EXPECT_EQ(na[i].first, nb[i].first);
        EXPECT_EQ(na[i].second.values(), nb[i].second.values());
    }
    auto c = build_model<float>(cfg, 8);
    EXPECT_NE(named_parameters(c)[0].second.values(), na[0].second.values());
}

TEST(BuildModel, RejectsIndivisibleInput) {
    auto cfg = small_config();
    cfg.input_height = 36;  // not divisible by 2^3
    EXPECT_THROW(build_model<float>(cfg, 1), ConfigError);
}

TEST(BuildModel, ParameterCountMatchesClosedForm) {
    for (auto cfg : {small_config(), [] {
             ModelConfig c;
             c.levels = 2;
             c.base_channels = 2;
             c.input_height = 16;
             c.input_width = 16;
             return c;
         }()}) {
        auto params = build_model<double>(cfg, 3);
        size_t total = 0;
        for (auto& [name, t] : named_parameters(params)) total += t.numel();
        EXPECT_EQ(total, parameter_count(cfg));
    }
    // hand-derived count for levels=2, base=2, n_slices=3, n_surfaces=5:
    // enc0 (1->2): 18+36+8+4+2 = 68; enc1 (2->4): 72+144+16+8+8 = 248
    // dec0 (6->2): 108+36+8+4+12 = 168; cff0: 6*3+3 = 21
    // heads: 2*6+6 = 18 and 2*5+5 = 15; total 538
    ModelConfig cfg;
    cfg.levels = 2;
    cfg.base_channels = 2;
    cfg.input_height = 16;
    cfg.input_width = 16;
    EXPECT_EQ(parameter_count(cfg), 538u);
}

TEST(Forward, OutputShapesAndNormalization) {
    auto cfg = small_config();
    auto params = build_model<double>(cfg, 5);
    auto slices = random_slices<double>(cfg, 99);
    auto out = forward(params, slices, BnMode::kTrain);
    ASSERT_EQ(out.mask_probs.shape(), (std::vector<size_t>{32, 32, 6}));
    ASSERT_EQ(out.surface_probs.shape(), (std::vector<size_t>{32, 32, 5}));
    ASSERT_EQ(out.surfaces.shape(), (std::vector<size_t>{5, 32}));
    // per-pixel class sums = 1
    for (size_t px = 0; px < 32 * 32; ++px) {
        double total = 0;
        for (size_t c = 0; c < 6; ++c) total += out.mask_probs.values()[px * 6 + c];
        ASSERT_NEAR(total, 1.0, 1e-6);
    }
    // per-column row sums = 1
    for (size_t u = 0; u < 32; ++u)
        for (size_t s = 0; s < 5; ++s) {
            double total = 0;
            for (size_t v = 0; v < 32; ++v) total += out.surface_probs.at(v, u, s);
            ASSERT_NEAR(total, 1.0, 1e-6);
        }
    // surfaces finite, inside [0, H-1], ordered
    for (size_t u = 0; u < 32; ++u) {
        for (size_t s = 0; s < 5; ++s) {
            const double r = out.surfaces.at(s, u);
            ASSERT_TRUE(std::isfinite(r));
            ASSERT_GE(r, 0.0);
            ASSERT_LE(r, 31.0);
            if (s > 0) ASSERT_GE(r, out.surfaces.at(s - 1, u));
        }
    }
}

TEST(Forward, IdenticalSlicesMatchDoubledSkipBaseline) {
    auto cfg = small_config();
    auto params = build_model<double>(cfg, 21);
    Rng rng(22);
    std::vector<double> vals(cfg.input_height * cfg.input_width);
    for (auto& v : vals) v = rng.uniform();
    auto slice = TensorD::from_vector({cfg.input_height, cfg.input_width, 1}, vals);
    std::vector<TensorD> identical = {slice, slice, slice};
    auto cff_out = forward(params, identical, BnMode::kEval);
    auto ref_out = baseline_forward(params, slice, BnMode::kEval, 2.0);
    for (size_t i = 0; i < cff_out.mask_probs.numel(); ++i) {
        ASSERT_NEAR(cff_out.mask_probs.values()[i], ref_out.mask_probs.values()[i], 1e-9);
    }
    for (size_t i = 0; i < cff_out.surfaces.numel(); ++i) {
        ASSERT_NEAR(cff_out.surfaces.values()[i], ref_out.surfaces.values()[i], 1e-9);
    }
}

TEST(Forward, SharedEncoderIgnoresPhysicalSliceIdentity) {
    auto cfg = small_config();
    auto params = build_model<double>(cfg, 31);
    auto slices = random_slices<double>(cfg, 32);
    auto out1 = forward(params, slices, BnMode::kEval);
    // fresh tensor objects holding the same values
    std::vector<TensorD> copies;
    for (const auto& s : slices) copies.push_back(s.clone_detached());
    auto out2 = forward(params, copies, BnMode::kEval);
    EXPECT_EQ(out1.mask_probs.values(), out2.mask_probs.values());
    EXPECT_EQ(out1.surfaces.values(), out2.surfaces.values());
}

TEST(Forward, DeterministicGivenSeedAndInput) {
    auto cfg = small_config();
    auto pa = build_model<double>(cfg, 77);
    auto pb = build_model<double>(cfg, 77);
    auto slices = random_slices<double>(cfg, 78);
    auto oa = forward(pa, slices, BnMode::kEval);
    auto ob = forward(pb, slices, BnMode::kEval);
    EXPECT_EQ(oa.mask_probs.values(), ob.mask_probs.values());
    EXPECT_EQ(oa.surface_probs.values(), ob.surface_probs.values());
    EXPECT_EQ(oa.surfaces.values(), ob.surfaces.values());
}

TEST(Forward, ShapeAndModeErrors) {
    auto cfg = small_config();
    auto params = build_model<double>(cfg, 1);
    auto slices = random_slices<double>(cfg, 2);
    slices.pop_back();
    EXPECT_THROW(forward(params, slices, BnMode::kTrain), ShapeError);

    ModelConfig plain = cfg;
    plain.plain_skip = true;
    plain.n_slices = 1;
    auto base = build_model<double>(plain, 1);
    EXPECT_THROW(forward(base, random_slices<double>(plain, 3), BnMode::kTrain), ConfigError);
}

TEST(Forward, FullPassProducesFiniteGradients) {
    auto cfg = small_config();
    auto params = build_model<double>(cfg, 41);
    auto slices = random_slices<double>(cfg, 42);
    auto out = forward(params, slices, BnMode::kTrain);

    SliceTruth gt;
    gt.height = cfg.input_height;
    gt.width = cfg.input_width;
    gt.n_surfaces = 5;
    gt.n_classes = 6;
    Rng rng(43);
    gt.boundary_rows.resize(5 * gt.width);
    gt.boundary_valid.assign(5 * gt.width, 1);
    for (size_t u = 0; u < gt.width; ++u) {
        double r = 4.0 + rng.uniform(0.0, 2.0);
        for (size_t k = 0; k < 5; ++k) {
            gt.boundary_rows[k * gt.width + u] = r;
            r += 3.0 + rng.uniform(0.0, 2.0);
        }
    }
    gt.class_map = mask_from_boundaries(gt.boundary_rows.data(), gt.boundary_valid.data(), 5,
                                        gt.height, gt.width);
    auto loss = total_loss(mask_ce(out.mask_probs, gt), line_ce(out.surface_probs, gt),
                           line_l1(out.surfaces, gt), LossWeights{});
    ASSERT_TRUE(std::isfinite(loss.item()));
    backward(loss);
    for (auto& [name, t] : named_parameters(params)) {
        ASSERT_TRUE(t.has_grad()) << name << " received no gradient";
        for (double g : t.grad()) ASSERT_TRUE(std::isfinite(g)) << name;
    }
}

TEST(Baseline, PlainSkipModelHasZeroCffParameters) {
    auto cfg = small_config();
    cfg.plain_skip = true;
    cfg.n_slices = 1;
    auto params = build_model<double>(cfg, 9);
    for (auto& [name, t] : named_parameters(params)) {
        EXPECT_EQ(name.find("cff."), std::string::npos);
    }
    // same trunk init as the CFF model under the same seed
    auto cff_cfg = small_config();
    auto cff_params = build_model<double>(cff_cfg, 9);
    EXPECT_EQ(params.encoder[0].conv1.kernel.values(),
              cff_params.encoder[0].conv1.kernel.values());
    EXPECT_EQ(params.mask_kernel.values(), cff_params.mask_kernel.values());

    auto slices = random_slices<double>(cfg, 10);
    auto out = baseline_forward(params, slices[0], BnMode::kTrain);
    EXPECT_EQ(out.mask_probs.shape(), (std::vector<size_t>{32, 32, 6}));
    EXPECT_EQ(out.surfaces.shape(), (std::vector<size_t>{5, 32}));
}

TEST(Topology, GuaranteeZeroViolationsOnRandomInput) {
    Rng rng(51);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> vals(5 * 16);
        for (auto& v : vals) v = rng.uniform(0.0, 31.0);
        auto fixed = topology_guarantee(TensorD::from_vector({5, 16}, vals));
        for (size_t u = 0; u < 16; ++u)
            for (size_t s = 1; s < 5; ++s) ASSERT_GE(fixed.at(s, u), fixed.at(s - 1, u));
    }
}

TEST(Topology, IdentityOnOrderedAndIdempotent) {
    Rng rng(52);
    std::vector<double> vals(5 * 8);
    for (size_t u = 0; u < 8; ++u) {
        double r = rng.uniform(0.0, 4.0);
        for (size_t s = 0; s < 5; ++s) {
            vals[s * 8 + u] = r;
            r += rng.uniform(0.0, 3.0);
        }
    }
    auto t = TensorD::from_vector({5, 8}, vals);
    auto once = topology_guarantee(t);
    EXPECT_EQ(once.values(), vals);
    auto twice = topology_guarantee(once);
    EXPECT_EQ(twice.values(), once.values());
}

TEST(Checkpoint, RoundTripRestoresModel) {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "olseg_ckpt_test";
    fs::create_directories(dir);
    const auto path = (dir / "model.ckpt").string();

    auto cfg = small_config();
    auto params = build_model<float>(cfg, 13);
    // perturb running stats so buffers round-trip too
    params.encoder[0].conv1.stats.running_mean[0] = 0.25f;
    params.encoder[1].conv2.stats.running_var[1] = 3.5f;
    save_checkpoint(params, path);

    auto restored = build_model<float>(cfg, 999);  // different init
    load_checkpoint(restored, path);
    auto na = named_parameters(params);
    auto nb = named_parameters(restored);
    for (size_t i = 0; i < na.size(); ++i) {
        ASSERT_EQ(na[i].second.values(), nb[i].second.values()) << na[i].first;
    }
    EXPECT_FLOAT_EQ(restored.encoder[0].conv1.stats.running_mean[0], 0.25f);
    EXPECT_FLOAT_EQ(restored.encoder[1].conv2.stats.running_var[1], 3.5f);

    // deterministic lexicographic ordering on disk
    auto raw = read_checkpoint_raw(path);
    std::string prev;
    for (const auto& [name, entry] : raw) {
        EXPECT_GT(name, prev);
        prev = name;
    }
    EXPECT_TRUE(raw.count("cff.level0.weight"));
    EXPECT_TRUE(raw.count("cff.level0.bias"));
    EXPECT_TRUE(raw.count("head.mask.kernel"));
    EXPECT_TRUE(raw.count("head.surf.kernel"));
    EXPECT_TRUE(raw.count("enc.level0.conv1.kernel"));
    EXPECT_TRUE(raw.count("dec.level0.bn1.running_mean"));

    // shape mismatch rejected
    ModelConfig other = cfg;
    other.base_channels = 8;
    auto wrong = build_model<float>(other, 1);
    EXPECT_THROW(load_checkpoint(wrong, path), DataError);
}

TEST(Checkpoint, FloatDoubleInterop) {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "olseg_ckpt_test";
    fs::create_directories(dir);
    const auto path = (dir / "model_f.ckpt").string();
    auto cfg = small_config();
    auto pf = build_model<float>(cfg, 17);
    save_checkpoint(pf, path);
    auto pd = build_model<double>(cfg, 18);
    load_checkpoint(pd, path);
    auto nf = named_parameters(pf);
    auto nd = named_parameters(pd);
    for (size_t i = 0; i < nf.size(); ++i) {
        for (size_t j = 0; j < nf[i].second.numel(); ++j) {
            ASSERT_EQ(static_cast<double>(nf[i].second.values()[j]), nd[i].second.values()[j]);
        }
    }
}
