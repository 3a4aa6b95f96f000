// olseg: preprocess OCT volumes, train/evaluate the CFF segmentation network,
// generate synthetic phantoms, and render boundary overlays.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <iostream>

#include "olseg/train.hpp"

namespace fs = std::filesystem;
using namespace olseg;

namespace {

void write_transforms_json(const PreparedVolume& pv, const std::string& path) {
    nlohmann::json slices = nlohmann::json::array();
    for (size_t j = 0; j < pv.transforms.size(); ++j) {
        const auto& t = pv.transforms[j];
        nlohmann::json entry;
        entry["usable"] = static_cast<bool>(pv.usable[j]);
        entry["crop_top"] = t.crop_top;
        entry["scale_rows"] = t.resize_scale_rows;
        entry["scale_cols"] = t.resize_scale_cols;
        entry["original_height"] = t.original_height;
        entry["original_width"] = t.original_width;
        entry["processed_height"] = t.processed_height;
        entry["processed_width"] = t.processed_width;
        entry["column_shifts"] = t.column_shifts;
        slices.push_back(entry);
    }
    std::ofstream f(path);
    if (!f) throw DataError("cannot open " + path);
    f << nlohmann::json{{"slices", slices}}.dump() << "\n";
}

int cmd_phantom_gen(const RunConfig& cfg) {
    const std::string out_dir = cfg.get_string("out.dir");
    fs::create_directories(out_dir);
    const size_t count = static_cast<size_t>(cfg.get_int("phantom.count"));
    const size_t n_train = static_cast<size_t>(cfg.get_int("phantom.train"));
    const size_t n_val = static_cast<size_t>(cfg.get_int("phantom.val"));
    const size_t n_test = static_cast<size_t>(cfg.get_int("phantom.test"));
    if (n_train + n_val + n_test != count) {
        throw ConfigError("phantom.train + phantom.val + phantom.test must equal phantom.count");
    }
    SplitManifest split;
    for (size_t i = 0; i < count; ++i) {
        char id[32];
        std::snprintf(id, sizeof(id), "vol_%03zu", i);
        auto [vol, truth] = generate_phantom(cfg.phantom_config(i));
        write_volume(vol, out_dir + "/" + id + ".oct");
        write_annotations(truth, out_dir + "/" + id + ".csv");
        if (i < n_train) split.train.push_back(id);
        else if (i < n_train + n_val) split.val.push_back(id);
        else split.test.push_back(id);
        std::cout << "wrote " << id << " (" << vol.slices << "x" << vol.height << "x"
                  << vol.width << ")\n";
    }
    write_split(split, out_dir + "/splits.txt");
    std::cout << "split manifest: " << n_train << " train / " << n_val << " val / " << n_test
              << " test\n";
    return 0;
}

int cmd_preprocess(const RunConfig& cfg, const std::string& input, bool debug_images) {
    const std::string out_dir = cfg.get_string("out.dir");
    fs::create_directories(out_dir);
    Volume vol = read_volume(input);
    const std::string stem = fs::path(input).stem().string();
    const PreprocessConfig pp = cfg.preprocess_config();

    PreparedVolume pv;
    pv.id = stem;
    pv.original = vol;
    pv.processed = Volume(vol.slices, pp.target_height, pp.target_width);
    pv.transforms.resize(vol.slices);
    pv.usable.assign(vol.slices, 0);
    size_t failures = 0;
    for (size_t j = 0; j < vol.slices; ++j) {
        std::vector<std::pair<std::string, Image>> stages;
        try {
            auto [img, rec] =
                preprocess_bscan(vol.slice(j), pp, debug_images ? &stages : nullptr);
            pv.processed.set_slice(j, img);
            pv.transforms[j] = std::move(rec);
            pv.usable[j] = 1;
        } catch (const DataError& e) {
            ++failures;
            std::cerr << "warning: slice " << j << " unusable: " << e.what() << "\n";
            continue;
        }
        if (debug_images) {
            for (const auto& [stage, img] : stages) {
                char name[256];
                std::snprintf(name, sizeof(name), "%s/%s_slice%03zu_%s.png", out_dir.c_str(),
                              stem.c_str(), j, stage.c_str());
                write_png_gray(name, img);
            }
        }
    }
    write_volume(pv.processed, out_dir + "/" + stem + "_processed.oct");
    write_transforms_json(pv, out_dir + "/" + stem + "_transforms.json");
    std::cout << "processed " << vol.slices - failures << "/" << vol.slices << " slices to "
              << pp.target_height << "x" << pp.target_width << "\n";
    return 0;
}

int cmd_train(const RunConfig& cfg) {
    DataSet ds = load_dataset(cfg);
    TrainResult result = train_model<float>(cfg, ds, &std::cout);
    std::cout << "best val MAD " << result.best_val_mad << " px at epoch " << result.best_epoch
              << "\nbest checkpoint: " << result.best_checkpoint
              << "\nlast checkpoint: " << result.last_checkpoint << "\n";
    return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint, const std::string& split_name,
             bool overlays) {
    DataSet ds = load_dataset(cfg, /*need_test=*/true);
    std::vector<PreparedVolume>* volumes = nullptr;
    if (split_name == "train") volumes = &ds.train;
    else if (split_name == "val") volumes = &ds.val;
    else if (split_name == "test") volumes = &ds.test;
    else throw ConfigError("eval: unknown split '" + split_name + "'");

    auto params = build_model<float>(cfg.model_config(), cfg.seed());
    load_checkpoint(params, checkpoint);
    const std::string out_dir = cfg.get_string("out.dir") + "/eval_" + split_name;
    auto report = evaluate_split(params, *volumes, out_dir, overlays);
    std::cout << "surface,mad_mean,mad_std,rmse_mean,rmse_std\n";
    for (const auto& row : report.rows) {
        std::printf("%s,%.4f,%.4f,%.4f,%.4f\n", row.surface.c_str(), row.mad_mean, row.mad_std,
                    row.rmse_mean, row.rmse_std);
    }
    std::cout << "reports written to " << out_dir << "\n";
    return 0;
}

int cmd_consistency(const RunConfig& cfg, const std::string& checkpoint,
                    const std::string& volume_path) {
    Volume vol = read_volume(volume_path);
    PreparedVolume pv = prepare_volume(fs::path(volume_path).stem().string(), vol, nullptr,
                                       cfg.preprocess_config());
    auto params = build_model<float>(cfg.model_config(), cfg.seed());
    load_checkpoint(params, checkpoint);
    const double score = cross_slice_consistency(params, pv);
    std::cout << "consistency_px " << score << "\n";
    const std::string out_dir = cfg.get_string("out.dir");
    fs::create_directories(out_dir);
    std::ofstream f(out_dir + "/consistency.txt");
    f << score << "\n";
    return 0;
}

int cmd_plot(const RunConfig& cfg, const std::string& volume_path,
             const std::string& annotation_path) {
    Volume vol = read_volume(volume_path);
    const std::string out_dir = cfg.get_string("out.dir");
    fs::create_directories(out_dir);
    BoundarySet truth;
    bool has_truth = !annotation_path.empty();
    if (has_truth) truth = read_annotations(annotation_path, vol.slices, vol.width, vol.height);
    const std::string stem = fs::path(volume_path).stem().string();
    for (size_t j = 0; j < vol.slices; ++j) {
        char name[256];
        std::snprintf(name, sizeof(name), "%s/%s_slice%03zu.png", out_dir.c_str(), stem.c_str(),
                      j);
        write_overlay_png(name, vol.slice(j), nullptr, has_truth ? &truth : nullptr, j);
    }
    std::cout << "wrote " << vol.slices << " overlay images to " << out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"olseg: 2.5D retinal layer segmentation"};
    app.require_subcommand(1);
    app.fallthrough();  // global flags may follow the subcommand

    std::string config_path, out_dir;
    int64_t seed = -1;
    app.add_option("--config", config_path, "key = value configuration file");
    app.add_option("--seed", seed, "override the config seed");
    app.add_option("--out", out_dir, "override the output directory");

    auto* sc_phantom = app.add_subcommand("phantom-gen", "generate synthetic phantom volumes");
    auto* sc_pre = app.add_subcommand("preprocess", "flatten/crop/denoise/enhance a volume");
    std::string pre_input;
    bool pre_debug = false;
    sc_pre->add_option("--in", pre_input, "input volume file")->required();
    sc_pre->add_flag("--debug-images", pre_debug, "emit per-stage debug PNGs");
    auto* sc_train = app.add_subcommand("train", "train the segmentation network");
    auto* sc_eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
    std::string eval_ckpt, eval_split = "test";
    bool eval_no_overlays = false;
    sc_eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
    sc_eval->add_option("--split", eval_split, "train|val|test (default test)");
    sc_eval->add_flag("--no-overlays", eval_no_overlays, "skip overlay PNGs");
    auto* sc_cons = app.add_subcommand("consistency", "cross-slice consistency score");
    std::string cons_ckpt, cons_volume;
    sc_cons->add_option("--checkpoint", cons_ckpt, "checkpoint file")->required();
    sc_cons->add_option("--volume", cons_volume, "volume file")->required();
    auto* sc_plot = app.add_subcommand("plot", "render annotation overlays");
    std::string plot_volume, plot_ann;
    sc_plot->add_option("--volume", plot_volume, "volume file")->required();
    sc_plot->add_option("--annotations", plot_ann, "annotation CSV");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    try {
        RunConfig cfg;
        if (!config_path.empty()) cfg.load_file(config_path);
        if (seed >= 0) cfg.set("seed", std::to_string(seed));
        if (!out_dir.empty()) cfg.set("out.dir", out_dir);

        if (sc_phantom->parsed()) return cmd_phantom_gen(cfg);
        if (sc_pre->parsed()) return cmd_preprocess(cfg, pre_input, pre_debug);
        if (sc_train->parsed()) return cmd_train(cfg);
        if (sc_eval->parsed()) return cmd_eval(cfg, eval_ckpt, eval_split, !eval_no_overlays);
        if (sc_cons->parsed()) return cmd_consistency(cfg, cons_ckpt, cons_volume);
        if (sc_plot->parsed()) return cmd_plot(cfg, plot_volume, plot_ann);
        std::cerr << "error: no subcommand\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 4;
    } catch (const ShapeError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
