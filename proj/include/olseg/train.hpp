#pragma once

#include <filesystem>
#include <iostream>

#include "olseg/checkpoint.hpp"
#include "olseg/config.hpp"
#include "olseg/data_io.hpp"
#include "olseg/loss.hpp"
#include "olseg/metrics.hpp"
#include "olseg/optimizer.hpp"
#include "olseg/png_io.hpp"
#include "olseg/preprocess.hpp"

namespace olseg {

// ---------------------------------------------------------------------------
// Dataset preparation: preprocess every slice, map annotations into processed
// coordinates, synthesize class maps. Predictions made in processed space map
// back through the recorded transforms for original-space scoring.
// ---------------------------------------------------------------------------

struct PreparedVolume {
    std::string id;
    Volume original;
    Volume processed;                        // target-size slices
    std::vector<TransformRecord> transforms; // per slice
    std::vector<uint8_t> usable;             // per slice
    BoundarySet truth;                       // original-space annotations
    bool has_truth = false;
    std::vector<SliceTruth> supervision;     // processed-space, per slice
    std::vector<uint8_t> labeled;            // per slice
};

namespace detail {

// original-space annotation rows -> processed-space supervision for one slice
inline SliceTruth map_truth_to_processed(const BoundarySet& truth, size_t slice,
                                         const TransformRecord& rec, size_t n_classes) {
    SliceTruth st;
    st.height = rec.processed_height;
    st.width = rec.processed_width;
    st.n_surfaces = truth.n_surfaces;
    st.n_classes = n_classes;
    const size_t wp = rec.processed_width;
    const size_t wo = rec.original_width;
    st.boundary_rows.assign(truth.n_surfaces * wp, 0.0);
    st.boundary_valid.assign(truth.n_surfaces * wp, 0);
    for (size_t k = 0; k < truth.n_surfaces; ++k) {
        // flattened-space rows per original column
        std::vector<double> flat(wo, 0.0);
        for (size_t u = 0; u < wo; ++u) {
            if (!truth.is_valid(slice, k, u)) continue;
            flat[u] = truth.row(slice, k, u) + rec.column_shifts[u] -
                      static_cast<double>(rec.crop_top);
        }
        for (size_t up = 0; up < wp; ++up) {
            const double co = (static_cast<double>(up) + 0.5) / rec.resize_scale_cols - 0.5;
            const double cc = std::min(std::max(co, 0.0), static_cast<double>(wo - 1));
            const size_t u0 = static_cast<size_t>(cc);
            const size_t u1 = std::min(u0 + 1, wo - 1);
            const double f = cc - static_cast<double>(u0);
            if (!truth.is_valid(slice, k, u0) || !truth.is_valid(slice, k, u1)) continue;
            const double row_f = (1.0 - f) * flat[u0] + f * flat[u1];
            double row_p = (row_f + 0.5) * rec.resize_scale_rows - 0.5;
            row_p = std::min(std::max(row_p, 0.0),
                             static_cast<double>(rec.processed_height - 1));
            st.boundary_rows[k * wp + up] = row_p;
            st.boundary_valid[k * wp + up] = 1;
        }
    }
    st.class_map = mask_from_boundaries(st.boundary_rows.data(), st.boundary_valid.data(),
                                        st.n_surfaces, st.height, st.width);
    return st;
}

}  // namespace detail

// Preprocesses all slices; unusable slices are zero-filled, flagged, and
// reported on stderr so the run can continue.
inline PreparedVolume prepare_volume(const std::string& id, const Volume& vol,
                                     const BoundarySet* truth, const PreprocessConfig& pp,
                                     size_t n_classes = 6) {
    PreparedVolume pv;
    pv.id = id;
    pv.original = vol;
    pv.processed = Volume(vol.slices, pp.target_height, pp.target_width);
    pv.processed.row_spacing_um = vol.row_spacing_um;
    pv.processed.col_spacing_um = vol.col_spacing_um;
    pv.processed.slice_spacing_um = vol.slice_spacing_um;
    pv.transforms.resize(vol.slices);
    pv.usable.assign(vol.slices, 0);
    pv.labeled.assign(vol.slices, 0);
    pv.supervision.resize(vol.slices);
    if (truth) {
        pv.truth = *truth;
        pv.has_truth = true;
    }
    for (size_t j = 0; j < vol.slices; ++j) {
        try {
            auto [img, rec] = preprocess_bscan(vol.slice(j), pp);
            pv.processed.set_slice(j, img);
            pv.transforms[j] = std::move(rec);
            pv.usable[j] = 1;
        } catch (const DataError& e) {
            std::cerr << "warning: volume " << id << " slice " << j << ": " << e.what() << "\n";
            continue;
        }
        if (truth) {
            SliceTruth st = detail::map_truth_to_processed(*truth, j, pv.transforms[j], n_classes);
            bool any = false;
            for (uint8_t v : st.boundary_valid) any = any || v;
            if (any) {
                pv.supervision[j] = std::move(st);
                pv.labeled[j] = 1;
            }
        }
    }
    return pv;
}

// n-slice window of processed slices as network input tensors.
template <typename S>
std::vector<Tensor<S>> window_tensors(const PreparedVolume& pv, size_t center, size_t n) {
    auto imgs = window_slices(pv.processed, center, n);
    std::vector<Tensor<S>> out;
    for (const auto& img : imgs) {
        std::vector<S> vals(img.numel());
        for (size_t i = 0; i < vals.size(); ++i) vals[i] = static_cast<S>(img.pixels[i]);
        out.push_back(Tensor<S>::from_vector({img.height, img.width, 1}, std::move(vals)));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Prediction and scoring in original coordinates.
// ---------------------------------------------------------------------------

// processed-space surfaces (n_surfaces x Wp) -> original-space rows per column
inline std::vector<std::vector<double>> surfaces_to_original(
    const std::vector<std::vector<double>>& surfaces_p, const TransformRecord& rec) {
    const size_t ns = surfaces_p.size();
    const size_t wo = rec.original_width;
    const size_t wp = rec.processed_width;
    std::vector<std::vector<double>> out(ns, std::vector<double>(wo, 0.0));
    for (size_t k = 0; k < ns; ++k) {
        for (size_t u = 0; u < wo; ++u) {
            double cp = (static_cast<double>(u) + 0.5) * rec.resize_scale_cols - 0.5;
            cp = std::min(std::max(cp, 0.0), static_cast<double>(wp - 1));
            const size_t p0 = static_cast<size_t>(cp);
            const size_t p1 = std::min(p0 + 1, wp - 1);
            const double f = cp - static_cast<double>(p0);
            const double row_p = (1.0 - f) * surfaces_p[k][p0] + f * surfaces_p[k][p1];
            const double row_c = (row_p + 0.5) / rec.resize_scale_rows - 0.5;
            out[k][u] = row_c + static_cast<double>(rec.crop_top) - rec.column_shifts[u];
        }
    }
    return out;
}

template <typename S>
std::vector<std::vector<double>> predict_slice_original(ModelParams<S>& params,
                                                        const PreparedVolume& pv, size_t slice) {
    NoGradGuard guard;
    auto inputs = window_tensors<S>(pv, slice, params.config.n_slices);
    NetworkOutput<S> out = params.config.plain_skip
                               ? baseline_forward(params, inputs[inputs.size() / 2], BnMode::kEval)
                               : forward(params, inputs, BnMode::kEval);
    check_finite(out.surfaces, "predicted surfaces");
    const size_t ns = out.surfaces.dim(0);
    const size_t wp = out.surfaces.dim(1);
    std::vector<std::vector<double>> surf_p(ns, std::vector<double>(wp));
    for (size_t k = 0; k < ns; ++k)
        for (size_t u = 0; u < wp; ++u)
            surf_p[k][u] = static_cast<double>(out.surfaces.at(k, u));
    return surfaces_to_original(surf_p, pv.transforms[slice]);
}

// Per-surface MAD/RMSE of one scan: per-slice scores over valid columns,
// averaged over the labeled slices.
inline ScanScores score_scan(const std::vector<std::vector<std::vector<double>>>& preds,
                             const std::vector<size_t>& slice_ids, const BoundarySet& truth) {
    if (preds.empty()) throw DataError("score_scan: no labeled slices");
    const size_t ns = truth.n_surfaces;
    ScanScores scores;
    scores.mad_px.assign(ns, 0.0);
    scores.rmse_px.assign(ns, 0.0);
    std::vector<size_t> counted(ns, 0);
    for (size_t i = 0; i < preds.size(); ++i) {
        const size_t j = slice_ids[i];
        for (size_t k = 0; k < ns; ++k) {
            std::vector<double> gt(truth.width), pred(truth.width);
            std::vector<uint8_t> valid(truth.width);
            bool any = false;
            for (size_t u = 0; u < truth.width; ++u) {
                gt[u] = truth.row(j, k, u);
                valid[u] = truth.is_valid(j, k, u) ? 1 : 0;
                pred[u] = preds[i][k][u];
                any = any || valid[u];
            }
            if (!any) continue;
            scores.mad_px[k] += mad(pred, gt, valid);
            scores.rmse_px[k] += rmse(pred, gt, valid);
            ++counted[k];
        }
    }
    for (size_t k = 0; k < ns; ++k) {
        if (counted[k] == 0) throw DataError("score_scan: surface has no labeled columns");
        scores.mad_px[k] /= static_cast<double>(counted[k]);
        scores.rmse_px[k] /= static_cast<double>(counted[k]);
    }
    return scores;
}

// Predictions for a list of slices, parallel across slices (eval mode is pure
// so parameter tensors are shared read-only), collected in slice order.
template <typename S>
std::vector<std::vector<std::vector<double>>> predict_slices_original(
    ModelParams<S>& params, const PreparedVolume& pv, const std::vector<size_t>& ids) {
    std::vector<std::vector<std::vector<double>>> preds(ids.size());
    std::vector<std::string> errors(ids.size());
    ThreadPool::instance().run_chunks(ids.size(), 1, [&](size_t, size_t b, size_t e) {
        for (size_t i = b; i < e; ++i) {
            try {
                preds[i] = predict_slice_original(params, pv, ids[i]);
            } catch (const std::exception& ex) {
                errors[i] = ex.what();
            }
        }
    });
    for (const auto& err : errors) {
        if (!err.empty()) throw NumericError("prediction failed: " + err);
    }
    return preds;
}

template <typename S>
ScanScores evaluate_volume(ModelParams<S>& params, const PreparedVolume& pv) {
    if (!pv.has_truth) throw DataError("evaluate_volume: no annotations for " + pv.id);
    std::vector<size_t> ids;
    for (size_t j = 0; j < pv.original.slices; ++j) {
        if (!pv.usable[j] || !pv.labeled[j]) {
            if (!pv.usable[j]) {
                std::cerr << "warning: skipping unusable slice " << j << " of " << pv.id << "\n";
            }
            continue;
        }
        ids.push_back(j);
    }
    auto preds = predict_slices_original(params, pv, ids);
    return score_scan(preds, ids, pv.truth);
}

// Mean absolute adjacent-slice difference of predicted surfaces, in original-
// coordinate pixels, over all surfaces, columns, and consecutive slice pairs.
inline double consistency_from_predictions(
    const std::vector<std::vector<std::vector<double>>>& preds) {
    if (preds.size() < 2) throw DataError("consistency: need at least 2 slices");
    double total = 0;
    size_t n = 0;
    for (size_t j = 0; j + 1 < preds.size(); ++j) {
        for (size_t k = 0; k < preds[j].size(); ++k) {
            for (size_t u = 0; u < preds[j][k].size(); ++u) {
                total += std::fabs(preds[j + 1][k][u] - preds[j][k][u]);
                ++n;
            }
        }
    }
    return total / static_cast<double>(n);
}

// Consistency over pairs of adjacent usable slices.
template <typename S>
double cross_slice_consistency(ModelParams<S>& params, const PreparedVolume& pv) {
    if (pv.original.slices < 2) throw DataError("consistency: volume has fewer than 2 slices");
    std::vector<size_t> ids;
    for (size_t j = 0; j < pv.original.slices; ++j) {
        if (pv.usable[j]) ids.push_back(j);
    }
    if (ids.size() < 2) throw DataError("consistency: fewer than 2 usable slices");
    auto preds = predict_slices_original(params, pv, ids);
    double total = 0;
    size_t n = 0;
    for (size_t i = 0; i + 1 < ids.size(); ++i) {
        if (ids[i + 1] != ids[i] + 1) continue;  // only physically adjacent pairs
        for (size_t k = 0; k < preds[i].size(); ++k)
            for (size_t u = 0; u < preds[i][k].size(); ++u) {
                total += std::fabs(preds[i + 1][k][u] - preds[i][k][u]);
                ++n;
            }
    }
    if (n == 0) throw DataError("consistency: no adjacent usable slice pairs");
    return total / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Training.
// ---------------------------------------------------------------------------

struct TrainResult {
    double best_val_mad = 0;
    size_t best_epoch = 0;
    double final_train_loss = 0;
    std::string best_checkpoint;
    std::string last_checkpoint;
};

struct DataSet {
    std::vector<PreparedVolume> train, val, test;
};

inline Volume load_volume_by_id(const std::string& data_dir, const std::string& id) {
    return read_volume(data_dir + "/" + id + ".oct");
}

inline DataSet load_dataset(const RunConfig& cfg, bool need_test = false) {
    const std::string dir = cfg.get_string("data.dir");
    SplitManifest split = read_split(cfg.split_path());
    const PreprocessConfig pp = cfg.preprocess_config();
    auto load_group = [&](const std::vector<std::string>& ids) {
        std::vector<PreparedVolume> out;
        for (const auto& id : ids) {
            Volume vol = load_volume_by_id(dir, id);
            const std::string ann_path = dir + "/" + id + ".csv";
            BoundarySet truth;
            bool has = std::filesystem::exists(ann_path);
            if (has) truth = read_annotations(ann_path, vol.slices, vol.width, vol.height);
            out.push_back(prepare_volume(id, vol, has ? &truth : nullptr, pp));
        }
        return out;
    };
    DataSet ds;
    ds.train = load_group(split.train);
    ds.val = load_group(split.val);
    if (need_test) ds.test = load_group(split.test);
    return ds;
}

template <typename S>
double mean_val_mad(ModelParams<S>& params, std::vector<PreparedVolume>& volumes) {
    std::vector<ScanScores> scores;
    for (auto& pv : volumes) scores.push_back(evaluate_volume(params, pv));
    return aggregate(scores).rows.back().mad_mean;
}

// Full training loop: shuffled center-slice samples with n-slice windows,
// gradient averaging over the batch, Adam updates, per-epoch validation MAD,
// best-on-validation checkpointing. Deterministic given config + seed.
template <typename S>
TrainResult train_model(const RunConfig& cfg, DataSet& ds, std::ostream* log_stream = nullptr) {
    const ModelConfig mcfg = cfg.model_config();
    const AdamConfig acfg = cfg.adam_config();
    const LossWeights weights = cfg.loss_weights();
    const size_t batch_size = static_cast<size_t>(cfg.get_int("train.batch_size"));
    const size_t epochs = static_cast<size_t>(cfg.get_int("train.epochs"));
    if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
    const std::string out_dir = cfg.get_string("out.dir");
    std::filesystem::create_directories(out_dir);

    auto params = build_model<S>(mcfg, cfg.seed());
    auto trainable = trainable_parameters(params);
    OptimState<S> opt_state;

    std::vector<std::pair<size_t, size_t>> samples;  // (volume, slice)
    for (size_t v = 0; v < ds.train.size(); ++v) {
        for (size_t j = 0; j < ds.train[v].original.slices; ++j) {
            if (ds.train[v].usable[j] && ds.train[v].labeled[j]) samples.emplace_back(v, j);
        }
    }
    if (samples.empty()) throw DataError("train: no labeled training samples");

    std::ofstream log_file(out_dir + "/loss_log.csv");
    if (!log_file) throw DataError("train: cannot open loss log in " + out_dir);
    log_file << "epoch,train_loss,val_mad\n";

    TrainResult result;
    result.best_val_mad = 1e300;
    result.best_checkpoint = out_dir + "/checkpoint_best.ckpt";
    result.last_checkpoint = out_dir + "/checkpoint_last.ckpt";

    for (size_t epoch = 1; epoch <= epochs; ++epoch) {
        Rng shuffle_rng(Rng::derive_seed(cfg.seed(), 1000 + epoch));
        auto order = samples;
        for (size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[shuffle_rng.below(i)]);
        }
        double epoch_loss = 0;
        size_t sample_count = 0;
        for (size_t start = 0; start < order.size(); start += batch_size) {
            const size_t end = std::min(order.size(), start + batch_size);
            const size_t bn = end - start;
            zero_gradients(params);
            // Each sample of the batch runs on its own parameter copy so the
            // graphs are thread-independent; gradients and running statistics
            // merge back in sample order, so results do not depend on how many
            // workers ran.
            std::vector<ModelParams<S>> workers;
            workers.reserve(bn);
            for (size_t i = 0; i < bn; ++i) workers.push_back(clone_params(params));
            std::vector<double> sample_loss(bn, 0.0);
            std::vector<std::string> sample_error(bn);
            ThreadPool::instance().run_chunks(bn, 1, [&](size_t, size_t b, size_t e) {
                for (size_t i = b; i < e; ++i) {
                    try {
                        auto& pv = ds.train[order[start + i].first];
                        const size_t j = order[start + i].second;
                        auto inputs = window_tensors<S>(pv, j, mcfg.n_slices);
                        NetworkOutput<S> out =
                            mcfg.plain_skip
                                ? baseline_forward(workers[i], inputs[inputs.size() / 2],
                                                   BnMode::kTrain)
                                : forward(workers[i], inputs, BnMode::kTrain);
                        const auto& st = pv.supervision[j];
                        auto loss = total_loss(mask_ce(out.mask_probs, st),
                                               line_ce(out.surface_probs, st),
                                               line_l1(out.surfaces, st), weights);
                        sample_loss[i] = static_cast<double>(loss.item());
                        backward(scale(loss, S(1) / static_cast<S>(bn)));
                    } catch (const std::exception& ex) {
                        sample_error[i] = ex.what();
                    }
                }
            });
            for (size_t i = 0; i < bn; ++i) {
                if (!sample_error[i].empty()) {
                    throw NumericError("train: sample failed at epoch " + std::to_string(epoch) +
                                       ": " + sample_error[i]);
                }
                if (!std::isfinite(sample_loss[i])) {
                    throw NumericError("train: loss diverged (non-finite) at epoch " +
                                       std::to_string(epoch));
                }
                epoch_loss += sample_loss[i];
                ++sample_count;
            }
            // ordered gradient merge
            auto master_named = named_parameters(params);
            for (size_t i = 0; i < bn; ++i) {
                auto worker_named = named_parameters(workers[i]);
                for (size_t t = 0; t < master_named.size(); ++t) {
                    if (!worker_named[t].second.has_grad()) continue;
                    auto& dst = master_named[t].second.grad();
                    const auto& src = worker_named[t].second.grad();
                    for (size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
                }
            }
            // running statistics: mean of the per-sample estimates
            auto master_buffers = named_buffers(params);
            std::vector<std::vector<std::pair<std::string, std::vector<S>*>>> worker_buffers;
            for (size_t i = 0; i < bn; ++i) worker_buffers.push_back(named_buffers(workers[i]));
            for (size_t t = 0; t < master_buffers.size(); ++t) {
                auto& dst = *master_buffers[t].second;
                for (size_t j = 0; j < dst.size(); ++j) {
                    double acc = 0;
                    for (size_t i = 0; i < bn; ++i) acc += (*worker_buffers[i][t].second)[j];
                    dst[j] = static_cast<S>(acc / static_cast<double>(bn));
                }
            }
            adam_step(trainable, opt_state, acfg);
        }
        epoch_loss /= static_cast<double>(sample_count);

        double val_mad = 0;
        if (!ds.val.empty()) {
            val_mad = mean_val_mad(params, ds.val);
            if (val_mad < result.best_val_mad) {
                result.best_val_mad = val_mad;
                result.best_epoch = epoch;
                save_checkpoint(params, result.best_checkpoint);
            }
        }
        result.final_train_loss = epoch_loss;
        char row[128];
        std::snprintf(row, sizeof(row), "%zu,%.9g,%.9g\n", epoch, epoch_loss, val_mad);
        log_file << row;
        log_file.flush();
        if (log_stream) {
            *log_stream << "epoch " << epoch << "/" << epochs << " train_loss " << epoch_loss
                        << " val_mad " << val_mad << "\n";
        }
    }
    save_checkpoint(params, result.last_checkpoint);
    if (ds.val.empty()) {
        save_checkpoint(params, result.best_checkpoint);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Overlays: original-resolution PNG with predicted (solid, colored) and truth
// (dashed, white) boundaries.
// ---------------------------------------------------------------------------

inline void write_overlay_png(const std::string& path, const Image& scan,
                              const std::vector<std::vector<double>>* predictions,
                              const BoundarySet* truth, size_t slice) {
    const size_t h = scan.height, w = scan.width;
    std::vector<uint8_t> rgb(h * w * 3);
    for (size_t i = 0; i < h * w; ++i) {
        const float v = std::min(std::max(scan.pixels[i], 0.0f), 1.0f);
        const uint8_t g = static_cast<uint8_t>(std::lround(v * 255.0f));
        rgb[i * 3 + 0] = rgb[i * 3 + 1] = rgb[i * 3 + 2] = g;
    }
    static const uint8_t kColors[5][3] = {
        {230, 60, 60}, {60, 200, 60}, {70, 120, 255}, {230, 200, 40}, {220, 70, 220}};
    auto put = [&](long row, size_t col, const uint8_t* color) {
        if (row < 0 || row >= static_cast<long>(h)) return;
        const size_t i = static_cast<size_t>(row) * w + col;
        rgb[i * 3 + 0] = color[0];
        rgb[i * 3 + 1] = color[1];
        rgb[i * 3 + 2] = color[2];
    };
    if (truth) {
        static const uint8_t kWhite[3] = {255, 255, 255};
        for (size_t k = 0; k < truth->n_surfaces; ++k)
            for (size_t u = 0; u < w; ++u) {
                if (!truth->is_valid(slice, k, u)) continue;
                if ((u / 3) % 2 == 1) continue;  // dashed
                put(std::lround(truth->row(slice, k, u)), u, kWhite);
            }
    }
    if (predictions) {
        for (size_t k = 0; k < predictions->size(); ++k)
            for (size_t u = 0; u < w && u < (*predictions)[k].size(); ++u) {
                put(std::lround((*predictions)[k][u]), u, kColors[k % 5]);
            }
    }
    write_png_rgb(path, h, w, rgb);
}

// Full evaluation command: metrics.csv/json plus per-slice overlays. Each
// labeled slice is predicted once; scores and overlays share the predictions.
template <typename S>
MetricsReport evaluate_split(ModelParams<S>& params, std::vector<PreparedVolume>& volumes,
                             const std::string& out_dir, bool overlays = true) {
    if (volumes.empty()) throw DataError("evaluate_split: no volumes");
    std::filesystem::create_directories(out_dir);
    std::vector<ScanScores> scores;
    for (auto& pv : volumes) {
        if (!pv.has_truth) throw DataError("evaluate_split: no annotations for " + pv.id);
        std::vector<size_t> ids;
        for (size_t j = 0; j < pv.original.slices; ++j) {
            if (!pv.usable[j] || !pv.labeled[j]) {
                if (!pv.usable[j]) {
                    std::cerr << "warning: skipping unusable slice " << j << " of " << pv.id
                              << "\n";
                }
                continue;
            }
            ids.push_back(j);
        }
        auto preds = predict_slices_original(params, pv, ids);
        scores.push_back(score_scan(preds, ids, pv.truth));
        if (!overlays) continue;
        for (size_t i = 0; i < ids.size(); ++i) {
            char name[256];
            std::snprintf(name, sizeof(name), "%s/overlay_%s_slice%03zu.png", out_dir.c_str(),
                          pv.id.c_str(), ids[i]);
            write_overlay_png(name, pv.original.slice(ids[i]), &preds[i], &pv.truth, ids[i]);
        }
    }
    auto report = aggregate(scores);
    write_metrics_csv(report, out_dir + "/metrics.csv");
    write_metrics_json(report, out_dir + "/metrics.json");
    return report;
}

}  // namespace olseg
