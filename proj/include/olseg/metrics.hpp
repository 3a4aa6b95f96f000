#pragma once

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "olseg/common.hpp"
#include "olseg/data_io.hpp"

namespace olseg {

// ---------------------------------------------------------------------------
// Boundary position error metrics over valid columns, in pixels, and their
// aggregation into the per-surface mean/std report.
// ---------------------------------------------------------------------------

inline double mad(const std::vector<double>& pred, const std::vector<double>& gt,
                  const std::vector<uint8_t>& valid) {
    if (pred.size() != gt.size() || pred.size() != valid.size()) {
        throw ShapeError("mad: column count mismatch");
    }
    double total = 0;
    size_t n = 0;
    for (size_t u = 0; u < pred.size(); ++u) {
        if (!valid[u]) continue;
        total += std::fabs(pred[u] - gt[u]);
        ++n;
    }
    if (n == 0) throw DataError("mad: no valid columns");
    return total / static_cast<double>(n);
}

inline double rmse(const std::vector<double>& pred, const std::vector<double>& gt,
                   const std::vector<uint8_t>& valid) {
    if (pred.size() != gt.size() || pred.size() != valid.size()) {
        throw ShapeError("rmse: column count mismatch");
    }
    double total = 0;
    size_t n = 0;
    for (size_t u = 0; u < pred.size(); ++u) {
        if (!valid[u]) continue;
        const double d = pred[u] - gt[u];
        total += d * d;
        ++n;
    }
    if (n == 0) throw DataError("rmse: no valid columns");
    return std::sqrt(total / static_cast<double>(n));
}

// Per-surface scores of one scan (one volume).
struct ScanScores {
    std::vector<double> mad_px;   // n_surfaces
    std::vector<double> rmse_px;  // n_surfaces
};

struct MetricsRow {
    std::string surface;
    double mad_mean = 0, mad_std = 0, rmse_mean = 0, rmse_std = 0;
};

struct MetricsReport {
    std::vector<MetricsRow> rows;  // one per surface plus the Average row
};

// Mean and population standard deviation (divide by N) per surface across
// scans; the Average row averages the surfaces within each scan first.
inline MetricsReport aggregate(const std::vector<ScanScores>& scans) {
    if (scans.empty()) throw DataError("aggregate: no scans");
    const size_t ns = scans[0].mad_px.size();
    for (const auto& s : scans) {
        if (s.mad_px.size() != ns || s.rmse_px.size() != ns) {
            throw ShapeError("aggregate: inconsistent surface counts");
        }
    }
    auto mean_std = [](const std::vector<double>& xs) {
        double m = 0;
        for (double x : xs) m += x;
        m /= static_cast<double>(xs.size());
        double var = 0;
        for (double x : xs) var += (x - m) * (x - m);
        var /= static_cast<double>(xs.size());
        return std::pair<double, double>(m, std::sqrt(var));
    };
    MetricsReport report;
    for (size_t k = 0; k < ns; ++k) {
        std::vector<double> mads, rmses;
        for (const auto& s : scans) {
            mads.push_back(s.mad_px[k]);
            rmses.push_back(s.rmse_px[k]);
        }
        MetricsRow row;
        row.surface = (k < kSurfaceNames.size()) ? kSurfaceNames[k] : ("surface" + std::to_string(k));
        std::tie(row.mad_mean, row.mad_std) = mean_std(mads);
        std::tie(row.rmse_mean, row.rmse_std) = mean_std(rmses);
        report.rows.push_back(row);
    }
    std::vector<double> avg_mads, avg_rmses;
    for (const auto& s : scans) {
        double am = 0, ar = 0;
        for (size_t k = 0; k < ns; ++k) {
            am += s.mad_px[k];
            ar += s.rmse_px[k];
        }
        avg_mads.push_back(am / static_cast<double>(ns));
        avg_rmses.push_back(ar / static_cast<double>(ns));
    }
    MetricsRow avg;
    avg.surface = "Average";
    std::tie(avg.mad_mean, avg.mad_std) = mean_std(avg_mads);
    std::tie(avg.rmse_mean, avg.rmse_std) = mean_std(avg_rmses);
    report.rows.push_back(avg);
    return report;
}

inline void write_metrics_csv(const MetricsReport& r, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw DataError("write_metrics_csv: cannot open " + path);
    f << "surface,mad_mean,mad_std,rmse_mean,rmse_std\n";
    char buf[256];
    for (const auto& row : r.rows) {
        std::snprintf(buf, sizeof(buf), "%s,%.9g,%.9g,%.9g,%.9g\n", row.surface.c_str(),
                      row.mad_mean, row.mad_std, row.rmse_mean, row.rmse_std);
        f << buf;
    }
}

inline void write_metrics_json(const MetricsReport& r, const std::string& path) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& row : r.rows) {
        j.push_back({{"surface", row.surface},
                     {"mad_mean", row.mad_mean},
                     {"mad_std", row.mad_std},
                     {"rmse_mean", row.rmse_mean},
                     {"rmse_std", row.rmse_std}});
    }
    std::ofstream f(path);
    if (!f) throw DataError("write_metrics_json: cannot open " + path);
    f << j.dump(2) << "\n";
}

inline MetricsReport read_metrics_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("read_metrics_json: cannot open " + path);
    nlohmann::json j;
    f >> j;
    MetricsReport r;
    for (const auto& e : j) {
        MetricsRow row;
        row.surface = e.at("surface").get<std::string>();
        row.mad_mean = e.at("mad_mean").get<double>();
        row.mad_std = e.at("mad_std").get<double>();
        row.rmse_mean = e.at("rmse_mean").get<double>();
        row.rmse_std = e.at("rmse_std").get<double>();
        r.rows.push_back(row);
    }
    return r;
}

}  // namespace olseg
