#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "olseg/common.hpp"
#include "olseg/loss.hpp"
#include "olseg/network.hpp"
#include "olseg/optimizer.hpp"
#include "olseg/phantom.hpp"
#include "olseg/preprocess.hpp"

namespace olseg {

// ---------------------------------------------------------------------------
// RunConfig: flat key = value text file with a fixed schema. Unknown keys are
// rejected; every key has a default. '#' starts a comment.
// ---------------------------------------------------------------------------

class RunConfig {
  public:
    RunConfig() : values_(defaults()) {}

    static const std::map<std::string, std::string>& defaults() {
        static const std::map<std::string, std::string> kDefaults = {
            {"data.dir", "data"},
            {"data.split", ""},  // empty -> data.dir + "/splits.txt"
            {"out.dir", "out"},
            {"seed", "1"},

            {"pp.gaussian_sigma", "1.0"},
            {"pp.clahe_tiles", "8"},
            {"pp.clahe_clip", "0.01"},
            {"pp.outlier_threshold_px", "60"},
            {"pp.target_height", "512"},
            {"pp.target_width", "512"},

            {"model.levels", "4"},
            {"model.base_channels", "32"},
            {"model.n_slices", "3"},
            {"model.n_surfaces", "5"},
            {"model.cff_bottleneck", "0"},
            {"model.cff_bias", "1"},
            {"model.plain_skip", "0"},

            {"train.lr", "0.001"},
            {"train.batch_size", "4"},
            {"train.weight_decay", "0.001"},
            {"train.decoupled_weight_decay", "0"},
            {"train.epochs", "200"},
            {"train.lambda1", "1.0"},
            {"train.lambda2", "1.0"},
            {"train.lambda3", "1.0"},
            {"train.beta1", "0.9"},
            {"train.beta2", "0.999"},
            {"train.eps", "1e-8"},

            {"phantom.count", "36"},
            {"phantom.train", "24"},
            {"phantom.val", "4"},
            {"phantom.test", "8"},
            {"phantom.slices", "16"},
            {"phantom.height", "128"},
            {"phantom.width", "128"},
            {"phantom.speckle", "0.18"},
            {"phantom.curvature", "6.0"},
            {"phantom.undulation", "1.5"},
            {"phantom.shadow_count", "2"},
            {"phantom.shadow_attenuation", "0.55"},
        };
        return kDefaults;
    }

    void load_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw ConfigError("config: cannot open " + path);
        std::string line;
        size_t lineno = 0;
        while (std::getline(f, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            auto trim = [](std::string s) {
                const auto b = s.find_first_not_of(" \t\r");
                if (b == std::string::npos) return std::string();
                const auto e = s.find_last_not_of(" \t\r");
                return s.substr(b, e - b + 1);
            };
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) {
                throw ConfigError("config: expected key = value at line " +
                                  std::to_string(lineno));
            }
            set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        }
    }

    void set(const std::string& key, const std::string& value) {
        if (!defaults().count(key)) throw ConfigError("config: unknown key '" + key + "'");
        values_[key] = value;
    }

    std::string get_string(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("config: unknown key '" + key + "'");
        return it->second;
    }

    double get_double(const std::string& key) const {
        const std::string s = get_string(key);
        try {
            size_t pos = 0;
            const double v = std::stod(s, &pos);
            if (pos != s.size()) throw std::invalid_argument(s);
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config: key '" + key + "' is not a number: '" + s + "'");
        }
    }

    long get_int(const std::string& key) const {
        const std::string s = get_string(key);
        try {
            size_t pos = 0;
            const long v = std::stol(s, &pos);
            if (pos != s.size()) throw std::invalid_argument(s);
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config: key '" + key + "' is not an integer: '" + s + "'");
        }
    }

    bool get_bool(const std::string& key) const {
        const std::string s = get_string(key);
        if (s == "1" || s == "true") return true;
        if (s == "0" || s == "false") return false;
        throw ConfigError("config: key '" + key + "' is not a boolean: '" + s + "'");
    }

    uint64_t seed() const { return static_cast<uint64_t>(get_int("seed")); }

    std::string split_path() const {
        const std::string s = get_string("data.split");
        return s.empty() ? get_string("data.dir") + "/splits.txt" : s;
    }

    PreprocessConfig preprocess_config() const {
        PreprocessConfig pp;
        pp.gaussian_sigma = get_double("pp.gaussian_sigma");
        pp.clahe_tile_rows = static_cast<size_t>(get_int("pp.clahe_tiles"));
        pp.clahe_tile_cols = pp.clahe_tile_rows;
        pp.clahe_clip = get_double("pp.clahe_clip");
        pp.outlier_threshold_px = static_cast<int>(get_int("pp.outlier_threshold_px"));
        pp.target_height = static_cast<size_t>(get_int("pp.target_height"));
        pp.target_width = static_cast<size_t>(get_int("pp.target_width"));
        return pp;
    }

    ModelConfig model_config() const {
        ModelConfig m;
        m.levels = static_cast<size_t>(get_int("model.levels"));
        m.base_channels = static_cast<size_t>(get_int("model.base_channels"));
        m.n_slices = static_cast<size_t>(get_int("model.n_slices"));
        m.n_surfaces = static_cast<size_t>(get_int("model.n_surfaces"));
        m.input_height = static_cast<size_t>(get_int("pp.target_height"));
        m.input_width = static_cast<size_t>(get_int("pp.target_width"));
        m.cff_bottleneck = get_bool("model.cff_bottleneck");
        m.cff_bias = get_bool("model.cff_bias");
        m.plain_skip = get_bool("model.plain_skip");
        if (m.plain_skip) m.n_slices = 1;
        m.validate();
        return m;
    }

    AdamConfig adam_config() const {
        AdamConfig a;
        a.lr = get_double("train.lr");
        a.beta1 = get_double("train.beta1");
        a.beta2 = get_double("train.beta2");
        a.eps = get_double("train.eps");
        a.weight_decay = get_double("train.weight_decay");
        a.decoupled_weight_decay = get_bool("train.decoupled_weight_decay");
        return a;
    }

    LossWeights loss_weights() const {
        LossWeights w;
        w.lambda1 = get_double("train.lambda1");
        w.lambda2 = get_double("train.lambda2");
        w.lambda3 = get_double("train.lambda3");
        return w;
    }

    PhantomConfig phantom_config(uint64_t volume_index) const {
        PhantomConfig p;
        p.seed = Rng::derive_seed(seed(), volume_index);
        p.slices = static_cast<size_t>(get_int("phantom.slices"));
        p.height = static_cast<size_t>(get_int("phantom.height"));
        p.width = static_cast<size_t>(get_int("phantom.width"));
        p.speckle_contrast = get_double("phantom.speckle");
        p.curvature_amplitude = get_double("phantom.curvature");
        p.undulation_amplitude = get_double("phantom.undulation");
        p.shadow_count = static_cast<int>(get_int("phantom.shadow_count"));
        p.shadow_attenuation = get_double("phantom.shadow_attenuation");
        return p;
    }

  private:
    std::map<std::string, std::string> values_;
};

}  // namespace olseg
