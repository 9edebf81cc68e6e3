#include "dcn/config.hpp"

#include <fstream>
#include <map>
#include <sstream>
#include <vector>

namespace dcn {

namespace {

struct KeyValue {
    std::string section, key, value;
    int line;
};

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

// Collects every problem; the caller throws one consolidated ConfigError.
struct Errors {
    std::vector<std::string> items;
    void add(int line, const std::string& what) {
        items.push_back("line " + std::to_string(line) + ": " + what);
    }
};

class Assign {
public:
    Assign(const KeyValue& kv, Errors& errs) : kv_(kv), errs_(errs) {}

    void to(int& dst) const {
        try {
            size_t pos = 0;
            int v = std::stoi(kv_.value, &pos);
            if (pos != kv_.value.size()) throw std::invalid_argument("");
            dst = v;
        } catch (...) {
            errs_.add(kv_.line, kv_.key + ": expected integer, got '" + kv_.value + "'");
        }
    }
    void to(double& dst) const {
        try {
            size_t pos = 0;
            double v = std::stod(kv_.value, &pos);
            if (pos != kv_.value.size()) throw std::invalid_argument("");
            dst = v;
        } catch (...) {
            errs_.add(kv_.line, kv_.key + ": expected number, got '" + kv_.value + "'");
        }
    }
    void to(uint64_t& dst) const {
        try {
            size_t pos = 0;
            unsigned long long v = std::stoull(kv_.value, &pos);
            if (pos != kv_.value.size()) throw std::invalid_argument("");
            dst = v;
        } catch (...) {
            errs_.add(kv_.line, kv_.key + ": expected unsigned integer, got '" + kv_.value + "'");
        }
    }
    void to(bool& dst) const {
        if (kv_.value == "true" || kv_.value == "1")
            dst = true;
        else if (kv_.value == "false" || kv_.value == "0")
            dst = false;
        else
            errs_.add(kv_.line, kv_.key + ": expected true/false, got '" + kv_.value + "'");
    }
    void to_int_list(std::vector<int>& dst, size_t count) const {
        std::vector<int> out;
        std::istringstream ss(kv_.value);
        std::string tok;
        bool ok = true;
        while (std::getline(ss, tok, ',')) {
            try {
                out.push_back(std::stoi(trim(tok)));
            } catch (...) {
                ok = false;
            }
        }
        if (!ok || out.size() != count)
            errs_.add(kv_.line, kv_.key + ": expected " + std::to_string(count) +
                                    " comma-separated integers, got '" + kv_.value + "'");
        else
            dst = out;
    }
    void to_double_list(std::array<double, 4>& dst) const {
        std::vector<double> out;
        std::istringstream ss(kv_.value);
        std::string tok;
        bool ok = true;
        while (std::getline(ss, tok, ',')) {
            try {
                out.push_back(std::stod(trim(tok)));
            } catch (...) {
                ok = false;
            }
        }
        if (!ok || out.size() != 4)
            errs_.add(kv_.line, kv_.key + ": expected 4 comma-separated numbers, got '" + kv_.value + "'");
        else
            for (size_t i = 0; i < 4; ++i) dst[i] = out[i];
    }

private:
    const KeyValue& kv_;
    Errors& errs_;
};

} // namespace

void Config::validate() const {
    network.validate();
    crf.validate();
    if (data.split_ratio <= 0.0 || data.split_ratio >= 1.0)
        throw ConfigError("data: split_ratio must be in (0,1)");
    if (data.synth_image_size < 48) throw ConfigError("data: synth_image_size must be >= 48");
    if (plan.batch_size < 1) throw ConfigError("training: batch_size must be >= 1");
    if (plan.lr <= 0.0) throw ConfigError("training: lr must be positive");
    if (hyper.lambda < 0.0 || hyper.lambda > 1.0)
        throw ConfigError("training: lambda must be in [0,1]");
}

Config parse_config_text(const std::string& text, const std::string& origin) {
    std::istringstream in(text);
    std::string line;
    std::string section;
    std::vector<KeyValue> kvs;
    Errors errs;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string s = line;
        size_t hash = s.find('#');
        if (hash != std::string::npos) s = s.substr(0, hash);
        s = trim(s);
        if (s.empty()) continue;
        if (s.front() == '[') {
            if (s.back() != ']') {
                errs.add(lineno, "malformed section header '" + s + "'");
                continue;
            }
            section = s.substr(1, s.size() - 2);
            if (section != "network" && section != "crf" && section != "training" &&
                section != "data" && section != "run")
                errs.add(lineno, "unknown section [" + section + "]");
            continue;
        }
        size_t eq = s.find('=');
        if (eq == std::string::npos) {
            errs.add(lineno, "expected 'key = value', got '" + s + "'");
            continue;
        }
        KeyValue kv{section, trim(s.substr(0, eq)), trim(s.substr(eq + 1)), lineno};
        if (kv.section.empty())
            errs.add(lineno, "key '" + kv.key + "' outside any section");
        else
            kvs.push_back(std::move(kv));
    }

    Config cfg;

    // Apply the preset first so later [network] keys override it.
    for (const auto& kv : kvs)
        if (kv.section == "network" && kv.key == "preset") {
            try {
                cfg.network = NetworkArch::named(kv.value);
            } catch (const ConfigError& e) {
                errs.add(kv.line, e.what());
            }
        }

    for (const auto& kv : kvs) {
        Assign a(kv, errs);
        if (kv.section == "network") {
            if (kv.key == "preset") continue; // already applied
            else if (kv.key == "lpl_in_channels") a.to(cfg.network.lpl_in_channels);
            else if (kv.key == "context_size") a.to(cfg.network.context_size);
            else if (kv.key == "bbox_size") a.to(cfg.network.bbox_size);
            else if (kv.key == "mask_size") a.to(cfg.network.mask_size);
            else if (kv.key == "lpl_channels") a.to_int_list(cfg.network.lpl_channels, 3);
            else if (kv.key == "lpl_const_blocks") a.to(cfg.network.lpl_const_blocks);
            else if (kv.key == "cgl_channels") a.to_int_list(cfg.network.cgl_channels, 4);
            else if (kv.key == "head_channels") a.to_int_list(cfg.network.head_channels, 2);
            else if (kv.key == "head_kernel") a.to(cfg.network.head_kernel);
            else if (kv.key == "dense_units") a.to(cfg.network.dense_units);
            else if (kv.key == "dropout") a.to(cfg.network.dropout);
            else if (kv.key == "cgl_classifier_input") {
                if (kv.value == "mask")
                    cfg.network.cgl_classifier_input = CglClassifierInput::Mask;
                else if (kv.value == "masked_image")
                    cfg.network.cgl_classifier_input = CglClassifierInput::MaskedImage;
                else
                    errs.add(kv.line, "cgl_classifier_input: expected mask|masked_image");
            } else
                errs.add(kv.line, "unknown key '" + kv.key + "' in [network]");
        } else if (kv.section == "crf") {
            if (kv.key == "iterations") a.to(cfg.crf.iterations);
            else if (kv.key == "spatial_theta") a.to(cfg.crf.spatial_theta);
            else if (kv.key == "bilateral_theta_spatial") a.to(cfg.crf.bilateral_theta_spatial);
            else if (kv.key == "bilateral_theta_intensity") a.to(cfg.crf.bilateral_theta_intensity);
            else if (kv.key == "w_spatial") a.to(cfg.crf.w_spatial);
            else if (kv.key == "w_bilateral") a.to(cfg.crf.w_bilateral);
            else if (kv.key == "compatibility") a.to_double_list(cfg.crf.compatibility);
            else if (kv.key == "support_radius") a.to(cfg.crf.support_radius);
            else if (kv.key == "infer_at_mask_res") a.to(cfg.crf.infer_at_mask_res);
            else errs.add(kv.line, "unknown key '" + kv.key + "' in [crf]");
        } else if (kv.section == "training") {
            if (kv.key == "batch_size") a.to(cfg.plan.batch_size);
            else if (kv.key == "lr") a.to(cfg.plan.lr);
            else if (kv.key == "epochs_lpl") a.to(cfg.plan.epochs_lpl);
            else if (kv.key == "epochs_cgl_seg") a.to(cfg.plan.epochs_cgl_seg);
            else if (kv.key == "epochs_cgl_cls") a.to(cfg.plan.epochs_cgl_cls);
            else if (kv.key == "epochs_joint") a.to(cfg.plan.epochs_joint);
            else if (kv.key == "joint_unfreeze_all") a.to(cfg.plan.joint_unfreeze_all);
            else if (kv.key == "lambda") a.to(cfg.hyper.lambda);
            else if (kv.key == "beta_pairwise") a.to(cfg.hyper.beta_pairwise);
            else if (kv.key == "aux_lpl_weight") a.to(cfg.hyper.aux_lpl_weight);
            else if (kv.key == "aux_cgl_weight") a.to(cfg.hyper.aux_cgl_weight);
            else if (kv.key == "seg_loss_in_joint") a.to(cfg.hyper.seg_loss_in_joint);
            else errs.add(kv.line, "unknown key '" + kv.key + "' in [training]");
        } else if (kv.section == "data") {
            if (kv.key == "synth_image_size") a.to(cfg.data.synth_image_size);
            else if (kv.key == "split_ratio") a.to(cfg.data.split_ratio);
            else if (kv.key == "augment") a.to(cfg.data.augment);
            else errs.add(kv.line, "unknown key '" + kv.key + "' in [data]");
        } else if (kv.section == "run") {
            if (kv.key == "seed") a.to(cfg.run.seed);
            else if (kv.key == "precision") {
                if (kv.value == "f32") cfg.run.precision = Precision::f32;
                else if (kv.value == "f64") cfg.run.precision = Precision::f64;
                else errs.add(kv.line, "precision: expected f32|f64");
            } else
                errs.add(kv.line, "unknown key '" + kv.key + "' in [run]");
        }
    }

    if (!errs.items.empty()) {
        std::string msg = "invalid configuration (" + origin + "):";
        for (const auto& e : errs.items) msg += "\n  " + e;
        throw ConfigError(msg);
    }
    cfg.validate();
    return cfg;
}

Config parse_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str(), path);
}

} // namespace dcn
