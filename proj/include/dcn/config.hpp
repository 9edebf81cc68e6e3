#pragma once

// INI-style configuration: sections of `key = value` lines with `#`
// comments. Unknown sections or keys are rejected; all problems are
// reported in one consolidated error.

#include <string>

#include "dcn/crf.hpp"
#include "dcn/network.hpp"
#include "dcn/train.hpp"

namespace dcn {

struct DataConfig {
    int synth_image_size = 128;
    double split_ratio = 0.8;
    bool augment = true;
};

struct RunConfig {
    uint64_t seed = 1;
    Precision precision = Precision::f32;
};

struct Config {
    NetworkArch network = NetworkArch::named("desk");
    CrfConfig crf;
    TrainPlanConfig plan;
    TrainHyper hyper;
    DataConfig data;
    RunConfig run;

    void validate() const; // cross-field checks on top of per-section ones
};

Config parse_config_text(const std::string& text, const std::string& origin = "<config>");
Config parse_config_file(const std::string& path);

} // namespace dcn
