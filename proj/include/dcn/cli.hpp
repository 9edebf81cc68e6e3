#pragma once

// Command-line entry point: dataset synthesis, training, evaluation,
// single-ROI segmentation and the verification suites. Exit codes:
// 0 success, 1 runtime/verification failure, 2 usage/config error.

#include <string>
#include <vector>

#include "dcn/config.hpp"
#include "dcn/metrics.hpp"
#include "dcn/train.hpp"

namespace dcn {

int run_cli(const std::vector<std::string>& args);

// --- pipeline pieces shared with tests and the acceptance suite ----------------

std::vector<RoiSample> extract_all(const std::vector<AnnotatedImage>& images,
                                   const RoiSizes& sizes);

MetricReport evaluate_samples(const DualCoreNet& net, const ParamSet& params,
                              const CrfConfig& crf_cfg, const std::vector<RoiSample>& samples);

struct TrainResult {
    ParamSet params;
    MetricReport report; // test-split dice + lpl/cgl/fused AUC
    std::vector<EpochRecord> history;
};

// Full training pipeline: ROI extraction, split, augmentation, the phase
// schedule, and test-split evaluation. Writes history/report/checkpoints
// under out_dir when non-empty. The test split is guarded against access
// during the training phases.
TrainResult train_pipeline(const Config& cfg, const std::vector<AnnotatedImage>& images,
                           const std::string& out_dir);

} // namespace dcn
