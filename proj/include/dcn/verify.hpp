#pragma once

// Property suites behind `verify`: finite-difference gradient checks for
// every layer type and the full desk-scale network, dense-oracle CRF
// equivalence, and metric oracles. The oracles here are deliberately
// independent re-implementations (plain loops, no autodiff).

#include <iosfwd>
#include <string>
#include <vector>

#include "dcn/crf.hpp"

namespace dcn {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

// Dense all-pairs mean-field oracle on an (h,w) field; unary and the result
// are row-major (H,W,2) value arrays.
std::vector<double> crf_mean_field_oracle(const std::vector<double>& unary_hw2,
                                          const std::vector<double>& image, int h, int w,
                                          const CrfConfig& cfg);

// Brute-force pairwise energy of a labeling (unordered pairs).
double crf_pairwise_oracle(const std::vector<double>& labels, const std::vector<double>& image,
                           int h, int w, const CrfConfig& cfg);

// Pairwise Mann-Whitney AUC (ties count half).
double mann_whitney_auc(const std::vector<double>& scores, const std::vector<int>& labels);

std::vector<CheckResult> verify_grad();
std::vector<CheckResult> verify_crf();
std::vector<CheckResult> verify_metrics();

// Prints one `PASS|FAIL <name> <detail>` line per check; returns the number
// of failures. Suites: grad, crf, metrics, all.
int run_verify_suites(const std::vector<std::string>& suites, std::ostream& os);

} // namespace dcn
