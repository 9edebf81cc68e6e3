#pragma once

// Dice coefficient, ROC curve and AUC, plus the line-oriented metric report
// and SVG plot emitters.

#include <iosfwd>
#include <string>
#include <vector>

#include "dcn/crf.hpp"
#include "dcn/tensor.hpp"

namespace dcn {

// 2|A. B| / (|A|+|B|); both masks binary (H,W). Empty-vs-empty is 1.0.
double dice(const Tensor& pred_mask, const Tensor& true_mask);

// Foreground where p(mass) >= threshold. Input (H,W,2); channel 1 is mass.
Tensor binarize(const SoftMask& soft_mask, double threshold = 0.5);

struct RocCurve {
    std::vector<double> fpr;        // non-decreasing, starts 0, ends 1
    std::vector<double> tpr;        // starts 0, ends 1
    std::vector<double> thresholds; // matching score thresholds (+inf first)
    double auc = 0.0;               // trapezoidal == Mann-Whitney
};

// Threshold sweep over every distinct score, descending. Ties between a
// positive and a negative score contribute half credit to the AUC.
RocCurve roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

// MetricReport text format, one record per line:
//   dice <sample_id> <value>
//   auc <split> <value>
//   roc <split> <fpr> <tpr> <threshold>
struct MetricReport {
    struct DiceEntry {
        std::string sample_id;
        double value;
    };
    struct AucEntry {
        std::string split;
        RocCurve curve;
    };
    std::vector<DiceEntry> dice_entries;
    std::vector<AucEntry> auc_entries;

    double mean_dice() const;
    void write(std::ostream& os) const;
    void save(const std::string& path) const;
};

// ROC curves as SVG polylines, one per entry, with a diagonal reference.
void write_roc_svg(const std::string& path, const std::vector<MetricReport::AucEntry>& curves);

} // namespace dcn
