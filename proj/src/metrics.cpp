#include "dcn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <ostream>

namespace dcn {

double dice(const Tensor& pred_mask, const Tensor& true_mask) {
    if (pred_mask.shape() != true_mask.shape())
        throw ShapeError("dice: mask shapes differ, " + shape_str(pred_mask.shape()) + " vs " +
                         shape_str(true_mask.shape()));
    const auto& a = pred_mask.values();
    const auto& b = true_mask.values();
    int64_t inter = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        if ((a[i] != 0.0 && a[i] != 1.0) || (b[i] != 0.0 && b[i] != 1.0))
            throw ContractError("dice: masks must be binary {0,1}");
        na += a[i] == 1.0;
        nb += b[i] == 1.0;
        inter += a[i] == 1.0 && b[i] == 1.0;
    }
    if (na + nb == 0) return 1.0; // both empty
    return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

Tensor binarize(const SoftMask& soft_mask, double threshold) {
    if (threshold <= 0.0 || threshold >= 1.0)
        throw ConfigError("binarize: threshold must be in (0,1)");
    int h = soft_mask.height(), w = soft_mask.width();
    std::vector<double> out(static_cast<size_t>(h) * w);
    const auto& p = soft_mask.probs.values();
    for (int64_t i = 0; i < static_cast<int64_t>(h) * w; ++i)
        out[i] = p[i * 2 + 1] >= threshold ? 1.0 : 0.0;
    return Tensor::from_values({h, w}, std::move(out));
}

RocCurve roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        throw ContractError("roc_auc: scores and labels differ in length");
    int64_t pos = 0, neg = 0;
    for (int l : labels) {
        if (l != 0 && l != 1) throw ContractError("roc_auc: labels must be {0,1}");
        l ? ++pos : ++neg;
    }
    if (pos == 0 || neg == 0)
        throw MetricError("roc_auc: AUC undefined for single-class input");

    // Sort scores descending, keeping labels; group ties at one threshold.
    std::vector<size_t> order(scores.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return scores[a] > scores[b]; });

    RocCurve curve;
    curve.fpr.push_back(0.0);
    curve.tpr.push_back(0.0);
    curve.thresholds.push_back(std::numeric_limits<double>::infinity());

    int64_t tp = 0, fp = 0;
    double auc = 0.0;
    size_t i = 0;
    while (i < order.size()) {
        double thr = scores[order[i]];
        int64_t tie_pos = 0, tie_neg = 0;
        while (i < order.size() && scores[order[i]] == thr) {
            labels[order[i]] ? ++tie_pos : ++tie_neg;
            ++i;
        }
        double prev_fpr = static_cast<double>(fp) / static_cast<double>(neg);
        double prev_tpr = static_cast<double>(tp) / static_cast<double>(pos);
        tp += tie_pos;
        fp += tie_neg;
        double cur_fpr = static_cast<double>(fp) / static_cast<double>(neg);
        double cur_tpr = static_cast<double>(tp) / static_cast<double>(pos);
        // Trapezoid over the tie group gives half credit to tied pairs.
        auc += (cur_fpr - prev_fpr) * (prev_tpr + cur_tpr) / 2.0;
        curve.fpr.push_back(cur_fpr);
        curve.tpr.push_back(cur_tpr);
        curve.thresholds.push_back(thr);
    }
    curve.auc = auc;
    return curve;
}

double MetricReport::mean_dice() const {
    if (dice_entries.empty()) return 0.0;
    double s = 0.0;
    for (const auto& d : dice_entries) s += d.value;
    return s / static_cast<double>(dice_entries.size());
}

namespace {

void write_value(std::ostream& os, double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    os << buf;
}

} // namespace

void MetricReport::write(std::ostream& os) const {
    for (const auto& d : dice_entries) {
        os << "dice " << d.sample_id << " ";
        write_value(os, d.value);
        os << "\n";
    }
    for (const auto& a : auc_entries) {
        os << "auc " << a.split << " ";
        write_value(os, a.curve.auc);
        os << "\n";
    }
    for (const auto& a : auc_entries)
        for (size_t i = 0; i < a.curve.fpr.size(); ++i) {
            os << "roc " << a.split << " ";
            write_value(os, a.curve.fpr[i]);
            os << " ";
            write_value(os, a.curve.tpr[i]);
            os << " ";
            if (std::isinf(a.curve.thresholds[i]))
                os << "inf";
            else
                write_value(os, a.curve.thresholds[i]);
            os << "\n";
        }
}

void MetricReport::save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write report: " + path);
    write(f);
}

void write_roc_svg(const std::string& path, const std::vector<MetricReport::AucEntry>& curves) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write plot: " + path);
    const int size = 400, margin = 40;
    const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b"};
    f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size + 2 * margin << "\" height=\""
      << size + 2 * margin << "\">\n";
    f << "<rect x=\"" << margin << "\" y=\"" << margin << "\" width=\"" << size << "\" height=\""
      << size << "\" fill=\"none\" stroke=\"black\"/>\n";
    f << "<line x1=\"" << margin << "\" y1=\"" << margin + size << "\" x2=\"" << margin + size
      << "\" y2=\"" << margin << "\" stroke=\"#bbbbbb\" stroke-dasharray=\"4\"/>\n";
    for (size_t c = 0; c < curves.size(); ++c) {
        f << "<polyline fill=\"none\" stroke=\"" << colors[c % 5] << "\" stroke-width=\"1.5\" points=\"";
        for (size_t i = 0; i < curves[c].curve.fpr.size(); ++i) {
            double x = margin + curves[c].curve.fpr[i] * size;
            double y = margin + size - curves[c].curve.tpr[i] * size;
            f << x << "," << y << " ";
        }
        f << "\"/>\n";
        f << "<text x=\"" << margin + 8 << "\" y=\"" << margin + 16 + 16 * c << "\" fill=\""
          << colors[c % 5] << "\" font-size=\"12\">" << curves[c].split << " auc=" << curves[c].curve.auc
          << "</text>\n";
    }
    f << "</svg>\n";
    if (!f) throw IoError("plot write failed: " + path);
}

} // namespace dcn
