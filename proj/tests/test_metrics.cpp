#include <doctest.h>

#include <cmath>
#include <sstream>

#include "dcn/metrics.hpp"
#include "dcn/verify.hpp"

using namespace dcn;

TEST_CASE("dice fixtures") {
    auto a = Tensor::from_values({2, 2}, {1, 1, 0, 0});
    CHECK(dice(a, a) == 1.0);
    auto b = Tensor::from_values({2, 2}, {0, 0, 1, 1});
    CHECK(dice(a, b) == 0.0);

    // overlapping 4-pixel blocks sharing 2 pixels
    auto p = Tensor::from_values({2, 4}, {1, 1, 1, 1, 0, 0, 0, 0});
    auto t = Tensor::from_values({2, 4}, {0, 0, 1, 1, 1, 1, 0, 0});
    CHECK(dice(p, t) == 0.5);
    CHECK(dice(t, p) == 0.5);

    auto e = Tensor::zeros({3, 3});
    CHECK(dice(e, e) == 1.0); // empty-vs-empty convention

    CHECK_THROWS_AS(dice(a, Tensor::zeros({3, 3})), ShapeError);
    CHECK_THROWS_AS(dice(Tensor::full({2, 2}, 0.5), a), ContractError);
}

TEST_CASE("dice monotone under growing symmetric difference") {
    // nested fixtures: flipping more pixels never raises dice
    auto base = Tensor::from_values({3, 3}, {1, 1, 1, 1, 1, 0, 0, 0, 0});
    double prev = 1.0;
    for (int flips = 1; flips <= 4; ++flips) {
        auto other = base.detach();
        for (int i = 0; i < flips; ++i) other.values()[i] = 0.0;
        double d = dice(base, other);
        CHECK(d <= prev);
        prev = d;
    }
}

TEST_CASE("binarize thresholds the mass channel") {
    // uniform 0.5 field: >= convention keeps everything foreground
    auto half = SoftMask{Tensor::full({2, 2, 2}, 0.5)};
    auto all_fg = binarize(half, 0.5);
    for (double v : all_fg.values()) CHECK(v == 1.0);

    std::vector<double> v = {0.2, 0.8, 0.4, 0.6, 0.95, 0.05, 0.5, 0.5};
    auto sm = SoftMask{Tensor::from_values({2, 2, 2}, v)};
    auto bin = binarize(sm, 0.999);
    CHECK(bin.values() == std::vector<double>{0, 0, 0, 0}); // max fg 0.8 < 0.999

    // one-hot masks round-trip through binarize
    auto onehot = SoftMask{Tensor::from_values({1, 2, 2}, {0, 1, 1, 0})};
    CHECK(binarize(onehot).values() == std::vector<double>{1, 0});

    CHECK_THROWS_AS(binarize(half, 0.0), ConfigError);
}

TEST_CASE("roc curve endpoints and ordering") {
    Rng rng(4);
    std::vector<double> scores(40);
    std::vector<int> labels(40);
    for (size_t i = 0; i < scores.size(); ++i) {
        scores[i] = rng.uniform(0, 1);
        labels[i] = rng.below(2) ? 1 : 0;
    }
    labels[0] = 1;
    labels[1] = 0;
    auto curve = roc_auc(scores, labels);
    CHECK(curve.fpr.front() == 0.0);
    CHECK(curve.tpr.front() == 0.0);
    CHECK(curve.fpr.back() == 1.0);
    CHECK(curve.tpr.back() == 1.0);
    CHECK(std::isinf(curve.thresholds.front()));
    for (size_t i = 1; i < curve.fpr.size(); ++i) CHECK(curve.fpr[i] >= curve.fpr[i - 1]);
    CHECK(curve.fpr.size() == curve.tpr.size());
    CHECK(curve.fpr.size() == curve.thresholds.size());
}

TEST_CASE("auc fixtures") {
    CHECK(roc_auc({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}).auc == 1.0);
    CHECK(roc_auc({0.9, 0.8, 0.3, 0.2}, {1, 0, 1, 0}).auc == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(roc_auc({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0}).auc == doctest::Approx(0.5).epsilon(1e-12));
    CHECK_THROWS_AS(roc_auc({0.1, 0.2}, {1, 1}), MetricError);
    CHECK_THROWS_AS(roc_auc({0.1}, {2}), ContractError);
}

TEST_CASE("trapezoid equals Mann-Whitney on random instances") {
    Rng rng(6);
    for (int trial = 0; trial < 50; ++trial) {
        int n = 2 + static_cast<int>(rng.below(200));
        std::vector<double> scores(n);
        std::vector<int> labels(n);
        int pos = 0;
        for (int i = 0; i < n; ++i) {
            scores[i] = rng.below(2) ? rng.uniform(0, 1) : static_cast<double>(rng.below(5)) / 5.0;
            labels[i] = rng.below(2) ? 1 : 0;
            pos += labels[i];
        }
        if (pos == 0) labels[0] = 1;
        if (pos == n) labels[0] = 0;
        CHECK(std::fabs(roc_auc(scores, labels).auc - mann_whitney_auc(scores, labels)) < 1e-9);
    }
}

TEST_CASE("metric report text format") {
    MetricReport report;
    report.dice_entries.push_back({"s001", 0.912345});
    report.auc_entries.push_back({"fused", roc_auc({0.9, 0.1}, {1, 0})});
    std::ostringstream os;
    report.write(os);
    std::string txt = os.str();
    CHECK(txt.find("dice s001 0.912345") != std::string::npos);
    CHECK(txt.find("auc fused 1.000000") != std::string::npos);
    CHECK(txt.find("roc fused 0.000000 0.000000 inf") != std::string::npos);
    CHECK(report.mean_dice() == doctest::Approx(0.912345));
}
