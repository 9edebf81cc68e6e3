#include "dcn/crf.hpp"

#include <cmath>
#include <map>
#include <mutex>
#include <ostream>
#include <tuple>

namespace dcn {

namespace {

constexpr double kProbEps = 1e-7;

void check_field_shapes(const UnaryField& unary, const Tensor& image) {
    if (unary.probs.rank() != 3 || unary.probs.shape()[2] != 2)
        throw ShapeError("unary field must be (H,W,2), got " + shape_str(unary.probs.shape()));
    if (image.rank() != 2 || image.shape()[0] != unary.height() || image.shape()[1] != unary.width())
        throw ShapeError("crf image " + shape_str(image.shape()) + " does not match unary " +
                         shape_str(unary.probs.shape()));
}

// Raw Gaussian affinity loops shared by both kernels.
template <typename Affinity>
std::vector<double> normalized_kernel(int h, int w, int radius, Affinity&& affinity) {
    int64_t n = static_cast<int64_t>(h) * w;
    std::vector<double> k(static_cast<size_t>(n) * n, 0.0);
    int64_t r2 = radius > 0 ? static_cast<int64_t>(radius) * radius : -1;
    for (int64_t i = 0; i < n; ++i) {
        int yi = static_cast<int>(i / w), xi = static_cast<int>(i % w);
        double rowsum = 0.0;
        for (int64_t j = 0; j < n; ++j) {
            if (j == i) continue;
            int yj = static_cast<int>(j / w), xj = static_cast<int>(j % w);
            int64_t d2 = static_cast<int64_t>(yi - yj) * (yi - yj) +
                         static_cast<int64_t>(xi - xj) * (xi - xj);
            if (r2 >= 0 && d2 > r2) continue;
            double v = affinity(i, j, static_cast<double>(d2));
            k[i * n + j] = v;
            rowsum += v;
        }
        if (rowsum > 0.0)
            for (int64_t j = 0; j < n; ++j) k[i * n + j] /= rowsum;
    }
    return k;
}

struct SpatialKey {
    int h, w, radius;
    double theta;
    bool operator<(const SpatialKey& o) const {
        return std::tie(h, w, radius, theta) < std::tie(o.h, o.w, o.radius, o.theta);
    }
};

} // namespace

void CrfConfig::validate(std::ostream* warn) const {
    if (iterations < 1) throw ConfigError("crf: iterations must be >= 1");
    if (spatial_theta <= 0 || bilateral_theta_spatial <= 0 || bilateral_theta_intensity <= 0)
        throw ConfigError("crf: kernel bandwidths must be positive");
    if (w_spatial < 0 || w_bilateral < 0) throw ConfigError("crf: kernel weights must be >= 0");
    if (support_radius < 0) throw ConfigError("crf: support radius must be >= 0");
    if (warn) {
        double diag = std::max(compatibility[0], compatibility[3]);
        double off = std::min(compatibility[1], compatibility[2]);
        if (diag > off)
            *warn << "warning: crf compatibility is not Potts-like (diagonal > off-diagonal)\n";
    }
}

void UnaryField::validate() const {
    if (probs.rank() != 3 || probs.shape()[2] != 2)
        throw ShapeError("unary field must be (H,W,2), got " + shape_str(probs.shape()));
    const auto& v = probs.values();
    for (size_t i = 0; i < v.size(); i += 2) {
        if (v[i] < -1e-9 || v[i] > 1.0 + 1e-9 || v[i + 1] < -1e-9 || v[i + 1] > 1.0 + 1e-9)
            throw ContractError("unary probabilities out of [0,1]");
        if (std::fabs(v[i] + v[i + 1] - 1.0) > 1e-5)
            throw ContractError("unary probabilities do not sum to 1");
    }
}

Tensor spatial_message_kernel(int h, int w, double theta, int radius) {
    static std::map<SpatialKey, Tensor> cache;
    static std::mutex mu;
    std::lock_guard<std::mutex> lock(mu);
    SpatialKey key{h, w, radius, theta};
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    double inv = 1.0 / (2.0 * theta * theta);
    auto k = normalized_kernel(h, w, radius,
                               [&](int64_t, int64_t, double d2) { return std::exp(-d2 * inv); });
    int64_t n = static_cast<int64_t>(h) * w;
    Tensor t = Tensor::from_values({static_cast<int>(n), static_cast<int>(n)}, std::move(k));
    cache.emplace(key, t);
    return t;
}

Tensor bilateral_message_kernel(const Tensor& image, double theta_spatial, double theta_intensity,
                                int radius) {
    if (image.rank() != 2) throw ShapeError("bilateral kernel expects (H,W) image");
    int h = image.shape()[0], w = image.shape()[1];
    const auto& iv = image.values();
    double inv_s = 1.0 / (2.0 * theta_spatial * theta_spatial);
    double inv_i = 1.0 / (2.0 * theta_intensity * theta_intensity);
    auto k = normalized_kernel(h, w, radius, [&](int64_t i, int64_t j, double d2) {
        double di = iv[i] - iv[j];
        return std::exp(-d2 * inv_s - di * di * inv_i);
    });
    int64_t n = static_cast<int64_t>(h) * w;
    return Tensor::from_values({static_cast<int>(n), static_cast<int>(n)}, std::move(k));
}

namespace {

// Shared implementation; optionally collects Q after every iteration.
Tensor mean_field_run(const UnaryField& unary, const Tensor& image, const CrfConfig& cfg,
                      std::vector<Tensor>* iterates) {
    cfg.validate();
    check_field_shapes(unary, image);
    unary.validate();
    int h = unary.height(), w = unary.width();
    int n = h * w;

    // Degenerate kernels: the message term vanishes and each step is the
    // identity on the unary input.
    if (cfg.w_spatial == 0.0 && cfg.w_bilateral == 0.0) {
        Tensor out = add(unary.probs, 0.0);
        if (iterates)
            for (int t = 0; t < cfg.iterations; ++t) out = add(out, 0.0), iterates->push_back(out.detach());
        return out;
    }

    Tensor ks, kb;
    if (cfg.w_spatial > 0.0)
        ks = spatial_message_kernel(h, w, cfg.spatial_theta, cfg.support_radius);
    if (cfg.w_bilateral > 0.0)
        kb = bilateral_message_kernel(image, cfg.bilateral_theta_spatial,
                                      cfg.bilateral_theta_intensity, cfg.support_radius);

    Tensor q = reshape(unary.probs, {n, 2});
    Tensor log_unary = log(clamp_min(q, kProbEps));
    // out(l) = sum_l' mu(l,l') m(l')  ==  m @ mu^T
    Tensor mu_t = transpose2d(Tensor::from_values(
        {2, 2}, {cfg.compatibility[0], cfg.compatibility[1], cfg.compatibility[2],
                 cfg.compatibility[3]}));

    for (int t = 0; t < cfg.iterations; ++t) {
        Tensor msg;
        if (ks.defined() && kb.defined())
            msg = add(mul(matmul(ks, q), cfg.w_spatial), mul(matmul(kb, q), cfg.w_bilateral));
        else if (ks.defined())
            msg = mul(matmul(ks, q), cfg.w_spatial);
        else
            msg = mul(matmul(kb, q), cfg.w_bilateral);
        Tensor pairwise = matmul(msg, mu_t);
        q = softmax(sub(log_unary, pairwise), 1);
        if (iterates) iterates->push_back(reshape(q, {h, w, 2}).detach());
    }
    return reshape(q, {h, w, 2});
}

} // namespace

SoftMask mean_field_infer(const UnaryField& unary, const Tensor& image, const CrfConfig& cfg) {
    return SoftMask{mean_field_run(unary, image, cfg, nullptr)};
}

std::vector<Tensor> mean_field_trajectory(const UnaryField& unary, const Tensor& image,
                                          const CrfConfig& cfg) {
    std::vector<Tensor> iterates;
    mean_field_run(unary, image, cfg, &iterates);
    return iterates;
}

std::pair<double, double> crf_energy_terms(const SoftMask& mask_probs, const Tensor& labels,
                                           const Tensor& image, const CrfConfig& cfg) {
    cfg.validate();
    if (mask_probs.probs.rank() != 3 || mask_probs.probs.shape()[2] != 2)
        throw ShapeError("mask probabilities must be (H,W,2)");
    int h = mask_probs.height(), w = mask_probs.width();
    if (labels.rank() != 2 || labels.shape()[0] != h || labels.shape()[1] != w)
        throw ShapeError("labels " + shape_str(labels.shape()) + " do not match mask " +
                         shape_str(mask_probs.probs.shape()));
    if (image.rank() != 2 || image.shape()[0] != h || image.shape()[1] != w)
        throw ShapeError("image " + shape_str(image.shape()) + " does not match mask");

    const auto& pv = mask_probs.probs.values();
    const auto& lv = labels.values();
    const auto& iv = image.values();
    int64_t n = static_cast<int64_t>(h) * w;

    double unary_term = 0.0;
    std::vector<int> lab(n);
    for (int64_t i = 0; i < n; ++i) {
        if (lv[i] != 0.0 && lv[i] != 1.0) throw ContractError("labels must be binary {0,1}");
        lab[i] = static_cast<int>(lv[i]);
        unary_term += std::log(std::max(pv[i * 2 + lab[i]], kProbEps));
    }

    double inv_s = 1.0 / (2.0 * cfg.spatial_theta * cfg.spatial_theta);
    double inv_bs = 1.0 / (2.0 * cfg.bilateral_theta_spatial * cfg.bilateral_theta_spatial);
    double inv_bi = 1.0 / (2.0 * cfg.bilateral_theta_intensity * cfg.bilateral_theta_intensity);
    int64_t r2 = cfg.support_radius > 0
                     ? static_cast<int64_t>(cfg.support_radius) * cfg.support_radius
                     : -1;
    double pairwise_term = 0.0;
    for (int64_t p = 0; p < n; ++p) {
        int yp = static_cast<int>(p / w), xp = static_cast<int>(p % w);
        for (int64_t q = p + 1; q < n; ++q) {
            double mu = cfg.compatibility[lab[p] * 2 + lab[q]];
            if (mu == 0.0) continue;
            int yq = static_cast<int>(q / w), xq = static_cast<int>(q % w);
            int64_t d2 = static_cast<int64_t>(yp - yq) * (yp - yq) +
                         static_cast<int64_t>(xp - xq) * (xp - xq);
            if (r2 >= 0 && d2 > r2) continue;
            double di = iv[p] - iv[q];
            double k = cfg.w_spatial * std::exp(-static_cast<double>(d2) * inv_s) +
                       cfg.w_bilateral * std::exp(-static_cast<double>(d2) * inv_bs - di * di * inv_bi);
            pairwise_term += mu * k;
        }
    }
    return {unary_term, pairwise_term};
}

Tensor pixel_cross_entropy(const Tensor& probs_hw2, const Tensor& labels) {
    if (probs_hw2.rank() != 3 || probs_hw2.shape()[2] != 2)
        throw ShapeError("pixel_cross_entropy expects (H,W,2) probabilities");
    int h = probs_hw2.shape()[0], w = probs_hw2.shape()[1];
    if (labels.rank() != 2 || labels.shape()[0] != h || labels.shape()[1] != w)
        throw ShapeError("labels " + shape_str(labels.shape()) + " do not match probabilities");
    std::vector<double> onehot(static_cast<size_t>(h) * w * 2, 0.0);
    const auto& lv = labels.values();
    for (int64_t i = 0; i < static_cast<int64_t>(h) * w; ++i) {
        if (lv[i] != 0.0 && lv[i] != 1.0) throw ContractError("labels must be binary {0,1}");
        onehot[i * 2 + static_cast<int>(lv[i])] = 1.0;
    }
    Tensor oh = Tensor::from_values({h, w, 2}, std::move(onehot));
    Tensor picked = mul(oh, log(clamp_min(probs_hw2, kProbEps)));
    return mul(sum_all(picked), -1.0 / (static_cast<double>(h) * w));
}

Tensor segmentation_loss(const UnaryField& unet_probs, const SoftMask& crf_probs,
                         const Tensor& labels, const Tensor& image, const CrfConfig& cfg,
                         double lambda, double beta_pairwise) {
    if (lambda < 0.0 || lambda > 1.0)
        throw ConfigError("segmentation loss: lambda must be in [0,1], got " + std::to_string(lambda));
    if (lambda == 0.0) return pixel_cross_entropy(unet_probs.probs, labels);
    Tensor ce_unet = pixel_cross_entropy(unet_probs.probs, labels);
    Tensor ce_crf = pixel_cross_entropy(crf_probs.probs, labels);
    double pairwise = crf_energy_terms(crf_probs, labels, image, cfg).second;
    Tensor blended = add(mul(ce_unet, 1.0 - lambda), mul(ce_crf, lambda));
    return add(blended, lambda * beta_pairwise * pairwise);
}

} // namespace dcn
