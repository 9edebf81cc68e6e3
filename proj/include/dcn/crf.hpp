#pragma once

// Dense CRF mean-field inference as a differentiable layer over the U-Net's
// per-pixel probabilities, plus the energy terms of the segmentation loss.
//
// Message passing is exact dense filtering over all pixel pairs (O(N^2)),
// with kernel rows normalized over neighbours and the self term excluded.
// A support radius can truncate the neighbourhood for large fields; 0 keeps
// the full field.

#include <array>
#include <iosfwd>
#include <utility>
#include <vector>

#include "dcn/tensor.hpp"

namespace dcn {

struct CrfConfig {
    int iterations = 5;
    double spatial_theta = 3.0;
    double bilateral_theta_spatial = 30.0;
    double bilateral_theta_intensity = 0.1; // intensities normalized to [0,1]
    // With row-normalized kernels, unit weights let the pairwise term drown
    // the log-unary deviations of a fresh U-Net (the segmentation loss then
    // has a stable uniform fixed point and training stalls); 0.3 keeps the
    // smoothing useful while leaving the unaries in charge.
    double w_spatial = 0.3;
    double w_bilateral = 0.3;
    // mu(l, l') row-major; Potts by default.
    std::array<double, 4> compatibility = {0.0, 1.0, 1.0, 0.0};
    int support_radius = 0;        // 0 = dense over the whole field
    bool infer_at_mask_res = false; // run inference at mask resolution instead of decoder resolution

    // Throws ConfigError on invalid values; writes a warning to `warn` when
    // the compatibility matrix is not Potts-like (diagonal > off-diagonal).
    void validate(std::ostream* warn = nullptr) const;
};

// Per-pixel class probabilities (H,W,2) out of the U-Net.
struct UnaryField {
    Tensor probs;
    int height() const { return probs.shape()[0]; }
    int width() const { return probs.shape()[1]; }
    void validate() const; // sums to 1 within 1e-5, entries in [0,1]
};

// Per-pixel class probabilities (H,W,2) after graphical inference.
struct SoftMask {
    Tensor probs;
    int height() const { return probs.shape()[0]; }
    int width() const { return probs.shape()[1]; }
};

// Row-normalized message-passing kernels as (N,N) constant tensors, N = h*w.
// Entry (i,j) is the normalized Gaussian affinity of pixels i and j; the
// diagonal is zero. The spatial kernel is memoized per (h, w, theta, radius).
Tensor spatial_message_kernel(int h, int w, double theta, int radius);
Tensor bilateral_message_kernel(const Tensor& image, double theta_spatial,
                                double theta_intensity, int radius);

// Mean-field iterations: Q0 = unary; each step filters Q with both kernels,
// applies the compatibility transform, adds the -log(unary) unaries and
// renormalizes with softmax. Differentiable w.r.t. the unary input. With both
// kernel weights zero the message term vanishes and the unary passes through
// unchanged.
SoftMask mean_field_infer(const UnaryField& unary, const Tensor& image, const CrfConfig& cfg);

// Q after every iteration (values only); used by the property suites.
std::vector<Tensor> mean_field_trajectory(const UnaryField& unary, const Tensor& image,
                                          const CrfConfig& cfg);

// Energy terms of the labeling under the mask probabilities:
//   unary   = sum of log-probability of the true label per pixel
//   pairwise = sum over unordered pixel pairs of mu(y_p, y_q) * k(f_p, f_q),
// with k the raw (unnormalized) Gaussian affinities weighted by w_spatial /
// w_bilateral. Probabilities are clamped at 1e-7 before the log.
std::pair<double, double> crf_energy_terms(const SoftMask& mask_probs, const Tensor& labels,
                                           const Tensor& image, const CrfConfig& cfg);

// Pixelwise categorical cross-entropy, mean over pixels, of (H,W,2)
// probabilities against binary (H,W) labels.
Tensor pixel_cross_entropy(const Tensor& probs_hw2, const Tensor& labels);

// (1-lambda) * CE(unet) + lambda * CE(crf) + lambda * beta * pairwise(labels).
// lambda = 0 reduces exactly to the plain U-Net cross-entropy.
Tensor segmentation_loss(const UnaryField& unet_probs, const SoftMask& crf_probs,
                         const Tensor& labels, const Tensor& image, const CrfConfig& cfg,
                         double lambda, double beta_pairwise);

} // namespace dcn
