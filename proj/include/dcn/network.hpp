#pragma once

// DualCoreNet assembly: the texture path (stacked residual separable-conv
// blocks over the context ROI), the segmentation path (residual U-Net +
// CRF mean-field inference + mask classifier) and the fused head, with the
// three classification losses.

#include <optional>
#include <string>
#include <vector>

#include "dcn/crf.hpp"
#include "dcn/data.hpp"
#include "dcn/nn.hpp"
#include "dcn/tensor.hpp"

namespace dcn {

enum class CglClassifierInput { Mask, MaskedImage };

struct NetworkArch {
    std::string preset = "desk";
    int lpl_in_channels = 3; // context ROI replicated across channels
    int context_size = 32;
    int bbox_size = 16;
    int mask_size = 32;
    std::vector<int> lpl_channels = {8, 16, 46}; // three downsampling blocks
    int lpl_const_blocks = 8;                    // constant-shape blocks after them
    std::vector<int> cgl_channels = {1, 2, 4, 8}; // encoder channels, last is bottleneck
    std::vector<int> head_channels = {1, 2};      // 7x7 sconv stacks over the mask
    int head_kernel = 7;
    int dense_units = 128;
    double dropout = 0.5;
    CglClassifierInput cgl_classifier_input = CglClassifierInput::Mask;

    // "paper" (published dimensions), "desk" (channels / 16, 32x32 context,
    // 16x16 bbox) or "toy" (minimal extents for end-to-end gradient checks).
    static NetworkArch named(const std::string& preset);
    void validate() const;

    RoiSizes roi_sizes() const { return RoiSizes{bbox_size, context_size, mask_size}; }
};

struct ForwardOutputs {
    Tensor class_probs;  // (N,2) fused head
    Tensor lpl_probs;    // (N,2) texture path head
    Tensor cgl_probs;    // (N,2) segmentation path head
    Tensor soft_mask;    // (N,mask,mask,2) per-pixel probabilities (values only)
    Tensor lpl_features; // (N,dense)
    Tensor cgl_features; // (N,dense)
    Tensor unary_probs;  // (N,2,S,S) U-Net probabilities at decoder resolution
    Tensor crf_probs;    // (N,2,S,S) post-inference probabilities at decoder resolution
};

struct TraceEntry {
    std::string name;
    Shape shape; // (C,H,W)
};

class DualCoreNet {
public:
    explicit DualCoreNet(NetworkArch arch);

    const NetworkArch& arch() const { return arch_; }

    // All learnable tensors under the prefixes lpl. / cgl.unet. / cgl.head. /
    // fusion., in declaration order; He-initialized, biases zero.
    ParamSet init_params(Rng& rng) const;

    struct LplOut {
        Tensor probs;    // (N,2)
        Tensor features; // (N,dense)
    };
    // Context ROI (N,C,H,W); a single-channel input is replicated to the
    // configured channel count.
    LplOut lpl_forward(const Tensor& context_roi, const ParamSet& params, bool train_mode,
                       Rng* dropout_rng) const;

    struct CglOut {
        Tensor probs;       // (N,2); undefined when run_classifier is false
        Tensor features;    // (N,dense); undefined when run_classifier is false
        Tensor soft_mask;   // (N,mask,mask,2) values only
        Tensor mask_chw;    // (N,2,mask,mask) differentiable mask fed to the classifier
        Tensor unary_probs; // (N,2,S,S)
        Tensor crf_probs;   // (N,2,S,S)
    };
    CglOut cgl_forward(const Tensor& bbox_roi, const Tensor& image_for_crf, const ParamSet& params,
                       const CrfConfig& cfg, bool train_mode, Rng* dropout_rng,
                       bool run_classifier = true) const;

    ForwardOutputs fused_forward(const Tensor& context_roi, const Tensor& bbox_roi,
                                 const Tensor& image_for_crf, const ParamSet& params,
                                 const CrfConfig& cfg, bool train_mode, Rng* dropout_rng,
                                 bool ablate_lpl = false, bool ablate_cgl = false) const;

    // Published-dimension traces, computed structurally.
    std::vector<TraceEntry> lpl_trace() const;
    std::vector<TraceEntry> cgl_trace() const;

private:
    NetworkArch arch_;
    std::vector<SconvBlock> lpl_blocks_;
    Dense lpl_dense_, lpl_head_;
    std::vector<ConvBlock> enc_;  // enc_[3] is the bottleneck block
    std::vector<ConvBlock> dec_;
    ConvLayer seg_out_;
    std::vector<SconvBlock> head_blocks_;
    Dense cgl_dense_, cgl_head_;
    Dense fusion_head_;

    Tensor classifier_tail(const std::string& which, const Tensor& gap_features,
                           const ParamSet& params, bool train_mode, Rng* dropout_rng,
                           Tensor* features_out) const;
};

// Mean over the batch of -log p(true class), probabilities clamped at 1e-7.
Tensor class_cross_entropy(const Tensor& probs, const std::vector<int>& labels);

// The three classification losses share the categorical cross-entropy form.
inline Tensor loss_lpl(const Tensor& probs, const std::vector<int>& labels) {
    return class_cross_entropy(probs, labels);
}
inline Tensor loss_cgl(const Tensor& probs, const std::vector<int>& labels) {
    return class_cross_entropy(probs, labels);
}
inline Tensor loss_joint(const Tensor& fused_probs, const std::vector<int>& labels) {
    return class_cross_entropy(fused_probs, labels);
}

// --- batching helpers -----------------------------------------------------------

Tensor batch_context(const std::vector<const RoiSample*>& batch, int in_channels);
Tensor batch_bbox(const std::vector<const RoiSample*>& batch);
Tensor batch_crf_image(const std::vector<const RoiSample*>& batch); // (N,S,S)
std::vector<int> batch_labels(const std::vector<const RoiSample*>& batch);

// Per-sample views of batched fields.
UnaryField unary_slice(const Tensor& probs_nchw, int i);
SoftMask mask_slice(const Tensor& probs_nchw, int i);

} // namespace dcn
