#include "dcn/network.hpp"

#include <cmath>

namespace dcn {

NetworkArch NetworkArch::named(const std::string& preset) {
    NetworkArch a;
    a.preset = preset;
    if (preset == "paper") {
        a.context_size = 224;
        a.bbox_size = 40;
        a.mask_size = 224;
        a.lpl_channels = {128, 256, 728};
        a.cgl_channels = {16, 32, 64, 128};
        a.head_channels = {16, 32};
        a.dense_units = 2048;
    } else if (preset == "desk") {
        // paper widths / 16, floored at 2: a 1-channel stage dies whenever its
        // only unit is relu-clipped, severing the whole path for some seeds.
        a.context_size = 32;
        a.bbox_size = 16;
        a.mask_size = 32;
        a.lpl_channels = {8, 16, 46};
        a.cgl_channels = {2, 2, 4, 8};
        a.head_channels = {2, 2};
        a.dense_units = 128;
    } else if (preset == "toy") {
        a.context_size = 8;
        a.bbox_size = 8;
        a.mask_size = 8;
        a.lpl_channels = {2, 3, 4};
        a.cgl_channels = {2, 2, 3, 4};
        a.head_channels = {2, 3};
        a.dense_units = 16;
    } else {
        throw ConfigError("unknown network preset: " + preset);
    }
    a.validate();
    return a;
}

void NetworkArch::validate() const {
    if (lpl_channels.size() != 3) throw ConfigError("network: lpl_channels must list 3 blocks");
    if (cgl_channels.size() != 4) throw ConfigError("network: cgl_channels must list 4 blocks");
    if (head_channels.size() != 2) throw ConfigError("network: head_channels must list 2 blocks");
    if (context_size % 8 != 0) throw ConfigError("network: context size must be divisible by 8");
    if (bbox_size % 8 != 0) throw ConfigError("network: bbox size must be divisible by 8");
    if (mask_size % 4 != 0) throw ConfigError("network: mask size must be divisible by 4");
    if (lpl_in_channels < 1) throw ConfigError("network: lpl input channels must be >= 1");
    if (dense_units < 2) throw ConfigError("network: dense units must be >= 2");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("network: dropout must be in [0,1)");
    if (head_kernel % 2 == 0) throw ConfigError("network: head kernel must be odd");
    for (int c : lpl_channels)
        if (c < 1) throw ConfigError("network: lpl channel counts must be positive");
    for (int c : cgl_channels)
        if (c < 1) throw ConfigError("network: cgl channel counts must be positive");
    for (int c : head_channels)
        if (c < 1) throw ConfigError("network: head channel counts must be positive");
}

DualCoreNet::DualCoreNet(NetworkArch arch) : arch_(std::move(arch)) {
    arch_.validate();
    const auto& lc = arch_.lpl_channels;
    lpl_blocks_.push_back({"lpl.block1", arch_.lpl_in_channels, lc[0], 3, true});
    lpl_blocks_.push_back({"lpl.block2", lc[0], lc[1], 3, true});
    lpl_blocks_.push_back({"lpl.block3", lc[1], lc[2], 3, true});
    for (int i = 0; i < arch_.lpl_const_blocks; ++i)
        lpl_blocks_.push_back({"lpl.block" + std::to_string(4 + i), lc[2], lc[2], 3, false});
    lpl_dense_ = {"lpl.dense", lc[2], arch_.dense_units};
    lpl_head_ = {"lpl.head", arch_.dense_units, 2};

    const auto& cc = arch_.cgl_channels;
    enc_.push_back({"cgl.unet.enc1", 1, cc[0], 3});
    enc_.push_back({"cgl.unet.enc2", cc[0], cc[1], 3});
    enc_.push_back({"cgl.unet.enc3", cc[1], cc[2], 3});
    enc_.push_back({"cgl.unet.enc4", cc[2], cc[3], 3}); // bottleneck, pool-free
    dec_.push_back({"cgl.unet.dec1", cc[3] + cc[2], cc[2], 3});
    dec_.push_back({"cgl.unet.dec2", cc[2] + cc[1], cc[1], 3});
    dec_.push_back({"cgl.unet.dec3", cc[1] + cc[0], cc[0], 3});
    seg_out_ = {"cgl.unet.seg_out", cc[0], 2, 1, 1, Padding::Valid};

    const auto& hc = arch_.head_channels;
    head_blocks_.push_back({"cgl.head.block1", 2, hc[0], arch_.head_kernel, true});
    head_blocks_.push_back({"cgl.head.block2", hc[0], hc[1], arch_.head_kernel, true});
    cgl_dense_ = {"cgl.head.dense", hc[1], arch_.dense_units};
    cgl_head_ = {"cgl.head.head", arch_.dense_units, 2};

    fusion_head_ = {"fusion.head", 2 * arch_.dense_units, 2};
}

ParamSet DualCoreNet::init_params(Rng& rng) const {
    ParamSet p;
    for (const auto& b : lpl_blocks_) b.init_params(p, rng);
    lpl_dense_.init_params(p, rng);
    lpl_head_.init_params(p, rng);
    for (const auto& b : enc_) b.init_params(p, rng);
    for (const auto& b : dec_) b.init_params(p, rng);
    seg_out_.init_params(p, rng);
    for (const auto& b : head_blocks_) b.init_params(p, rng);
    cgl_dense_.init_params(p, rng);
    cgl_head_.init_params(p, rng);
    fusion_head_.init_params(p, rng);
    return p;
}

Tensor DualCoreNet::classifier_tail(const std::string& which, const Tensor& gap_features,
                                    const ParamSet& params, bool train_mode, Rng* dropout_rng,
                                    Tensor* features_out) const {
    const Dense& dense = which == "lpl" ? lpl_dense_ : cgl_dense_;
    const Dense& head = which == "lpl" ? lpl_head_ : cgl_head_;
    Tensor f = dense.forward(params, gap_features, Activation::ReLU);
    if (train_mode && arch_.dropout > 0.0) {
        if (!dropout_rng) throw ContractError("train-mode forward needs a dropout rng");
        f = mul(f, dropout_mask(f.shape(), arch_.dropout, *dropout_rng));
    }
    if (features_out) *features_out = f;
    return softmax(head.forward(params, f, Activation::None), 1);
}

DualCoreNet::LplOut DualCoreNet::lpl_forward(const Tensor& context_roi, const ParamSet& params,
                                             bool train_mode, Rng* dropout_rng) const {
    if (context_roi.rank() != 4) throw ShapeError("lpl_forward expects NCHW input");
    if (context_roi.shape()[2] != arch_.context_size || context_roi.shape()[3] != arch_.context_size)
        throw ShapeError("lpl_forward: input spatial " + shape_str(context_roi.shape()) +
                         " does not match context size " + std::to_string(arch_.context_size));
    Tensor x = context_roi;
    if (x.shape()[1] == 1 && arch_.lpl_in_channels > 1) {
        std::vector<Tensor> reps(arch_.lpl_in_channels, x);
        x = concat(reps, 1);
    }
    if (x.shape()[1] != arch_.lpl_in_channels)
        throw ShapeError("lpl_forward: expected " + std::to_string(arch_.lpl_in_channels) +
                         " input channels, got " + std::to_string(x.shape()[1]));
    for (const auto& b : lpl_blocks_) x = b.forward(params, x);
    Tensor gap = reduce_mean(x, {2, 3}); // (N,C)
    LplOut out;
    out.probs = classifier_tail("lpl", gap, params, train_mode, dropout_rng, &out.features);
    return out;
}

UnaryField unary_slice(const Tensor& probs_nchw, int i) {
    int s_h = probs_nchw.shape()[2], s_w = probs_nchw.shape()[3];
    Tensor one = slice0(probs_nchw, i, 1); // (1,2,H,W)
    Tensor hw2 = reshape(transpose2d(reshape(one, {2, s_h * s_w})), {s_h, s_w, 2});
    return UnaryField{hw2};
}

SoftMask mask_slice(const Tensor& probs_nchw, int i) {
    UnaryField u = unary_slice(probs_nchw, i);
    return SoftMask{u.probs};
}

namespace {

// (H,W,2) -> (1,2,H,W), differentiable.
Tensor hw2_to_chw(const Tensor& hw2) {
    int h = hw2.shape()[0], w = hw2.shape()[1];
    return reshape(transpose2d(reshape(hw2, {h * w, 2})), {1, 2, h, w});
}

// Values-only NCHW -> NHWC permutation for exports and metrics.
Tensor nchw_to_nhwc_values(const Tensor& t) {
    int n = t.shape()[0], c = t.shape()[1], h = t.shape()[2], w = t.shape()[3];
    std::vector<double> out(t.values().size());
    const auto& v = t.values();
    for (int b = 0; b < n; ++b)
        for (int ci = 0; ci < c; ++ci)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    out[((static_cast<size_t>(b) * h + y) * w + x) * c + ci] =
                        v[((static_cast<size_t>(b) * c + ci) * h + y) * w + x];
    return Tensor::from_values({n, h, w, c}, std::move(out));
}

} // namespace

DualCoreNet::CglOut DualCoreNet::cgl_forward(const Tensor& bbox_roi, const Tensor& image_for_crf,
                                             const ParamSet& params, const CrfConfig& cfg,
                                             bool train_mode, Rng* dropout_rng,
                                             bool run_classifier) const {
    if (bbox_roi.rank() != 4 || bbox_roi.shape()[1] != 1)
        throw ShapeError("cgl_forward expects (N,1,S,S) bbox input");
    int s = arch_.bbox_size;
    if (bbox_roi.shape()[2] != s || bbox_roi.shape()[3] != s)
        throw ShapeError("cgl_forward: input spatial " + shape_str(bbox_roi.shape()) +
                         " does not match bbox size " + std::to_string(s));
    int n = bbox_roi.shape()[0];
    if (image_for_crf.rank() != 3 || image_for_crf.shape()[0] != n ||
        image_for_crf.shape()[1] != s || image_for_crf.shape()[2] != s)
        throw ShapeError("cgl_forward: crf image must be (N,S,S)");

    // Residual U-Net: three down blocks, bottleneck, three up blocks.
    auto [skip1, d1] = unet_down(enc_[0], params, bbox_roi);
    auto [skip2, d2] = unet_down(enc_[1], params, d1);
    auto [skip3, d3] = unet_down(enc_[2], params, d2);
    Tensor bott = enc_[3].forward(params, d3);
    Tensor u = unet_up(dec_[0], params, bott, skip3);
    u = unet_up(dec_[1], params, u, skip2);
    u = unet_up(dec_[2], params, u, skip1);
    Tensor unary_nchw = softmax(seg_out_.forward(params, u), 1); // (N,2,S,S)

    // Graphical inference per sample (kernels depend on each sample's image).
    const auto& iv = image_for_crf.values();
    std::vector<Tensor> crf_parts;
    crf_parts.reserve(n);
    for (int i = 0; i < n; ++i) {
        UnaryField unary = unary_slice(unary_nchw, i);
        std::vector<double> img_i(iv.begin() + static_cast<size_t>(i) * s * s,
                                  iv.begin() + static_cast<size_t>(i + 1) * s * s);
        Tensor image_i = Tensor::from_values({s, s}, std::move(img_i));
        if (cfg.infer_at_mask_res && arch_.mask_size != s) {
            Tensor up = resize_nearest(hw2_to_chw(unary.probs), arch_.mask_size, arch_.mask_size);
            UnaryField unary_hi = unary_slice(up, 0);
            Tensor image_hi = resize_bilinear_2d(image_i, arch_.mask_size, arch_.mask_size);
            SoftMask m = mean_field_infer(unary_hi, image_hi, cfg);
            crf_parts.push_back(resize_nearest(hw2_to_chw(m.probs), s, s));
        } else {
            SoftMask m = mean_field_infer(unary, image_i, cfg);
            crf_parts.push_back(hw2_to_chw(m.probs));
        }
    }
    Tensor crf_nchw = n == 1 ? crf_parts[0] : concat(crf_parts, 0); // (N,2,S,S)

    CglOut out;
    out.unary_probs = unary_nchw;
    out.crf_probs = crf_nchw;
    out.mask_chw = resize_nearest(crf_nchw, arch_.mask_size, arch_.mask_size);
    out.soft_mask = nchw_to_nhwc_values(out.mask_chw.detach());

    if (run_classifier) {
        Tensor head_in = out.mask_chw;
        if (arch_.cgl_classifier_input == CglClassifierInput::MaskedImage) {
            // foreground probability gating the resized bbox image, plus the
            // foreground probability itself as a second channel
            std::vector<double> img_resized(static_cast<size_t>(n) * arch_.mask_size * arch_.mask_size);
            for (int i = 0; i < n; ++i) {
                std::vector<double> img_i(iv.begin() + static_cast<size_t>(i) * s * s,
                                          iv.begin() + static_cast<size_t>(i + 1) * s * s);
                Tensor r = resize_bilinear_2d(Tensor::from_values({s, s}, std::move(img_i)),
                                              arch_.mask_size, arch_.mask_size);
                std::copy(r.values().begin(), r.values().end(),
                          img_resized.begin() + static_cast<size_t>(i) * arch_.mask_size * arch_.mask_size);
            }
            Tensor img =
                Tensor::from_values({n, 1, arch_.mask_size, arch_.mask_size}, std::move(img_resized));
            Tensor fg = slice_channel(out.mask_chw, 1);
            head_in = concat({mul(fg, img), fg}, 1);
        }
        Tensor h = head_in;
        for (const auto& b : head_blocks_) h = b.forward(params, h);
        Tensor gap = reduce_mean(h, {2, 3});
        out.probs = classifier_tail("cgl", gap, params, train_mode, dropout_rng, &out.features);
    }
    return out;
}

ForwardOutputs DualCoreNet::fused_forward(const Tensor& context_roi, const Tensor& bbox_roi,
                                          const Tensor& image_for_crf, const ParamSet& params,
                                          const CrfConfig& cfg, bool train_mode, Rng* dropout_rng,
                                          bool ablate_lpl, bool ablate_cgl) const {
    LplOut lpl = lpl_forward(context_roi, params, train_mode, dropout_rng);
    CglOut cgl = cgl_forward(bbox_roi, image_for_crf, params, cfg, train_mode, dropout_rng);

    Tensor lf = ablate_lpl ? Tensor::zeros(lpl.features.shape()) : lpl.features;
    Tensor cf = ablate_cgl ? Tensor::zeros(cgl.features.shape()) : cgl.features;
    Tensor fused = softmax(fusion_head_.forward(params, concat({lf, cf}, 1), Activation::None), 1);

    ForwardOutputs out;
    out.class_probs = fused;
    out.lpl_probs = lpl.probs;
    out.cgl_probs = cgl.probs;
    out.soft_mask = cgl.soft_mask;
    out.lpl_features = lpl.features;
    out.cgl_features = cgl.features;
    out.unary_probs = cgl.unary_probs;
    out.crf_probs = cgl.crf_probs;
    return out;
}

std::vector<TraceEntry> DualCoreNet::lpl_trace() const {
    std::vector<TraceEntry> t;
    int s = arch_.context_size;
    t.push_back({"input", {arch_.lpl_in_channels, s, s}});
    for (const auto& b : lpl_blocks_) {
        s = b.out_extent(s);
        t.push_back({b.name, {b.out_ch, s, s}});
    }
    t.push_back({"gap", {arch_.lpl_channels[2]}});
    t.push_back({"dense", {arch_.dense_units}});
    t.push_back({"head", {2}});
    return t;
}

std::vector<TraceEntry> DualCoreNet::cgl_trace() const {
    std::vector<TraceEntry> t;
    int s = arch_.bbox_size;
    const auto& cc = arch_.cgl_channels;
    t.push_back({"input", {1, s, s}});
    t.push_back({"enc1", {cc[0], s, s}});
    t.push_back({"enc2", {cc[1], s / 2, s / 2}});
    t.push_back({"enc3", {cc[2], s / 4, s / 4}});
    t.push_back({"enc4", {cc[3], s / 8, s / 8}});
    t.push_back({"dec1", {cc[2], s / 4, s / 4}});
    t.push_back({"dec2", {cc[1], s / 2, s / 2}});
    t.push_back({"dec3", {cc[0], s, s}});
    t.push_back({"unary", {2, s, s}});
    t.push_back({"mask", {2, arch_.mask_size, arch_.mask_size}});
    int hs = arch_.mask_size;
    for (const auto& b : head_blocks_) {
        hs = b.out_extent(hs);
        t.push_back({b.name, {b.out_ch, hs, hs}});
    }
    t.push_back({"dense", {arch_.dense_units}});
    t.push_back({"head", {2}});
    return t;
}

Tensor class_cross_entropy(const Tensor& probs, const std::vector<int>& labels) {
    if (probs.rank() != 2 || probs.shape()[1] != 2)
        throw ShapeError("class_cross_entropy expects (N,2) probabilities");
    int n = probs.shape()[0];
    if (static_cast<int>(labels.size()) != n)
        throw ContractError("class_cross_entropy: label count mismatch");
    std::vector<double> onehot(static_cast<size_t>(n) * 2, 0.0);
    for (int i = 0; i < n; ++i) {
        if (labels[i] != 0 && labels[i] != 1) throw ContractError("labels must be {0,1}");
        onehot[static_cast<size_t>(i) * 2 + labels[i]] = 1.0;
    }
    Tensor oh = Tensor::from_values({n, 2}, std::move(onehot));
    Tensor picked = mul(oh, log(clamp_min(probs, 1e-7)));
    return mul(sum_all(picked), -1.0 / n);
}

Tensor batch_context(const std::vector<const RoiSample*>& batch, int in_channels) {
    if (batch.empty()) throw ContractError("empty batch");
    int s = batch[0]->context_roi.shape()[0];
    std::vector<double> v;
    v.reserve(static_cast<size_t>(batch.size()) * in_channels * s * s);
    for (const RoiSample* r : batch)
        for (int c = 0; c < in_channels; ++c)
            v.insert(v.end(), r->context_roi.values().begin(), r->context_roi.values().end());
    return Tensor::from_values({static_cast<int>(batch.size()), in_channels, s, s}, std::move(v));
}

Tensor batch_bbox(const std::vector<const RoiSample*>& batch) {
    if (batch.empty()) throw ContractError("empty batch");
    int s = batch[0]->bbox_roi.shape()[0];
    std::vector<double> v;
    v.reserve(static_cast<size_t>(batch.size()) * s * s);
    for (const RoiSample* r : batch)
        v.insert(v.end(), r->bbox_roi.values().begin(), r->bbox_roi.values().end());
    return Tensor::from_values({static_cast<int>(batch.size()), 1, s, s}, std::move(v));
}

Tensor batch_crf_image(const std::vector<const RoiSample*>& batch) {
    Tensor b = batch_bbox(batch);
    return reshape(b, {b.shape()[0], b.shape()[2], b.shape()[3]});
}

std::vector<int> batch_labels(const std::vector<const RoiSample*>& batch) {
    std::vector<int> out;
    out.reserve(batch.size());
    for (const RoiSample* r : batch) out.push_back(r->label);
    return out;
}

} // namespace dcn
