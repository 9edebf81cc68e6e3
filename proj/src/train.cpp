#include "dcn/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "dcn/metrics.hpp"

namespace fs = std::filesystem;

namespace dcn {

namespace {

double q_store(double v) {
    return precision() == Precision::f32 ? static_cast<double>(static_cast<float>(v)) : v;
}

bool name_unfrozen(const std::string& name, const std::vector<std::string>& prefixes) {
    for (const auto& p : prefixes)
        if (p.empty() || name.rfind(p, 0) == 0) return true;
    return false;
}

uint64_t phase_tag(const std::string& name) {
    uint64_t h = 1469598103934665603ULL;
    for (char c : name) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
    return h;
}

} // namespace

AdamState::AdamState(const ParamSet& params, AdamConfig cfg) : config(cfg) {
    for (const auto& [name, t] : params) {
        m_.add(name, Tensor::zeros(t.shape()));
        v_.add(name, Tensor::zeros(t.shape()));
    }
}

void adam_step(ParamSet& params, AdamState& state, const std::vector<std::string>& unfrozen_prefixes) {
    const AdamConfig& c = state.config;
    state.step += 1;
    double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
    double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
    for (auto& [name, p] : params) {
        if (!name_unfrozen(name, unfrozen_prefixes)) continue;
        if (!p.has_grad()) continue; // no gradient reached this tensor
        auto& pv = p.values();
        auto& g = p.grad();
        auto& m = state.m(name).values();
        auto& v = state.v(name).values();
        for (size_t i = 0; i < pv.size(); ++i) {
            if (std::isnan(g[i]))
                throw TrainError("NaN gradient in parameter " + name);
            m[i] = q_store(c.beta1 * m[i] + (1.0 - c.beta1) * g[i]);
            v[i] = q_store(c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i]);
            double mhat = m[i] / bc1;
            double vhat = v[i] / bc2;
            pv[i] = q_store(pv[i] - c.lr * mhat / (std::sqrt(vhat) + c.eps));
            if (!std::isfinite(pv[i]))
                throw TrainError("non-finite value in parameter " + name + " after update");
        }
    }
}

std::vector<PhaseSpec> standard_plan(const TrainPlanConfig& cfg) {
    std::vector<PhaseSpec> plan;
    if (cfg.epochs_lpl > 0)
        plan.push_back({PhaseKind::Lpl, "lpl", cfg.epochs_lpl, cfg.batch_size, cfg.lr, {"lpl."}});
    if (cfg.epochs_cgl_seg > 0)
        plan.push_back(
            {PhaseKind::CglSeg, "cgl_seg", cfg.epochs_cgl_seg, cfg.batch_size, cfg.lr, {"cgl.unet."}});
    if (cfg.epochs_cgl_cls > 0)
        plan.push_back({PhaseKind::CglCls, "cgl_cls", cfg.epochs_cgl_cls, cfg.batch_size, cfg.lr,
                        {"cgl.unet.", "cgl.head."}});
    if (cfg.epochs_joint > 0) {
        std::vector<std::string> unfrozen =
            cfg.joint_unfreeze_all ? std::vector<std::string>{""} : std::vector<std::string>{"fusion."};
        plan.push_back({PhaseKind::Joint, "joint", cfg.epochs_joint, cfg.batch_size, cfg.lr, unfrozen});
    }
    if (plan.empty()) throw ConfigError("training plan has no phases with epochs > 0");
    return plan;
}

Tensor mask_at_decoder_res(const Tensor& mask_roi, int decoder_size) {
    if (mask_roi.rank() != 2) throw ShapeError("mask_at_decoder_res expects (H,W)");
    Tensor m4 = reshape(mask_roi.detach(), {1, 1, mask_roi.shape()[0], mask_roi.shape()[1]});
    Tensor r = resize_nearest(m4, decoder_size, decoder_size);
    return reshape(r.detach(), {decoder_size, decoder_size});
}

namespace {

struct StepOutcome {
    double loss = 0.0;
    double metric_sum = 0.0; // per-sample accuracy or dice, summed
};

double accuracy_sum(const Tensor& probs, const std::vector<int>& labels) {
    double s = 0.0;
    for (size_t i = 0; i < labels.size(); ++i)
        s += (probs.values()[i * 2 + 1] >= probs.values()[i * 2] ? 1 : 0) == labels[i] ? 1.0 : 0.0;
    return s;
}

StepOutcome train_step(const DualCoreNet& net, const PhaseSpec& phase,
                       const std::vector<const RoiSample*>& batch, ParamSet& params,
                       AdamState& adam, const CrfConfig& crf_cfg, const TrainHyper& hyper,
                       Rng dropout_rng) {
    params.zero_grads();
    std::vector<int> labels = batch_labels(batch);
    StepOutcome out;
    Tape tape;
    Tensor loss;
    switch (phase.kind) {
        case PhaseKind::Lpl: {
            Tensor ctx = batch_context(batch, net.arch().lpl_in_channels);
            auto lpl = net.lpl_forward(ctx, params, true, &dropout_rng);
            loss = loss_lpl(lpl.probs, labels);
            out.metric_sum = accuracy_sum(lpl.probs, labels);
            break;
        }
        case PhaseKind::CglSeg: {
            Tensor bbox = batch_bbox(batch);
            Tensor img = batch_crf_image(batch);
            auto cgl = net.cgl_forward(bbox, img, params, crf_cfg, true, &dropout_rng, false);
            int s = net.arch().bbox_size;
            Tensor total;
            for (size_t i = 0; i < batch.size(); ++i) {
                Tensor lab = mask_at_decoder_res(batch[i]->mask_roi, s);
                std::vector<double> img_i(img.values().begin() + static_cast<size_t>(i) * s * s,
                                          img.values().begin() + static_cast<size_t>(i + 1) * s * s);
                Tensor image_i = Tensor::from_values({s, s}, std::move(img_i));
                Tensor li = segmentation_loss(unary_slice(cgl.unary_probs, static_cast<int>(i)),
                                              mask_slice(cgl.crf_probs, static_cast<int>(i)), lab,
                                              image_i, crf_cfg, hyper.lambda, hyper.beta_pairwise);
                total = total.defined() ? add(total, li) : li;
                // training dice at mask resolution
                SoftMask m = mask_slice(cgl.mask_chw, static_cast<int>(i));
                out.metric_sum += dice(binarize(SoftMask{m.probs.detach()}), batch[i]->mask_roi);
            }
            loss = mul(total, 1.0 / static_cast<double>(batch.size()));
            break;
        }
        case PhaseKind::CglCls: {
            Tensor bbox = batch_bbox(batch);
            Tensor img = batch_crf_image(batch);
            auto cgl = net.cgl_forward(bbox, img, params, crf_cfg, true, &dropout_rng, true);
            loss = loss_cgl(cgl.probs, labels);
            out.metric_sum = accuracy_sum(cgl.probs, labels);
            break;
        }
        case PhaseKind::Joint: {
            Tensor ctx = batch_context(batch, net.arch().lpl_in_channels);
            Tensor bbox = batch_bbox(batch);
            Tensor img = batch_crf_image(batch);
            auto fo = net.fused_forward(ctx, bbox, img, params, crf_cfg, true, &dropout_rng);
            loss = loss_joint(fo.class_probs, labels);
            if (hyper.aux_lpl_weight > 0.0)
                loss = add(loss, mul(loss_lpl(fo.lpl_probs, labels), hyper.aux_lpl_weight));
            if (hyper.aux_cgl_weight > 0.0)
                loss = add(loss, mul(loss_cgl(fo.cgl_probs, labels), hyper.aux_cgl_weight));
            if (hyper.seg_loss_in_joint) {
                int s = net.arch().bbox_size;
                Tensor seg_total;
                for (size_t i = 0; i < batch.size(); ++i) {
                    Tensor lab = mask_at_decoder_res(batch[i]->mask_roi, s);
                    std::vector<double> img_i(img.values().begin() + static_cast<size_t>(i) * s * s,
                                              img.values().begin() + static_cast<size_t>(i + 1) * s * s);
                    Tensor image_i = Tensor::from_values({s, s}, std::move(img_i));
                    Tensor li = segmentation_loss(unary_slice(fo.unary_probs, static_cast<int>(i)),
                                                  mask_slice(fo.crf_probs, static_cast<int>(i)), lab,
                                                  image_i, crf_cfg, hyper.lambda, hyper.beta_pairwise);
                    seg_total = seg_total.defined() ? add(seg_total, li) : li;
                }
                loss = add(loss, mul(seg_total, 1.0 / static_cast<double>(batch.size())));
            }
            out.metric_sum = accuracy_sum(fo.class_probs, labels);
            break;
        }
    }
    out.loss = loss.item();
    if (!std::isfinite(out.loss))
        throw TrainError("non-finite loss in phase " + phase.name);
    backward(loss);
    adam_step(params, adam, phase.unfrozen);
    return out;
}

} // namespace

std::vector<EpochRecord> run_phase(const DualCoreNet& net, const PhaseSpec& phase,
                                   const std::vector<RoiSample>& train_data, ParamSet& params,
                                   AdamState& adam, const CrfConfig& crf_cfg,
                                   const TrainHyper& hyper, uint64_t seed, int start_epoch,
                                   int end_epoch, const std::string& ckpt_dir) {
    if (train_data.empty()) throw ContractError("run_phase: no training data");
    if (start_epoch < 0 || end_epoch > phase.epochs || start_epoch >= end_epoch)
        throw ContractError("run_phase: bad epoch range");
    adam.config.lr = phase.lr;
    Rng base(seed);
    uint64_t tag = phase_tag(phase.name);
    std::vector<EpochRecord> records;
    double best_metric = -1.0;

    for (int epoch = start_epoch; epoch < end_epoch; ++epoch) {
        std::vector<size_t> order(train_data.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng = base.fork(tag, 0x5348u, static_cast<uint64_t>(epoch));
        shuffle_rng.shuffle(order);

        double loss_sum = 0.0, metric_sum = 0.0;
        int steps = 0;
        for (size_t pos = 0; pos < order.size(); pos += phase.batch_size) {
            std::vector<const RoiSample*> batch;
            for (size_t j = pos; j < std::min(order.size(), pos + phase.batch_size); ++j)
                batch.push_back(&train_data[order[j]]);
            Rng dropout_rng =
                base.fork(tag, static_cast<uint64_t>(epoch), 0x4452u + static_cast<uint64_t>(steps));
            StepOutcome so = train_step(net, phase, batch, params, adam, crf_cfg, hyper, dropout_rng);
            loss_sum += so.loss * static_cast<double>(batch.size());
            metric_sum += so.metric_sum;
            ++steps;
        }
        EpochRecord rec;
        rec.phase = phase.name;
        rec.epoch = epoch;
        rec.loss = loss_sum / static_cast<double>(train_data.size());
        rec.metric = metric_sum / static_cast<double>(train_data.size());
        records.push_back(rec);

        if (!ckpt_dir.empty() && rec.metric > best_metric) {
            best_metric = rec.metric;
            save_training_checkpoint((fs::path(ckpt_dir) / ("ckpt_" + phase.name + "_best.dcnckpt")).string(),
                                     params, adam);
        }
    }
    if (!ckpt_dir.empty())
        save_training_checkpoint((fs::path(ckpt_dir) / ("ckpt_" + phase.name + "_last.dcnckpt")).string(),
                                 params, adam);
    return records;
}

// --- checkpointing ------------------------------------------------------------------

void save_training_checkpoint(const std::string& path, const ParamSet& params,
                              const AdamState& adam) {
    ParamSet flat;
    for (const auto& [name, t] : params) flat.add(name, t.detach());
    flat.add("opt.step", Tensor::scalar(static_cast<double>(adam.step)));
    for (const auto& [name, t] : adam.moments_m()) flat.add("opt.m." + name, t.detach());
    for (const auto& [name, t] : adam.moments_v()) flat.add("opt.v." + name, t.detach());
    save_checkpoint(path, flat);
}

void adam_restore(AdamState& adam, const ParamSet& loaded) {
    for (auto& [name, t] : adam.m_) {
        const Tensor* src = loaded.find("opt.m." + name);
        if (src) {
            if (src->shape() != t.shape()) throw ShapeError("optimizer moment shape mismatch: " + name);
            t.values() = src->values();
        }
    }
    for (auto& [name, t] : adam.v_) {
        const Tensor* src = loaded.find("opt.v." + name);
        if (src) {
            if (src->shape() != t.shape()) throw ShapeError("optimizer moment shape mismatch: " + name);
            t.values() = src->values();
        }
    }
    if (const Tensor* st = loaded.find("opt.step")) adam.step = static_cast<int64_t>(st->values()[0]);
}

void load_training_checkpoint(const std::string& path, ParamSet& params, AdamState& adam) {
    ParamSet loaded = load_checkpoint(path);
    ParamSet loaded_params;
    for (const auto& [name, t] : loaded)
        if (name.rfind("opt.", 0) != 0) loaded_params.add(name, t);
    validate_checkpoint_shapes(loaded_params, params);
    for (auto& [name, t] : params) t.values() = loaded_params.at(name).values();
    adam_restore(adam, loaded);
}

ParamSet load_params_checkpoint(const std::string& path, const ParamSet& expected) {
    ParamSet loaded = load_checkpoint(path);
    ParamSet out;
    for (const auto& [name, t] : loaded)
        if (name.rfind("opt.", 0) != 0) out.add(name, t);
    validate_checkpoint_shapes(out, expected);
    return out;
}

void append_history(const std::string& path, const std::vector<EpochRecord>& records) {
    std::ofstream f(path, std::ios::app);
    if (!f) throw IoError("cannot append history: " + path);
    for (const auto& r : records) {
        char buf[128];
        std::snprintf(buf, sizeof(buf), "%s\t%d\t%.6f\t%.6f\n", r.phase.c_str(), r.epoch, r.loss,
                      r.metric);
        f << buf;
    }
}

} // namespace dcn
