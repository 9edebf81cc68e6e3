#pragma once

// Adam optimizer, the three-phase training schedule (texture path alone,
// segmentation path alone, then joint), and training checkpoints.

#include <string>
#include <vector>

#include "dcn/data.hpp"
#include "dcn/network.hpp"
#include "dcn/nn.hpp"

namespace dcn {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// First and second moment per parameter, step counter shared.
class AdamState {
public:
    AdamState() = default;
    AdamState(const ParamSet& params, AdamConfig cfg);

    AdamConfig config;
    int64_t step = 0;

    Tensor& m(const std::string& name) { return m_.at(name); }
    Tensor& v(const std::string& name) { return v_.at(name); }
    const ParamSet& moments_m() const { return m_; }
    const ParamSet& moments_v() const { return v_; }

private:
    friend void adam_restore(AdamState&, const ParamSet&);
    ParamSet m_, v_;
};

// Standard Adam with bias correction. Parameters whose names match none of
// the unfrozen prefixes are untouched (moments included). NaN gradients
// raise TrainError naming the parameter. An empty prefix unfreezes all.
void adam_step(ParamSet& params, AdamState& state,
               const std::vector<std::string>& unfrozen_prefixes);

enum class PhaseKind { Lpl, CglSeg, CglCls, Joint };

struct PhaseSpec {
    PhaseKind kind = PhaseKind::Lpl;
    std::string name = "lpl";
    int epochs = 0;
    int batch_size = 4;
    double lr = 1e-3;
    std::vector<std::string> unfrozen; // parameter name prefixes
};

struct TrainHyper {
    double lambda = 0.67;        // segmentation loss trade-off
    double beta_pairwise = 0.01; // pairwise energy weight
    double aux_lpl_weight = 0.0; // path losses during joint training
    double aux_cgl_weight = 0.0;
    bool seg_loss_in_joint = false;
};

struct TrainPlanConfig {
    int epochs_lpl = 30;
    int epochs_cgl_seg = 30;
    int epochs_cgl_cls = 20;
    int epochs_joint = 20;
    int batch_size = 4;
    double lr = 1e-3;
    bool joint_unfreeze_all = true;
};

// lpl -> cgl_seg -> cgl_cls -> joint; phases with zero epochs are dropped.
std::vector<PhaseSpec> standard_plan(const TrainPlanConfig& cfg);

struct EpochRecord {
    std::string phase;
    int epoch = 0;
    double loss = 0.0;
    double metric = 0.0; // accuracy for classification phases, dice for segmentation
};

// Mini-batch loop with seeded shuffling. The shuffle and dropout streams are
// derived from (seed, phase, epoch, step), so a run resumed at an epoch
// boundary continues bitwise identically. Saves <phase>_best / <phase>_last
// checkpoints under ckpt_dir when it is non-empty.
std::vector<EpochRecord> run_phase(const DualCoreNet& net, const PhaseSpec& phase,
                                   const std::vector<RoiSample>& train_data, ParamSet& params,
                                   AdamState& adam, const CrfConfig& crf_cfg,
                                   const TrainHyper& hyper, uint64_t seed, int start_epoch,
                                   int end_epoch, const std::string& ckpt_dir);

// Downsampled binary mask at the decoder resolution (nearest-neighbour).
Tensor mask_at_decoder_res(const Tensor& mask_roi, int decoder_size);

// --- checkpointing of params + optimizer state ---------------------------------

// Training checkpoint = parameters plus opt.step / opt.m.* / opt.v.* tensors.
void save_training_checkpoint(const std::string& path, const ParamSet& params,
                              const AdamState& adam);

// Restores params (validated against `expected` shapes) and optimizer state.
// Checkpoints without optimizer tensors restore a fresh state.
void load_training_checkpoint(const std::string& path, ParamSet& params, AdamState& adam);

// Parameters only (optimizer entries ignored), validated against expected.
ParamSet load_params_checkpoint(const std::string& path, const ParamSet& expected);

void append_history(const std::string& path, const std::vector<EpochRecord>& records);

} // namespace dcn
