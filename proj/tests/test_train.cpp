#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "dcn/cli.hpp"
#include "dcn/train.hpp"

using namespace dcn;
namespace fs = std::filesystem;

namespace {

struct F64Mode {
    Precision saved;
    F64Mode() : saved(precision()) { set_precision(Precision::f64); }
    ~F64Mode() { set_precision(saved); }
};

std::vector<RoiSample> desk_samples(int n, uint64_t seed) {
    Rng gen(seed);
    SynthSpec spec;
    spec.image_size = 64;
    auto images = synth_dataset(n, gen, spec);
    std::vector<RoiSample> out;
    for (const auto& img : images) out.push_back(extract_rois(img, RoiSizes{16, 32, 32}));
    return out;
}

bool params_equal(const ParamSet& a, const ParamSet& b, const std::string& prefix) {
    for (const auto& name : a.names_with_prefix(prefix))
        if (a.at(name).values() != b.at(name).values()) return false;
    return true;
}

ParamSet clone_params(const ParamSet& src) {
    ParamSet out;
    for (const auto& [name, t] : src) out.add(name, t.detach());
    return out;
}

} // namespace

TEST_CASE("adam first step magnitude is about lr for unit gradient") {
    F64Mode f64;
    ParamSet params;
    params.add("p", Tensor::from_values({3}, {1.0, -2.0, 0.5}));
    AdamState state(params, AdamConfig{1e-3, 0.9, 0.999, 1e-8});
    params.at("p").grad() = {1.0, 1.0, 1.0};
    adam_step(params, state, {""});
    CHECK(state.step == 1);
    CHECK(params.at("p").values()[0] == doctest::Approx(1.0 - 1e-3).epsilon(1e-6));
    CHECK(params.at("p").values()[1] == doctest::Approx(-2.0 - 1e-3).epsilon(1e-6));
}

TEST_CASE("adam zero gradient leaves fresh parameters unchanged but advances the step") {
    F64Mode f64;
    ParamSet params;
    params.add("p", Tensor::from_values({2}, {0.7, -0.7}));
    AdamState state(params, AdamConfig{});
    params.at("p").grad() = {0.0, 0.0};
    adam_step(params, state, {""});
    CHECK(params.at("p").values() == std::vector<double>{0.7, -0.7});
    CHECK(state.step == 1);
}

TEST_CASE("adam drives a quadratic to its minimum") {
    F64Mode f64;
    ParamSet params;
    params.add("p", Tensor::from_values({1}, {1.0}));
    AdamState state(params, AdamConfig{0.1, 0.9, 0.999, 1e-8});
    for (int i = 0; i < 200; ++i) {
        params.zero_grads();
        double p = params.at("p").values()[0];
        params.at("p").grad() = {2.0 * p};
        adam_step(params, state, {""});
    }
    CHECK(std::fabs(params.at("p").values()[0]) < 0.05);
}

TEST_CASE("adam freezing and NaN diagnostics") {
    F64Mode f64;
    ParamSet params;
    params.add("lpl.w", Tensor::from_values({2}, {1.0, 2.0}));
    params.add("cgl.w", Tensor::from_values({2}, {3.0, 4.0}));
    AdamState state(params, AdamConfig{});
    params.at("lpl.w").grad() = {1.0, 1.0};
    params.at("cgl.w").grad() = {1.0, 1.0};
    adam_step(params, state, {"lpl."});
    CHECK(params.at("cgl.w").values() == std::vector<double>{3.0, 4.0}); // frozen, bitwise
    CHECK(params.at("lpl.w").values() != std::vector<double>{1.0, 2.0});

    params.zero_grads();
    params.at("lpl.w").grad() = {std::nan(""), 0.0};
    try {
        adam_step(params, state, {"lpl."});
        CHECK(false);
    } catch (const TrainError& e) {
        CHECK(std::string(e.what()).find("lpl.w") != std::string::npos);
    }
}

TEST_CASE("run_phase: step count, history length, and path isolation") {
    auto samples = desk_samples(8, 99);
    NetworkArch arch = NetworkArch::named("desk");
    DualCoreNet net(arch);
    Rng rng(5);
    ParamSet params = net.init_params(rng);
    ParamSet before = clone_params(params);
    AdamState adam(params, AdamConfig{});
    CrfConfig crf;
    crf.iterations = 2;
    TrainHyper hyper;

    PhaseSpec lpl{PhaseKind::Lpl, "lpl", 3, 4, 1e-3, {"lpl."}};
    auto hist = run_phase(net, lpl, samples, params, adam, crf, hyper, 7, 0, 3, "");
    CHECK(hist.size() == 3);
    // 8 samples, batch 4 -> exactly 2 update steps per epoch
    CHECK(adam.step == 6);
    for (const auto& r : hist) {
        CHECK(r.phase == "lpl");
        CHECK(std::isfinite(r.loss));
        CHECK(r.metric >= 0.0);
        CHECK(r.metric <= 1.0);
    }
    // the lpl phase leaves cgl and fusion parameters bitwise unchanged
    CHECK(params_equal(params, before, "cgl."));
    CHECK(params_equal(params, before, "fusion."));
    CHECK_FALSE(params_equal(params, before, "lpl."));

    // and the cgl segmentation phase leaves lpl untouched
    ParamSet before2 = clone_params(params);
    PhaseSpec seg{PhaseKind::CglSeg, "cgl_seg", 2, 4, 1e-3, {"cgl.unet."}};
    run_phase(net, seg, samples, params, adam, crf, hyper, 7, 0, 2, "");
    CHECK(params_equal(params, before2, "lpl."));
    CHECK(params_equal(params, before2, "cgl.head."));
    CHECK_FALSE(params_equal(params, before2, "cgl.unet."));
}

TEST_CASE("interrupted training resumes bitwise") {
    auto samples = desk_samples(8, 123);
    NetworkArch arch = NetworkArch::named("desk");
    DualCoreNet net(arch);
    CrfConfig crf;
    crf.iterations = 2;
    TrainHyper hyper;
    PhaseSpec phase{PhaseKind::CglSeg, "cgl_seg", 6, 4, 2e-3, {"cgl.unet."}};

    // straight run
    Rng r1(5);
    ParamSet straight = net.init_params(r1);
    AdamState adam1(straight, AdamConfig{});
    run_phase(net, phase, samples, straight, adam1, crf, hyper, 11, 0, 6, "");

    // interrupted at epoch 3, checkpointed, reloaded, resumed
    Rng r2(5);
    ParamSet resumed = net.init_params(r2);
    AdamState adam2(resumed, AdamConfig{});
    run_phase(net, phase, samples, resumed, adam2, crf, hyper, 11, 0, 3, "");
    auto ckpt = (fs::temp_directory_path() / "dcn_resume.dcnckpt").string();
    save_training_checkpoint(ckpt, resumed, adam2);

    Rng r3(5);
    ParamSet reloaded = net.init_params(r3);
    AdamState adam3(reloaded, AdamConfig{});
    load_training_checkpoint(ckpt, reloaded, adam3);
    CHECK(adam3.step == adam2.step);
    run_phase(net, phase, samples, reloaded, adam3, crf, hyper, 11, 3, 6, "");

    for (const auto& [name, t] : straight)
        CHECK(t.values() == reloaded.at(name).values());
    std::remove(ckpt.c_str());
}

TEST_CASE("training checkpoint round-trips params, moments and step") {
    auto samples = desk_samples(4, 7);
    DualCoreNet net(NetworkArch::named("desk"));
    Rng rng(3);
    ParamSet params = net.init_params(rng);
    AdamState adam(params, AdamConfig{});
    CrfConfig crf;
    crf.iterations = 2;
    PhaseSpec phase{PhaseKind::Lpl, "lpl", 1, 2, 1e-3, {"lpl."}};
    run_phase(net, phase, samples, params, adam, crf, TrainHyper{}, 3, 0, 1, "");

    auto path = (fs::temp_directory_path() / "dcn_opt_ckpt.dcnckpt").string();
    save_training_checkpoint(path, params, adam);
    DualCoreNet net2(NetworkArch::named("desk"));
    Rng rng2(99); // different init; all values replaced by the checkpoint
    ParamSet params2 = net2.init_params(rng2);
    AdamState adam2(params2, AdamConfig{});
    load_training_checkpoint(path, params2, adam2);
    CHECK(adam2.step == adam.step);
    for (const auto& [name, t] : params) {
        CHECK(params2.at(name).values() == t.values());
        CHECK(adam2.m(name).values() == adam.m(name).values());
        CHECK(adam2.v(name).values() == adam.v(name).values());
    }

    // loading into a mismatched architecture names the bad tensors
    DualCoreNet small(NetworkArch::named("toy"));
    Rng rng3(1);
    ParamSet params3 = small.init_params(rng3);
    AdamState adam3(params3, AdamConfig{});
    CHECK_THROWS_AS(load_training_checkpoint(path, params3, adam3), ShapeError);
    std::remove(path.c_str());
}

TEST_CASE("mask downsampling to decoder resolution stays binary") {
    auto samples = desk_samples(1, 55);
    Tensor small = mask_at_decoder_res(samples[0].mask_roi, 16);
    CHECK(small.shape() == Shape{16, 16});
    for (double v : small.values()) CHECK((v == 0.0 || v == 1.0));
}

TEST_CASE("standard plan drops zero-epoch phases and keeps order") {
    TrainPlanConfig cfg;
    cfg.epochs_lpl = 2;
    cfg.epochs_cgl_seg = 0;
    cfg.epochs_cgl_cls = 1;
    cfg.epochs_joint = 1;
    auto plan = standard_plan(cfg);
    REQUIRE(plan.size() == 3);
    CHECK(plan[0].name == "lpl");
    CHECK(plan[1].name == "cgl_cls");
    CHECK(plan[2].name == "joint");
    // joint phase unfreezes everything by default
    CHECK(plan[2].unfrozen == std::vector<std::string>{""});

    cfg.epochs_lpl = cfg.epochs_cgl_cls = cfg.epochs_joint = 0;
    CHECK_THROWS_AS(standard_plan(cfg), ConfigError);
}
