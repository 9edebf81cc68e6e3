#include "dcn/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "dcn/verify.hpp"

namespace fs = std::filesystem;

namespace dcn {

std::vector<RoiSample> extract_all(const std::vector<AnnotatedImage>& images,
                                   const RoiSizes& sizes) {
    std::vector<RoiSample> out;
    out.reserve(images.size());
    for (const auto& img : images) out.push_back(extract_rois(img, sizes));
    return out;
}

namespace {

// Sample i of a values-only (N,H,W,2) batch as an (H,W,2) soft mask.
SoftMask sample_mask(const Tensor& soft_mask_nhwc, int i) {
    int h = soft_mask_nhwc.shape()[1], w = soft_mask_nhwc.shape()[2];
    int64_t block = static_cast<int64_t>(h) * w * 2;
    std::vector<double> v(soft_mask_nhwc.values().begin() + i * block,
                          soft_mask_nhwc.values().begin() + (i + 1) * block);
    return SoftMask{Tensor::from_values({h, w, 2}, std::move(v))};
}

} // namespace

MetricReport evaluate_samples(const DualCoreNet& net, const ParamSet& params,
                              const CrfConfig& crf_cfg, const std::vector<RoiSample>& samples) {
    MetricReport report;
    std::vector<double> s_lpl, s_cgl, s_fused;
    std::vector<int> labels;
    const size_t batch_size = 8;
    for (size_t pos = 0; pos < samples.size(); pos += batch_size) {
        std::vector<const RoiSample*> batch;
        for (size_t j = pos; j < std::min(samples.size(), pos + batch_size); ++j)
            batch.push_back(&samples[j]);
        Tensor ctx = batch_context(batch, net.arch().lpl_in_channels);
        Tensor bbox = batch_bbox(batch);
        Tensor img = batch_crf_image(batch);
        ForwardOutputs fo = net.fused_forward(ctx, bbox, img, params, crf_cfg, false, nullptr);
        for (size_t i = 0; i < batch.size(); ++i) {
            s_lpl.push_back(fo.lpl_probs.values()[i * 2 + 1]);
            s_cgl.push_back(fo.cgl_probs.values()[i * 2 + 1]);
            s_fused.push_back(fo.class_probs.values()[i * 2 + 1]);
            labels.push_back(batch[i]->label);
            SoftMask m = sample_mask(fo.soft_mask, static_cast<int>(i));
            report.dice_entries.push_back({batch[i]->id, dice(binarize(m), batch[i]->mask_roi)});
        }
    }
    report.auc_entries.push_back({"lpl", roc_auc(s_lpl, labels)});
    report.auc_entries.push_back({"cgl", roc_auc(s_cgl, labels)});
    report.auc_entries.push_back({"fused", roc_auc(s_fused, labels)});
    return report;
}

TrainResult train_pipeline(const Config& cfg, const std::vector<AnnotatedImage>& images,
                           const std::string& out_dir) {
    DualCoreNet net(cfg.network);
    Rng seed_rng(cfg.run.seed);
    Rng init_rng = seed_rng.fork(0x494e4954u); // init stream
    Rng split_rng = seed_rng.fork(0x53504c54u); // split stream

    std::vector<RoiSample> samples = extract_all(images, cfg.network.roi_sizes());
    DatasetSplit split = split_dataset(samples, cfg.data.split_ratio, split_rng);

    std::vector<RoiSample> train_set;
    if (cfg.data.augment) {
        for (const auto& s : split.train()) {
            auto flips = augment_flips(s);
            train_set.insert(train_set.end(), flips.begin(), flips.end());
        }
    } else {
        train_set = split.train();
    }

    TrainResult result;
    result.params = net.init_params(init_rng);
    AdamState adam(result.params,
                   AdamConfig{cfg.plan.lr, 0.9, 0.999, 1e-8});

    if (!out_dir.empty()) fs::create_directories(out_dir);
    {
        DatasetSplit::TrainGuard guard(split);
        for (const PhaseSpec& phase : standard_plan(cfg.plan)) {
            auto records = run_phase(net, phase, train_set, result.params, adam, cfg.crf, cfg.hyper,
                                     cfg.run.seed, 0, phase.epochs, out_dir);
            result.history.insert(result.history.end(), records.begin(), records.end());
        }
    }
    result.report = evaluate_samples(net, result.params, cfg.crf, split.test());

    if (!out_dir.empty()) {
        save_training_checkpoint((fs::path(out_dir) / "ckpt_final.dcnckpt").string(), result.params,
                                 adam);
        // history.tsv written in one pass so reruns are byte-identical
        std::string hist = (fs::path(out_dir) / "history.tsv").string();
        std::ofstream clear(hist, std::ios::trunc);
        clear.close();
        append_history(hist, result.history);
        result.report.save((fs::path(out_dir) / "report.txt").string());
        write_roc_svg((fs::path(out_dir) / "roc.svg").string(), result.report.auc_entries);
    }
    return result;
}

namespace {

Config load_config_or_default(const std::string& path) {
    if (path.empty()) return Config{};
    return parse_config_file(path);
}

void apply_run_settings(const Config& cfg) {
    set_precision(cfg.run.precision);
    if (const char* t = std::getenv("DCN_THREADS")) {
        int n = std::atoi(t);
        set_thread_budget(n > 0 ? n : 1);
    } else {
        set_thread_budget(1);
    }
}

int cmd_synth(const std::string& out, int count, uint64_t seed, int image_size) {
    if (count < 1) {
        std::cerr << "error: --count must be >= 1\n";
        return 2;
    }
    Rng rng(seed);
    SynthSpec spec;
    spec.image_size = image_size;
    auto images = synth_dataset(count, rng, spec);
    save_dataset(out, images);
    std::cout << "wrote " << images.size() << " samples to " << out << "\n";
    return 0;
}

int cmd_train(const Config& cfg, const std::string& data_dir, const std::string& out_dir) {
    if (!fs::exists(fs::path(data_dir) / "index.tsv")) {
        std::cerr << "error: dataset directory not found or missing index.tsv: " << data_dir << "\n";
        return 2;
    }
    auto images = load_dataset(data_dir);
    if (images.empty()) {
        std::cerr << "error: dataset is empty: " << data_dir << "\n";
        return 2;
    }
    TrainResult result = train_pipeline(cfg, images, out_dir);
    std::cout << "trained " << result.history.size() << " epochs; test mean dice "
              << result.report.mean_dice() << "\n";
    for (const auto& a : result.report.auc_entries)
        std::cout << "auc " << a.split << " " << a.curve.auc << "\n";
    return 0;
}

int cmd_eval(const Config& cfg, const std::string& ckpt, const std::string& data_dir,
             const std::string& out_dir) {
    if (!fs::exists(ckpt)) {
        std::cerr << "error: checkpoint not found: " << ckpt << "\n";
        return 2;
    }
    if (!fs::exists(fs::path(data_dir) / "index.tsv")) {
        std::cerr << "error: dataset directory not found or missing index.tsv: " << data_dir << "\n";
        return 2;
    }
    DualCoreNet net(cfg.network);
    Rng rng(cfg.run.seed);
    ParamSet expected = net.init_params(rng);
    ParamSet params = load_params_checkpoint(ckpt, expected);
    auto images = load_dataset(data_dir);
    auto samples = extract_all(images, cfg.network.roi_sizes());
    MetricReport report = evaluate_samples(net, params, cfg.crf, samples);
    if (out_dir.empty()) {
        report.write(std::cout);
    } else {
        fs::create_directories(out_dir);
        report.save((fs::path(out_dir) / "report.txt").string());
        write_roc_svg((fs::path(out_dir) / "roc.svg").string(), report.auc_entries);
        std::cout << "mean dice " << report.mean_dice() << "\n";
    }
    return 0;
}

int cmd_segment(const Config& cfg, const std::string& ckpt, const std::string& image_path,
                const std::string& mask_out, std::string soft_out) {
    if (!fs::exists(ckpt)) {
        std::cerr << "error: checkpoint not found: " << ckpt << "\n";
        return 2;
    }
    if (!fs::exists(image_path)) {
        std::cerr << "error: image not found: " << image_path << "\n";
        return 2;
    }
    DualCoreNet net(cfg.network);
    Rng rng(cfg.run.seed);
    ParamSet expected = net.init_params(rng);
    ParamSet params = load_params_checkpoint(ckpt, expected);

    // The input image is treated as an already-cropped mass bounding box.
    Tensor img = read_pgm(image_path);
    int s = cfg.network.bbox_size;
    Tensor roi = resize_bilinear_2d(img, s, s);
    Tensor bbox = reshape(roi, {1, 1, s, s});
    Tensor crf_img = reshape(roi, {1, s, s});
    auto cgl = net.cgl_forward(bbox, crf_img, params, cfg.crf, false, nullptr, false);
    SoftMask m = sample_mask(cgl.soft_mask, 0);
    Tensor hard = binarize(m);
    write_pgm8(mask_out, hard);
    if (soft_out.empty()) soft_out = mask_out + ".soft.pgm";
    Tensor fg = Tensor::from_values({m.height(), m.width()}, [&] {
        std::vector<double> v(static_cast<size_t>(m.height()) * m.width());
        for (size_t i = 0; i < v.size(); ++i) v[i] = m.probs.values()[i * 2 + 1];
        return v;
    }());
    write_pgm8(soft_out, fg);
    double frac = 0.0;
    for (double v : hard.values()) frac += v;
    frac /= static_cast<double>(hard.numel());
    std::cout << "mask written: " << mask_out << " (foreground " << frac * 100.0 << "%)\n";
    return 0;
}

} // namespace

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"dualcorenet: dual-path segmentation + classification at desk scale"};
    app.require_subcommand(1);
    app.fallthrough(); // global flags may follow the subcommand

    std::string config_path;
    uint64_t seed_override = 0;
    bool seed_given = false;
    std::string precision_override;
    app.add_option("--config", config_path, "INI config file");
    app.add_option("--seed", seed_override, "override [run] seed")->each([&](const std::string&) {
        seed_given = true;
    });
    app.add_option("--precision", precision_override, "override [run] precision")
        ->check(CLI::IsMember({"f32", "f64"}));

    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    std::string synth_out;
    int synth_count = 0;
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--count", synth_count, "number of samples")->required();

    auto* train = app.add_subcommand("train", "run the training schedule");
    std::string train_data, train_out;
    train->add_option("--data", train_data, "dataset directory")->required();
    train->add_option("--out", train_out, "output directory")->required();

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    std::string eval_ckpt, eval_data, eval_out;
    eval->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
    eval->add_option("--data", eval_data, "dataset directory")->required();
    eval->add_option("--out", eval_out, "output directory (default: report to stdout)");

    auto* segment = app.add_subcommand("segment", "segment one ROI image");
    std::string seg_ckpt, seg_image, seg_mask_out, seg_soft_out;
    segment->add_option("--ckpt", seg_ckpt, "checkpoint file")->required();
    segment->add_option("--image", seg_image, "input PGM (bounding-box ROI)")->required();
    segment->add_option("--mask-out", seg_mask_out, "binarized mask PGM")->required();
    segment->add_option("--soft-out", seg_soft_out, "soft mask PGM");

    auto* verify = app.add_subcommand("verify", "run property suites");
    std::string suite = "all";
    verify->add_option("--suite", suite, "grad|crf|metrics|all")
        ->check(CLI::IsMember({"grad", "crf", "metrics", "all"}));

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) { // --help
            std::cout << app.help();
            return 0;
        }
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }

    try {
        Config cfg = load_config_or_default(config_path);
        if (seed_given) cfg.run.seed = seed_override;
        if (precision_override == "f32") cfg.run.precision = Precision::f32;
        if (precision_override == "f64") cfg.run.precision = Precision::f64;
        apply_run_settings(cfg);

        if (*synth) return cmd_synth(synth_out, synth_count, cfg.run.seed, cfg.data.synth_image_size);
        if (*train) return cmd_train(cfg, train_data, train_out);
        if (*eval) return cmd_eval(cfg, eval_ckpt, eval_data, eval_out);
        if (*segment) return cmd_segment(cfg, seg_ckpt, seg_image, seg_mask_out, seg_soft_out);
        if (*verify) {
            int failures = run_verify_suites({suite}, std::cout);
            return failures == 0 ? 0 : 1;
        }
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

} // namespace dcn
