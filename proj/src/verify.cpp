#include "dcn/verify.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <sstream>

#include "dcn/metrics.hpp"
#include "dcn/network.hpp"
#include "dcn/nn.hpp"

namespace dcn {

std::vector<double> crf_mean_field_oracle(const std::vector<double>& unary_hw2,
                                          const std::vector<double>& image, int h, int w,
                                          const CrfConfig& cfg) {
    int64_t n = static_cast<int64_t>(h) * w;
    if (static_cast<int64_t>(unary_hw2.size()) != n * 2 ||
        static_cast<int64_t>(image.size()) != n)
        throw ShapeError("crf oracle: size mismatch");
    if (cfg.w_spatial == 0.0 && cfg.w_bilateral == 0.0) return unary_hw2;

    // Row-normalized kernels, self excluded, optional support truncation.
    auto build = [&](bool bilateral) {
        std::vector<double> k(static_cast<size_t>(n) * n, 0.0);
        double inv_s = bilateral ? 1.0 / (2.0 * cfg.bilateral_theta_spatial * cfg.bilateral_theta_spatial)
                                 : 1.0 / (2.0 * cfg.spatial_theta * cfg.spatial_theta);
        double inv_i = 1.0 / (2.0 * cfg.bilateral_theta_intensity * cfg.bilateral_theta_intensity);
        int64_t r2 = cfg.support_radius > 0
                         ? static_cast<int64_t>(cfg.support_radius) * cfg.support_radius
                         : -1;
        for (int64_t i = 0; i < n; ++i) {
            double rowsum = 0.0;
            for (int64_t j = 0; j < n; ++j) {
                if (i == j) continue;
                int64_t dy = i / w - j / w, dx = i % w - j % w;
                int64_t d2 = dy * dy + dx * dx;
                if (r2 >= 0 && d2 > r2) continue;
                double e = -static_cast<double>(d2) * inv_s;
                if (bilateral) {
                    double di = image[i] - image[j];
                    e -= di * di * inv_i;
                }
                double v = std::exp(e);
                k[i * n + j] = v;
                rowsum += v;
            }
            if (rowsum > 0.0)
                for (int64_t j = 0; j < n; ++j) k[i * n + j] /= rowsum;
        }
        return k;
    };

    std::vector<double> ks, kb;
    if (cfg.w_spatial > 0.0) ks = build(false);
    if (cfg.w_bilateral > 0.0) kb = build(true);

    std::vector<double> log_u(n * 2);
    for (int64_t i = 0; i < n * 2; ++i) log_u[i] = std::log(std::max(unary_hw2[i], 1e-7));

    std::vector<double> q = unary_hw2;
    const auto& mu = cfg.compatibility;
    for (int t = 0; t < cfg.iterations; ++t) {
        std::vector<double> next(n * 2);
        for (int64_t i = 0; i < n; ++i) {
            double m[2] = {0.0, 0.0};
            for (int l = 0; l < 2; ++l) {
                double acc = 0.0;
                if (!ks.empty()) {
                    double s = 0.0;
                    for (int64_t j = 0; j < n; ++j) s += ks[i * n + j] * q[j * 2 + l];
                    acc += cfg.w_spatial * s;
                }
                if (!kb.empty()) {
                    double s = 0.0;
                    for (int64_t j = 0; j < n; ++j) s += kb[i * n + j] * q[j * 2 + l];
                    acc += cfg.w_bilateral * s;
                }
                m[l] = acc;
            }
            double logits[2];
            for (int l = 0; l < 2; ++l)
                logits[l] = log_u[i * 2 + l] - (mu[l * 2 + 0] * m[0] + mu[l * 2 + 1] * m[1]);
            double mx = std::max(logits[0], logits[1]);
            double e0 = std::exp(logits[0] - mx), e1 = std::exp(logits[1] - mx);
            next[i * 2] = e0 / (e0 + e1);
            next[i * 2 + 1] = e1 / (e0 + e1);
        }
        q = std::move(next);
    }
    return q;
}

double crf_pairwise_oracle(const std::vector<double>& labels, const std::vector<double>& image,
                           int h, int w, const CrfConfig& cfg) {
    int64_t n = static_cast<int64_t>(h) * w;
    double inv_s = 1.0 / (2.0 * cfg.spatial_theta * cfg.spatial_theta);
    double inv_bs = 1.0 / (2.0 * cfg.bilateral_theta_spatial * cfg.bilateral_theta_spatial);
    double inv_bi = 1.0 / (2.0 * cfg.bilateral_theta_intensity * cfg.bilateral_theta_intensity);
    int64_t r2 = cfg.support_radius > 0
                     ? static_cast<int64_t>(cfg.support_radius) * cfg.support_radius
                     : -1;
    double sum = 0.0;
    for (int64_t p = 0; p < n; ++p)
        for (int64_t qx = p + 1; qx < n; ++qx) {
            int lp = static_cast<int>(labels[p]), lq = static_cast<int>(labels[qx]);
            double mu = cfg.compatibility[lp * 2 + lq];
            if (mu == 0.0) continue;
            int64_t dy = p / w - qx / w, dx = p % w - qx % w;
            int64_t d2 = dy * dy + dx * dx;
            if (r2 >= 0 && d2 > r2) continue;
            double di = image[p] - image[qx];
            sum += mu * (cfg.w_spatial * std::exp(-static_cast<double>(d2) * inv_s) +
                         cfg.w_bilateral * std::exp(-static_cast<double>(d2) * inv_bs - di * di * inv_bi));
        }
    return sum;
}

double mann_whitney_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    int64_t wins2 = 0, pairs = 0; // counts doubled so ties stay integral
    for (size_t i = 0; i < scores.size(); ++i) {
        if (!labels[i]) continue;
        for (size_t j = 0; j < scores.size(); ++j) {
            if (labels[j]) continue;
            ++pairs;
            if (scores[i] > scores[j]) wins2 += 2;
            else if (scores[i] == scores[j]) wins2 += 1;
        }
    }
    if (pairs == 0) throw MetricError("mann_whitney_auc: single-class input");
    return static_cast<double>(wins2) / (2.0 * static_cast<double>(pairs));
}

// --- gradient suite ---------------------------------------------------------------

namespace {

struct F64Scope {
    Precision saved;
    F64Scope() : saved(precision()) { set_precision(Precision::f64); }
    ~F64Scope() { set_precision(saved); }
};

Tensor random_tensor(const Shape& s, Rng& rng, double lo = -1, double hi = 1) {
    std::vector<double> v(numel(s));
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor::from_values(s, std::move(v));
}

struct GradCheck {
    double max_rel = 0.0;
    int checked = 0;
    bool pass = true;

    void compare(double analytic, double numeric, double tol) {
        double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-6});
        double rel = std::fabs(analytic - numeric) / denom;
        if (std::fabs(analytic - numeric) > 1e-8 && rel > tol) pass = false;
        max_rel = std::max(max_rel, rel);
        ++checked;
    }
    std::string detail() const {
        std::ostringstream os;
        os << "max_rel=" << max_rel << " over " << checked << " coords";
        return os.str();
    }
};

// Full-coordinate FD check of f over x.
CheckResult fd_check(const std::string& name, const Tensor& x0,
                     const std::function<Tensor(const Tensor&)>& f, double tol = 1e-3) {
    F64Scope f64;
    Tensor x = x0.detach().set_requires_grad();
    {
        Tape tape;
        backward(f(x));
    }
    Tensor fd = finite_diff_grad([&](const Tensor& xp) { return f(xp).item(); }, x0, 1e-5);
    GradCheck gc;
    for (size_t i = 0; i < fd.values().size(); ++i) gc.compare(x.grad()[i], fd.values()[i], tol);
    return {name, gc.pass, gc.detail()};
}

// The combined loss reaches every parameter group: the fused head through
// both feature paths, each standalone head, and the U-Net through the mask.
Tensor full_net_loss(const DualCoreNet& net, const ParamSet& params, const Tensor& ctx,
                     const Tensor& bbox, const Tensor& img, const CrfConfig& crf_cfg,
                     const std::vector<int>& labels) {
    ForwardOutputs fo = net.fused_forward(ctx, bbox, img, params, crf_cfg, false, nullptr);
    Tensor loss = loss_joint(fo.class_probs, labels);
    loss = add(loss, loss_lpl(fo.lpl_probs, labels));
    loss = add(loss, loss_cgl(fo.cgl_probs, labels));
    return loss;
}

CheckResult full_network_fd_check(const std::string& preset, uint64_t init_seed,
                                  int coords_per_tensor, double tol) {
    F64Scope f64;
    NetworkArch arch = NetworkArch::named(preset);
    DualCoreNet net(arch);
    Rng rng(init_seed);
    ParamSet params = net.init_params(rng);
    // Zero-initialized biases put clipped channels exactly on the ReLU kink,
    // where no subgradient matches a central difference. Jittering every
    // parameter moves the evaluation to a generic point.
    Rng jitter(init_seed ^ 0x4a49u);
    for (auto& [name, p] : params)
        for (double& v : p.values()) v += jitter.uniform(-0.02, 0.02);

    int n = 2;
    Rng drng(55);
    // Smooth-ish positive inputs keep activations away from kinks.
    Tensor ctx = random_tensor({n, arch.lpl_in_channels, arch.context_size, arch.context_size}, drng, 0.1, 0.9);
    Tensor bbox = random_tensor({n, 1, arch.bbox_size, arch.bbox_size}, drng, 0.1, 0.9);
    Tensor img = reshape(bbox.detach(), {n, arch.bbox_size, arch.bbox_size});
    std::vector<int> labels = {0, 1};
    CrfConfig crf_cfg;
    crf_cfg.iterations = 2;

    {
        Tape tape;
        Tensor loss = full_net_loss(net, params, ctx, bbox, img, crf_cfg, labels);
        backward(loss);
    }

    // A deep ReLU net always has some activation close to a kink, so a
    // coordinate whose +/-eps interval straddles one is re-tried at smaller
    // eps: the straddle width shrinks with eps while a genuine gradient bug
    // persists at every step size.
    GradCheck gc;
    int retried = 0, total = 0;
    Rng pick(99);
    for (auto& [name, p] : params) {
        int64_t count = p.numel();
        for (int c = 0; c < coords_per_tensor; ++c) {
            int64_t idx = static_cast<int64_t>(pick.below(static_cast<uint64_t>(count)));
            double saved = p.values()[idx];
            double analytic = p.has_grad() ? p.grad()[idx] : 0.0;
            ++total;
            bool ok = false;
            double rel = 0.0, numeric = 0.0;
            for (double eps : {1e-5, 1e-6, 1e-7}) {
                p.values()[idx] = saved + eps;
                double fp = full_net_loss(net, params, ctx, bbox, img, crf_cfg, labels).item();
                p.values()[idx] = saved - eps;
                double fm = full_net_loss(net, params, ctx, bbox, img, crf_cfg, labels).item();
                p.values()[idx] = saved;
                numeric = (fp - fm) / (2 * eps);
                double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-6});
                rel = std::fabs(analytic - numeric) / denom;
                if (std::fabs(analytic - numeric) <= 1e-8 || rel <= tol) {
                    ok = true;
                    break;
                }
                ++retried;
            }
            gc.max_rel = std::max(gc.max_rel, ok ? 0.0 : rel);
            ++gc.checked;
            if (!ok) gc.pass = false;
        }
    }
    std::ostringstream os;
    os << gc.detail() << ", kink_retries=" << retried << "/" << total;
    return {"grad.full_net_" + preset, gc.pass, os.str()};
}

} // namespace

std::vector<CheckResult> verify_grad() {
    F64Scope f64;
    std::vector<CheckResult> out;
    Rng rng(17);

    {
        auto k = random_tensor({3, 2, 3, 3}, rng);
        auto x0 = random_tensor({1, 2, 8, 8}, rng);
        out.push_back(fd_check("grad.conv2d_same", x0, [&](const Tensor& x) {
            auto y = conv2d(x, k, 1, Padding::Same);
            return sum_all(mul(y, y));
        }));
        out.push_back(fd_check("grad.conv2d_valid_stride2", k, [&](const Tensor& kk) {
            auto y = conv2d(x0, kk, 2, Padding::Valid);
            return sum_all(mul(y, y));
        }));
    }
    {
        auto x0 = random_tensor({1, 3, 6, 6}, rng);
        auto dk = random_tensor({3, 1, 3, 3}, rng);
        auto pk = random_tensor({2, 3, 1, 1}, rng);
        out.push_back(fd_check("grad.separable_depth", dk, [&](const Tensor& d) {
            auto y = depthwise_separable_conv(x0, d, pk);
            return sum_all(mul(y, y));
        }));
        out.push_back(fd_check("grad.separable_point", pk, [&](const Tensor& p) {
            auto y = depthwise_separable_conv(x0, dk, p);
            return sum_all(mul(y, y));
        }));
    }
    {
        auto x0 = random_tensor({1, 2, 6, 6}, rng);
        out.push_back(fd_check("grad.maxpool", x0, [](const Tensor& x) {
            auto y = maxpool2d(x, 2);
            return sum_all(mul(y, y));
        }));
        out.push_back(fd_check("grad.upsample", x0, [](const Tensor& x) {
            auto y = upsample2d(x, 2);
            return sum_all(mul(y, y));
        }));
        out.push_back(fd_check("grad.resize_nearest", x0, [](const Tensor& x) {
            auto y = resize_nearest(x, 9, 7);
            return sum_all(mul(y, y));
        }));
    }
    {
        auto a = random_tensor({4, 5}, rng);
        auto b = random_tensor({5, 3}, rng);
        out.push_back(fd_check("grad.matmul", a, [&](const Tensor& x) {
            auto y = matmul(x, b);
            return sum_all(mul(y, y));
        }));
        out.push_back(fd_check("grad.softmax_logloss", a, [](const Tensor& x) {
            auto y = softmax(x, 1);
            return neg(sum_all(mul(y, log(clamp_min(y, 1e-7)))));
        }));
    }
    {
        // residual separable block and unet blocks through the nn layer code
        NetworkArch arch = NetworkArch::named("toy");
        DualCoreNet net(arch);
        Rng prng(5);
        ParamSet params = net.init_params(prng);
        auto x0 = random_tensor({1, arch.lpl_in_channels, 8, 8}, rng, 0.1, 0.9);
        SconvBlock blk{"lpl.block1", arch.lpl_in_channels, arch.lpl_channels[0], 3, true};
        out.push_back(fd_check("grad.sconv_block", x0, [&](const Tensor& x) {
            auto y = blk.forward(params, x);
            return sum_all(mul(y, y));
        }));
        ConvBlock enc{"cgl.unet.enc1", 1, arch.cgl_channels[0], 3};
        auto u0 = random_tensor({1, 1, 8, 8}, rng, 0.1, 0.9);
        out.push_back(fd_check("grad.unet_down", u0, [&](const Tensor& x) {
            auto [skip, down] = unet_down(enc, params, x);
            return add(sum_all(mul(skip, skip)), sum_all(mul(down, down)));
        }));
    }
    {
        // CRF layer gradient w.r.t. the unary input, parameterized through a
        // softmax so perturbed inputs stay valid probability fields
        int h = 4, w = 4;
        Rng crng(23);
        auto logits_mf = random_tensor({h, w, 2}, crng, -1.0, 1.0);
        auto image = random_tensor({h, w}, crng, 0.0, 1.0);
        CrfConfig cfg;
        cfg.iterations = 3;
        out.push_back(fd_check("grad.crf_mean_field", logits_mf, [&](const Tensor& lg) {
            UnaryField un{softmax(lg, 2)};
            SoftMask m = mean_field_infer(un, image, cfg);
            return sum_all(mul(m.probs, m.probs));
        }));
        // segmentation loss w.r.t. U-Net logits through softmax + CRF
        auto logits0 = random_tensor({h, w, 2}, crng, -1.0, 1.0);
        std::vector<double> lab(static_cast<size_t>(h) * w);
        for (auto& v : lab) v = crng.below(2) ? 1.0 : 0.0;
        auto labels = Tensor::from_values({h, w}, lab);
        out.push_back(fd_check("grad.segmentation_loss", logits0, [&](const Tensor& lg) {
            Tensor probs = softmax(lg, 2);
            UnaryField un{probs};
            SoftMask m = mean_field_infer(un, image, cfg);
            return segmentation_loss(un, m, labels, image, cfg, 0.67, 0.01);
        }));
    }
    out.push_back(full_network_fd_check("toy", 2024, 6, 1e-3));
    out.push_back(full_network_fd_check("desk", 2024, 3, 1e-3));
    return out;
}

// --- CRF suite --------------------------------------------------------------------

std::vector<CheckResult> verify_crf() {
    F64Scope f64;
    std::vector<CheckResult> out;

    // oracle equivalence on small random fields
    {
        Rng rng(31);
        double worst = 0.0;
        bool pass = true;
        for (auto [h, w] : {std::pair{5, 7}, {9, 9}, {12, 12}}) {
            std::vector<double> u(static_cast<size_t>(h) * w * 2), img(static_cast<size_t>(h) * w);
            for (int64_t i = 0; i < h * w; ++i) {
                double p = rng.uniform(0.05, 0.95);
                u[i * 2] = p;
                u[i * 2 + 1] = 1.0 - p;
                img[i] = rng.uniform(0.0, 1.0);
            }
            CrfConfig cfg;
            cfg.iterations = 5;
            cfg.bilateral_theta_spatial = 4.0;
            auto want = crf_mean_field_oracle(u, img, h, w, cfg);
            SoftMask got = mean_field_infer(UnaryField{Tensor::from_values({h, w, 2}, u)},
                                            Tensor::from_values({h, w}, img), cfg);
            for (size_t i = 0; i < want.size(); ++i) {
                double denom = std::max({std::fabs(want[i]), std::fabs(got.probs.values()[i]), 1e-12});
                double rel = std::fabs(want[i] - got.probs.values()[i]) / denom;
                worst = std::max(worst, rel);
                if (rel > 1e-6) pass = false;
            }
        }
        std::ostringstream os;
        os << "max_rel=" << worst;
        out.push_back({"crf.dense_oracle_equivalence", pass, os.str()});
    }

    // normalization after every iteration
    {
        Rng rng(77);
        int h = 9, w = 9;
        std::vector<double> u(static_cast<size_t>(h) * w * 2), img(static_cast<size_t>(h) * w);
        for (int64_t i = 0; i < h * w; ++i) {
            double p = rng.uniform(0.01, 0.99);
            u[i * 2] = p;
            u[i * 2 + 1] = 1.0 - p;
            img[i] = rng.uniform(0.0, 1.0);
        }
        CrfConfig cfg;
        auto iters = mean_field_trajectory(UnaryField{Tensor::from_values({h, w, 2}, u)},
                                           Tensor::from_values({h, w}, img), cfg);
        double worst = 0.0;
        bool pass = iters.size() == static_cast<size_t>(cfg.iterations);
        for (const auto& q : iters)
            for (int64_t i = 0; i < h * w; ++i) {
                double s = q.values()[i * 2] + q.values()[i * 2 + 1];
                worst = std::max(worst, std::fabs(s - 1.0));
                if (std::fabs(s - 1.0) > 1e-5 || q.values()[i * 2] < 0.0) pass = false;
            }
        std::ostringstream os;
        os << "max_renorm_dev=" << worst << " over " << iters.size() << " iterations";
        out.push_back({"crf.normalized_every_iteration", pass, os.str()});
    }

    // zero-weight kernels are the identity
    {
        Rng rng(3);
        int h = 6, w = 5;
        std::vector<double> u(static_cast<size_t>(h) * w * 2), img(static_cast<size_t>(h) * w);
        for (int64_t i = 0; i < h * w; ++i) {
            double p = rng.uniform(0.0, 1.0);
            u[i * 2] = p;
            u[i * 2 + 1] = 1.0 - p;
            img[i] = rng.uniform(0.0, 1.0);
        }
        CrfConfig cfg;
        cfg.w_spatial = 0.0;
        cfg.w_bilateral = 0.0;
        auto unary = Tensor::from_values({h, w, 2}, u);
        SoftMask got = mean_field_infer(UnaryField{unary}, Tensor::from_values({h, w}, img), cfg);
        bool pass = got.probs.values() == unary.values();
        out.push_back({"crf.zero_weights_identity", pass, pass ? "bitwise identical" : "differs"});
    }

    // single-pixel field reduces to softmax of the log-potentials
    {
        CrfConfig cfg;
        auto unary = Tensor::from_values({1, 1, 2}, {0.3, 0.7});
        SoftMask got = mean_field_infer(UnaryField{unary}, Tensor::from_values({1, 1}, {0.5}), cfg);
        double l0 = std::log(0.3), l1 = std::log(0.7);
        double mx = std::max(l0, l1);
        double e0 = std::exp(l0 - mx), e1 = std::exp(l1 - mx);
        double want0 = e0 / (e0 + e1);
        bool pass = std::fabs(got.probs.values()[0] - want0) < 1e-9;
        out.push_back({"crf.single_pixel_softmax", pass, ""});
    }

    // block fixture: isolated label flips never increase with iterations
    {
        int h = 9, w = 9;
        Rng rng(11);
        std::vector<double> u(static_cast<size_t>(h) * w * 2), img(static_cast<size_t>(h) * w, 0.5);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                int64_t i = static_cast<int64_t>(y) * w + x;
                bool fg = y >= 2 && y < 7 && x >= 2 && x < 7;
                double p = fg ? 0.9 : 0.1;
                // weakly flipped pixels create isolated labels the messages can clean
                if (rng.below(6) == 0) p = fg ? 0.35 : 0.65;
                u[i * 2 + 1] = p;
                u[i * 2] = 1.0 - p;
            }
        CrfConfig cfg;
        cfg.iterations = 6;
        auto iters = mean_field_trajectory(UnaryField{Tensor::from_values({h, w, 2}, u)},
                                           Tensor::from_values({h, w}, img), cfg);
        auto isolated = [&](const Tensor& q) {
            int count = 0;
            auto lab = [&](int y, int x) {
                int64_t i = static_cast<int64_t>(y) * w + x;
                return q.values()[i * 2 + 1] >= q.values()[i * 2] ? 1 : 0;
            };
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    int l = lab(y, x);
                    bool iso = true;
                    if (y > 0 && lab(y - 1, x) == l) iso = false;
                    if (y + 1 < h && lab(y + 1, x) == l) iso = false;
                    if (x > 0 && lab(y, x - 1) == l) iso = false;
                    if (x + 1 < w && lab(y, x + 1) == l) iso = false;
                    count += iso;
                }
            return count;
        };
        bool pass = true;
        int prev = 1 << 30;
        std::ostringstream os;
        os << "isolated:";
        for (const auto& q : iters) {
            int c = isolated(q);
            os << " " << c;
            if (c > prev) pass = false;
            prev = c;
        }
        out.push_back({"crf.block_fixture_smoothing", pass, os.str()});
    }

    // pairwise energy equals brute force, and degenerate fixtures
    {
        CrfConfig cfg;
        cfg.spatial_theta = 1e6; // effectively unit kernels
        cfg.bilateral_theta_spatial = 1e6;
        cfg.bilateral_theta_intensity = 1e6;
        int h = 3, w = 3;
        std::vector<double> lab(9), img(9, 0.5);
        for (int i = 0; i < 9; ++i) lab[i] = (i % 2 == 0) ? 1.0 : 0.0; // checkerboard
        double want = crf_pairwise_oracle(lab, img, h, w, cfg);
        auto probs = Tensor::full({3, 3, 2}, 0.5);
        auto [unary_term, pairwise] = crf_energy_terms(SoftMask{probs}, Tensor::from_values({3, 3}, lab),
                                                       Tensor::from_values({3, 3}, img), cfg);
        // 9-cell checkerboard: 5 ones, 4 zeros -> 20 disagreeing pairs, kernel weight 2 each
        bool pass = std::fabs(pairwise - want) < 1e-9 && std::fabs(pairwise - 40.0) < 1e-6;
        std::ostringstream os;
        os << "pairwise=" << pairwise << " oracle=" << want;
        out.push_back({"crf.pairwise_brute_force", pass, os.str()});

        std::vector<double> same(9, 1.0);
        auto [u2, p2] = crf_energy_terms(SoftMask{probs}, Tensor::from_values({3, 3}, same),
                                         Tensor::from_values({3, 3}, img), cfg);
        out.push_back({"crf.pairwise_uniform_zero", p2 == 0.0, "all-same labels"});
        (void)unary_term;
        (void)u2;
    }
    return out;
}

// --- metrics suite -----------------------------------------------------------------

std::vector<CheckResult> verify_metrics() {
    std::vector<CheckResult> out;

    {
        Rng rng(2);
        double worst = 0.0;
        bool pass = true;
        for (int trial = 0; trial < 200; ++trial) {
            int n = 2 + static_cast<int>(rng.below(999));
            std::vector<double> scores(n);
            std::vector<int> labels(n);
            bool discrete = rng.below(2) == 0; // force ties half the time
            int npos = 0;
            for (int i = 0; i < n; ++i) {
                scores[i] = discrete ? static_cast<double>(rng.below(8)) / 8.0 : rng.uniform();
                labels[i] = rng.below(2) ? 1 : 0;
                npos += labels[i];
            }
            if (npos == 0) labels[0] = 1;
            if (npos == n) labels[0] = 0;
            double trap = roc_auc(scores, labels).auc;
            double mw = mann_whitney_auc(scores, labels);
            worst = std::max(worst, std::fabs(trap - mw));
            if (std::fabs(trap - mw) > 1e-9) pass = false;
        }
        std::ostringstream os;
        os << "max_abs_diff=" << worst << " over 200 instances";
        out.push_back({"metrics.auc_trapezoid_equals_mann_whitney", pass, os.str()});
    }

    {
        // fixture table
        bool pass = true;
        std::ostringstream os;
        auto a = Tensor::from_values({2, 2}, {1, 1, 0, 0});
        auto b = Tensor::from_values({2, 2}, {1, 1, 0, 0});
        pass &= dice(a, b) == 1.0;
        auto c = Tensor::from_values({2, 2}, {0, 0, 1, 1});
        pass &= dice(a, c) == 0.0;
        // two 4-pixel blocks sharing 2 pixels -> 2*2/(4+4) = 0.5
        auto p = Tensor::from_values({2, 4}, {1, 1, 1, 1, 0, 0, 0, 0});
        auto t = Tensor::from_values({2, 4}, {0, 0, 1, 1, 1, 1, 0, 0});
        pass &= dice(p, t) == 0.5;
        pass &= dice(t, p) == 0.5; // symmetry
        auto e = Tensor::zeros({3, 3});
        pass &= dice(e, e) == 1.0; // empty-vs-empty convention
        double auc = roc_auc({0.9, 0.8, 0.3, 0.2}, {1, 0, 1, 0}).auc;
        pass &= std::fabs(auc - 0.75) < 1e-12;
        os << "0.5-dice and 0.75-auc fixtures, auc=" << auc;
        out.push_back({"metrics.fixture_table", pass, os.str()});
    }

    {
        // score scaling by a strictly increasing function preserves ROC/AUC
        Rng rng(9);
        std::vector<double> scores(60);
        std::vector<int> labels(60);
        for (size_t i = 0; i < scores.size(); ++i) {
            scores[i] = rng.uniform(-2, 2);
            labels[i] = rng.below(2) ? 1 : 0;
        }
        labels[0] = 1;
        labels[1] = 0;
        auto base = roc_auc(scores, labels);
        std::vector<double> warped(scores.size());
        for (size_t i = 0; i < scores.size(); ++i) warped[i] = std::tanh(scores[i]) * 3.0 + 7.0;
        auto w = roc_auc(warped, labels);
        bool pass = base.fpr == w.fpr && base.tpr == w.tpr && std::fabs(base.auc - w.auc) < 1e-12;
        out.push_back({"metrics.auc_monotone_invariance", pass, ""});
    }

    {
        bool pass = true;
        // perfectly separated and all-tied fixtures
        pass &= roc_auc({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}).auc == 1.0;
        pass &= std::fabs(roc_auc({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0}).auc - 0.5) < 1e-12;
        bool threw = false;
        try {
            roc_auc({0.1, 0.2}, {1, 1});
        } catch (const MetricError&) {
            threw = true;
        }
        pass &= threw;
        out.push_back({"metrics.auc_edge_cases", pass, ""});
    }
    return out;
}

int run_verify_suites(const std::vector<std::string>& suites, std::ostream& os) {
    std::vector<CheckResult> all;
    auto want = [&](const std::string& s) {
        for (const auto& x : suites)
            if (x == s || x == "all") return true;
        return false;
    };
    if (want("grad")) {
        auto r = verify_grad();
        all.insert(all.end(), r.begin(), r.end());
    }
    if (want("crf")) {
        auto r = verify_crf();
        all.insert(all.end(), r.begin(), r.end());
    }
    if (want("metrics")) {
        auto r = verify_metrics();
        all.insert(all.end(), r.begin(), r.end());
    }
    int failures = 0;
    for (const auto& c : all) {
        os << (c.pass ? "PASS " : "FAIL ") << c.name;
        if (!c.detail.empty()) os << " " << c.detail;
        os << "\n";
        failures += c.pass ? 0 : 1;
    }
    return failures;
}

} // namespace dcn
