#include "dcn/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dcn/tensor_io.hpp"

namespace fs = std::filesystem;

namespace dcn {

namespace {

int clampi(int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); }

// Crop with edge replication for out-of-range coordinates.
std::vector<double> crop_replicated(const Tensor& src, int top, int left, int h, int w) {
    int H = src.shape()[0], W = src.shape()[1];
    const auto& v = src.values();
    std::vector<double> out(static_cast<size_t>(h) * w);
    for (int y = 0; y < h; ++y) {
        int sy = clampi(top + y, 0, H - 1);
        for (int x = 0; x < w; ++x)
            out[static_cast<size_t>(y) * w + x] = v[static_cast<size_t>(sy) * W + clampi(left + x, 0, W - 1)];
    }
    return out;
}

Tensor nearest_2d(const Tensor& src, int oh, int ow) {
    int H = src.shape()[0], W = src.shape()[1];
    const auto& v = src.values();
    std::vector<double> out(static_cast<size_t>(oh) * ow);
    for (int y = 0; y < oh; ++y) {
        int sy = static_cast<int>(static_cast<int64_t>(y) * H / oh);
        for (int x = 0; x < ow; ++x)
            out[static_cast<size_t>(y) * ow + x] =
                v[static_cast<size_t>(sy) * W + static_cast<int>(static_cast<int64_t>(x) * W / ow)];
    }
    return Tensor::from_values({oh, ow}, std::move(out));
}

struct BBox {
    int y0, x0, y1, x1; // inclusive
    int h() const { return y1 - y0 + 1; }
    int w() const { return x1 - x0 + 1; }
};

BBox tight_bbox(const Tensor& mask) {
    int H = mask.shape()[0], W = mask.shape()[1];
    const auto& v = mask.values();
    BBox b{H, W, -1, -1};
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            if (v[static_cast<size_t>(y) * W + x] == 1.0) {
                b.y0 = std::min(b.y0, y);
                b.x0 = std::min(b.x0, x);
                b.y1 = std::max(b.y1, y);
                b.x1 = std::max(b.x1, x);
            }
    if (b.y1 < 0) throw ContractError("extract_rois: empty mask");
    return b;
}

} // namespace

Tensor resize_bilinear_2d(const Tensor& src, int out_h, int out_w) {
    if (src.rank() != 2) throw ShapeError("resize_bilinear_2d expects (H,W)");
    int H = src.shape()[0], W = src.shape()[1];
    const auto& v = src.values();
    std::vector<double> out(static_cast<size_t>(out_h) * out_w);
    double sy = static_cast<double>(H) / out_h, sx = static_cast<double>(W) / out_w;
    for (int y = 0; y < out_h; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        fy = std::min(std::max(fy, 0.0), static_cast<double>(H - 1));
        int y0 = static_cast<int>(fy);
        int y1 = std::min(y0 + 1, H - 1);
        double wy = fy - y0;
        for (int x = 0; x < out_w; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            fx = std::min(std::max(fx, 0.0), static_cast<double>(W - 1));
            int x0 = static_cast<int>(fx);
            int x1 = std::min(x0 + 1, W - 1);
            double wx = fx - x0;
            double top = v[static_cast<size_t>(y0) * W + x0] * (1 - wx) + v[static_cast<size_t>(y0) * W + x1] * wx;
            double bot = v[static_cast<size_t>(y1) * W + x0] * (1 - wx) + v[static_cast<size_t>(y1) * W + x1] * wx;
            out[static_cast<size_t>(y) * out_w + x] = top * (1 - wy) + bot * wy;
        }
    }
    return Tensor::from_values({out_h, out_w}, std::move(out));
}

RoiSample extract_rois(const AnnotatedImage& img, const RoiSizes& sizes) {
    if (img.image.rank() != 2 || img.mask.shape() != img.image.shape())
        throw ShapeError("extract_rois: image and mask must be matching (H,W)");
    BBox bb = tight_bbox(img.mask);

    // Bounding-box crop (mass only).
    auto bbox_vals = crop_replicated(img.image, bb.y0, bb.x0, bb.h(), bb.w());
    Tensor bbox_crop = Tensor::from_values({bb.h(), bb.w()}, std::move(bbox_vals));

    // Context box: same center, extents x1.6, replication-padded at edges.
    int ch = static_cast<int>(std::lround(bb.h() * 1.6));
    int cw = static_cast<int>(std::lround(bb.w() * 1.6));
    int ctop = bb.y0 - (ch - bb.h()) / 2;
    int cleft = bb.x0 - (cw - bb.w()) / 2;
    auto ctx_vals = crop_replicated(img.image, ctop, cleft, ch, cw);
    Tensor ctx_crop = Tensor::from_values({ch, cw}, std::move(ctx_vals));

    auto mask_vals = crop_replicated(img.mask, bb.y0, bb.x0, bb.h(), bb.w());
    Tensor mask_crop = Tensor::from_values({bb.h(), bb.w()}, std::move(mask_vals));

    RoiSample s;
    s.bbox_roi = resize_bilinear_2d(bbox_crop, sizes.bbox, sizes.bbox);
    s.context_roi = resize_bilinear_2d(ctx_crop, sizes.context, sizes.context);
    s.mask_roi = nearest_2d(mask_crop, sizes.mask, sizes.mask);
    s.label = img.label;
    s.id = img.id;
    return s;
}

namespace {

Tensor flip2d(const Tensor& t, bool horizontal, bool vertical) {
    int H = t.shape()[0], W = t.shape()[1];
    const auto& v = t.values();
    std::vector<double> out(v.size());
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            int sy = vertical ? H - 1 - y : y;
            int sx = horizontal ? W - 1 - x : x;
            out[static_cast<size_t>(y) * W + x] = v[static_cast<size_t>(sy) * W + sx];
        }
    return Tensor::from_values(t.shape(), std::move(out));
}

RoiSample flip_sample(const RoiSample& s, bool h, bool v, const std::string& suffix) {
    RoiSample out;
    out.bbox_roi = flip2d(s.bbox_roi, h, v);
    out.context_roi = flip2d(s.context_roi, h, v);
    out.mask_roi = flip2d(s.mask_roi, h, v);
    out.label = s.label;
    out.id = s.id + suffix;
    return out;
}

} // namespace

std::vector<RoiSample> augment_flips(const RoiSample& s) {
    return {s, flip_sample(s, true, false, ":h"), flip_sample(s, false, true, ":v"),
            flip_sample(s, true, true, ":hv")};
}

std::vector<AnnotatedImage> synth_dataset(int n, Rng& rng, const SynthSpec& spec) {
    if (n < 1) throw ContractError("synth_dataset: need at least one sample");
    int S = spec.image_size;
    if (S < 48) throw ConfigError("synth_dataset: image size must be >= 48");
    constexpr double kTau = 6.283185307179586477;
    std::vector<AnnotatedImage> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        // Per-sample substream, independent of generation order.
        Rng r = rng.fork(0x53594e54u, static_cast<uint64_t>(i));
        int label = i % 2; // even: smooth ellipse (0), odd: irregular star (1)

        double base = r.uniform(0.15, 0.30);
        double a1 = r.uniform(0.02, 0.05), a2 = r.uniform(0.01, 0.04);
        double f1 = r.uniform(0.6, 1.6), f2 = r.uniform(0.6, 1.6);
        double p1 = r.uniform(0.0, 1.0), p2 = r.uniform(0.0, 1.0);

        double r0 = r.uniform(S * 0.07, S * 0.11);
        double margin = r0 * 1.9 + 2.0;
        double cy = r.uniform(margin, S - margin);
        double cx = r.uniform(margin, S - margin);
        double rot = r.uniform(0.0, kTau / 2);
        double aspect = r.uniform(0.55, 0.90);
        int arms = 5 + static_cast<int>(r.below(4));
        double amp = r.uniform(0.28, 0.42);
        double height = r.uniform(0.30, 0.45);
        double soft = r.uniform(1.0, 2.0);

        std::vector<double> img(static_cast<size_t>(S) * S);
        std::vector<double> mask(img.size(), 0.0);
        double ra = r0, rb = r0 * aspect;
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x) {
                double v = base +
                           a1 * std::sin(kTau * (f1 * x / S + p1)) * std::sin(kTau * (f2 * y / S + p2)) +
                           a2 * std::cos(kTau * (f2 * x / S + p2)) +
                           0.01 * r.uniform(-1.0, 1.0);
                double dy = y - cy, dx = x - cx;
                double dist = std::sqrt(dy * dy + dx * dx);
                double phi = std::atan2(dy, dx) - rot;
                double boundary;
                if (label == 0) {
                    double c = std::cos(phi), s = std::sin(phi);
                    boundary = ra * rb / std::sqrt(rb * rb * c * c + ra * ra * s * s);
                } else {
                    boundary = r0 * (1.0 + amp * std::cos(arms * phi));
                }
                v += height / (1.0 + std::exp(-(boundary - dist) / soft));
                if (dist <= boundary) mask[static_cast<size_t>(y) * S + x] = 1.0;
                // Quantize to the 16-bit grid so dataset save/load round-trips bitwise.
                v = std::min(std::max(v, 0.0), 1.0);
                img[static_cast<size_t>(y) * S + x] = std::round(v * 65535.0) / 65535.0;
            }

        AnnotatedImage a;
        a.image = Tensor::from_values({S, S}, std::move(img));
        a.mask = Tensor::from_values({S, S}, std::move(mask));
        a.label = label;
        char buf[16];
        std::snprintf(buf, sizeof(buf), "s%04d", i);
        a.id = buf;
        out.push_back(std::move(a));
    }
    return out;
}

// --- dataset directory ----------------------------------------------------------

namespace {

std::string label_to_str(int label) { return label ? "1" : "0"; }

} // namespace

DatasetSplit::DatasetSplit(std::vector<RoiSample> train, std::vector<RoiSample> test, uint64_t seed)
    : train_(std::move(train)), test_(std::move(test)), seed_(seed) {}

const std::vector<RoiSample>& DatasetSplit::test() const {
    if (guard_depth_ > 0)
        throw ContractError("test split accessed while training is in progress");
    return test_;
}

DatasetSplit split_dataset(const std::vector<RoiSample>& samples, double ratio, Rng& rng) {
    if (ratio <= 0.0 || ratio >= 1.0) throw ConfigError("split ratio must be in (0,1)");
    std::vector<size_t> order(samples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    size_t n_train = static_cast<size_t>(samples.size() * ratio);
    std::vector<RoiSample> train, test;
    for (size_t i = 0; i < order.size(); ++i)
        (i < n_train ? train : test).push_back(samples[order[i]]);
    return DatasetSplit(std::move(train), std::move(test), rng.seed());
}

void save_dataset(const std::string& dir, const std::vector<AnnotatedImage>& images) {
    fs::create_directories(fs::path(dir) / "images");
    fs::create_directories(fs::path(dir) / "masks");
    std::ofstream index(fs::path(dir) / "index.tsv");
    if (!index) throw IoError("cannot write index: " + dir + "/index.tsv");
    for (const auto& img : images) {
        std::string ipath = "images/" + img.id + ".pgm";
        std::string mpath = "masks/" + img.id + ".pgm";
        write_pgm16((fs::path(dir) / ipath).string(), img.image);
        write_pgm8((fs::path(dir) / mpath).string(), img.mask);
        index << img.id << "\t" << ipath << "\t" << mpath << "\t" << label_to_str(img.label) << "\n";
    }
    if (!index) throw IoError("index write failed: " + dir + "/index.tsv");
}

std::vector<AnnotatedImage> load_dataset(const std::string& dir) {
    std::ifstream index(fs::path(dir) / "index.tsv");
    if (!index) throw IoError("cannot open dataset index: " + dir + "/index.tsv");
    std::vector<AnnotatedImage> out;
    std::string line;
    int lineno = 0;
    while (std::getline(index, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ss(line);
        AnnotatedImage img;
        std::string ipath, mpath, label;
        if (!std::getline(ss, img.id, '\t') || !std::getline(ss, ipath, '\t') ||
            !std::getline(ss, mpath, '\t') || !std::getline(ss, label))
            throw IoError("malformed index line " + std::to_string(lineno) + " in " + dir);
        img.image = read_pgm((fs::path(dir) / ipath).string());
        img.mask = read_pgm((fs::path(dir) / mpath).string());
        for (double& v : img.mask.values())
            v = v >= 0.5 ? 1.0 : 0.0;
        img.label = label == "1" ? 1 : 0;
        out.push_back(std::move(img));
    }
    return out;
}

void save_roi_cache(const std::string& dir, const std::vector<RoiSample>& samples) {
    fs::path cache = fs::path(dir) / "cache";
    fs::create_directories(cache);
    std::ofstream index(cache / "index.tsv");
    if (!index) throw IoError("cannot write cache index in " + dir);
    for (const auto& s : samples) {
        save_tensor((cache / (s.id + ".bbox.dct1")).string(), s.bbox_roi);
        save_tensor((cache / (s.id + ".context.dct1")).string(), s.context_roi);
        save_tensor((cache / (s.id + ".mask.dct1")).string(), s.mask_roi);
        index << s.id << "\t" << label_to_str(s.label) << "\n";
    }
}

std::vector<RoiSample> load_roi_cache(const std::string& dir) {
    fs::path cache = fs::path(dir) / "cache";
    std::ifstream index(cache / "index.tsv");
    if (!index) throw IoError("cannot open cache index in " + dir);
    std::vector<RoiSample> out;
    std::string line;
    while (std::getline(index, line)) {
        if (line.empty()) continue;
        auto tab = line.find('\t');
        if (tab == std::string::npos) throw IoError("malformed cache index in " + dir);
        RoiSample s;
        s.id = line.substr(0, tab);
        s.label = line.substr(tab + 1) == "1" ? 1 : 0;
        s.bbox_roi = load_tensor((cache / (s.id + ".bbox.dct1")).string());
        s.context_roi = load_tensor((cache / (s.id + ".context.dct1")).string());
        s.mask_roi = load_tensor((cache / (s.id + ".mask.dct1")).string());
        out.push_back(std::move(s));
    }
    return out;
}

// --- PGM -------------------------------------------------------------------------

namespace {

void write_pgm(const std::string& path, const Tensor& image, int maxval) {
    if (image.rank() != 2) throw ShapeError("pgm writer expects (H,W)");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write: " + path);
    int H = image.shape()[0], W = image.shape()[1];
    f << "P5\n" << W << " " << H << "\n" << maxval << "\n";
    for (double v : image.values()) {
        double c = std::min(std::max(v, 0.0), 1.0);
        int q = static_cast<int>(std::lround(c * maxval));
        if (maxval > 255) {
            unsigned char hi = static_cast<unsigned char>(q >> 8);
            unsigned char lo = static_cast<unsigned char>(q & 0xff);
            f.put(static_cast<char>(hi)).put(static_cast<char>(lo)); // big-endian per PGM
        } else {
            f.put(static_cast<char>(q));
        }
    }
    if (!f) throw IoError("write failed: " + path);
}

int pgm_token(std::istream& is, const std::string& path) {
    // Skips whitespace and '#' comments.
    int c = is.get();
    while (c != EOF && (std::isspace(c) || c == '#')) {
        if (c == '#')
            while (c != EOF && c != '\n') c = is.get();
        c = is.get();
    }
    if (c == EOF) throw IoError("truncated pgm header: " + path);
    int v = 0;
    while (c != EOF && std::isdigit(c)) {
        v = v * 10 + (c - '0');
        c = is.get();
    }
    return v;
}

} // namespace

void write_pgm16(const std::string& path, const Tensor& image) { write_pgm(path, image, 65535); }
void write_pgm8(const std::string& path, const Tensor& image) { write_pgm(path, image, 255); }

Tensor read_pgm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    char p, five;
    f.get(p).get(five);
    if (p != 'P' || five != '5') throw IoError("not a P5 pgm: " + path);
    int W = pgm_token(f, path);
    int H = pgm_token(f, path);
    int maxval = pgm_token(f, path);
    if (W <= 0 || H <= 0 || maxval <= 0 || maxval > 65535)
        throw IoError("bad pgm header: " + path);
    std::vector<double> vals(static_cast<size_t>(H) * W);
    for (auto& v : vals) {
        int c0 = f.get();
        if (c0 == EOF) throw IoError("truncated pgm data: " + path);
        int q = c0;
        if (maxval > 255) {
            int c1 = f.get();
            if (c1 == EOF) throw IoError("truncated pgm data: " + path);
            q = (c0 << 8) | c1;
        }
        v = static_cast<double>(q) / maxval;
    }
    return Tensor::from_values({H, W}, std::move(vals));
}

} // namespace dcn
