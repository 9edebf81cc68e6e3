#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "dcn/data.hpp"
#include "dcn/metrics.hpp"

using namespace dcn;
namespace fs = std::filesystem;

namespace {

// Image with a filled rectangle mass and a deterministic intensity gradient.
AnnotatedImage rect_fixture(int size, int y0, int x0, int h, int w, int label = 0) {
    std::vector<double> img(static_cast<size_t>(size) * size), mask(img.size(), 0.0);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            img[static_cast<size_t>(y) * size + x] =
                0.2 + 0.5 * (((y * 31 + x * 17) % 100) / 100.0);
    for (int y = y0; y < y0 + h; ++y)
        for (int x = x0; x < x0 + w; ++x) {
            mask[static_cast<size_t>(y) * size + x] = 1.0;
            img[static_cast<size_t>(y) * size + x] += 0.3;
        }
    AnnotatedImage a;
    a.image = Tensor::from_values({size, size}, img);
    a.mask = Tensor::from_values({size, size}, mask);
    a.label = label;
    a.id = "fix";
    return a;
}

double centroid_x(const Tensor& mask) {
    double sx = 0, n = 0;
    int W = mask.shape()[1];
    for (int64_t i = 0; i < mask.numel(); ++i)
        if (mask.values()[i] == 1.0) {
            sx += static_cast<double>(i % W);
            n += 1;
        }
    return sx / n;
}

} // namespace

TEST_CASE("context box is 1.6x the bounding box around the same center") {
    // centered 10x10 mass in a 100x100 image -> 16x16 context window
    auto img = rect_fixture(100, 45, 45, 10, 10);
    RoiSizes sizes{40, 224, 224};
    auto roi = extract_rois(img, sizes);
    CHECK(roi.bbox_roi.shape() == Shape{40, 40});
    CHECK(roi.context_roi.shape() == Shape{224, 224});
    CHECK(roi.mask_roi.shape() == Shape{224, 224});

    // independent oracle: crop the known windows by hand and resize
    auto crop = [&](const Tensor& src, int top, int left, int h, int w) {
        std::vector<double> v(static_cast<size_t>(h) * w);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                v[static_cast<size_t>(y) * w + x] =
                    src.values()[static_cast<size_t>(top + y) * 100 + left + x];
        return Tensor::from_values({h, w}, v);
    };
    auto want_bbox = resize_bilinear_2d(crop(img.image, 45, 45, 10, 10), 40, 40);
    CHECK(roi.bbox_roi.values() == want_bbox.values());
    auto want_ctx = resize_bilinear_2d(crop(img.image, 42, 42, 16, 16), 224, 224);
    CHECK(roi.context_roi.values() == want_ctx.values());
}

TEST_CASE("corner mass clips the context box with replication padding") {
    auto img = rect_fixture(64, 0, 0, 8, 8);
    RoiSizes sizes{16, 32, 32};
    auto roi = extract_rois(img, sizes);
    CHECK(roi.context_roi.shape() == Shape{32, 32});
    CHECK(roi.mask_roi.shape() == Shape{32, 32});
    // mask still nonempty, every value binary
    double fg = 0;
    for (double v : roi.mask_roi.values()) {
        CHECK((v == 0.0 || v == 1.0));
        fg += v;
    }
    CHECK(fg > 0);
}

TEST_CASE("mask fraction survives the resize within 2 percent") {
    auto img = rect_fixture(128, 30, 40, 25, 31);
    // in-box fraction is exactly 1.0 for a filled rectangle; use an ellipse-ish
    // mask instead: knock out corners
    for (int y = 30; y < 55; ++y)
        for (int x = 40; x < 71; ++x) {
            double dy = (y - 42.0) / 12.5, dx = (x - 55.0) / 15.5;
            if (dy * dy + dx * dx > 1.0) img.mask.values()[static_cast<size_t>(y) * 128 + x] = 0.0;
        }
    double in_box = 0;
    for (int y = 30; y < 55; ++y)
        for (int x = 40; x < 71; ++x) in_box += img.mask.values()[static_cast<size_t>(y) * 128 + x];
    // bounding box of the ellipse support
    int y0 = 128, y1 = -1, x0 = 128, x1 = -1;
    for (int y = 0; y < 128; ++y)
        for (int x = 0; x < 128; ++x)
            if (img.mask.values()[static_cast<size_t>(y) * 128 + x] == 1.0) {
                y0 = std::min(y0, y); y1 = std::max(y1, y);
                x0 = std::min(x0, x); x1 = std::max(x1, x);
            }
    double frac_src = in_box / (static_cast<double>(y1 - y0 + 1) * (x1 - x0 + 1));

    auto roi = extract_rois(img, RoiSizes{40, 224, 224});
    double frac_out = 0;
    for (double v : roi.mask_roi.values()) frac_out += v;
    frac_out /= static_cast<double>(roi.mask_roi.numel());
    CHECK(std::fabs(frac_out - frac_src) <= 0.02);
}

TEST_CASE("empty mask is a contract error") {
    AnnotatedImage img;
    img.image = Tensor::full({32, 32}, 0.5);
    img.mask = Tensor::zeros({32, 32});
    CHECK_THROWS_AS(extract_rois(img, RoiSizes{16, 32, 32}), ContractError);
}

TEST_CASE("roi extraction is translation equivariant away from borders") {
    auto a = rect_fixture(100, 30, 30, 9, 13);
    auto b = rect_fixture(100, 50, 42, 9, 13);
    // translate the intensity pattern with the mass so the crops see identical pixels
    for (int y = 0; y < 100; ++y)
        for (int x = 0; x < 100; ++x) {
            int sy = y - 20, sx = x - 12;
            b.image.values()[static_cast<size_t>(y) * 100 + x] =
                (sy >= 0 && sy < 100 && sx >= 0 && sx < 100)
                    ? a.image.values()[static_cast<size_t>(sy) * 100 + sx]
                    : 0.0;
            b.mask.values()[static_cast<size_t>(y) * 100 + x] =
                (sy >= 0 && sy < 100 && sx >= 0 && sx < 100)
                    ? a.mask.values()[static_cast<size_t>(sy) * 100 + sx]
                    : 0.0;
        }
    RoiSizes sizes{40, 224, 224};
    auto ra = extract_rois(a, sizes);
    auto rb = extract_rois(b, sizes);
    CHECK(ra.bbox_roi.values() == rb.bbox_roi.values());
    CHECK(ra.context_roi.values() == rb.context_roi.values());
    CHECK(ra.mask_roi.values() == rb.mask_roi.values());
}

TEST_CASE("flip augmentation") {
    auto img = rect_fixture(64, 10, 20, 7, 11, 1);
    auto s = extract_rois(img, RoiSizes{16, 32, 32});
    auto flips = augment_flips(s);
    REQUIRE(flips.size() == 4);
    CHECK(flips[0].id == s.id);
    CHECK(flips[1].id == s.id + ":h");
    CHECK(flips[2].id == s.id + ":v");
    CHECK(flips[3].id == s.id + ":hv");
    for (const auto& f : flips) CHECK(f.label == 1);

    // double horizontal flip is the identity
    auto hh = augment_flips(flips[1]);
    CHECK(hh[1].bbox_roi.values() == s.bbox_roi.values());
    CHECK(hh[1].mask_roi.values() == s.mask_roi.values());

    // flip is an isometry: dice between any two masks is preserved
    CHECK(dice(flips[1].mask_roi, flips[1].mask_roi) == 1.0);
    CHECK(dice(s.mask_roi, flips[3].mask_roi) ==
          doctest::Approx(dice(flips[1].mask_roi, flips[2].mask_roi)));

    // mirrored centroid: x_c -> (W-1) - x_c
    double cx = centroid_x(s.mask_roi);
    double cx_flipped = centroid_x(flips[1].mask_roi);
    CHECK(cx_flipped == doctest::Approx(31.0 - cx).epsilon(1e-9));
}

TEST_CASE("synthetic dataset determinism, balance and validity") {
    Rng r1(12), r2(12), r3(13);
    SynthSpec spec;
    auto a = synth_dataset(24, r1, spec);
    auto b = synth_dataset(24, r2, spec);
    auto c = synth_dataset(24, r3, spec);
    REQUIRE(a.size() == 24);
    bool identical = true, differs = false;
    for (size_t i = 0; i < a.size(); ++i) {
        identical &= a[i].image.values() == b[i].image.values();
        differs |= a[i].image.values() != c[i].image.values();
    }
    CHECK(identical);
    CHECK(differs);

    int positives = 0;
    for (const auto& img : a) {
        positives += img.label;
        double fg = 0;
        for (double v : img.mask.values()) fg += v;
        CHECK(fg > 0);
        for (double v : img.image.values()) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
    double balance = static_cast<double>(positives) / a.size();
    CHECK(balance >= 0.4);
    CHECK(balance <= 0.6);
}

TEST_CASE("split dataset: ratio, id disjointness, determinism, guard") {
    Rng gen(3);
    SynthSpec spec;
    spec.image_size = 64;
    auto images = synth_dataset(107, gen, spec);
    std::vector<RoiSample> samples;
    for (const auto& img : images) samples.push_back(extract_rois(img, RoiSizes{16, 32, 32}));

    Rng s1(9), s2(9);
    auto split1 = split_dataset(samples, 0.8, s1);
    auto split2 = split_dataset(samples, 0.8, s2);
    CHECK(split1.train().size() == 85);
    CHECK(split1.test().size() == 22);
    for (size_t i = 0; i < split1.train().size(); ++i)
        CHECK(split1.train()[i].id == split2.train()[i].id);

    std::set<std::string> train_ids;
    for (const auto& s : split1.train()) train_ids.insert(s.id);
    for (const auto& s : split1.test()) CHECK(train_ids.count(s.id) == 0);

    {
        DatasetSplit::TrainGuard guard(split1);
        CHECK_THROWS_AS(split1.test(), ContractError);
        CHECK_NOTHROW(split1.train());
    }
    CHECK_NOTHROW(split1.test());

    Rng bad(1);
    CHECK_THROWS_AS(split_dataset(samples, 0.0, bad), ConfigError);
}

TEST_CASE("dataset directory round-trip is bitwise") {
    Rng gen(21);
    SynthSpec spec;
    spec.image_size = 64;
    auto images = synth_dataset(5, gen, spec);
    auto dir = (fs::temp_directory_path() / "dcn_test_ds").string();
    fs::remove_all(dir);
    save_dataset(dir, images);
    auto back = load_dataset(dir);
    REQUIRE(back.size() == images.size());
    for (size_t i = 0; i < images.size(); ++i) {
        CHECK(back[i].id == images[i].id);
        CHECK(back[i].label == images[i].label);
        CHECK(back[i].image.values() == images[i].image.values());
        CHECK(back[i].mask.values() == images[i].mask.values());
    }
    fs::remove_all(dir);
    CHECK_THROWS_AS(load_dataset(dir), IoError);
}

TEST_CASE("roi cache round-trip") {
    Rng gen(33);
    SynthSpec spec;
    spec.image_size = 64;
    auto images = synth_dataset(3, gen, spec);
    std::vector<RoiSample> samples;
    for (const auto& img : images) samples.push_back(extract_rois(img, RoiSizes{16, 32, 32}));
    auto dir = (fs::temp_directory_path() / "dcn_test_cache").string();
    fs::remove_all(dir);
    fs::create_directories(dir);
    save_roi_cache(dir, samples);
    auto back = load_roi_cache(dir);
    REQUIRE(back.size() == samples.size());
    for (size_t i = 0; i < samples.size(); ++i) {
        CHECK(back[i].id == samples[i].id);
        CHECK(back[i].label == samples[i].label);
        CHECK(back[i].bbox_roi.values() == samples[i].bbox_roi.values());
        CHECK(back[i].context_roi.values() == samples[i].context_roi.values());
        CHECK(back[i].mask_roi.values() == samples[i].mask_roi.values());
    }
    fs::remove_all(dir);
}

TEST_CASE("pgm read/write both depths") {
    auto p16 = (fs::temp_directory_path() / "dcn_t16.pgm").string();
    auto p8 = (fs::temp_directory_path() / "dcn_t8.pgm").string();
    // values on the 16-bit grid round-trip exactly
    std::vector<double> v = {0.0, 1.0, 12345.0 / 65535.0, 65534.0 / 65535.0, 32767.0 / 65535.0, 32768.0 / 65535.0};
    auto img = Tensor::from_values({2, 3}, v);
    write_pgm16(p16, img);
    auto back = read_pgm(p16);
    CHECK(back.shape() == img.shape());
    CHECK(back.values() == img.values());

    auto mask = Tensor::from_values({2, 2}, {0, 1, 1, 0});
    write_pgm8(p8, mask);
    auto mback = read_pgm(p8);
    CHECK(mback.values() == mask.values());

    std::remove(p16.c_str());
    std::remove(p8.c_str());
    CHECK_THROWS_AS(read_pgm("/nonexistent/file.pgm"), IoError);
}
