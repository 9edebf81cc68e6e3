#pragma once

// ROI extraction (bounding-box and 1.6x context variants), flip
// augmentation, synthetic dataset generation and dataset file I/O.

#include <string>
#include <vector>

#include "dcn/rng.hpp"
#include "dcn/tensor.hpp"

namespace dcn {

// Full annotated image: intensities in [0,1], binary mask, class label.
struct AnnotatedImage {
    Tensor image; // (H,W)
    Tensor mask;  // (H,W) binary
    int label = 0; // 0 benign, 1 malignant
    std::string id;
};

// One training/evaluation unit.
struct RoiSample {
    Tensor bbox_roi;    // downsampled bounding-box crop
    Tensor context_roi; // 1.6x padded crop
    Tensor mask_roi;    // mask within the bounding box, binary
    int label = 0;
    std::string id;
};

struct RoiSizes {
    int bbox = 40;
    int context = 224;
    int mask = 224;
};

// Tight bounding box of the mask, 1.6x context box around the same center
// (edge-replication padding where it leaves the image), bilinear resize for
// intensity crops and nearest-neighbour for the mask.
RoiSample extract_rois(const AnnotatedImage& img, const RoiSizes& sizes);

// identity, horizontal, vertical and double flip; ids suffixed :h/:v/:hv.
std::vector<RoiSample> augment_flips(const RoiSample& s);

// Bilinear resample of a (H,W) tensor (data-pipeline use; masks go through
// nearest-neighbour instead so they stay binary).
Tensor resize_bilinear_2d(const Tensor& src, int out_h, int out_w);

struct SynthSpec {
    int image_size = 128;
};

// Smooth low-frequency background plus one elevated-intensity mass with a
// soft boundary. Labels alternate by construction: even indices get a smooth
// ellipse (benign, 0), odd ones an irregular star (malignant, 1), so shape
// genuinely predicts the class.
std::vector<AnnotatedImage> synth_dataset(int n, Rng& rng, const SynthSpec& spec);

// Train/test split with a guard that blocks test-set access during training.
class DatasetSplit {
public:
    DatasetSplit() = default;
    DatasetSplit(std::vector<RoiSample> train, std::vector<RoiSample> test, uint64_t seed);

    const std::vector<RoiSample>& train() const { return train_; }
    const std::vector<RoiSample>& test() const;
    uint64_t seed() const { return seed_; }

    class TrainGuard {
    public:
        explicit TrainGuard(const DatasetSplit& split) : split_(split) { ++split_.guard_depth_; }
        ~TrainGuard() { --split_.guard_depth_; }
        TrainGuard(const TrainGuard&) = delete;
        TrainGuard& operator=(const TrainGuard&) = delete;

    private:
        const DatasetSplit& split_;
    };

private:
    std::vector<RoiSample> train_;
    std::vector<RoiSample> test_;
    uint64_t seed_ = 0;
    mutable int guard_depth_ = 0;
};

// Deterministic shuffled split by id; floor(n * ratio) samples go to train.
DatasetSplit split_dataset(const std::vector<RoiSample>& samples, double ratio, Rng& rng);

// --- dataset directory --------------------------------------------------------
// index.tsv (id, image path, mask path, label), 16-bit PGM images,
// 8-bit {0,255} PGM masks.

void save_dataset(const std::string& dir, const std::vector<AnnotatedImage>& images);
std::vector<AnnotatedImage> load_dataset(const std::string& dir);

// Processed ROI cache: DCT1 tensors under <dir>/cache plus a cache index.
void save_roi_cache(const std::string& dir, const std::vector<RoiSample>& samples);
std::vector<RoiSample> load_roi_cache(const std::string& dir);

// --- PGM (P5) ------------------------------------------------------------------

// 16-bit (maxval 65535, big-endian) for intensity images.
void write_pgm16(const std::string& path, const Tensor& image);
// 8-bit (maxval 255) after 255-scaling; used for masks and soft-mask exports.
void write_pgm8(const std::string& path, const Tensor& image);
// Reads either depth, scaling to [0,1].
Tensor read_pgm(const std::string& path);

} // namespace dcn
