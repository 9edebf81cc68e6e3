#pragma once

// N-dimensional tensors with reverse-mode automatic differentiation on an
// append-order tape. Values are stored as double; in f32 precision mode every
// op result is rounded through IEEE-754 binary32, so all live values are
// exactly representable in the 32-bit on-disk format.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "dcn/errors.hpp"
#include "dcn/rng.hpp"

namespace dcn {

enum class Precision { f32, f64 };

Precision precision();
void set_precision(Precision p);

// Thread budget for the forward compute loops (conv/matmul). Threads write
// disjoint output ranges, so results are bitwise identical for any count.
int thread_budget();
void set_thread_budget(int n);

using Shape = std::vector<int>;

int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

struct TensorData {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad; // empty until backward touches it
    bool requires_grad = false;
    Tape* tape = nullptr; // tape that recorded the producing op, if any

    int64_t numel() const { return static_cast<int64_t>(values.size()); }
    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}

    static Tensor zeros(const Shape& s);
    static Tensor full(const Shape& s, double value);
    static Tensor from_values(const Shape& s, std::vector<double> values);
    static Tensor scalar(double value); // rank-0

    bool defined() const { return d_ != nullptr; }
    const Shape& shape() const { return d_->shape; }
    int rank() const { return static_cast<int>(d_->shape.size()); }
    int64_t numel() const { return d_->numel(); }

    std::vector<double>& values() { return d_->values; }
    const std::vector<double>& values() const { return d_->values; }
    std::vector<double>& grad() { d_->ensure_grad(); return d_->grad; }
    bool has_grad() const { return !d_->grad.empty(); }

    double item() const {
        if (numel() != 1) throw ContractError("item(): tensor is not scalar");
        return d_->values[0];
    }

    Tensor& set_requires_grad(bool on = true) { d_->requires_grad = on; return *this; }
    bool requires_grad() const { return d_->requires_grad; }
    void zero_grad() { d_->grad.clear(); }

    // Value copy detached from any tape (leaf, no grad requirement).
    Tensor detach() const;

    std::shared_ptr<TensorData> data_ptr() const { return d_; }

private:
    std::shared_ptr<TensorData> d_;
};

// Reverse-mode tape. Constructing one makes it the active tape for the
// current thread; ops record backward closures while a tape is active and an
// input requires grad. Destruction restores the previous tape.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    size_t size() const { return nodes_.size(); }

    static Tape* active();
    void record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }

private:
    friend void backward(const Tensor&);
    std::vector<std::function<void()>> nodes_;
    Tape* prev_ = nullptr;
};

// Populates grads of every reachable grad-requiring leaf of a scalar loss.
// Accumulation is additive; callers zero grads between steps.
void backward(const Tensor& loss);

// --- elementwise ---------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor mul(const Tensor& a, double b);
Tensor neg(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
// Values clamp at the floor; the backward slope is 1 everywhere (pass-
// through), so log(clamp_min(p, eps)) stays finite yet never zeroes the
// gradient of confidently-wrong probabilities.
Tensor clamp_min(const Tensor& a, double floor);

// --- linear algebra ------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b); // rank-2 only
Tensor transpose2d(const Tensor& a);

// --- convolution / pooling ----------------------------------------------

enum class Padding { Same, Valid };

// input NCHW, kernel OIKK, cross-correlation convention (no kernel flip).
// Same padding zero-pads by (K-1)/2 and requires odd K.
Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, Padding pad);

// Per-channel spatial filter, same padding, stride 1. depth_kernel is C1KK.
Tensor depthwise_conv2d(const Tensor& input, const Tensor& depth_kernel);

// Depthwise filter followed by a 1x1 cross-channel projection (OC11).
Tensor depthwise_separable_conv(const Tensor& input, const Tensor& depth_kernel,
                                const Tensor& point_kernel);

// factor x factor window max; backward routes to the first (row-major) max.
Tensor maxpool2d(const Tensor& input, int factor);

// Nearest-neighbour replication by an integer factor.
Tensor upsample2d(const Tensor& input, int factor);

// Nearest-neighbour resize to an arbitrary target via src = floor(i*S/T).
Tensor resize_nearest(const Tensor& input, int out_h, int out_w);

// --- reductions / shaping --------------------------------------------------

Tensor reduce_sum(const Tensor& a, const std::vector<int>& axes);
Tensor reduce_mean(const Tensor& a, const std::vector<int>& axes);
Tensor reduce_max(const Tensor& a, const std::vector<int>& axes);
Tensor sum_all(const Tensor& a); // rank-0 result
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor softmax(const Tensor& a, int axis);
Tensor reshape(const Tensor& a, const Shape& s);

// Contiguous sub-range along axis 0 (copy); gradients scatter back.
Tensor slice0(const Tensor& a, int start, int len);

// Single channel of an NCHW tensor as (N,1,H,W).
Tensor slice_channel(const Tensor& a, int channel);

// Multiplicative inverted-dropout mask: entries are 0 with probability p,
// else 1/(1-p). Generated from the caller's stream so a fixed rng state
// reproduces the mask.
Tensor dropout_mask(const Shape& s, double p, Rng& rng);

// --- gradient oracle -------------------------------------------------------

// Central finite differences of a scalar-valued function, one coordinate at
// a time. f must be deterministic and is evaluated with no tape active.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                        const Tensor& x, double epsilon);

// Distance-to-kink probe. While a probe is installed, relu/maxpool/clamp
// forwards record how close their inputs came to a non-differentiable point;
// gradient-check fixtures assert the margin before trusting tolerances.
struct KinkStats {
    double relu_margin = 1e300;  // min |x| seen at any ReLU input
    double pool_margin = 1e300;  // min (max - runner_up) over pool windows
    double clamp_margin = 1e300; // min |x - floor| at any clamp
    double margin() const;
};

class KinkProbe {
public:
    KinkProbe();
    ~KinkProbe();
    const KinkStats& stats() const { return stats_; }
    static KinkStats* active();

private:
    KinkStats stats_;
    KinkStats* prev_ = nullptr;
};

} // namespace dcn
