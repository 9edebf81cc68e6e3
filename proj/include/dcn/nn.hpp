#pragma once

// Composable layer blocks: residual mappings, separable-conv blocks, U-Net
// down/up blocks and dense heads, plus parameter initialization and the
// named-tensor checkpoint format.

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dcn/tensor.hpp"

namespace dcn {

// Ordered collection of named learnable tensors. Iteration follows
// declaration order; names are unique.
class ParamSet {
public:
    Tensor& add(const std::string& name, Tensor t);
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    const Tensor* find(const std::string& name) const;
    bool has(const std::string& name) const { return index_.count(name) != 0; }

    size_t size() const { return items_.size(); }
    auto begin() { return items_.begin(); }
    auto end() { return items_.end(); }
    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }

    std::vector<std::string> names() const;
    std::vector<std::string> names_with_prefix(const std::string& prefix) const;
    int64_t total_values() const;
    void zero_grads();

private:
    std::vector<std::pair<std::string, Tensor>> items_;
    std::map<std::string, size_t> index_;
};

// He-style initialization: Normal(0, scale * sqrt(2/fan_in)). Biases start
// at zero. The residual branch's final conv uses scale 0.1 so stacked blocks
// start near the identity; plain He there compounds ~1.8x per block and
// saturates the softmax heads into zero-gradient territory.
Tensor he_normal(const Shape& shape, int64_t fan_in, Rng& rng, double scale = 1.0);

inline constexpr double kResidualBranchScale = 0.1;

enum class Activation { None, ReLU, Sigmoid };
Tensor apply_activation(const Tensor& x, Activation act);

// H(x) = act(inner(x) + projection(x)); identity shortcut when no projection
// is given, which requires the inner output to keep the input shape.
Tensor residual_forward(const Tensor& x, const std::function<Tensor(const Tensor&)>& inner,
                        const std::function<Tensor(const Tensor&)>* projection, Activation act);

// --- separable-conv residual block (texture path and mask head) -----------

// inner = sepconv -> ReLU -> sepconv [-> maxpool(2)], shortcut = strided 1x1
// projection when pooling, identity otherwise; ReLU after the sum.
struct SconvBlock {
    std::string name;
    int in_ch = 0;
    int out_ch = 0;
    int kernel = 3;
    bool pool = false;

    void init_params(ParamSet& params, Rng& rng) const;
    Tensor forward(const ParamSet& params, const Tensor& x) const;
    // (H, W) -> output spatial extent
    int out_extent(int in_extent) const { return pool ? in_extent / 2 : in_extent; }
};

// --- full-conv residual block (segmentation path) --------------------------

// Sum of two activated branches: relu(conv3x3 -> ReLU -> conv3x3) plus the
// identity (or relu(1x1 projection) when channels change). No activation
// after the sum.
struct ConvBlock {
    std::string name;
    int in_ch = 0;
    int out_ch = 0;
    int kernel = 3;

    void init_params(ParamSet& params, Rng& rng) const;
    Tensor forward(const ParamSet& params, const Tensor& x) const;
};

// skip = residual conv block at input resolution; down = maxpool(skip, 2).
std::pair<Tensor, Tensor> unet_down(const ConvBlock& block, const ParamSet& params,
                                    const Tensor& x);

// concat(upsample2d(down, 2), skip) -> residual conv block.
Tensor unet_up(const ConvBlock& block, const ParamSet& params, const Tensor& down,
               const Tensor& skip);

// --- dense -----------------------------------------------------------------

struct Dense {
    std::string name;
    int in_dim = 0;
    int out_dim = 0;

    void init_params(ParamSet& params, Rng& rng) const;
    Tensor forward(const ParamSet& params, const Tensor& x, Activation act) const;
};

// --- plain conv layer helper ------------------------------------------------

struct ConvLayer {
    std::string name;
    int in_ch = 0;
    int out_ch = 0;
    int kernel = 1;
    int stride = 1;
    Padding pad = Padding::Valid;

    void init_params(ParamSet& params, Rng& rng) const;
    Tensor forward(const ParamSet& params, const Tensor& x) const;
};

// --- checkpoint file ---------------------------------------------------------

// Header "DCNCKPT1", u32 tensor count, then (u32 name length, name bytes,
// tensor in DCT1 format) per entry, in collection order.
void save_checkpoint(const std::string& path, const ParamSet& params);
ParamSet load_checkpoint(const std::string& path);

// Throws ShapeError listing every name/shape mismatch between `loaded` and
// the expected parameter collection.
void validate_checkpoint_shapes(const ParamSet& loaded, const ParamSet& expected);

} // namespace dcn
