#include "dcn/nn.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dcn/tensor_io.hpp"

namespace dcn {

Tensor& ParamSet::add(const std::string& name, Tensor t) {
    if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
    index_[name] = items_.size();
    items_.emplace_back(name, std::move(t));
    items_.back().second.set_requires_grad();
    return items_.back().second;
}

Tensor& ParamSet::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return items_[it->second].second;
}

const Tensor& ParamSet::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return items_[it->second].second;
}

const Tensor* ParamSet::find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &items_[it->second].second;
}

std::vector<std::string> ParamSet::names() const {
    std::vector<std::string> out;
    out.reserve(items_.size());
    for (const auto& [n, t] : items_) out.push_back(n);
    return out;
}

std::vector<std::string> ParamSet::names_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& [n, t] : items_)
        if (n.rfind(prefix, 0) == 0) out.push_back(n);
    return out;
}

int64_t ParamSet::total_values() const {
    int64_t n = 0;
    for (const auto& [name, t] : items_) n += t.numel();
    return n;
}

void ParamSet::zero_grads() {
    for (auto& [name, t] : items_) t.zero_grad();
}

Tensor he_normal(const Shape& shape, int64_t fan_in, Rng& rng, double scale) {
    double stddev = scale * std::sqrt(2.0 / static_cast<double>(fan_in));
    std::vector<double> v(numel(shape));
    for (double& x : v) x = stddev * rng.normal();
    return Tensor::from_values(shape, std::move(v));
}

Tensor apply_activation(const Tensor& x, Activation act) {
    switch (act) {
        case Activation::ReLU: return relu(x);
        case Activation::Sigmoid: return sigmoid(x);
        case Activation::None: return x;
    }
    return x;
}

Tensor residual_forward(const Tensor& x, const std::function<Tensor(const Tensor&)>& inner,
                        const std::function<Tensor(const Tensor&)>* projection, Activation act) {
    Tensor f = inner(x);
    Tensor shortcut = projection ? (*projection)(x) : x;
    if (f.shape() != shortcut.shape())
        throw ShapeError("residual block: inner output " + shape_str(f.shape()) +
                         " does not match shortcut " + shape_str(shortcut.shape()));
    return apply_activation(add(f, shortcut), act);
}

// --- SconvBlock ---------------------------------------------------------------

namespace {

// Bias stored as (C); reshaped to (C,1,1) so it broadcasts over H,W.
Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
    return add(x, reshape(bias, {bias.shape()[0], 1, 1}));
}

Tensor sepconv(const ParamSet& p, const std::string& prefix, const Tensor& x) {
    Tensor y = depthwise_separable_conv(x, p.at(prefix + ".depth"), p.at(prefix + ".point"));
    return add_channel_bias(y, p.at(prefix + ".bias"));
}

void add_sepconv_params(ParamSet& p, const std::string& prefix, int in_ch, int out_ch, int k,
                        Rng& rng, double point_scale = 1.0) {
    p.add(prefix + ".depth", he_normal({in_ch, 1, k, k}, static_cast<int64_t>(k) * k, rng));
    p.add(prefix + ".point", he_normal({out_ch, in_ch, 1, 1}, in_ch, rng, point_scale));
    p.add(prefix + ".bias", Tensor::zeros({out_ch}));
}

} // namespace

void SconvBlock::init_params(ParamSet& params, Rng& rng) const {
    add_sepconv_params(params, name + ".sconv1", in_ch, out_ch, kernel, rng);
    add_sepconv_params(params, name + ".sconv2", out_ch, out_ch, kernel, rng, kResidualBranchScale);
    if (pool) {
        params.add(name + ".proj.weight", he_normal({out_ch, in_ch, 1, 1}, in_ch, rng));
        params.add(name + ".proj.bias", Tensor::zeros({out_ch}));
    }
}

Tensor SconvBlock::forward(const ParamSet& params, const Tensor& x) const {
    auto inner = [&](const Tensor& in) {
        Tensor y = relu(sepconv(params, name + ".sconv1", in));
        y = sepconv(params, name + ".sconv2", y);
        return pool ? maxpool2d(y, 2) : y;
    };
    if (!pool) return residual_forward(x, inner, nullptr, Activation::ReLU);
    auto proj = std::function<Tensor(const Tensor&)>([&](const Tensor& in) {
        Tensor s = conv2d(in, params.at(name + ".proj.weight"), 2, Padding::Valid);
        return add_channel_bias(s, params.at(name + ".proj.bias"));
    });
    return residual_forward(x, inner, &proj, Activation::ReLU);
}

// --- ConvBlock ----------------------------------------------------------------

void ConvBlock::init_params(ParamSet& params, Rng& rng) const {
    int64_t fan1 = static_cast<int64_t>(in_ch) * kernel * kernel;
    int64_t fan2 = static_cast<int64_t>(out_ch) * kernel * kernel;
    params.add(name + ".conv1.weight", he_normal({out_ch, in_ch, kernel, kernel}, fan1, rng));
    params.add(name + ".conv1.bias", Tensor::zeros({out_ch}));
    params.add(name + ".conv2.weight",
               he_normal({out_ch, out_ch, kernel, kernel}, fan2, rng, 1.0));
    params.add(name + ".conv2.bias", Tensor::zeros({out_ch}));
    if (in_ch != out_ch) {
        params.add(name + ".proj.weight", he_normal({out_ch, in_ch, 1, 1}, in_ch, rng));
        params.add(name + ".proj.bias", Tensor::zeros({out_ch}));
    }
}

// Layer output is the sum of the two activated branches (residual function
// plus dimension mapping); there is no activation after the sum, so the
// shortcut always carries signal even when a narrow branch is relu-dead.
Tensor ConvBlock::forward(const ParamSet& params, const Tensor& x) const {
    auto inner = [&](const Tensor& in) {
        Tensor y = conv2d(in, params.at(name + ".conv1.weight"), 1, Padding::Same);
        y = relu(add_channel_bias(y, params.at(name + ".conv1.bias")));
        y = conv2d(y, params.at(name + ".conv2.weight"), 1, Padding::Same);
        return relu(add_channel_bias(y, params.at(name + ".conv2.bias")));
    };
    if (in_ch == out_ch) return residual_forward(x, inner, nullptr, Activation::None);
    auto proj = std::function<Tensor(const Tensor&)>([&](const Tensor& in) {
        Tensor s = conv2d(in, params.at(name + ".proj.weight"), 1, Padding::Valid);
        return relu(add_channel_bias(s, params.at(name + ".proj.bias")));
    });
    return residual_forward(x, inner, &proj, Activation::None);
}

std::pair<Tensor, Tensor> unet_down(const ConvBlock& block, const ParamSet& params,
                                    const Tensor& x) {
    if (x.shape()[2] % 2 != 0 || x.shape()[3] % 2 != 0)
        throw ShapeError("unet_down: odd spatial extent in " + shape_str(x.shape()));
    Tensor skip = block.forward(params, x);
    return {skip, maxpool2d(skip, 2)};
}

Tensor unet_up(const ConvBlock& block, const ParamSet& params, const Tensor& down,
               const Tensor& skip) {
    Tensor up = upsample2d(down, 2);
    if (up.shape()[2] != skip.shape()[2] || up.shape()[3] != skip.shape()[3])
        throw ShapeError("unet_up: upsampled " + shape_str(up.shape()) + " does not match skip " +
                         shape_str(skip.shape()));
    return block.forward(params, concat({up, skip}, 1));
}

// --- Dense ---------------------------------------------------------------------

void Dense::init_params(ParamSet& params, Rng& rng) const {
    params.add(name + ".weight", he_normal({in_dim, out_dim}, in_dim, rng));
    params.add(name + ".bias", Tensor::zeros({out_dim}));
}

Tensor Dense::forward(const ParamSet& params, const Tensor& x, Activation act) const {
    if (x.rank() != 2 || x.shape()[1] != in_dim)
        throw ShapeError("dense " + name + ": input " + shape_str(x.shape()) + " expects (N," +
                         std::to_string(in_dim) + ")");
    Tensor y = add(matmul(x, params.at(name + ".weight")), params.at(name + ".bias"));
    return apply_activation(y, act);
}

// --- ConvLayer -------------------------------------------------------------------

void ConvLayer::init_params(ParamSet& params, Rng& rng) const {
    int64_t fan = static_cast<int64_t>(in_ch) * kernel * kernel;
    params.add(name + ".weight", he_normal({out_ch, in_ch, kernel, kernel}, fan, rng));
    params.add(name + ".bias", Tensor::zeros({out_ch}));
}

Tensor ConvLayer::forward(const ParamSet& params, const Tensor& x) const {
    Tensor y = conv2d(x, params.at(name + ".weight"), stride, pad);
    return add_channel_bias(y, params.at(name + ".bias"));
}

// --- checkpoint -------------------------------------------------------------------

namespace {

constexpr char kCkptMagic[8] = {'D', 'C', 'N', 'C', 'K', 'P', 'T', '1'};

void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is, const std::string& path) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("truncated checkpoint: " + path);
    return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
           static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
}

} // namespace

void save_checkpoint(const std::string& path, const ParamSet& params) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint for writing: " + path);
    f.write(kCkptMagic, 8);
    put_u32(f, static_cast<uint32_t>(params.size()));
    for (const auto& [name, t] : params) {
        put_u32(f, static_cast<uint32_t>(name.size()));
        f.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_tensor(f, t);
    }
    if (!f) throw IoError("checkpoint write failed: " + path);
}

ParamSet load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path);
    char magic[8];
    if (!f.read(magic, 8) || std::memcmp(magic, kCkptMagic, 8) != 0)
        throw IoError("bad checkpoint magic: " + path);
    uint32_t count = get_u32(f, path);
    ParamSet out;
    for (uint32_t i = 0; i < count; ++i) {
        uint32_t len = get_u32(f, path);
        if (len == 0 || len > 4096) throw IoError("bad tensor name length in " + path);
        std::string name(len, '\0');
        if (!f.read(name.data(), len)) throw IoError("truncated checkpoint: " + path);
        out.add(name, read_tensor(f, path));
    }
    return out;
}

void validate_checkpoint_shapes(const ParamSet& loaded, const ParamSet& expected) {
    std::ostringstream bad;
    for (const auto& [name, t] : expected) {
        const Tensor* lt = loaded.find(name);
        if (!lt)
            bad << "  missing: " << name << " " << shape_str(t.shape()) << "\n";
        else if (lt->shape() != t.shape())
            bad << "  shape mismatch: " << name << " checkpoint " << shape_str(lt->shape())
                << " vs network " << shape_str(t.shape()) << "\n";
    }
    for (const auto& [name, t] : loaded)
        if (!expected.find(name)) bad << "  unexpected: " << name << " " << shape_str(t.shape()) << "\n";
    std::string msg = bad.str();
    if (!msg.empty()) throw ShapeError("checkpoint does not match network architecture:\n" + msg);
}

} // namespace dcn
