#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "dcn/nn.hpp"

using namespace dcn;

namespace {

struct F64Mode {
    Precision saved;
    F64Mode() : saved(precision()) { set_precision(Precision::f64); }
    ~F64Mode() { set_precision(saved); }
};

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

} // namespace

TEST_CASE("param set enforces unique names and keeps declaration order") {
    ParamSet p;
    p.add("a.w", Tensor::zeros({2}));
    p.add("a.b", Tensor::zeros({2}));
    p.add("b.w", Tensor::zeros({3}));
    CHECK_THROWS_AS(p.add("a.w", Tensor::zeros({2})), ContractError);
    CHECK(p.names() == std::vector<std::string>{"a.w", "a.b", "b.w"});
    CHECK(p.names_with_prefix("a.") == std::vector<std::string>{"a.w", "a.b"});
    CHECK(p.total_values() == 7);
    CHECK_THROWS_AS(p.at("missing"), ContractError);
}

TEST_CASE("he init matches target variance and is seed-deterministic") {
    F64Mode f64;
    Rng r1(42), r2(42), r3(43);
    auto t1 = he_normal({100, 100}, 50, r1);
    auto t2 = he_normal({100, 100}, 50, r2);
    auto t3 = he_normal({100, 100}, 50, r3);
    CHECK(t1.values() == t2.values());
    CHECK(t1.values() != t3.values());

    double mean = 0, m2 = 0;
    for (double v : t1.values()) {
        mean += v;
        m2 += v * v;
    }
    mean /= t1.numel();
    double var = m2 / t1.numel() - mean * mean;
    double target = 2.0 / 50.0;
    CHECK(std::fabs(var - target) < 0.1 * target);
}

TEST_CASE("residual block with zero inner and identity shortcut is identity") {
    auto x = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
    auto inner = [](const Tensor& t) { return mul(t, 0.0); };
    auto out = residual_forward(x, inner, nullptr, Activation::None);
    CHECK(out.values() == x.values());
    // with ReLU after the sum, non-negative inputs still pass through
    auto out_relu = residual_forward(x, inner, nullptr, Activation::ReLU);
    CHECK(out_relu.values() == x.values());
}

TEST_CASE("residual gradient flows through both branches") {
    F64Mode f64;
    auto x = Tensor::from_values({3}, {0.5, 1.5, 2.5}).set_requires_grad();
    auto w = Tensor::from_values({3}, {0.2, 0.3, 0.4}).set_requires_grad();
    {
        Tape tape;
        auto inner = [&](const Tensor& t) { return mul(t, w); };
        auto out = residual_forward(x, inner, nullptr, Activation::None);
        backward(sum_all(out));
    }
    // d/dx (w*x + x) = w + 1
    for (int i = 0; i < 3; ++i)
        CHECK(x.grad()[i] == doctest::Approx(w.values()[i] + 1.0));
}

TEST_CASE("residual shape mismatch without projection is an error") {
    auto x = Tensor::zeros({1, 2, 4, 4});
    auto inner = [](const Tensor& t) { return maxpool2d(t, 2); };
    CHECK_THROWS_AS(residual_forward(x, inner, nullptr, Activation::None), ShapeError);
}

TEST_CASE("sconv block shapes: pooling halves extent, projection matches channels") {
    F64Mode f64;
    Rng rng(7);
    ParamSet params;
    SconvBlock pool_block{"blk", 4, 6, 3, true};
    pool_block.init_params(params, rng);
    CHECK(params.has("blk.proj.weight"));
    auto y = pool_block.forward(params, Tensor::full({1, 4, 8, 8}, 0.5));
    CHECK(y.shape() == Shape{1, 6, 4, 4});

    ParamSet params2;
    SconvBlock const_block{"cb", 6, 6, 3, false};
    const_block.init_params(params2, rng);
    CHECK_FALSE(params2.has("cb.proj.weight"));
    auto z = const_block.forward(params2, y.detach());
    CHECK(z.shape() == y.shape());
}

TEST_CASE("zeroed sconv inner with identity shortcut passes relu-stable input") {
    F64Mode f64;
    Rng rng(3);
    ParamSet params;
    SconvBlock blk{"b", 2, 2, 3, false};
    blk.init_params(params, rng);
    for (const auto& name : params.names())
        for (double& v : params.at(name).values()) v = 0.0;
    auto x = Tensor::from_values({1, 2, 3, 3},
                                 {0.1, 0.5, 0.3, 0.7, 0.2, 0.8, 0.4, 0.6, 0.9,
                                  0.2, 0.1, 0.6, 0.3, 0.9, 0.5, 0.7, 0.8, 0.4});
    CHECK(blk.forward(params, x).values() == x.values());
}

TEST_CASE("parameter names enumerate deterministically in declaration order") {
    Rng rng(1);
    ParamSet params;
    SconvBlock blk{"lpl.block1", 3, 8, 3, true};
    blk.init_params(params, rng);
    CHECK(params.names() == std::vector<std::string>{
                                "lpl.block1.sconv1.depth", "lpl.block1.sconv1.point",
                                "lpl.block1.sconv1.bias", "lpl.block1.sconv2.depth",
                                "lpl.block1.sconv2.point", "lpl.block1.sconv2.bias",
                                "lpl.block1.proj.weight", "lpl.block1.proj.bias"});
}

TEST_CASE("unet_down pools after the conv block, unet_up restores and halves channels") {
    F64Mode f64;
    Rng rng(5);
    ParamSet params;
    ConvBlock enc{"enc", 1, 4, 3};
    enc.init_params(params, rng);
    auto [skip, down] = unet_down(enc, params, Tensor::full({1, 1, 8, 8}, 0.3));
    CHECK(skip.shape() == Shape{1, 4, 8, 8});
    CHECK(down.shape() == Shape{1, 4, 4, 4});
    CHECK_THROWS_AS(unet_down(enc, params, Tensor::zeros({1, 1, 7, 7})), ShapeError);

    ConvBlock dec{"dec", 8 + 4, 4, 3};
    dec.init_params(params, rng);
    auto bott = Tensor::full({1, 8, 2, 2}, 0.2);
    auto skip2 = Tensor::full({1, 4, 4, 4}, 0.1);
    auto up = unet_up(dec, params, bott, skip2);
    CHECK(up.shape() == Shape{1, 4, 4, 4});
    // spatial mismatch after upsample
    CHECK_THROWS_AS(unet_up(dec, params, bott, Tensor::zeros({1, 4, 6, 6})), ShapeError);
}

TEST_CASE("zero bottleneck and zero weights give zero decoder output") {
    F64Mode f64;
    Rng rng(5);
    ParamSet params;
    ConvBlock dec{"dec", 3, 2, 3};
    dec.init_params(params, rng);
    for (const auto& name : params.names())
        for (double& v : params.at(name).values()) v = 0.0;
    auto out = unet_up(dec, params, Tensor::zeros({1, 2, 2, 2}), Tensor::zeros({1, 1, 4, 4}));
    for (double v : out.values()) CHECK(v == 0.0);
}

TEST_CASE("dense fixtures") {
    F64Mode f64;
    Rng rng(9);
    ParamSet params;
    Dense d{"d", 3, 3};
    d.init_params(params, rng);
    for (double& v : params.at("d.weight").values()) v = 0.0;
    auto zero_out = d.forward(params, Tensor::full({2, 3}, 1.0), Activation::ReLU);
    for (double v : zero_out.values()) CHECK(v == 0.0);

    // identity weights pass the input through
    auto& w = params.at("d.weight").values();
    for (int i = 0; i < 3; ++i) w[i * 3 + i] = 1.0;
    auto x = Tensor::from_values({1, 3}, {1, 2, 3});
    CHECK(d.forward(params, x, Activation::None).values() == x.values());

    CHECK_THROWS_AS(d.forward(params, Tensor::zeros({1, 4}), Activation::None), ShapeError);
}

TEST_CASE("checkpoint round-trip is bitwise and validates shapes") {
    Rng rng(11);
    ParamSet params;
    Dense d{"head", 4, 2};
    d.init_params(params, rng);
    SconvBlock blk{"blk", 2, 2, 3, false};
    blk.init_params(params, rng);

    std::string path = temp_path("dcn_test_ckpt.dcnckpt");
    save_checkpoint(path, params);
    ParamSet loaded = load_checkpoint(path);
    CHECK(loaded.names() == params.names());
    for (const auto& [name, t] : params) CHECK(loaded.at(name).values() == t.values());

    // architecture mismatch lists the offending tensors
    ParamSet other;
    Dense d2{"head", 5, 2};
    d2.init_params(other, rng);
    try {
        validate_checkpoint_shapes(loaded, other);
        CHECK(false);
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        CHECK(msg.find("head.weight") != std::string::npos);
    }
    std::remove(path.c_str());

    CHECK_THROWS_AS(load_checkpoint(temp_path("missing_ckpt.dcnckpt")), IoError);
}
