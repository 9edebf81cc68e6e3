#include <doctest.h>

#include <cmath>
#include <sstream>

#include "dcn/tensor.hpp"
#include "dcn/tensor_io.hpp"

using namespace dcn;

namespace {

struct F64Mode {
    Precision saved;
    F64Mode() : saved(precision()) { set_precision(Precision::f64); }
    ~F64Mode() { set_precision(saved); }
};

// Direct-summation convolution oracle, independent of the conv2d loops.
std::vector<double> conv_oracle(const std::vector<double>& in, int C, int H, int W,
                                const std::vector<double>& k, int O, int K, int stride, int pad) {
    int OH = (H + 2 * pad - K) / stride + 1;
    int OW = (W + 2 * pad - K) / stride + 1;
    std::vector<double> out(static_cast<size_t>(O) * OH * OW, 0.0);
    for (int o = 0; o < O; ++o)
        for (int y = 0; y < OH; ++y)
            for (int x = 0; x < OW; ++x)
                for (int c = 0; c < C; ++c)
                    for (int ky = 0; ky < K; ++ky)
                        for (int kx = 0; kx < K; ++kx) {
                            int iy = y * stride + ky - pad, ix = x * stride + kx - pad;
                            if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                            out[(o * OH + y) * OW + x] +=
                                in[(c * H + iy) * W + ix] * k[((o * C + c) * K + ky) * K + kx];
                        }
    return out;
}

} // namespace

TEST_CASE("elementwise basics") {
    auto r = relu(Tensor::from_values({3}, {-1, 0, 2}));
    CHECK(r.values() == std::vector<double>{0, 0, 2});

    auto s = sigmoid(Tensor::from_values({1}, {0}));
    CHECK(s.values()[0] == doctest::Approx(0.5));

    auto a = add(Tensor::from_values({2}, {1, 2}), Tensor::from_values({1}, {10}));
    CHECK(a.values() == std::vector<double>{11, 12});
}

TEST_CASE("broadcast rules") {
    auto a = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
    auto b = Tensor::from_values({3}, {10, 20, 30});
    auto c = add(a, b);
    CHECK(c.shape() == Shape{2, 3});
    CHECK(c.values() == std::vector<double>{11, 22, 33, 14, 25, 36});

    CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({4})), ShapeError);
}

TEST_CASE("matmul fixtures") {
    auto eye = Tensor::from_values({2, 2}, {1, 0, 0, 1});
    auto m = Tensor::from_values({2, 2}, {1, 2, 3, 4});
    CHECK(matmul(eye, m).values() == std::vector<double>{1, 2, 3, 4});

    auto row = Tensor::from_values({1, 2}, {1, 2});
    auto col = Tensor::from_values({2, 1}, {3, 4});
    CHECK(matmul(row, col).values() == std::vector<double>{11});

    CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}

TEST_CASE("conv2d identity kernel and same-padding sums") {
    F64Mode f64;
    auto in = Tensor::from_values({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    auto k1 = Tensor::from_values({1, 1, 1, 1}, {1});
    CHECK(conv2d(in, k1, 1, Padding::Same).values() == in.values());

    auto ones = Tensor::full({1, 1, 3, 3}, 1.0);
    auto k3 = Tensor::full({1, 1, 3, 3}, 1.0);
    auto out = conv2d(ones, k3, 1, Padding::Same);
    // center 9, corners 4, edges 6
    CHECK(out.values() == std::vector<double>{4, 6, 4, 6, 9, 6, 4, 6, 4});

    CHECK_THROWS_AS(conv2d(ones, Tensor::zeros({1, 1, 2, 2}), 1, Padding::Same), ConfigError);
    CHECK_THROWS_AS(conv2d(ones, Tensor::zeros({1, 2, 3, 3}), 1, Padding::Same), ShapeError);
}

TEST_CASE("conv2d matches direct-summation oracle on random instances") {
    F64Mode f64;
    Rng rng(71);
    for (int trial = 0; trial < 10; ++trial) {
        int C = 1 + static_cast<int>(rng.below(3));
        int O = 1 + static_cast<int>(rng.below(3));
        int K = 1 + 2 * static_cast<int>(rng.below(2)); // 1 or 3
        int H = K + 2 + static_cast<int>(rng.below(4));
        int W = K + 2 + static_cast<int>(rng.below(4));
        int stride = 1 + static_cast<int>(rng.below(2));
        bool same = rng.below(2) == 0;
        std::vector<double> iv(static_cast<size_t>(C) * H * W), kv(static_cast<size_t>(O) * C * K * K);
        for (double& v : iv) v = rng.uniform(-1, 1);
        for (double& v : kv) v = rng.uniform(-1, 1);
        auto in = Tensor::from_values({1, C, H, W}, iv);
        auto k = Tensor::from_values({O, C, K, K}, kv);
        auto got = conv2d(in, k, stride, same ? Padding::Same : Padding::Valid);
        auto want = conv_oracle(iv, C, H, W, kv, O, K, stride, same ? (K - 1) / 2 : 0);
        REQUIRE(got.values().size() == want.size());
        for (size_t i = 0; i < want.size(); ++i)
            CHECK(got.values()[i] == doctest::Approx(want[i]).epsilon(1e-12));
    }
}

TEST_CASE("separable conv equals composed per-channel conv oracle bitwise") {
    F64Mode f64;
    Rng rng(5);
    for (int trial = 0; trial < 5; ++trial) {
        int C = 2 + static_cast<int>(rng.below(3));
        int O = 1 + static_cast<int>(rng.below(4));
        int H = 5 + static_cast<int>(rng.below(3)), W = 5 + static_cast<int>(rng.below(3));
        std::vector<double> iv(static_cast<size_t>(C) * H * W), dv(static_cast<size_t>(C) * 9),
            pv(static_cast<size_t>(O) * C);
        for (double& v : iv) v = rng.uniform(-1, 1);
        for (double& v : dv) v = rng.uniform(-1, 1);
        for (double& v : pv) v = rng.uniform(-1, 1);
        auto in = Tensor::from_values({1, C, H, W}, iv);
        auto dk = Tensor::from_values({C, 1, 3, 3}, dv);
        auto pk = Tensor::from_values({O, C, 1, 1}, pv);
        auto got = depthwise_separable_conv(in, dk, pk);

        // oracle: per-channel full conv2d, concat, then 1x1 conv2d
        std::vector<Tensor> chans;
        for (int c = 0; c < C; ++c) {
            std::vector<double> ic(iv.begin() + static_cast<size_t>(c) * H * W,
                                   iv.begin() + static_cast<size_t>(c + 1) * H * W);
            std::vector<double> kc(dv.begin() + static_cast<size_t>(c) * 9,
                                   dv.begin() + static_cast<size_t>(c + 1) * 9);
            chans.push_back(conv2d(Tensor::from_values({1, 1, H, W}, ic),
                                   Tensor::from_values({1, 1, 3, 3}, kc), 1, Padding::Same));
        }
        auto want = conv2d(concat(chans, 1), pk, 1, Padding::Valid);
        CHECK(got.values() == want.values()); // bitwise
    }
}

TEST_CASE("separable factorization parameter count") {
    int64_t sep = 728 * 9 + 728 * 728;
    int64_t full = 728 * 728 * 9;
    CHECK(sep == 536536);
    CHECK(full == 4769856);
    CHECK(sep * 8 < full); // the factorization is ~9x smaller
}

TEST_CASE("separable conv identity composition") {
    F64Mode f64;
    // depth kernel = per-channel delta, point kernel = identity matrix
    auto in = Tensor::from_values({1, 2, 3, 3},
                                  {1, 2, 3, 4, 5, 6, 7, 8, 9, -1, -2, -3, -4, -5, -6, -7, -8, -9});
    std::vector<double> dv(2 * 9, 0.0);
    dv[4] = 1.0;      // center tap, channel 0
    dv[9 + 4] = 1.0;  // center tap, channel 1
    auto dk = Tensor::from_values({2, 1, 3, 3}, dv);
    auto pk = Tensor::from_values({2, 2, 1, 1}, {1, 0, 0, 1});
    CHECK(depthwise_separable_conv(in, dk, pk).values() == in.values());
}

TEST_CASE("maxpool fixtures") {
    auto in = Tensor::from_values({1, 1, 2, 2}, {1, 2, 3, 4});
    CHECK(maxpool2d(in, 2).values() == std::vector<double>{4});
    CHECK_THROWS_AS(maxpool2d(Tensor::zeros({1, 1, 3, 3}), 2), ShapeError);

    Rng rng(9);
    std::vector<double> raw(16);
    for (double& x : raw) x = rng.uniform(-5, 5);
    auto t = Tensor::from_values({1, 1, 4, 4}, raw);
    const auto& v = t.values(); // stored values (quantized in f32 mode)
    auto out = maxpool2d(t, 2);
    for (int oy = 0; oy < 2; ++oy)
        for (int ox = 0; ox < 2; ++ox) {
            double mx = -1e300;
            for (int py = 0; py < 2; ++py)
                for (int px = 0; px < 2; ++px) mx = std::max(mx, v[(oy * 2 + py) * 4 + ox * 2 + px]);
            CHECK(out.values()[oy * 2 + ox] == mx);
        }
}

TEST_CASE("maxpool tie routes gradient to first row-major position") {
    Tape tape;
    auto x = Tensor::full({1, 1, 2, 2}, 3.0).set_requires_grad();
    auto loss = sum_all(maxpool2d(x, 2));
    backward(loss);
    CHECK(x.grad() == std::vector<double>{1, 0, 0, 0});
}

TEST_CASE("upsample fixtures and pool inverse") {
    auto in = Tensor::from_values({1, 1, 2, 2}, {1, 2, 3, 4});
    CHECK(upsample2d(in, 1).values() == in.values());
    auto up = upsample2d(in, 2);
    CHECK(up.shape() == Shape{1, 1, 4, 4});
    CHECK(up.values() == std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4});
    // maxpool undoes block-constant upsample exactly
    CHECK(maxpool2d(up, 2).values() == in.values());
}

TEST_CASE("reductions, concat, softmax") {
    auto x = Tensor::from_values({2, 2}, {1, 2, 3, 4});
    CHECK(reduce_sum(x, {0}).values() == std::vector<double>{4, 6});
    CHECK(reduce_sum(x, {1}).values() == std::vector<double>{3, 7});
    CHECK(reduce_mean(x, {0, 1}).item() == doctest::Approx(2.5));
    CHECK(reduce_max(x, {1}).values() == std::vector<double>{2, 4});
    CHECK(sum_all(x).item() == 10.0);
    CHECK_THROWS_AS(reduce_sum(x, {2}), ShapeError);

    auto c = concat({Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 2, 4, 4})}, 1);
    CHECK(c.shape() == Shape{1, 4, 4, 4});
    CHECK_THROWS_AS(concat({Tensor::zeros({1, 2}), Tensor::zeros({2, 2})}, 1), ShapeError);

    auto sm = softmax(Tensor::from_values({2}, {0, 0}), 0);
    CHECK(sm.values()[0] == doctest::Approx(0.5));
    CHECK(sm.values()[1] == doctest::Approx(0.5));

    auto g = reduce_mean(Tensor::full({1, 3, 4, 4}, 2.5), {2, 3});
    CHECK(g.shape() == Shape{1, 3});
    for (double v : g.values()) CHECK(v == doctest::Approx(2.5));
}

TEST_CASE("softmax normalization property") {
    Rng rng(13);
    for (int t = 0; t < 20; ++t) {
        std::vector<double> v(12);
        for (double& x : v) x = rng.uniform(-8, 8);
        auto y = softmax(Tensor::from_values({3, 4}, v), 1);
        for (int i = 0; i < 3; ++i) {
            double s = 0;
            for (int j = 0; j < 4; ++j) {
                double p = y.values()[i * 4 + j];
                CHECK(p >= 0.0);
                s += p;
            }
            CHECK(std::fabs(s - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("resize_nearest maps by floor coordinate scaling") {
    auto in = Tensor::from_values({1, 1, 2, 2}, {1, 2, 3, 4});
    auto out = resize_nearest(in, 5, 5);
    CHECK(out.shape() == Shape{1, 1, 5, 5});
    // src index floor(i*2/5): 0,0,0,1,1
    CHECK(out.values()[0] == 1);
    CHECK(out.values()[4] == 2);
    CHECK(out.values()[24] == 4);
    CHECK(resize_nearest(out, 2, 2).values()[0] == 1);
}

TEST_CASE("same padding preserves spatial shape for odd K") {
    F64Mode f64;
    Rng rng(3);
    for (int K : {1, 3, 5, 7}) {
        std::vector<double> kv(static_cast<size_t>(K) * K);
        for (double& v : kv) v = rng.uniform(-1, 1);
        auto out = conv2d(Tensor::full({1, 1, 9, 9}, 1.0), Tensor::from_values({1, 1, K, K}, kv), 1,
                          Padding::Same);
        CHECK(out.shape() == Shape{1, 1, 9, 9});
    }
}

TEST_CASE("precision mode rounds stored values through binary32") {
    set_precision(Precision::f32);
    double v = 0.1; // not representable in binary32
    auto t = Tensor::from_values({1}, {v});
    CHECK(t.values()[0] == static_cast<double>(static_cast<float>(v)));
    set_precision(Precision::f64);
    auto u = Tensor::from_values({1}, {v});
    CHECK(u.values()[0] == v);
    set_precision(Precision::f32);
}

TEST_CASE("rng determinism and distribution sanity") {
    Rng a(42), b(42), c(43);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    CHECK(a.next_u64() != c.next_u64());

    Rng n(7);
    double mean = 0, m2 = 0;
    const int N = 20000;
    for (int i = 0; i < N; ++i) {
        double x = n.normal();
        mean += x;
        m2 += x * x;
    }
    mean /= N;
    double var = m2 / N - mean * mean;
    CHECK(std::fabs(mean) < 0.03);
    CHECK(std::fabs(var - 1.0) < 0.05);
}

TEST_CASE("tensor file round-trip") {
    std::ostringstream os;
    auto t = Tensor::from_values({2, 3}, {1, 2.5, -3, 0.125, 5, -6.75});
    write_tensor(os, t);
    std::string bytes = os.str();
    CHECK(bytes.substr(0, 4) == "DCT1");
    std::istringstream is(bytes);
    auto back = read_tensor(is, "test");
    CHECK(back.shape() == t.shape());
    CHECK(back.values() == t.values());

    std::istringstream bad("XXXX");
    CHECK_THROWS_AS(read_tensor(bad, "bad"), IoError);
}

TEST_CASE("dropout mask is reproducible and inversely scaled") {
    Rng r1(11), r2(11);
    auto m1 = dropout_mask({100}, 0.5, r1);
    auto m2 = dropout_mask({100}, 0.5, r2);
    CHECK(m1.values() == m2.values());
    for (double v : m1.values()) CHECK((v == 0.0 || v == doctest::Approx(2.0)));
}

TEST_CASE("thread budget does not change results") {
    F64Mode f64;
    Rng rng(17);
    std::vector<double> iv(2 * 12 * 12), kv(3 * 2 * 9);
    for (double& v : iv) v = rng.uniform(-1, 1);
    for (double& v : kv) v = rng.uniform(-1, 1);
    auto in = Tensor::from_values({1, 2, 12, 12}, iv);
    auto k = Tensor::from_values({3, 2, 3, 3}, kv);
    auto one = conv2d(in, k, 1, Padding::Same);
    set_thread_budget(4);
    auto four = conv2d(in, k, 1, Padding::Same);
    set_thread_budget(1);
    CHECK(one.values() == four.values());
}
