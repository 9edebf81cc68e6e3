#include "dcn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <thread>

namespace dcn {

namespace {

Precision g_precision = Precision::f32;
int g_threads = 1;
thread_local Tape* g_active_tape = nullptr;
thread_local KinkStats* g_kink_stats = nullptr;

inline double q(double v) {
    return g_precision == Precision::f32 ? static_cast<double>(static_cast<float>(v)) : v;
}

void quantize_all(std::vector<double>& vs) {
    if (g_precision == Precision::f32) {
        for (double& v : vs) v = static_cast<double>(static_cast<float>(v));
    }
}

std::shared_ptr<TensorData> make_data(Shape s, std::vector<double> vals) {
    auto d = std::make_shared<TensorData>();
    d->shape = std::move(s);
    d->values = std::move(vals);
    return d;
}

bool tracked(const Tensor& t) { return t.requires_grad(); }

// Marks `out` as recorded output of an op over `ins` and appends the backward
// closure when a tape is active and any input requires grad.
void record(std::initializer_list<Tensor> ins, Tensor& out, std::function<void()> fn) {
    if (!Tape::active()) return;
    bool any = false;
    for (const Tensor& t : ins) any = any || t.requires_grad();
    if (!any) return;
    out.data_ptr()->requires_grad = true;
    out.data_ptr()->tape = Tape::active();
    Tape::active()->record(std::move(fn));
}

// Suspends recording for oracle evaluations.
struct TapePause {
    Tape* saved;
    TapePause() : saved(g_active_tape) { g_active_tape = nullptr; }
    ~TapePause() { g_active_tape = saved; }
};

// Splits [0, n) into contiguous chunks; deterministic for any thread count
// because chunks write disjoint ranges.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body) {
    int t = g_threads;
    if (t <= 1 || n < 2 * t) {
        body(0, n);
        return;
    }
    std::vector<std::thread> workers;
    int64_t chunk = (n + t - 1) / t;
    for (int i = 0; i < t; ++i) {
        int64_t lo = i * chunk;
        int64_t hi = std::min<int64_t>(n, lo + chunk);
        if (lo >= hi) break;
        workers.emplace_back([&body, lo, hi] { body(lo, hi); });
    }
    for (auto& w : workers) w.join();
}

std::vector<int64_t> row_major_strides(const Shape& s) {
    std::vector<int64_t> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
        st[i] = st[i + 1] * s[i + 1];
    return st;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
    size_t r = std::max(a.size(), b.size());
    Shape out(r, 1);
    for (size_t i = 0; i < r; ++i) {
        int da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        int db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError("broadcast mismatch: " + shape_str(a) + " vs " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// Strides of an operand aligned to a broadcast output shape, 0 on expanded dims.
std::vector<int64_t> bcast_strides(const Shape& op, const Shape& out) {
    auto st = row_major_strides(op);
    std::vector<int64_t> res(out.size(), 0);
    size_t off = out.size() - op.size();
    for (size_t i = 0; i < op.size(); ++i)
        res[off + i] = op[i] == 1 ? 0 : st[i];
    return res;
}

// Odometer walk over `out_shape`, calling fn(out_idx, a_idx, b_idx).
template <typename Fn>
void for_each_bcast(const Shape& out_shape, const std::vector<int64_t>& sa,
                    const std::vector<int64_t>& sb, Fn&& fn) {
    int64_t n = numel(out_shape);
    size_t r = out_shape.size();
    std::vector<int> idx(r, 0);
    int64_t ia = 0, ib = 0;
    for (int64_t i = 0; i < n; ++i) {
        fn(i, ia, ib);
        for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
            ia += sa[d];
            ib += sb[d];
            if (++idx[d] < out_shape[d]) break;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

void check_rank4(const Tensor& t, const char* what) {
    if (t.rank() != 4) throw ShapeError(std::string(what) + ": expected rank-4 NCHW, got " + shape_str(t.shape()));
}

} // namespace

Precision precision() { return g_precision; }
void set_precision(Precision p) { g_precision = p; }
int thread_budget() { return g_threads; }
void set_thread_budget(int n) { g_threads = std::max(1, n); }

int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) {
        if (d <= 0) throw ShapeError("non-positive extent in shape " + shape_str(s));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

Tensor Tensor::zeros(const Shape& s) {
    return Tensor(make_data(s, std::vector<double>(dcn::numel(s), 0.0)));
}

Tensor Tensor::full(const Shape& s, double value) {
    return Tensor(make_data(s, std::vector<double>(dcn::numel(s), q(value))));
}

Tensor Tensor::from_values(const Shape& s, std::vector<double> values) {
    if (static_cast<int64_t>(values.size()) != dcn::numel(s))
        throw ShapeError("from_values: " + std::to_string(values.size()) +
                         " values for shape " + shape_str(s));
    quantize_all(values);
    return Tensor(make_data(s, std::move(values)));
}

Tensor Tensor::scalar(double value) { return from_values({}, {value}); }

Tensor Tensor::detach() const {
    return Tensor(make_data(d_->shape, d_->values));
}

Tape::Tape() : prev_(g_active_tape) { g_active_tape = this; }
Tape::~Tape() { g_active_tape = prev_; }
Tape* Tape::active() { return g_active_tape; }

void backward(const Tensor& loss) {
    if (loss.numel() != 1)
        throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    Tape* t = loss.data_ptr()->tape;
    if (!t) throw ContractError("backward: loss is not attached to a tape");
    loss.data_ptr()->ensure_grad();
    loss.data_ptr()->grad[0] += 1.0;
    for (auto it = t->nodes_.rbegin(); it != t->nodes_.rend(); ++it) (*it)();
}

// --- elementwise -----------------------------------------------------------

namespace {

// Unary elementwise with pointwise derivative computed from (x, y).
template <typename F, typename DF>
Tensor unary_ew(const Tensor& a, F f, DF df) {
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = q(f(av[i]));
    Tensor res(make_data(a.shape(), std::move(out)));
    auto ad = a.data_ptr(), rd = res.data_ptr();
    record({a}, res, [ad, rd, df] {
        if (rd->grad.empty()) return;
        ad->ensure_grad();
        for (size_t i = 0; i < ad->values.size(); ++i)
            ad->grad[i] += rd->grad[i] * df(ad->values[i], rd->values[i]);
    });
    return res;
}

enum class BinOp { Add, Sub, Mul };

Tensor binary_ew(const Tensor& a, const Tensor& b, BinOp op) {
    Shape os = broadcast_shape(a.shape(), b.shape());
    auto sa = bcast_strides(a.shape(), os);
    auto sb = bcast_strides(b.shape(), os);
    std::vector<double> out(numel(os));
    const auto& av = a.values();
    const auto& bv = b.values();
    for_each_bcast(os, sa, sb, [&](int64_t i, int64_t ia, int64_t ib) {
        double x = av[ia], y = bv[ib];
        out[i] = q(op == BinOp::Add ? x + y : op == BinOp::Sub ? x - y : x * y);
    });
    Tensor res(make_data(os, std::move(out)));
    auto ad = a.data_ptr(), bd = b.data_ptr(), rd = res.data_ptr();
    bool na = tracked(a), nb = tracked(b);
    record({a, b}, res, [ad, bd, rd, sa, sb, op, na, nb, os = res.shape()] {
        if (rd->grad.empty()) return;
        if (na) ad->ensure_grad();
        if (nb) bd->ensure_grad();
        for_each_bcast(os, sa, sb, [&](int64_t i, int64_t ia, int64_t ib) {
            double g = rd->grad[i];
            switch (op) {
                case BinOp::Add:
                    if (na) ad->grad[ia] += g;
                    if (nb) bd->grad[ib] += g;
                    break;
                case BinOp::Sub:
                    if (na) ad->grad[ia] += g;
                    if (nb) bd->grad[ib] -= g;
                    break;
                case BinOp::Mul:
                    if (na) ad->grad[ia] += g * bd->values[ib];
                    if (nb) bd->grad[ib] += g * ad->values[ia];
                    break;
            }
        });
    });
    return res;
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_ew(a, b, BinOp::Add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_ew(a, b, BinOp::Sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_ew(a, b, BinOp::Mul); }

Tensor add(const Tensor& a, double b) {
    return unary_ew(a, [b](double x) { return x + b; }, [](double, double) { return 1.0; });
}

Tensor mul(const Tensor& a, double b) {
    return unary_ew(a, [b](double x) { return x * b; }, [b](double, double) { return b; });
}

Tensor neg(const Tensor& a) { return mul(a, -1.0); }

Tensor relu(const Tensor& a) {
    if (KinkStats* ks = g_kink_stats) {
        // Exact zeros are plateaus inherited from upstream clipping, not
        // kink crossings; only near-zero values poison finite differences.
        for (double v : a.values())
            if (v != 0.0) ks->relu_margin = std::min(ks->relu_margin, std::fabs(v));
    }
    return unary_ew(a, [](double x) { return x > 0.0 ? x : 0.0; },
                    [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_ew(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                    [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& a) {
    return unary_ew(a, [](double x) { return std::exp(x); },
                    [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    return unary_ew(a, [](double x) { return std::log(x); },
                    [](double x, double) { return 1.0 / x; });
}

Tensor clamp_min(const Tensor& a, double floor) {
    if (KinkStats* ks = g_kink_stats) {
        for (double v : a.values())
            ks->clamp_margin = std::min(ks->clamp_margin, std::fabs(v - floor));
    }
    // Pass-through backward: the clamp guards log() against non-finite
    // results, but a zero slope below the floor would permanently freeze
    // confidently-wrong probabilities (their loss gradient vanishes exactly
    // when correction is needed most). d log(clamp(x)) stays <= 1/floor.
    return unary_ew(a, [floor](double x) { return x > floor ? x : floor; },
                    [](double, double) { return 1.0; });
}

// --- linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul: expects rank-2 operands, got " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
    int m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2)
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
    std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
    const double* av = a.values().data();
    const double* bv = b.values().data();
    parallel_for(m, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            double* orow = out.data() + i * n;
            const double* arow = av + i * k;
            for (int kk = 0; kk < k; ++kk) {
                double aik = arow[kk];
                const double* brow = bv + static_cast<int64_t>(kk) * n;
                for (int j = 0; j < n; ++j) orow[j] += aik * brow[j];
            }
        }
    });
    quantize_all(out);
    Tensor res(make_data({m, n}, std::move(out)));
    auto ad = a.data_ptr(), bd = b.data_ptr(), rd = res.data_ptr();
    bool na = tracked(a), nb = tracked(b);
    record({a, b}, res, [ad, bd, rd, m, k, n, na, nb] {
        if (rd->grad.empty()) return;
        const double* g = rd->grad.data();
        if (na) {
            ad->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) {
                    double gij = g[static_cast<int64_t>(i) * n + j];
                    for (int kk = 0; kk < k; ++kk)
                        ad->grad[static_cast<int64_t>(i) * k + kk] += gij * bd->values[static_cast<int64_t>(kk) * n + j];
                }
        }
        if (nb) {
            bd->ensure_grad();
            for (int kk = 0; kk < k; ++kk)
                for (int i = 0; i < m; ++i) {
                    double aik = ad->values[static_cast<int64_t>(i) * k + kk];
                    for (int j = 0; j < n; ++j)
                        bd->grad[static_cast<int64_t>(kk) * n + j] += aik * g[static_cast<int64_t>(i) * n + j];
                }
        }
    });
    return res;
}

Tensor transpose2d(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose2d: expects rank-2, got " + shape_str(a.shape()));
    int m = a.shape()[0], n = a.shape()[1];
    std::vector<double> out(a.values().size());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out[static_cast<int64_t>(j) * m + i] = a.values()[static_cast<int64_t>(i) * n + j];
    Tensor res(make_data({n, m}, std::move(out)));
    auto ad = a.data_ptr(), rd = res.data_ptr();
    record({a}, res, [ad, rd, m, n] {
        if (rd->grad.empty()) return;
        ad->ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                ad->grad[static_cast<int64_t>(i) * n + j] += rd->grad[static_cast<int64_t>(j) * m + i];
    });
    return res;
}

// --- convolution / pooling ---------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, Padding pad) {
    check_rank4(input, "conv2d input");
    check_rank4(kernel, "conv2d kernel");
    if (stride < 1) throw ShapeError("conv2d: stride must be positive");
    int N = input.shape()[0], C = input.shape()[1], H = input.shape()[2], W = input.shape()[3];
    int O = kernel.shape()[0], I = kernel.shape()[1], KH = kernel.shape()[2], KW = kernel.shape()[3];
    if (KH != KW) throw ShapeError("conv2d: kernel must be square, got " + shape_str(kernel.shape()));
    if (I != C)
        throw ShapeError("conv2d: kernel expects " + std::to_string(I) + " input channels, input has " +
                         std::to_string(C));
    int K = KH;
    int P = 0;
    if (pad == Padding::Same) {
        if (K % 2 == 0) throw ConfigError("conv2d: same padding requires odd kernel size, got " + std::to_string(K));
        P = (K - 1) / 2;
    } else if (H < K || W < K) {
        throw ShapeError("conv2d: valid padding needs input >= kernel size");
    }
    int OH = (H + 2 * P - K) / stride + 1;
    int OW = (W + 2 * P - K) / stride + 1;
    std::vector<double> out(static_cast<size_t>(N) * O * OH * OW, 0.0);
    const double* iv = input.values().data();
    const double* kv = kernel.values().data();
    parallel_for(static_cast<int64_t>(N) * O, [&](int64_t lo, int64_t hi) {
        for (int64_t no = lo; no < hi; ++no) {
            int n = static_cast<int>(no / O), o = static_cast<int>(no % O);
            for (int oy = 0; oy < OH; ++oy)
                for (int ox = 0; ox < OW; ++ox) {
                    double acc = 0.0;
                    for (int c = 0; c < C; ++c)
                        for (int ky = 0; ky < K; ++ky) {
                            int iy = oy * stride + ky - P;
                            if (iy < 0 || iy >= H) continue;
                            const double* irow = iv + ((static_cast<int64_t>(n) * C + c) * H + iy) * W;
                            const double* krow = kv + ((static_cast<int64_t>(o) * C + c) * K + ky) * K;
                            for (int kx = 0; kx < K; ++kx) {
                                int ix = ox * stride + kx - P;
                                if (ix < 0 || ix >= W) continue;
                                acc += irow[ix] * krow[kx];
                            }
                        }
                    out[((static_cast<int64_t>(n) * O + o) * OH + oy) * OW + ox] = q(acc);
                }
        }
    });
    Tensor res(make_data({N, O, OH, OW}, std::move(out)));
    auto id = input.data_ptr(), kd = kernel.data_ptr(), rd = res.data_ptr();
    bool ni = tracked(input), nk = tracked(kernel);
    record({input, kernel}, res, [id, kd, rd, N, C, H, W, O, K, P, stride, OH, OW, ni, nk] {
        if (rd->grad.empty()) return;
        if (ni) id->ensure_grad();
        if (nk) kd->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int o = 0; o < O; ++o)
                for (int oy = 0; oy < OH; ++oy)
                    for (int ox = 0; ox < OW; ++ox) {
                        double g = rd->grad[((static_cast<int64_t>(n) * O + o) * OH + oy) * OW + ox];
                        if (g == 0.0) continue;
                        for (int c = 0; c < C; ++c)
                            for (int ky = 0; ky < K; ++ky) {
                                int iy = oy * stride + ky - P;
                                if (iy < 0 || iy >= H) continue;
                                for (int kx = 0; kx < K; ++kx) {
                                    int ix = ox * stride + kx - P;
                                    if (ix < 0 || ix >= W) continue;
                                    int64_t ii = ((static_cast<int64_t>(n) * C + c) * H + iy) * W + ix;
                                    int64_t ki = ((static_cast<int64_t>(o) * C + c) * K + ky) * K + kx;
                                    if (ni) id->grad[ii] += g * kd->values[ki];
                                    if (nk) kd->grad[ki] += g * id->values[ii];
                                }
                            }
                    }
    });
    return res;
}

Tensor depthwise_conv2d(const Tensor& input, const Tensor& depth_kernel) {
    check_rank4(input, "depthwise input");
    check_rank4(depth_kernel, "depthwise kernel");
    int N = input.shape()[0], C = input.shape()[1], H = input.shape()[2], W = input.shape()[3];
    int KC = depth_kernel.shape()[0], KI = depth_kernel.shape()[1];
    int K = depth_kernel.shape()[2];
    if (depth_kernel.shape()[3] != K) throw ShapeError("depthwise: kernel must be square");
    if (KC != C || KI != 1)
        throw ShapeError("depthwise: kernel " + shape_str(depth_kernel.shape()) +
                         " does not match " + std::to_string(C) + " input channels");
    if (K % 2 == 0) throw ConfigError("depthwise: same padding requires odd kernel size");
    int P = (K - 1) / 2;
    std::vector<double> out(input.values().size(), 0.0);
    const double* iv = input.values().data();
    const double* kv = depth_kernel.values().data();
    parallel_for(static_cast<int64_t>(N) * C, [&](int64_t lo, int64_t hi) {
        for (int64_t nc = lo; nc < hi; ++nc) {
            int n = static_cast<int>(nc / C), c = static_cast<int>(nc % C);
            const double* kbase = kv + static_cast<int64_t>(c) * K * K;
            for (int oy = 0; oy < H; ++oy)
                for (int ox = 0; ox < W; ++ox) {
                    double acc = 0.0;
                    for (int ky = 0; ky < K; ++ky) {
                        int iy = oy + ky - P;
                        if (iy < 0 || iy >= H) continue;
                        const double* irow = iv + ((static_cast<int64_t>(n) * C + c) * H + iy) * W;
                        for (int kx = 0; kx < K; ++kx) {
                            int ix = ox + kx - P;
                            if (ix < 0 || ix >= W) continue;
                            acc += irow[ix] * kbase[ky * K + kx];
                        }
                    }
                    out[((static_cast<int64_t>(n) * C + c) * H + oy) * W + ox] = q(acc);
                }
        }
    });
    Tensor res(make_data(input.shape(), std::move(out)));
    auto id = input.data_ptr(), kd = depth_kernel.data_ptr(), rd = res.data_ptr();
    bool ni = tracked(input), nk = tracked(depth_kernel);
    record({input, depth_kernel}, res, [id, kd, rd, N, C, H, W, K, P, ni, nk] {
        if (rd->grad.empty()) return;
        if (ni) id->ensure_grad();
        if (nk) kd->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int oy = 0; oy < H; ++oy)
                    for (int ox = 0; ox < W; ++ox) {
                        double g = rd->grad[((static_cast<int64_t>(n) * C + c) * H + oy) * W + ox];
                        if (g == 0.0) continue;
                        for (int ky = 0; ky < K; ++ky) {
                            int iy = oy + ky - P;
                            if (iy < 0 || iy >= H) continue;
                            for (int kx = 0; kx < K; ++kx) {
                                int ix = ox + kx - P;
                                if (ix < 0 || ix >= W) continue;
                                int64_t ii = ((static_cast<int64_t>(n) * C + c) * H + iy) * W + ix;
                                int64_t ki = (static_cast<int64_t>(c) * K + ky) * K + kx;
                                if (ni) id->grad[ii] += g * kd->values[ki];
                                if (nk) kd->grad[ki] += g * id->values[ii];
                            }
                        }
                    }
    });
    return res;
}

Tensor depthwise_separable_conv(const Tensor& input, const Tensor& depth_kernel,
                                const Tensor& point_kernel) {
    if (point_kernel.rank() != 4 || point_kernel.shape()[2] != 1 || point_kernel.shape()[3] != 1)
        throw ShapeError("separable conv: point kernel must be OC11, got " + shape_str(point_kernel.shape()));
    if (point_kernel.shape()[1] != input.shape()[1])
        throw ShapeError("separable conv: point kernel channels do not match input");
    return conv2d(depthwise_conv2d(input, depth_kernel), point_kernel, 1, Padding::Valid);
}

Tensor maxpool2d(const Tensor& input, int factor) {
    check_rank4(input, "maxpool input");
    if (factor < 1) throw ShapeError("maxpool: factor must be positive");
    int N = input.shape()[0], C = input.shape()[1], H = input.shape()[2], W = input.shape()[3];
    if (H % factor != 0 || W % factor != 0)
        throw ShapeError("maxpool: spatial extents " + std::to_string(H) + "x" + std::to_string(W) +
                         " not divisible by factor " + std::to_string(factor));
    int OH = H / factor, OW = W / factor;
    std::vector<double> out(static_cast<size_t>(N) * C * OH * OW);
    std::vector<int64_t> argmax(out.size());
    const double* iv = input.values().data();
    double pool_gap = 1e300;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int oy = 0; oy < OH; ++oy)
                for (int ox = 0; ox < OW; ++ox) {
                    double best = -1e300, runner = -1e300;
                    int64_t best_i = -1;
                    for (int py = 0; py < factor; ++py)
                        for (int px = 0; px < factor; ++px) {
                            int64_t ii = ((static_cast<int64_t>(n) * C + c) * H + oy * factor + py) * W +
                                         ox * factor + px;
                            double v = iv[ii];
                            if (v > best) {
                                runner = best;
                                best = v;
                                best_i = ii;
                            } else if (v > runner) {
                                runner = v;
                            }
                        }
                    int64_t oi = ((static_cast<int64_t>(n) * C + c) * OH + oy) * OW + ox;
                    out[oi] = best;
                    argmax[oi] = best_i;
                    // all-zero windows are clipped plateaus, not contested ties
                    if (factor > 1 && runner > -1e300 && !(best == 0.0 && runner == 0.0))
                        pool_gap = std::min(pool_gap, best - runner);
                }
    if (KinkStats* ks = g_kink_stats) ks->pool_margin = std::min(ks->pool_margin, pool_gap);
    Tensor res(make_data({N, C, OH, OW}, std::move(out)));
    auto id = input.data_ptr(), rd = res.data_ptr();
    record({input}, res, [id, rd, argmax = std::move(argmax)] {
        if (rd->grad.empty()) return;
        id->ensure_grad();
        for (size_t i = 0; i < argmax.size(); ++i) id->grad[argmax[i]] += rd->grad[i];
    });
    return res;
}

Tensor upsample2d(const Tensor& input, int factor) {
    check_rank4(input, "upsample input");
    if (factor < 1) throw ShapeError("upsample: factor must be >= 1");
    if (factor == 1) {
        // Identity, but still a recorded node so gradients flow.
        return add(input, 0.0);
    }
    int N = input.shape()[0], C = input.shape()[1], H = input.shape()[2], W = input.shape()[3];
    int OH = H * factor, OW = W * factor;
    std::vector<double> out(static_cast<size_t>(N) * C * OH * OW);
    const double* iv = input.values().data();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int oy = 0; oy < OH; ++oy) {
                const double* irow = iv + ((static_cast<int64_t>(n) * C + c) * H + oy / factor) * W;
                double* orow = out.data() + ((static_cast<int64_t>(n) * C + c) * OH + oy) * OW;
                for (int ox = 0; ox < OW; ++ox) orow[ox] = irow[ox / factor];
            }
    Tensor res(make_data({N, C, OH, OW}, std::move(out)));
    auto id = input.data_ptr(), rd = res.data_ptr();
    record({input}, res, [id, rd, N, C, H, W, factor, OH, OW] {
        if (rd->grad.empty()) return;
        id->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int oy = 0; oy < OH; ++oy)
                    for (int ox = 0; ox < OW; ++ox)
                        id->grad[((static_cast<int64_t>(n) * C + c) * H + oy / factor) * W + ox / factor] +=
                            rd->grad[((static_cast<int64_t>(n) * C + c) * OH + oy) * OW + ox];
    });
    return res;
}

Tensor resize_nearest(const Tensor& input, int out_h, int out_w) {
    check_rank4(input, "resize input");
    if (out_h < 1 || out_w < 1) throw ShapeError("resize: target extents must be positive");
    int N = input.shape()[0], C = input.shape()[1], H = input.shape()[2], W = input.shape()[3];
    std::vector<double> out(static_cast<size_t>(N) * C * out_h * out_w);
    std::vector<int> src_y(out_h), src_x(out_w);
    for (int y = 0; y < out_h; ++y) src_y[y] = static_cast<int>(static_cast<int64_t>(y) * H / out_h);
    for (int x = 0; x < out_w; ++x) src_x[x] = static_cast<int>(static_cast<int64_t>(x) * W / out_w);
    const double* iv = input.values().data();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int oy = 0; oy < out_h; ++oy) {
                const double* irow = iv + ((static_cast<int64_t>(n) * C + c) * H + src_y[oy]) * W;
                double* orow = out.data() + ((static_cast<int64_t>(n) * C + c) * out_h + oy) * out_w;
                for (int ox = 0; ox < out_w; ++ox) orow[ox] = irow[src_x[ox]];
            }
    Tensor res(make_data({N, C, out_h, out_w}, std::move(out)));
    auto id = input.data_ptr(), rd = res.data_ptr();
    record({input}, res, [id, rd, N, C, H, W, out_h, out_w, src_y = std::move(src_y), src_x = std::move(src_x)] {
        if (rd->grad.empty()) return;
        id->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int oy = 0; oy < out_h; ++oy)
                    for (int ox = 0; ox < out_w; ++ox)
                        id->grad[((static_cast<int64_t>(n) * C + c) * H + src_y[oy]) * W + src_x[ox]] +=
                            rd->grad[((static_cast<int64_t>(n) * C + c) * out_h + oy) * out_w + ox];
    });
    return res;
}

// --- reductions / shaping ----------------------------------------------------

namespace {

std::vector<int> normalize_axes(const Tensor& a, const std::vector<int>& axes) {
    std::vector<int> ax = axes;
    for (int& x : ax) {
        if (x < 0) x += a.rank();
        if (x < 0 || x >= a.rank())
            throw ShapeError("reduce: axis out of range for " + shape_str(a.shape()));
    }
    std::sort(ax.begin(), ax.end());
    ax.erase(std::unique(ax.begin(), ax.end()), ax.end());
    return ax;
}

struct ReducePlan {
    Shape out_shape;
    std::vector<int64_t> out_stride_per_axis; // 0 on reduced axes
    int64_t reduced_count = 1;
};

ReducePlan reduce_plan(const Tensor& a, const std::vector<int>& axes) {
    ReducePlan p;
    std::vector<bool> reduced(a.rank(), false);
    for (int x : axes) reduced[x] = true;
    for (int i = 0; i < a.rank(); ++i) {
        if (reduced[i]) p.reduced_count *= a.shape()[i];
        else p.out_shape.push_back(a.shape()[i]);
    }
    auto ost = row_major_strides(p.out_shape);
    p.out_stride_per_axis.assign(a.rank(), 0);
    int oi = 0;
    for (int i = 0; i < a.rank(); ++i)
        if (!reduced[i]) p.out_stride_per_axis[i] = ost[oi++];
    return p;
}

// Walks the input in row-major order, producing the output index per element.
template <typename Fn>
void for_each_reduce(const Tensor& a, const ReducePlan& p, Fn&& fn) {
    int r = a.rank();
    std::vector<int> idx(r, 0);
    int64_t oi = 0;
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) {
        fn(i, oi);
        for (int d = r - 1; d >= 0; --d) {
            oi += p.out_stride_per_axis[d];
            if (++idx[d] < a.shape()[d]) break;
            oi -= p.out_stride_per_axis[d] * a.shape()[d];
            idx[d] = 0;
        }
    }
}

} // namespace

Tensor reduce_sum(const Tensor& a, const std::vector<int>& axes) {
    auto ax = normalize_axes(a, axes);
    auto plan = reduce_plan(a, ax);
    std::vector<double> out(numel(plan.out_shape), 0.0);
    const auto& av = a.values();
    for_each_reduce(a, plan, [&](int64_t i, int64_t oi) { out[oi] += av[i]; });
    quantize_all(out);
    Tensor res(make_data(plan.out_shape, std::move(out)));
    auto ad = a.data_ptr(), rd = res.data_ptr();
    record({a}, res, [ad, rd, plan, sh = a.shape()] {
        if (rd->grad.empty()) return;
        ad->ensure_grad();
        int r = static_cast<int>(sh.size());
        std::vector<int> idx(r, 0);
        int64_t oi = 0;
        for (int64_t i = 0; i < static_cast<int64_t>(ad->values.size()); ++i) {
            ad->grad[i] += rd->grad[oi];
            for (int d = r - 1; d >= 0; --d) {
                oi += plan.out_stride_per_axis[d];
                if (++idx[d] < sh[d]) break;
                oi -= plan.out_stride_per_axis[d] * sh[d];
                idx[d] = 0;
            }
        }
    });
    return res;
}

Tensor reduce_mean(const Tensor& a, const std::vector<int>& axes) {
    auto ax = normalize_axes(a, axes);
    auto plan = reduce_plan(a, ax);
    return mul(reduce_sum(a, ax), 1.0 / static_cast<double>(plan.reduced_count));
}

Tensor reduce_max(const Tensor& a, const std::vector<int>& axes) {
    auto ax = normalize_axes(a, axes);
    auto plan = reduce_plan(a, ax);
    std::vector<double> out(numel(plan.out_shape), -1e300);
    std::vector<int64_t> argmax(out.size(), -1);
    const auto& av = a.values();
    for_each_reduce(a, plan, [&](int64_t i, int64_t oi) {
        if (av[i] > out[oi]) { // strict: first occurrence wins
            out[oi] = av[i];
            argmax[oi] = i;
        }
    });
    Tensor res(make_data(plan.out_shape, std::move(out)));
    auto ad = a.data_ptr(), rd = res.data_ptr();
    record({a}, res, [ad, rd, argmax = std::move(argmax)] {
        if (rd->grad.empty()) return;
        ad->ensure_grad();
        for (size_t oi = 0; oi < argmax.size(); ++oi) ad->grad[argmax[oi]] += rd->grad[oi];
    });
    return res;
}

Tensor sum_all(const Tensor& a) {
    std::vector<int> axes(a.rank());
    std::iota(axes.begin(), axes.end(), 0);
    return reduce_sum(a, axes);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    int r = parts[0].rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ShapeError("concat: axis out of range");
    Shape os = parts[0].shape();
    int total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != r) throw ShapeError("concat: rank mismatch");
        for (int d = 0; d < r; ++d)
            if (d != axis && p.shape()[d] != os[d])
                throw ShapeError("concat: extent mismatch on axis " + std::to_string(d) + ": " +
                                 shape_str(p.shape()) + " vs " + shape_str(os));
        total += p.shape()[axis];
    }
    os[axis] = total;
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= os[d];
    for (int d = axis + 1; d < r; ++d) inner *= os[d];
    std::vector<double> out(numel(os));
    int64_t offset = 0;
    for (const Tensor& p : parts) {
        int64_t block = p.shape()[axis] * inner;
        for (int64_t ot = 0; ot < outer; ++ot)
            std::copy_n(p.values().data() + ot * block, block,
                        out.data() + ot * total * inner + offset);
        offset += block;
    }
    Tensor res(make_data(os, std::move(out)));
    std::vector<std::shared_ptr<TensorData>> pds;
    std::vector<bool> track;
    bool any = false;
    for (const Tensor& p : parts) {
        pds.push_back(p.data_ptr());
        track.push_back(tracked(p));
        any = any || tracked(p);
    }
    if (Tape::active() && any) {
        auto rd = res.data_ptr();
        res.data_ptr()->requires_grad = true;
        res.data_ptr()->tape = Tape::active();
        Tape::active()->record([pds, track, rd, outer, inner, total, axis] {
            if (rd->grad.empty()) return;
            int64_t offset = 0;
            for (size_t pi = 0; pi < pds.size(); ++pi) {
                auto& pd = pds[pi];
                int64_t block = static_cast<int64_t>(pd->values.size()) / outer;
                if (track[pi]) {
                    pd->ensure_grad();
                    for (int64_t ot = 0; ot < outer; ++ot)
                        for (int64_t j = 0; j < block; ++j)
                            pd->grad[ot * block + j] += rd->grad[ot * total * inner + offset + j];
                }
                offset += block;
            }
        });
    }
    return res;
}

Tensor softmax(const Tensor& a, int axis) {
    if (axis < 0) axis += a.rank();
    if (axis < 0 || axis >= a.rank()) throw ShapeError("softmax: axis out of range");
    int64_t outer = 1, inner = 1;
    int len = a.shape()[axis];
    for (int d = 0; d < axis; ++d) outer *= a.shape()[d];
    for (int d = axis + 1; d < a.rank(); ++d) inner *= a.shape()[d];
    std::vector<double> out(a.values().size());
    const auto& av = a.values();
    for (int64_t ot = 0; ot < outer; ++ot)
        for (int64_t in = 0; in < inner; ++in) {
            int64_t base = ot * len * inner + in;
            double mx = -1e300;
            for (int j = 0; j < len; ++j) mx = std::max(mx, av[base + j * inner]);
            double denom = 0.0;
            for (int j = 0; j < len; ++j) denom += std::exp(av[base + j * inner] - mx);
            for (int j = 0; j < len; ++j)
                out[base + j * inner] = q(std::exp(av[base + j * inner] - mx) / denom);
        }
    Tensor res(make_data(a.shape(), std::move(out)));
    auto ad = a.data_ptr(), rd = res.data_ptr();
    record({a}, res, [ad, rd, outer, inner, len] {
        if (rd->grad.empty()) return;
        ad->ensure_grad();
        for (int64_t ot = 0; ot < outer; ++ot)
            for (int64_t in = 0; in < inner; ++in) {
                int64_t base = ot * len * inner + in;
                double dot = 0.0;
                for (int j = 0; j < len; ++j) dot += rd->grad[base + j * inner] * rd->values[base + j * inner];
                for (int j = 0; j < len; ++j)
                    ad->grad[base + j * inner] +=
                        rd->values[base + j * inner] * (rd->grad[base + j * inner] - dot);
            }
    });
    return res;
}

Tensor reshape(const Tensor& a, const Shape& s) {
    if (numel(s) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(s));
    Tensor res(make_data(s, a.values()));
    auto ad = a.data_ptr(), rd = res.data_ptr();
    record({a}, res, [ad, rd] {
        if (rd->grad.empty()) return;
        ad->ensure_grad();
        for (size_t i = 0; i < ad->grad.size(); ++i) ad->grad[i] += rd->grad[i];
    });
    return res;
}

Tensor slice0(const Tensor& a, int start, int len) {
    if (a.rank() < 1) throw ShapeError("slice0: rank-0 tensor");
    int n = a.shape()[0];
    if (start < 0 || len < 1 || start + len > n)
        throw ShapeError("slice0: range [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") out of " + std::to_string(n));
    int64_t inner = a.numel() / n;
    Shape os = a.shape();
    os[0] = len;
    std::vector<double> out(a.values().begin() + start * inner,
                            a.values().begin() + (start + len) * inner);
    Tensor res(make_data(os, std::move(out)));
    auto ad = a.data_ptr(), rd = res.data_ptr();
    record({a}, res, [ad, rd, start, inner] {
        if (rd->grad.empty()) return;
        ad->ensure_grad();
        for (size_t i = 0; i < rd->grad.size(); ++i) ad->grad[start * inner + i] += rd->grad[i];
    });
    return res;
}

Tensor slice_channel(const Tensor& a, int channel) {
    check_rank4(a, "slice_channel input");
    int N = a.shape()[0], C = a.shape()[1], H = a.shape()[2], W = a.shape()[3];
    if (channel < 0 || channel >= C) throw ShapeError("slice_channel: channel out of range");
    int64_t hw = static_cast<int64_t>(H) * W;
    std::vector<double> out(static_cast<size_t>(N) * hw);
    for (int n = 0; n < N; ++n)
        std::copy_n(a.values().data() + (static_cast<int64_t>(n) * C + channel) * hw, hw,
                    out.data() + static_cast<int64_t>(n) * hw);
    Tensor res(make_data({N, 1, H, W}, std::move(out)));
    auto ad = a.data_ptr(), rd = res.data_ptr();
    record({a}, res, [ad, rd, N, C, hw, channel] {
        if (rd->grad.empty()) return;
        ad->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int64_t i = 0; i < hw; ++i)
                ad->grad[(static_cast<int64_t>(n) * C + channel) * hw + i] +=
                    rd->grad[static_cast<int64_t>(n) * hw + i];
    });
    return res;
}

Tensor dropout_mask(const Shape& s, double p, Rng& rng) {
    if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: rate must be in [0, 1)");
    std::vector<double> m(numel(s));
    double keep = 1.0 / (1.0 - p);
    for (double& v : m) v = rng.uniform() < p ? 0.0 : keep;
    quantize_all(m);
    return Tensor(make_data(s, std::move(m)));
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double epsilon) {
    if (epsilon <= 0.0) throw ContractError("finite_diff_grad: epsilon must be positive");
    TapePause pause;
    Tensor g = Tensor::zeros(x.shape());
    std::vector<double> base = x.values();
    for (size_t i = 0; i < base.size(); ++i) {
        std::vector<double> vp = base, vm = base;
        vp[i] += epsilon;
        vm[i] -= epsilon;
        double fp = f(Tensor::from_values(x.shape(), std::move(vp)));
        double fm = f(Tensor::from_values(x.shape(), std::move(vm)));
        g.values()[i] = (fp - fm) / (2.0 * epsilon);
    }
    return g;
}

double KinkStats::margin() const { return std::min({relu_margin, pool_margin, clamp_margin}); }

KinkProbe::KinkProbe() : prev_(g_kink_stats) { g_kink_stats = &stats_; }
KinkProbe::~KinkProbe() { g_kink_stats = prev_; }
KinkStats* KinkProbe::active() { return g_kink_stats; }

} // namespace dcn
