#include "featalign/grad_check.hpp"
#include "featalign/grad_suite.hpp"
#include "featalign/ops.hpp"
#include "featalign/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace featalign;

namespace {

tensor random_tensor(rng& g, shape_t s, double lo = -2.0, double hi = 2.0)
{
    tensor t(std::move(s));
    for (double& v : t.values()) v = lo + (hi - lo) * g.uniform();
    return t;
}

// Direct cross-correlation with zero padding.
tensor naive_conv(const tensor& x, const tensor& k, std::size_t stride, std::size_t pad)
{
    const std::size_t n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
    const std::size_t f = k.extent(0), kk = k.extent(2);
    const std::size_t ho = (h + 2 * pad - kk) / stride + 1, wo = (w + 2 * pad - kk) / stride + 1;
    tensor y({n, f, ho, wo});
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t o = 0; o < f; ++o)
            for (std::size_t i = 0; i < ho; ++i)
                for (std::size_t j = 0; j < wo; ++j) {
                    double s = 0.0;
                    for (std::size_t ch = 0; ch < c; ++ch)
                        for (std::size_t p = 0; p < kk; ++p)
                            for (std::size_t q = 0; q < kk; ++q) {
                                const long yy = static_cast<long>(i * stride + p) - static_cast<long>(pad);
                                const long xx = static_cast<long>(j * stride + q) - static_cast<long>(pad);
                                if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w))
                                    continue;
                                s += x[((b * c + ch) * h + yy) * w + xx] * k[((o * c + ch) * kk + p) * kk + q];
                            }
                    y[((b * f + o) * ho + i) * wo + j] = s;
                }
    return y;
}

} // namespace

TEST(Tensor, ShapeMustMatchValues)
{
    EXPECT_THROW(tensor({2, 2}, {1.0, 2.0, 3.0}), shape_error);
    tensor t({2, 3});
    EXPECT_EQ(t.size(), 6u);
    EXPECT_FALSE(t.has_grad());
    EXPECT_EQ(t.grad().size(), t.size());
}

TEST(Matmul, IdentityAndSelector)
{
    tape t;
    var i2 = t.constant(tensor({2, 2}, {1, 0, 0, 1}));
    var a = t.constant(tensor({2, 2}, {1, 2, 3, 4}));
    EXPECT_EQ(matmul(i2, a).value(), tensor({2, 2}, {1, 2, 3, 4}));
    var row = t.constant(tensor({1, 2}, {1, 0}));
    var col = t.constant(tensor({2, 1}, {2, 5}));
    EXPECT_EQ(matmul(row, col).value(), tensor({1, 1}, {2}));
}

TEST(Matmul, RejectsMismatchedInnerExtent)
{
    tape t;
    EXPECT_THROW(matmul(t.constant(tensor({2, 3})), t.constant(tensor({2, 3}))), shape_error);
}

TEST(Matmul, GradientsAgreeWithFiniteDifferences)
{
    rng g(11);
    const tensor b = random_tensor(g, {4, 2});
    const tensor w = random_tensor(g, {3, 2});
    auto f = [&](var a) { return sum(mul(matmul(a, a.owner->constant(b)), a.owner->constant(w))); };
    EXPECT_LT(grad_check(f, random_tensor(g, {3, 4})).max_error, 1e-6);
}

TEST(Conv2d, SumOfOnes)
{
    tape t;
    var y = conv2d(t.constant(tensor::full({1, 1, 3, 3}, 1.0)), t.constant(tensor::full({1, 1, 3, 3}, 1.0)), {1, 0});
    ASSERT_EQ(y.shape(), (shape_t{1, 1, 1, 1}));
    EXPECT_EQ(y.value()[0], 9.0);
}

TEST(Conv2d, StridePaddingShape)
{
    EXPECT_EQ(conv_out_extent(4, 3, {2, 1}), 2u);
    tape t;
    var y = conv2d(t.constant(tensor({1, 1, 4, 4})), t.constant(tensor({1, 1, 3, 3})), {2, 1});
    EXPECT_EQ(y.shape(), (shape_t{1, 1, 2, 2}));
    EXPECT_THROW(conv_out_extent(2, 3, {1, 0}), shape_error);
}

TEST(Conv2d, MatchesNestedLoops)
{
    rng g(5);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t n = 1 + g.below(2), c = 1 + g.below(3), f = 1 + g.below(3), k = 1 + g.below(3);
        const std::size_t stride = 1 + g.below(2), pad = g.below(2);
        const std::size_t h = k + g.below(8 - k + 1), w = k + g.below(8 - k + 1);
        const tensor x = random_tensor(g, {n, c, h, w});
        const tensor kern = random_tensor(g, {f, c, k, k});
        tape t;
        const tensor y = conv2d(t.constant(x), t.constant(kern), {stride, pad}).value();
        const tensor ref = naive_conv(x, kern, stride, pad);
        ASSERT_EQ(y.shape(), ref.shape());
        for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
    }
}

TEST(Conv2d, InputVjpIsTheAdjoint)
{
    // <conv(x), g> == <x, conv_input_vjp(g)> for any x and g.
    rng g(8);
    const tensor x = random_tensor(g, {2, 2, 5, 6});
    const tensor k = random_tensor(g, {3, 2, 3, 3});
    tape t;
    const conv_geometry geo{2, 1};
    const tensor y = conv2d(t.constant(x), t.constant(k), geo).value();
    const tensor gy = random_tensor(g, y.shape());
    const tensor gx = conv2d_input_vjp(t.constant(gy), t.constant(k), x.shape(), geo).value();
    double lhs = 0.0, rhs = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) lhs += y[i] * gy[i];
    for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * gx[i];
    EXPECT_NEAR(lhs, rhs, 1e-10);
}

TEST(LeakyRelu, Examples)
{
    tape t;
    const tensor y = leaky_relu(t.constant(tensor({2}, {2.0, -1.0})), 0.01).value();
    EXPECT_EQ(y[0], 2.0);
    EXPECT_DOUBLE_EQ(y[1], -0.01);
}

TEST(LeakyRelu, SlopeOnTheNegativeSide)
{
    auto f = [](var x) { return sum(leaky_relu(x, 0.01)); };
    tape t;
    var x = t.variable(tensor({1}, {-3.0}));
    t.backward(f(x));
    EXPECT_DOUBLE_EQ(t.grad(x)[0], 0.01);
    EXPECT_LT(grad_check(f, tensor({1}, {-3.0})).max_error, 1e-8);
}

TEST(Arsinh, Examples)
{
    tape t;
    EXPECT_EQ(arsinh(t.constant(tensor({1}, {0.0}))).value()[0], 0.0);
    EXPECT_NEAR(arsinh(t.constant(tensor({1}, {1.0}))).value()[0], std::log(1.0 + std::sqrt(2.0)), 1e-15);
    const tensor x({4}, {-10.0, -1.0, 0.5, 100.0});
    const tensor back = sinh(arsinh(t.constant(x))).value();
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(back[i], x[i], 1e-9);
}

TEST(Arsinh, SinhInvertsOverRange)
{
    tensor x({2001});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = -100.0 + 0.1 * static_cast<double>(i);
    tape t;
    const tensor back = sinh(arsinh(t.constant(x))).value();
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(back[i], x[i], 1e-9);
}

TEST(Mse, Examples)
{
    tape t;
    var a = t.variable(tensor({2}, {1.0, 2.0}));
    EXPECT_EQ(mse(a, t.constant(tensor({2}, {1.0, 2.0}))).value().item(), 0.0);
    var loss = mse(a, t.constant(tensor({2}, {0.0, 0.0})));
    EXPECT_EQ(loss.value().item(), 5.0);
    t.backward(loss);
    EXPECT_EQ(t.grad(a)[0], 2.0);
    EXPECT_EQ(t.grad(a)[1], 4.0);
    auto f = [](var x) { return mse(x, x.owner->constant(tensor({2}, {0.0, 0.0}))); };
    EXPECT_LT(grad_check(f, tensor({2}, {1.0, 2.0})).max_error, 1e-8);
}

TEST(Mse, Reductions)
{
    tape t;
    var a = t.constant(tensor({2, 2}, {1, 2, 3, 4}));
    var b = t.constant(tensor({2, 2}));
    EXPECT_EQ(mse(a, b, reduction::sum).value().item(), 30.0);
    EXPECT_EQ(mse(a, b, reduction::mean_batch).value().item(), 15.0);
    EXPECT_EQ(mse(a, b, reduction::mean).value().item(), 7.5);
}

TEST(Backward, SquareAtThree)
{
    tape t;
    var x = t.variable(tensor::scalar(3.0));
    t.backward(sum(square(x)));
    EXPECT_EQ(t.grad(x)[0], 6.0);
}

TEST(Backward, LinearModelLoss)
{
    rng g(3);
    const tensor xin = random_tensor(g, {5, 3});
    const tensor target = random_tensor(g, {5, 2});
    auto f = [&](var w) {
        tape& t = *w.owner;
        return mse(matmul(t.constant(xin), w), t.constant(target));
    };
    EXPECT_LT(grad_check(f, random_tensor(g, {3, 2})).max_error, 1e-6);
}

TEST(Backward, AccumulatesWithoutReset)
{
    tape t;
    var x = t.variable(tensor::scalar(3.0));
    var loss = sum(square(x));
    t.backward(loss);
    const double once = t.grad(x)[0];
    t.backward(loss);
    EXPECT_EQ(t.grad(x)[0], 2.0 * once);
}

TEST(Backward, ParameterGradientsAccumulateIntoTheTensor)
{
    tensor w({2}, {1.0, -2.0});
    for (int pass = 1; pass <= 2; ++pass) {
        tape t;
        var p = t.parameter(w);
        t.backward(sum(square(p)));
        EXPECT_EQ(w.grad()[0], 2.0 * pass);
        EXPECT_EQ(w.grad()[1], -4.0 * pass);
    }
}

TEST(Backward, RejectsNonScalarLoss)
{
    tape t;
    var x = t.variable(tensor({2}, {1.0, 2.0}));
    EXPECT_THROW(t.backward(square(x)), shape_error);
}

TEST(Backward, Deterministic)
{
    rng g(4);
    const tensor a = random_tensor(g, {4, 3}), b = random_tensor(g, {3, 5});
    auto run = [&] {
        tape t;
        var x = t.variable(a);
        t.backward(sum(arsinh(matmul(x, t.constant(b)))));
        auto gr = t.grad(x);
        return std::vector<double>(gr.begin(), gr.end());
    };
    EXPECT_EQ(run(), run());
}

TEST(GradCheck, SumHasConstantGradient)
{
    rng g(2);
    // Linear: no truncation error, so a wide step keeps round-off small.
    EXPECT_LT(grad_check([](var x) { return sum(x); }, random_tensor(g, {3, 3}), 1e-3).max_error, 1e-10);
}

TEST(GradCheck, ComposedChain)
{
    rng g(9);
    const tensor w = random_tensor(g, {4, 3});
    const tensor target = random_tensor(g, {2, 3});
    auto f = [&](var x) {
        tape& t = *x.owner;
        return mse(arsinh(matmul(x, t.constant(w))), t.constant(target));
    };
    EXPECT_LT(grad_check(f, random_tensor(g, {2, 4}), 1e-6).max_error, 1e-5);
}

TEST(GradCheck, DetectsCorruptedBackwardRule)
{
    // y = x^2 recorded with the wrong derivative 3x.
    auto broken_square = [](var x) {
        tape& t = *x.owner;
        tensor y = x.value();
        for (double& v : y.values()) v *= v;
        return t.record(std::move(y), {x}, [x](tape& tp, std::span<const double> gy) {
            auto gx = tp.accumulate(x);
            if (gx.empty()) return;
            const tensor& xv = x.value();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += 3.0 * xv[i] * gy[i];
        });
    };
    EXPECT_GT(grad_check([&](var x) { return sum(broken_square(x)); }, tensor({3}, {0.5, -1.0, 2.0})).max_error, 1e-2);
}

TEST(GradSuite, EveryOpWithinTolerance)
{
    const auto results = run_grad_suite(1, 20);
    EXPECT_EQ(results.size(), grad_suite_ops().size());
    for (const auto& r : results) {
        EXPECT_EQ(r.instances, 20u);
        EXPECT_LT(r.max_error, 1e-5) << r.op;
    }
}

TEST(Ops, AddBiasPerChannel)
{
    tape t;
    var x = t.constant(tensor({1, 2, 1, 2}, {1, 2, 3, 4}));
    const tensor y = add_bias(x, t.constant(tensor({2}, {10, 20}))).value();
    EXPECT_EQ(y, tensor({1, 2, 1, 2}, {11, 12, 23, 24}));
}

TEST(Ops, ConcatAndSlice)
{
    tape t;
    var a = t.constant(tensor({2, 1}, {1, 2}));
    var b = t.constant(tensor({2, 2}, {3, 4, 5, 6}));
    var c = concat_cols(a, b);
    EXPECT_EQ(c.value(), tensor({2, 3}, {1, 3, 4, 2, 5, 6}));
    EXPECT_EQ(slice_cols(c, 1, 3).value(), b.value());
}

TEST(Ops, CrossEntropyOfUniformLogits)
{
    tape t;
    const std::vector<int> labels{0, 2};
    EXPECT_NEAR(cross_entropy(t.constant(tensor({2, 3})), labels).value().item(), std::log(3.0), 1e-15);
}

TEST(Rng, SubstreamsAreReproducibleAndDistinct)
{
    rng a(rng::derive(7, "beta")), b(rng::derive(7, "beta")), c(rng::derive(7, "eps"));
    for (int i = 0; i < 10; ++i) {
        const auto x = a.next();
        EXPECT_EQ(x, b.next());
        EXPECT_NE(x, c.next());
    }
}
