#include "featalign/checkpoint.hpp"
#include "featalign/model.hpp"
#include "featalign/ops.hpp"
#include "featalign/rng.hpp"

#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace featalign;
namespace fs = std::filesystem;

namespace {

Eigen::MatrixXd as_matrix(const tensor& w)
{
    Eigen::MatrixXd m(w.extent(0), w.extent(1));
    for (std::size_t i = 0; i < w.extent(0); ++i)
        for (std::size_t j = 0; j < w.extent(1); ++j) m(i, j) = w[i * w.extent(1) + j];
    return m;
}

network_spec mlp(std::size_t in, std::size_t hidden, std::size_t out)
{
    return {"mlp", {in}, {layer_spec::linear(in, hidden), layer_spec::arsinh(), layer_spec::linear(hidden, out)}};
}

fs::path temp_file(const std::string& name)
{
    const fs::path dir = fs::temp_directory_path() / "featalign_test_model";
    fs::create_directories(dir);
    return dir / name;
}

void fill_grads(network& net, double v)
{
    for (auto* p : net.parameters())
        for (double& g : p->grad()) g = v;
}

} // namespace

TEST(BuildNetwork, SquareLayerIsOrthogonal)
{
    const network net = build_network({"sq", {4}, {layer_spec::linear(4, 4)}}, 3);
    const Eigen::MatrixXd w = as_matrix(net.layers()[0].weight);
    EXPECT_LT((w.transpose() * w - Eigen::MatrixXd::Identity(4, 4)).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(BuildNetwork, WideLayerHasOrthonormalRows)
{
    const network net = build_network({"wide", {8}, {layer_spec::linear(8, 4)}}, 3);
    const Eigen::MatrixXd w = as_matrix(net.layers()[0].weight);
    EXPECT_LT((w * w.transpose() - Eigen::MatrixXd::Identity(4, 4)).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(BuildNetwork, TallLayerHasOrthonormalColumns)
{
    const network net = build_network({"tall", {3}, {layer_spec::linear(3, 7)}}, 3);
    const Eigen::MatrixXd w = as_matrix(net.layers()[0].weight);
    EXPECT_LT((w.transpose() * w - Eigen::MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(BuildNetwork, SameSeedSameParameters)
{
    const network a = build_network(mlp(6, 5, 3), 42), b = build_network(mlp(6, 5, 3), 42);
    const network c = build_network(mlp(6, 5, 3), 43);
    const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(*pa[i], *pb[i]);
    EXPECT_FALSE(*pa[0] == *pc[0]);
}

TEST(BuildNetwork, BiasesStartAtZeroAndConvKernelsAreOrthogonal)
{
    const network net = build_network({"conv", {2, 6, 6}, {layer_spec::conv2d(2, 3, 3, 1, 0)}}, 1);
    for (double b : net.layers()[0].bias.values()) EXPECT_EQ(b, 0.0);
    const tensor k = net.layers()[0].weight.reshaped({3, 18});
    const Eigen::MatrixXd m = as_matrix(k);
    EXPECT_LT((m * m.transpose() - Eigen::MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(BuildNetwork, RejectsBrokenChains)
{
    EXPECT_THROW(build_network({"bad", {4}, {layer_spec::linear(4, 3), layer_spec::linear(4, 2)}}, 0), spec_error);
    EXPECT_THROW(build_network({"bad", {1, 2, 2}, {layer_spec::conv2d(1, 1, 3, 1, 0)}}, 0), std::exception);
}

TEST(BuildNetwork, SpecJsonRoundTrip)
{
    network_spec s{"x", {1, 8, 8}, {layer_spec::conv2d(1, 2, 3, 2, 1), layer_spec::leaky_relu(0.2),
                                    layer_spec::linear(32, 5, false), layer_spec::arsinh()}};
    EXPECT_EQ(network_spec_from_json(to_json(s)), s);
}

TEST(Forward, IdentityLayer)
{
    network net = build_network({"id", {2}, {layer_spec::linear(2, 2)}}, 0);
    net.layers()[0].weight = tensor({2, 2}, {1, 0, 0, 1});
    EXPECT_EQ(forward(net, tensor({1, 2}, {1, 2})), tensor({1, 2}, {1, 2}));
}

TEST(Forward, LinearArsinhAtZero)
{
    network net = build_network({"id", {2}, {layer_spec::linear(2, 2), layer_spec::arsinh()}}, 0);
    net.layers()[0].weight = tensor({2, 2}, {1, 0, 0, 1});
    EXPECT_EQ(forward(net, tensor({1, 2})), tensor({1, 2}));
}

TEST(Forward, MatchesHandComposedOps)
{
    const network net = build_network(mlp(5, 4, 3), 7);
    rng g(1);
    const tensor x = g.normal_tensor({6, 5});
    tape t;
    const auto& l = net.layers();
    var h = add_bias(matmul(t.constant(x), transpose(t.constant(l[0].weight))), t.constant(l[0].bias));
    var y = add_bias(matmul(arsinh(h), transpose(t.constant(l[2].weight))), t.constant(l[2].bias));
    EXPECT_EQ(forward(net, x), y.value());
}

TEST(Forward, ConvNetworkMatchesConvOp)
{
    const network net = build_network({"c", {1, 5, 5}, {layer_spec::conv2d(1, 2, 3, 2, 1)}}, 2);
    rng g(4);
    const tensor x = g.normal_tensor({2, 25});
    tape t;
    var y = add_bias(conv2d(t.constant(x.reshaped({2, 1, 5, 5})), t.constant(net.layers()[0].weight), {2, 1}),
                     t.constant(net.layers()[0].bias));
    EXPECT_EQ(forward(net, x), y.value().reshaped({2, 18}));
}

TEST(Forward, Pure)
{
    const network net = build_network(mlp(5, 4, 3), 7);
    rng g(1);
    const tensor x = g.normal_tensor({3, 5});
    EXPECT_EQ(forward(net, x), forward(net, x));
}

TEST(Forward, InputVjpIsTheTransposedJacobian)
{
    // <J v, u> == <v, J^T u> at a point, with J from finite differences of forward.
    const network net = build_network(mlp(4, 6, 3), 5);
    rng g(6);
    const tensor x = g.normal_tensor({1, 4}), u = g.normal_tensor({1, 3}), v = g.normal_tensor({1, 4});
    tape t;
    bound_network map(net, t);
    const map_trace tr = map.forward(t.constant(x));
    const tensor jtu = map.input_vjp(tr, t.constant(u)).value();
    const double eps = 1e-6;
    tensor xp = x, xm = x;
    for (std::size_t i = 0; i < 4; ++i) {
        xp[i] += eps * v[i];
        xm[i] -= eps * v[i];
    }
    const tensor yp = forward(net, xp), ym = forward(net, xm);
    double lhs = 0.0, rhs = 0.0;
    for (std::size_t i = 0; i < 3; ++i) lhs += (yp[i] - ym[i]) / (2 * eps) * u[i];
    for (std::size_t i = 0; i < 4; ++i) rhs += v[i] * jtu[i];
    EXPECT_NEAR(lhs, rhs, 1e-7);
}

TEST(ClampWeights, Branches)
{
    network net = build_network({"c", {3}, {layer_spec::linear(3, 1)}}, 0);
    net.layers()[0].weight = tensor({1, 3}, {2.0, -3.0, 0.3});
    net.layers()[0].bias = tensor({1}, {5.0});
    clamp_weights(net);
    EXPECT_EQ(net.layers()[0].weight[0], std::sqrt(2.0));
    EXPECT_EQ(net.layers()[0].weight[1], -std::sqrt(2.0));
    EXPECT_EQ(net.layers()[0].weight[2], 0.3);
    EXPECT_EQ(net.layers()[0].bias[0], 5.0);
}

TEST(ClampWeights, Idempotent)
{
    network net = build_network({"g", {6}, {layer_spec::linear(6, 6)}, init_kind::gaussian, 2.0}, 9);
    clamp_weights(net);
    const tensor once = net.layers()[0].weight;
    clamp_weights(net);
    EXPECT_EQ(net.layers()[0].weight, once);
}

TEST(Adam, FirstStepWithUnitGradient)
{
    network net = build_network({"a", {2}, {layer_spec::linear(2, 2)}}, 1);
    const tensor before = net.layers()[0].weight;
    adam_state s = make_adam(net.parameters(), {1e-3});
    fill_grads(net, 1.0);
    adam_step(net.parameters(), s);
    for (std::size_t i = 0; i < before.size(); ++i)
        EXPECT_NEAR(net.layers()[0].weight[i] - before[i], -1e-3 / (1.0 + 1e-8), 1e-15);
    EXPECT_EQ(s.step, 1u);
}

TEST(Adam, ZeroGradientLeavesParameters)
{
    network net = build_network(mlp(3, 3, 2), 1);
    adam_state s = make_adam(net.parameters(), {1e-2});
    std::vector<tensor> before;
    for (auto* p : net.parameters()) before.push_back(*p);
    fill_grads(net, 0.0);
    adam_step(net.parameters(), s);
    const auto after = net.parameters();
    for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(*after[i], before[i]);
}

TEST(Adam, DeterministicTrajectories)
{
    auto run = [] {
        network net = build_network(mlp(3, 4, 2), 5);
        adam_state s = make_adam(net.parameters(), {1e-2});
        rng g(8);
        for (int step = 0; step < 20; ++step) {
            for (auto* p : net.parameters())
                for (double& v : p->grad()) v = g.normal();
            adam_step(net.parameters(), s);
        }
        std::vector<tensor> out;
        for (auto* p : net.parameters()) out.push_back(*p);
        return out;
    };
    const auto a = run(), b = run();
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Adam, RequiresGradients)
{
    network net = build_network(mlp(3, 3, 2), 1);
    for (auto* p : net.parameters()) p->clear_grad();
    adam_state s = make_adam(net.parameters());
    EXPECT_THROW(adam_step(net.parameters(), s), std::exception);
}

TEST(Checkpoint, RoundTripIsBitExact)
{
    network net = build_network(mlp(5, 4, 3), 11);
    adam_state s = make_adam(net.parameters(), {3e-4, 0.8, 0.95, 1e-7});
    rng g(2);
    for (int i = 0; i < 3; ++i) {
        for (auto* p : net.parameters())
            for (double& v : p->grad()) v = g.normal();
        adam_step(net.parameters(), s);
    }
    const fs::path path = temp_file("roundtrip.faln");
    save_checkpoint(path, net, s);
    const loaded_network back = load_checkpoint(path);
    EXPECT_EQ(back.net.spec(), net.spec());
    const auto pa = std::as_const(net).parameters(), pb = back.net.parameters();
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(*pa[i], *pb[i]);
    EXPECT_EQ(back.adam.step, s.step);
    EXPECT_EQ(back.adam.settings.lr, s.settings.lr);
    EXPECT_EQ(back.adam.settings.beta1, s.settings.beta1);
    EXPECT_EQ(back.adam.settings.beta2, s.settings.beta2);
    EXPECT_EQ(back.adam.settings.eps, s.settings.eps);
    for (std::size_t i = 0; i < s.m.size(); ++i) {
        EXPECT_EQ(back.adam.m[i], s.m[i]);
        EXPECT_EQ(back.adam.v[i], s.v[i]);
    }
}

TEST(Checkpoint, TruncatedFileIsReportedNotCrashed)
{
    const network net = build_network(mlp(5, 4, 3), 11);
    const fs::path path = temp_file("truncated.faln");
    save_checkpoint(path, net, make_adam(build_network(mlp(5, 4, 3), 11).parameters()));
    fs::resize_file(path, fs::file_size(path) / 2);
    try {
        load_checkpoint(path);
        FAIL() << "expected checkpoint_error";
    }
    catch (const checkpoint_error& e) {
        EXPECT_EQ(e.code(), checkpoint_error::kind::checksum);
    }
    fs::resize_file(path, 6);
    try {
        load_checkpoint(path);
        FAIL() << "expected checkpoint_error";
    }
    catch (const checkpoint_error& e) {
        EXPECT_EQ(e.code(), checkpoint_error::kind::truncated);
    }
}

TEST(Checkpoint, CorruptedByteFailsChecksum)
{
    network net = build_network(mlp(5, 4, 3), 11);
    const fs::path path = temp_file("corrupt.faln");
    save_checkpoint(path, net, make_adam(net.parameters()));
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(100);
        char c = 0;
        f.read(&c, 1);
        f.seekp(100);
        c = static_cast<char>(c ^ 0x5a);
        f.write(&c, 1);
    }
    try {
        load_checkpoint(path);
        FAIL();
    }
    catch (const checkpoint_error& e) {
        EXPECT_EQ(e.code(), checkpoint_error::kind::checksum);
    }
}

TEST(Checkpoint, BadMagicAndVersion)
{
    network net = build_network(mlp(2, 2, 2), 1);
    const fs::path path = temp_file("magic.faln");
    save_checkpoint(path, net, make_adam(net.parameters()));
    auto patch = [&](std::size_t offset, char value) {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(static_cast<std::streamoff>(offset));
        f.write(&value, 1);
    };
    patch(4, 9);
    try {
        load_checkpoint(path);
        FAIL();
    }
    catch (const checkpoint_error& e) {
        EXPECT_EQ(e.code(), checkpoint_error::kind::version_mismatch);
    }
    patch(0, 'X');
    try {
        load_checkpoint(path);
        FAIL();
    }
    catch (const checkpoint_error& e) {
        EXPECT_EQ(e.code(), checkpoint_error::kind::bad_magic);
    }
}

TEST(Checkpoint, DifferentArchitectureIsAShapeMismatch)
{
    network saved = build_network(mlp(5, 4, 3), 1);
    const fs::path path = temp_file("arch.faln");
    save_checkpoint(path, saved, make_adam(saved.parameters()));
    network other = build_network(mlp(5, 6, 3), 1);
    adam_state s = make_adam(other.parameters());
    try {
        load_checkpoint_into(path, to_json(other.spec()), other.parameters(), s);
        FAIL();
    }
    catch (const checkpoint_error& e) {
        EXPECT_EQ(e.code(), checkpoint_error::kind::shape_mismatch);
    }
}

TEST(Checkpoint, MissingFile)
{
    try {
        load_checkpoint(temp_file("does_not_exist.faln"));
        FAIL();
    }
    catch (const checkpoint_error& e) {
        EXPECT_EQ(e.code(), checkpoint_error::kind::io);
    }
}
