#include "featalign/grad_suite.hpp"

#include "featalign/feature_alignment.hpp"
#include "featalign/ops.hpp"
#include "featalign/rng.hpp"
#include "featalign/vfa.hpp"

#include <cmath>
#include <functional>

namespace featalign {

namespace {

// A check instance: the point to differentiate at and the scalar function.
struct instance {
    tensor point;
    scalar_fn fn;
};

using generator = std::function<instance(rng&)>;

std::size_t pick(rng& g, std::size_t lo, std::size_t hi) { return lo + g.below(hi - lo + 1); }

tensor uniform_tensor(rng& g, shape_t s, double lo, double hi)
{
    tensor t(std::move(s));
    for (double& v : t.values()) v = lo + (hi - lo) * g.uniform();
    return t;
}

// Point coordinates: U(-2, 2).
tensor values(rng& g, shape_t s) { return uniform_tensor(g, std::move(s), -2.0, 2.0); }

// Values bounded away from zero, for ops with a kink there.
tensor away_from_zero(rng& g, shape_t s)
{
    tensor t(std::move(s));
    for (double& v : t.values()) v = (g.uniform() < 0.5 ? -1.0 : 1.0) * (0.05 + g.uniform());
    return t;
}

// Contracts an op's output with fixed random weights so every output element matters.
var project(var y, const tensor& w)
{
    tape& t = *y.owner;
    return sum(mul(y, t.constant(w)));
}

scalar_fn unary_check(std::function<var(var)> op, tensor weights)
{
    return [op, weights](var x) { return project(op(x), weights); };
}

instance unary(rng& g, shape_t s, tensor point, std::function<var(var)> op)
{
    const tensor w = g.normal_tensor(s);
    return {std::move(point), unary_check(std::move(op), w)};
}

// For binary ops: differentiate with respect to one operand while the other is held fixed.
instance first_of(rng& g, tensor a, tensor b, shape_t out, std::function<var(var, var)> op)
{
    const tensor w = g.normal_tensor(std::move(out));
    return {std::move(a), [b, w, op](var x) { return project(op(x, x.owner->constant(b)), w); }};
}

instance second_of(rng& g, tensor a, tensor b, shape_t out, std::function<var(var, var)> op)
{
    const tensor w = g.normal_tensor(std::move(out));
    return {std::move(b), [a, w, op](var x) { return project(op(x.owner->constant(a), x), w); }};
}

struct conv_case {
    shape_t xs, ks, ys;
    conv_geometry geo;
};

conv_case random_conv(rng& g)
{
    conv_case c;
    const std::size_t n = pick(g, 1, 2), ch = pick(g, 1, 2), f = pick(g, 1, 3), k = pick(g, 1, 3);
    c.geo = {pick(g, 1, 2), pick(g, 0, 1)};
    const std::size_t h = pick(g, k, k + 3), w = pick(g, k, k + 3);
    c.xs = {n, ch, h, w};
    c.ks = {f, ch, k, k};
    c.ys = {n, f, conv_out_extent(h, k, c.geo), conv_out_extent(w, k, c.geo)};
    return c;
}

std::vector<std::pair<std::string, generator>> checks()
{
    std::vector<std::pair<std::string, generator>> v;
    v.emplace_back("matmul/a", [](rng& g) {
        const std::size_t m = pick(g, 1, 4), k = pick(g, 1, 4), n = pick(g, 1, 4);
        return first_of(g, values(g, {m, k}), values(g, {k, n}), {m, n}, matmul);
    });
    v.emplace_back("matmul/b", [](rng& g) {
        const std::size_t m = pick(g, 1, 4), k = pick(g, 1, 4), n = pick(g, 1, 4);
        return second_of(g, values(g, {m, k}), values(g, {k, n}), {m, n}, matmul);
    });
    v.emplace_back("transpose", [](rng& g) {
        const std::size_t m = pick(g, 1, 5), n = pick(g, 1, 5);
        return unary(g, {n, m}, values(g, {m, n}), transpose);
    });
    v.emplace_back("reshape", [](rng& g) {
        const std::size_t m = pick(g, 1, 4), n = pick(g, 1, 4);
        return unary(g, {n * m}, values(g, {m, n}), [m, n](var x) { return reshape(x, {m * n}); });
    });
    v.emplace_back("add", [](rng& g) {
        const shape_t s{pick(g, 1, 4), pick(g, 1, 4)};
        return first_of(g, values(g, s), values(g, s), s, add);
    });
    v.emplace_back("sub", [](rng& g) {
        const shape_t s{pick(g, 1, 4), pick(g, 1, 4)};
        return second_of(g, values(g, s), values(g, s), s, sub);
    });
    v.emplace_back("mul", [](rng& g) {
        const shape_t s{pick(g, 1, 4), pick(g, 1, 4)};
        return first_of(g, values(g, s), values(g, s), s, mul);
    });
    v.emplace_back("scale", [](rng& g) {
        const shape_t s{pick(g, 1, 4), pick(g, 1, 4)};
        const double c = g.normal();
        return unary(g, s, values(g, s), [c](var x) { return scale(x, c); });
    });
    v.emplace_back("add_scalar", [](rng& g) {
        const shape_t s{pick(g, 1, 4), pick(g, 1, 4)};
        const double c = g.normal();
        return unary(g, s, values(g, s), [c](var x) { return add_scalar(x, c); });
    });
    v.emplace_back("add_bias/rows", [](rng& g) {
        const std::size_t n = pick(g, 1, 4), f = pick(g, 1, 4);
        return second_of(g, values(g, {n, f}), values(g, {f}), {n, f}, add_bias);
    });
    v.emplace_back("add_bias/channels", [](rng& g) {
        const shape_t s{pick(g, 1, 2), pick(g, 1, 3), pick(g, 1, 3), pick(g, 1, 3)};
        return second_of(g, values(g, s), values(g, {s[1]}), s, add_bias);
    });
    v.emplace_back("leaky_relu", [](rng& g) {
        const shape_t s{pick(g, 1, 4), pick(g, 1, 4)};
        return unary(g, s, away_from_zero(g, s), [](var x) { return leaky_relu(x, 0.1); });
    });
    v.emplace_back("leaky_relu_vjp", [](rng& g) {
        const shape_t s{pick(g, 1, 4), pick(g, 1, 4)};
        return first_of(g, values(g, s), away_from_zero(g, s), s,
                        [](var a, var x) { return leaky_relu_vjp(a, x, 0.1); });
    });
    v.emplace_back("arsinh", [](rng& g) {
        const shape_t s{pick(g, 1, 4), pick(g, 1, 4)};
        return unary(g, s, values(g, s), arsinh);
    });
    v.emplace_back("sinh", [](rng& g) {
        const shape_t s{pick(g, 1, 4), pick(g, 1, 4)};
        return unary(g, s, values(g, s), sinh);
    });
    v.emplace_back("arsinh_vjp/g", [](rng& g) {
        const shape_t s{pick(g, 1, 4), pick(g, 1, 4)};
        return first_of(g, values(g, s), values(g, s), s, arsinh_vjp);
    });
    v.emplace_back("arsinh_vjp/x", [](rng& g) {
        const shape_t s{pick(g, 1, 4), pick(g, 1, 4)};
        return second_of(g, values(g, s), values(g, s), s, arsinh_vjp);
    });
    v.emplace_back("exp", [](rng& g) {
        const shape_t s{pick(g, 1, 4), pick(g, 1, 4)};
        return unary(g, s, values(g, s), exp);
    });
    v.emplace_back("log", [](rng& g) {
        const shape_t s{pick(g, 1, 4), pick(g, 1, 4)};
        return unary(g, s, uniform_tensor(g, s, 0.2, 3.0), log);
    });
    v.emplace_back("sqrt", [](rng& g) {
        const shape_t s{pick(g, 1, 4), pick(g, 1, 4)};
        return unary(g, s, uniform_tensor(g, s, 0.2, 3.0), sqrt);
    });
    v.emplace_back("square", [](rng& g) {
        const shape_t s{pick(g, 1, 4), pick(g, 1, 4)};
        return unary(g, s, values(g, s), square);
    });
    v.emplace_back("sum", [](rng& g) {
        const shape_t s{pick(g, 1, 4), pick(g, 1, 4)};
        return instance{values(g, s), [](var x) { return sum(square(x)); }};
    });
    for (auto [name, red] : {std::pair{"mse/sum", reduction::sum}, std::pair{"mse/mean_batch", reduction::mean_batch},
                             std::pair{"mse/mean", reduction::mean}}) {
        v.emplace_back(name, [red](rng& g) {
            const shape_t s{pick(g, 1, 4), pick(g, 1, 4)};
            const tensor b = values(g, s);
            return instance{values(g, s), [b, red](var x) { return mse(x, x.owner->constant(b), red); }};
        });
    }
    v.emplace_back("cross_entropy", [](rng& g) {
        const std::size_t n = pick(g, 1, 4), k = pick(g, 2, 5);
        std::vector<int> labels(n);
        for (auto& l : labels) l = static_cast<int>(g.below(k));
        return instance{values(g, {n, k}), [labels](var x) { return cross_entropy(x, labels); }};
    });
    v.emplace_back("concat_cols", [](rng& g) {
        const std::size_t n = pick(g, 1, 4), a = pick(g, 1, 3), b = pick(g, 1, 3);
        return first_of(g, values(g, {n, a}), values(g, {n, b}), {n, a + b}, concat_cols);
    });
    v.emplace_back("slice_cols", [](rng& g) {
        const std::size_t n = pick(g, 1, 4), f = pick(g, 2, 6);
        const std::size_t b = g.below(f - 1), e = pick(g, b + 1, f);
        return unary(g, {n, e - b}, values(g, {n, f}), [b, e](var x) { return slice_cols(x, b, e); });
    });
    v.emplace_back("conv2d/input", [](rng& g) {
        const conv_case c = random_conv(g);
        return first_of(g, values(g, c.xs), values(g, c.ks), c.ys,
                        [geo = c.geo](var x, var k) { return conv2d(x, k, geo); });
    });
    v.emplace_back("conv2d/kernel", [](rng& g) {
        const conv_case c = random_conv(g);
        return second_of(g, values(g, c.xs), values(g, c.ks), c.ys,
                         [geo = c.geo](var x, var k) { return conv2d(x, k, geo); });
    });
    v.emplace_back("conv2d_input_vjp/grad", [](rng& g) {
        const conv_case c = random_conv(g);
        return first_of(g, values(g, c.ys), values(g, c.ks), c.xs,
                        [c](var gy, var k) { return conv2d_input_vjp(gy, k, c.xs, c.geo); });
    });
    v.emplace_back("conv2d_input_vjp/kernel", [](rng& g) {
        const conv_case c = random_conv(g);
        return second_of(g, values(g, c.ys), values(g, c.ks), c.xs,
                         [c](var gy, var k) { return conv2d_input_vjp(gy, k, c.xs, c.geo); });
    });
    v.emplace_back("reparameterize/mu", [](rng& g) {
        const shape_t s{pick(g, 1, 4), pick(g, 1, 4)};
        const tensor eps = g.normal_tensor(s);
        return first_of(g, values(g, s), uniform_tensor(g, s, 0.2, 2.0), s,
                        [eps](var mu, var s2) { return reparameterize(mu, s2, eps); });
    });
    v.emplace_back("reparameterize/sigma2", [](rng& g) {
        const shape_t s{pick(g, 1, 4), pick(g, 1, 4)};
        const tensor eps = g.normal_tensor(s);
        const auto kind = g.uniform() < 0.5 ? reparam_kind::variance : reparam_kind::stddev;
        return second_of(g, values(g, s), uniform_tensor(g, s, 0.2, 2.0), s,
                         [eps, kind](var mu, var s2) { return reparameterize(mu, s2, eps, kind); });
    });
    v.emplace_back("weighted_kl/mu", [](rng& g) {
        const shape_t s{pick(g, 1, 4), pick(g, 1, 4)};
        std::vector<double> betas(s[0]);
        for (auto& b : betas) b = g.uniform();
        const tensor logvar = values(g, s);
        return instance{values(g, s),
                        [betas, logvar](var mu) { return weighted_kl(mu, mu.owner->constant(logvar), betas); }};
    });
    v.emplace_back("weighted_kl/logvar", [](rng& g) {
        const shape_t s{pick(g, 1, 4), pick(g, 1, 4)};
        std::vector<double> betas(s[0]);
        for (auto& b : betas) b = g.uniform();
        const tensor mu = values(g, s);
        return instance{values(g, s),
                        [betas, mu](var lv) { return weighted_kl(lv.owner->constant(mu), lv, betas); }};
    });
    // Composite: unrolled extraction through a small network, with respect to the target.
    v.emplace_back("extraction/target", [](rng& g) {
        const std::size_t in = pick(g, 2, 5), hid = pick(g, 2, 5), out = pick(g, 1, 3), n = pick(g, 1, 3);
        network_spec spec{"check", {in}, {layer_spec::linear(in, hid), layer_spec::arsinh(), layer_spec::linear(hid, out)}};
        auto net = std::make_shared<network>(build_network(spec, g.next()));
        feature_config cfg;
        cfg.tau = 0.5;
        cfg.steps = static_cast<int>(pick(g, 1, 4));
        const tensor r0 = g.normal_tensor({n, in}, 0.1);
        const tensor x = values(g, {n, in});
        return instance{g.normal_tensor({n, out}), [net, cfg, r0, x](var z) {
                            tape& t = *z.owner;
                            bound_network map(*net, t);
                            return mse(t.constant(x), extract_taped(map, z, t.constant(r0), cfg));
                        }};
    });
    return v;
}

} // namespace

std::vector<std::string> grad_suite_ops()
{
    std::vector<std::string> names;
    for (const auto& [name, gen] : checks()) names.push_back(name);
    return names;
}

std::vector<op_check_summary> run_grad_suite(std::uint64_t seed, std::size_t instances, const std::string& only)
{
    std::vector<op_check_summary> out;
    for (const auto& [name, gen] : checks()) {
        if (!only.empty() && name != only) continue;
        rng g(rng::derive(seed, "grad:" + name));
        op_check_summary s{name, instances, 0.0};
        for (std::size_t i = 0; i < instances; ++i) {
            instance inst = gen(g);
            s.max_error = std::max(s.max_error, grad_check(inst.fn, inst.point, 3e-5).max_error);
        }
        out.push_back(s);
    }
    if (!only.empty() && out.empty()) throw std::invalid_argument("unknown operation '" + only + "'");
    return out;
}

} // namespace featalign
