#include "featalign/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>

namespace featalign {

namespace {

using row_matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using cmap = Eigen::Map<const row_matrix>;
using mmap = Eigen::Map<row_matrix>;

tape& owner_of(var a)
{
    if (!a.valid()) throw std::invalid_argument("op on an unbound var");
    return *a.owner;
}

void require_same_tape(var a, var b)
{
    if (a.owner != b.owner) throw std::invalid_argument("operands live on different tapes");
}

void require_same_shape(const char* op, var a, var b)
{
    require_same_tape(a, b);
    if (a.shape() != b.shape())
        throw shape_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void require_rank(const char* op, var a, std::size_t rank)
{
    if (a.shape().size() != rank)
        throw shape_error(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(a.shape()));
}

// Elementwise unary op with derivative d(x, y) evaluated from input and output.
template <class F, class D>
var unary(var x, F f, D d)
{
    tape& t = owner_of(x);
    const tensor& xv = x.value();
    tensor y(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) y[i] = f(xv[i]);
    return t.record(std::move(y), {x}, [x, d](tape& tp, std::span<const double> g) {
        auto gx = tp.accumulate(x);
        if (gx.empty()) return;
        const tensor& xv = tp.value(x);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * d(xv[i]);
    });
}

std::size_t batch_extent(const shape_t& s) { return s.empty() ? 1 : s[0]; }

} // namespace

var matmul(var a, var b)
{
    require_same_tape(a, b);
    require_rank("matmul", a, 2);
    require_rank("matmul", b, 2);
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    if (b.shape()[0] != k)
        throw shape_error("matmul: inner extents differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    tensor y({m, n});
    mmap(y.values().data(), m, n).noalias() = cmap(a.value().values().data(), m, k) * cmap(b.value().values().data(), k, n);
    return owner_of(a).record(std::move(y), {a, b}, [a, b, m, k, n](tape& t, std::span<const double> g) {
        cmap gm(g.data(), m, n);
        if (auto ga = t.accumulate(a); !ga.empty())
            mmap(ga.data(), m, k).noalias() += gm * cmap(t.value(b).values().data(), k, n).transpose();
        if (auto gb = t.accumulate(b); !gb.empty())
            mmap(gb.data(), k, n).noalias() += cmap(t.value(a).values().data(), m, k).transpose() * gm;
    });
}

var transpose(var a)
{
    require_rank("transpose", a, 2);
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    tensor y({n, m});
    mmap(y.values().data(), n, m) = cmap(a.value().values().data(), m, n).transpose();
    return owner_of(a).record(std::move(y), {a}, [a, m, n](tape& t, std::span<const double> g) {
        if (auto ga = t.accumulate(a); !ga.empty()) mmap(ga.data(), m, n) += cmap(g.data(), n, m).transpose();
    });
}

var reshape(var a, shape_t shape)
{
    tensor y = a.value().reshaped(std::move(shape));
    return owner_of(a).record(std::move(y), {a}, [a](tape& t, std::span<const double> g) {
        auto ga = t.accumulate(a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
    });
}

var add(var a, var b)
{
    require_same_shape("add", a, b);
    tensor y(a.shape());
    const auto& av = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
    return owner_of(a).record(std::move(y), {a, b}, [a, b](tape& t, std::span<const double> g) {
        for (var v : {a, b}) {
            auto gv = t.accumulate(v);
            for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += g[i];
        }
    });
}

var sub(var a, var b)
{
    require_same_shape("sub", a, b);
    tensor y(a.shape());
    const auto& av = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] - bv[i];
    return owner_of(a).record(std::move(y), {a, b}, [a, b](tape& t, std::span<const double> g) {
        auto ga = t.accumulate(a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
        auto gb = t.accumulate(b);
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
    });
}

var mul(var a, var b)
{
    require_same_shape("mul", a, b);
    tensor y(a.shape());
    const auto& av = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
    return owner_of(a).record(std::move(y), {a, b}, [a, b](tape& t, std::span<const double> g) {
        if (auto ga = t.accumulate(a); !ga.empty()) {
            const auto& bv = t.value(b);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (auto gb = t.accumulate(b); !gb.empty()) {
            const auto& av = t.value(a);
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
        }
    });
}

var scale(var a, double factor)
{
    return unary(a, [factor](double x) { return factor * x; }, [factor](double) { return factor; });
}

var add_scalar(var a, double c)
{
    return unary(a, [c](double x) { return x + c; }, [](double) { return 1.0; });
}

var add_bias(var x, var b)
{
    require_same_tape(x, b);
    require_rank("add_bias", b, 1);
    const auto& xs = x.shape();
    if (xs.size() < 2 || xs[1] != b.shape()[0])
        throw shape_error("add_bias: bias " + shape_str(b.shape()) + " does not match " + shape_str(xs));
    const std::size_t n = xs[0], c = xs[1], inner = shape_size(xs) / (n * c);
    tensor y = x.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) {
            double* row = y.values().data() + (i * c + j) * inner;
            for (std::size_t q = 0; q < inner; ++q) row[q] += bv[j];
        }
    return owner_of(x).record(std::move(y), {x, b}, [x, b, n, c, inner](tape& t, std::span<const double> g) {
        auto gx = t.accumulate(x);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
        auto gb = t.accumulate(b);
        if (gb.empty()) return;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) {
                const double* row = g.data() + (i * c + j) * inner;
                double s = 0.0;
                for (std::size_t q = 0; q < inner; ++q) s += row[q];
                gb[j] += s;
            }
    });
}

var leaky_relu(var x, double slope)
{
    return unary(
        x, [slope](double v) { return v >= 0.0 ? v : slope * v; }, [slope](double v) { return v >= 0.0 ? 1.0 : slope; });
}

var leaky_relu_vjp(var g, var x, double slope)
{
    require_same_shape("leaky_relu_vjp", g, x);
    const auto& gv = g.value();
    const auto& xv = x.value();
    tensor y(g.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] >= 0.0 ? gv[i] : slope * gv[i];
    return owner_of(g).record(std::move(y), {g, x}, [g, x, slope](tape& t, std::span<const double> go) {
        auto gg = t.accumulate(g);
        if (gg.empty()) return;
        const auto& xv = t.value(x);
        for (std::size_t i = 0; i < gg.size(); ++i) gg[i] += xv[i] >= 0.0 ? go[i] : slope * go[i];
    });
}

var arsinh(var x)
{
    return unary(x, [](double v) { return std::asinh(v); }, [](double v) { return 1.0 / std::sqrt(1.0 + v * v); });
}

var sinh(var x)
{
    return unary(x, [](double v) { return std::sinh(v); }, [](double v) { return std::cosh(v); });
}

var arsinh_vjp(var g, var x)
{
    require_same_shape("arsinh_vjp", g, x);
    const auto& gv = g.value();
    const auto& xv = x.value();
    tensor y(g.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = gv[i] / std::sqrt(1.0 + xv[i] * xv[i]);
    return owner_of(g).record(std::move(y), {g, x}, [g, x](tape& t, std::span<const double> go) {
        const auto& gv = t.value(g);
        const auto& xv = t.value(x);
        if (auto gg = t.accumulate(g); !gg.empty())
            for (std::size_t i = 0; i < gg.size(); ++i) gg[i] += go[i] / std::sqrt(1.0 + xv[i] * xv[i]);
        if (auto gx = t.accumulate(x); !gx.empty())
            for (std::size_t i = 0; i < gx.size(); ++i) {
                const double q = 1.0 + xv[i] * xv[i];
                gx[i] += go[i] * gv[i] * (-xv[i]) / (q * std::sqrt(q));
            }
    });
}

var exp(var x)
{
    return unary(x, [](double v) { return std::exp(v); }, [](double v) { return std::exp(v); });
}

var log(var x)
{
    return unary(x, [](double v) { return std::log(v); }, [](double v) { return 1.0 / v; });
}

var sqrt(var x)
{
    return unary(x, [](double v) { return std::sqrt(v); }, [](double v) { return 0.5 / std::sqrt(v); });
}

var square(var x)
{
    return unary(x, [](double v) { return v * v; }, [](double v) { return 2.0 * v; });
}

var sum(var x)
{
    double s = 0.0;
    for (double v : x.value().values()) s += v;
    return owner_of(x).record(tensor::scalar(s), {x}, [x](tape& t, std::span<const double> g) {
        auto gx = t.accumulate(x);
        for (auto& v : gx) v += g[0];
    });
}

var mse(var a, var b, reduction r)
{
    require_same_shape("mse", a, b);
    const auto& av = a.value();
    const auto& bv = b.value();
    double denom = 1.0;
    if (r == reduction::mean_batch) denom = static_cast<double>(batch_extent(av.shape()));
    if (r == reduction::mean) denom = static_cast<double>(std::max<std::size_t>(av.size(), 1));
    double s = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) {
        const double d = av[i] - bv[i];
        s += d * d;
    }
    return owner_of(a).record(tensor::scalar(s / denom), {a, b}, [a, b, denom](tape& t, std::span<const double> g) {
        const auto& av = t.value(a);
        const auto& bv = t.value(b);
        const double c = 2.0 * g[0] / denom;
        if (auto ga = t.accumulate(a); !ga.empty())
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += c * (av[i] - bv[i]);
        if (auto gb = t.accumulate(b); !gb.empty())
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= c * (av[i] - bv[i]);
    });
}

var cross_entropy(var logits, std::span<const int> labels)
{
    require_rank("cross_entropy", logits, 2);
    const std::size_t n = logits.shape()[0], k = logits.shape()[1];
    if (labels.size() != n) throw shape_error("cross_entropy: label count does not match batch");
    const auto& lv = logits.value();
    std::vector<double> probs(n * k);
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k)
            throw std::invalid_argument("cross_entropy: label out of range");
        const double* row = lv.values().data() + i * k;
        const double mx = *std::max_element(row, row + k);
        double z = 0.0;
        for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
        for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(row[j] - mx) / z;
        loss += (std::log(z) + mx) - row[labels[i]];
    }
    std::vector<int> lab(labels.begin(), labels.end());
    return owner_of(logits).record(
        tensor::scalar(loss / static_cast<double>(n)), {logits},
        [logits, probs = std::move(probs), lab = std::move(lab), n, k](tape& t, std::span<const double> g) {
            auto gl = t.accumulate(logits);
            const double c = g[0] / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < k; ++j)
                    gl[i * k + j] += c * (probs[i * k + j] - (static_cast<int>(j) == lab[i] ? 1.0 : 0.0));
        });
}

var concat_cols(var a, var b)
{
    require_same_tape(a, b);
    require_rank("concat_cols", a, 2);
    require_rank("concat_cols", b, 2);
    const std::size_t n = a.shape()[0], p = a.shape()[1], q = b.shape()[1];
    if (b.shape()[0] != n) throw shape_error("concat_cols: row counts differ");
    tensor y({n, p + q});
    const auto& av = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(av.values().data() + i * p, p, y.values().data() + i * (p + q));
        std::copy_n(bv.values().data() + i * q, q, y.values().data() + i * (p + q) + p);
    }
    return owner_of(a).record(std::move(y), {a, b}, [a, b, n, p, q](tape& t, std::span<const double> g) {
        if (auto ga = t.accumulate(a); !ga.empty())
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < p; ++j) ga[i * p + j] += g[i * (p + q) + j];
        if (auto gb = t.accumulate(b); !gb.empty())
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < q; ++j) gb[i * q + j] += g[i * (p + q) + p + j];
    });
}

var slice_cols(var a, std::size_t begin, std::size_t end)
{
    require_rank("slice_cols", a, 2);
    const std::size_t n = a.shape()[0], f = a.shape()[1];
    if (begin > end || end > f) throw shape_error("slice_cols: range out of bounds for " + shape_str(a.shape()));
    const std::size_t w = end - begin;
    tensor y({n, w});
    for (std::size_t i = 0; i < n; ++i)
        std::copy_n(a.value().values().data() + i * f + begin, w, y.values().data() + i * w);
    return owner_of(a).record(std::move(y), {a}, [a, n, f, begin, w](tape& t, std::span<const double> g) {
        auto ga = t.accumulate(a);
        if (ga.empty()) return;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < w; ++j) ga[i * f + begin + j] += g[i * w + j];
    });
}

std::size_t conv_out_extent(std::size_t in, std::size_t k, conv_geometry g)
{
    if (g.stride == 0) throw shape_error("conv2d: stride must be positive");
    const long span = static_cast<long>(in) + 2 * static_cast<long>(g.padding) - static_cast<long>(k);
    if (span < 0)
        throw shape_error("conv2d: non-positive output extent for input " + std::to_string(in) + ", kernel "
                          + std::to_string(k));
    return static_cast<std::size_t>(span) / g.stride + 1;
}

namespace raw {

namespace {
struct conv_dims {
    std::size_t n, c, h, w, f, k, oh, ow;
};
conv_dims dims(const shape_t& xs, const shape_t& ks, const shape_t& ys)
{
    return {xs[0], xs[1], xs[2], xs[3], ks[0], ks[2], ys[2], ys[3]};
}
} // namespace

void conv2d_forward(std::span<const double> x, const shape_t& xs, std::span<const double> k, const shape_t& ks,
                    conv_geometry g, std::span<double> y, const shape_t& ys)
{
    const auto d = dims(xs, ks, ys);
    const long pad = static_cast<long>(g.padding);
    std::fill(y.begin(), y.end(), 0.0);
    for (std::size_t n = 0; n < d.n; ++n)
        for (std::size_t f = 0; f < d.f; ++f) {
            double* yo = y.data() + (n * d.f + f) * d.oh * d.ow;
            for (std::size_t c = 0; c < d.c; ++c) {
                const double* xi = x.data() + (n * d.c + c) * d.h * d.w;
                const double* kk = k.data() + (f * d.c + c) * d.k * d.k;
                for (std::size_t kh = 0; kh < d.k; ++kh)
                    for (std::size_t kw = 0; kw < d.k; ++kw) {
                        const double wv = kk[kh * d.k + kw];
                        for (std::size_t oh = 0; oh < d.oh; ++oh) {
                            const long ih = static_cast<long>(oh * g.stride + kh) - pad;
                            if (ih < 0 || ih >= static_cast<long>(d.h)) continue;
                            for (std::size_t ow = 0; ow < d.ow; ++ow) {
                                const long iw = static_cast<long>(ow * g.stride + kw) - pad;
                                if (iw < 0 || iw >= static_cast<long>(d.w)) continue;
                                yo[oh * d.ow + ow] += wv * xi[ih * static_cast<long>(d.w) + iw];
                            }
                        }
                    }
            }
        }
}

void conv2d_input_grad(std::span<const double> gy, const shape_t& ys, std::span<const double> k, const shape_t& ks,
                       conv_geometry g, std::span<double> gx, const shape_t& xs)
{
    const auto d = dims(xs, ks, ys);
    const long pad = static_cast<long>(g.padding);
    for (std::size_t n = 0; n < d.n; ++n)
        for (std::size_t f = 0; f < d.f; ++f) {
            const double* go = gy.data() + (n * d.f + f) * d.oh * d.ow;
            for (std::size_t c = 0; c < d.c; ++c) {
                double* xi = gx.data() + (n * d.c + c) * d.h * d.w;
                const double* kk = k.data() + (f * d.c + c) * d.k * d.k;
                for (std::size_t kh = 0; kh < d.k; ++kh)
                    for (std::size_t kw = 0; kw < d.k; ++kw) {
                        const double wv = kk[kh * d.k + kw];
                        for (std::size_t oh = 0; oh < d.oh; ++oh) {
                            const long ih = static_cast<long>(oh * g.stride + kh) - pad;
                            if (ih < 0 || ih >= static_cast<long>(d.h)) continue;
                            for (std::size_t ow = 0; ow < d.ow; ++ow) {
                                const long iw = static_cast<long>(ow * g.stride + kw) - pad;
                                if (iw < 0 || iw >= static_cast<long>(d.w)) continue;
                                xi[ih * static_cast<long>(d.w) + iw] += wv * go[oh * d.ow + ow];
                            }
                        }
                    }
            }
        }
}

void conv2d_kernel_grad(std::span<const double> x, const shape_t& xs, std::span<const double> gy,
                        const shape_t& ys, conv_geometry g, std::span<double> gk, const shape_t& ks)
{
    const auto d = dims(xs, ks, ys);
    const long pad = static_cast<long>(g.padding);
    for (std::size_t n = 0; n < d.n; ++n)
        for (std::size_t f = 0; f < d.f; ++f) {
            const double* go = gy.data() + (n * d.f + f) * d.oh * d.ow;
            for (std::size_t c = 0; c < d.c; ++c) {
                const double* xi = x.data() + (n * d.c + c) * d.h * d.w;
                double* kk = gk.data() + (f * d.c + c) * d.k * d.k;
                for (std::size_t kh = 0; kh < d.k; ++kh)
                    for (std::size_t kw = 0; kw < d.k; ++kw) {
                        double s = 0.0;
                        for (std::size_t oh = 0; oh < d.oh; ++oh) {
                            const long ih = static_cast<long>(oh * g.stride + kh) - pad;
                            if (ih < 0 || ih >= static_cast<long>(d.h)) continue;
                            for (std::size_t ow = 0; ow < d.ow; ++ow) {
                                const long iw = static_cast<long>(ow * g.stride + kw) - pad;
                                if (iw < 0 || iw >= static_cast<long>(d.w)) continue;
                                s += go[oh * d.ow + ow] * xi[ih * static_cast<long>(d.w) + iw];
                            }
                        }
                        kk[kh * d.k + kw] += s;
                    }
            }
        }
}

} // namespace raw

namespace {

void check_conv_operands(const shape_t& xs, const shape_t& ks)
{
    if (xs.size() != 4 || ks.size() != 4)
        throw shape_error("conv2d: expected [N x C x H x W] input and [F x C x k x k] kernel, got " + shape_str(xs)
                          + " and " + shape_str(ks));
    if (ks[1] != xs[1]) throw shape_error("conv2d: kernel channels " + shape_str(ks) + " vs input " + shape_str(xs));
    if (ks[2] != ks[3]) throw shape_error("conv2d: kernel must be square, got " + shape_str(ks));
}

} // namespace

var conv2d(var input, var kernel, conv_geometry g)
{
    require_same_tape(input, kernel);
    const shape_t xs = input.shape();
    const shape_t ks = kernel.shape();
    check_conv_operands(xs, ks);
    const shape_t ys{xs[0], ks[0], conv_out_extent(xs[2], ks[2], g), conv_out_extent(xs[3], ks[3], g)};
    tensor y(ys);
    raw::conv2d_forward(input.value().values(), xs, kernel.value().values(), ks, g, y.values(), ys);
    return owner_of(input).record(std::move(y), {input, kernel},
                                  [input, kernel, xs, ks, ys, g](tape& t, std::span<const double> gy) {
                                      if (auto gx = t.accumulate(input); !gx.empty())
                                          raw::conv2d_input_grad(gy, ys, t.value(kernel).values(), ks, g, gx, xs);
                                      if (auto gk = t.accumulate(kernel); !gk.empty())
                                          raw::conv2d_kernel_grad(t.value(input).values(), xs, gy, ys, g, gk, ks);
                                  });
}

var conv2d_input_vjp(var grad_out, var kernel, const shape_t& input_shape, conv_geometry g)
{
    require_same_tape(grad_out, kernel);
    const shape_t ys = grad_out.shape();
    const shape_t ks = kernel.shape();
    check_conv_operands(input_shape, ks);
    const shape_t expect{input_shape[0], ks[0], conv_out_extent(input_shape[2], ks[2], g),
                         conv_out_extent(input_shape[3], ks[3], g)};
    if (ys != expect)
        throw shape_error("conv2d_input_vjp: gradient " + shape_str(ys) + " does not match " + shape_str(expect));
    tensor x(input_shape);
    raw::conv2d_input_grad(grad_out.value().values(), ys, kernel.value().values(), ks, g, x.values(), input_shape);
    return owner_of(grad_out).record(
        std::move(x), {grad_out, kernel}, [grad_out, kernel, input_shape, ks, ys, g](tape& t, std::span<const double> dx) {
            if (auto gg = t.accumulate(grad_out); !gg.empty()) {
                std::vector<double> tmp(gg.size());
                raw::conv2d_forward(dx, input_shape, t.value(kernel).values(), ks, g, tmp, ys);
                for (std::size_t i = 0; i < gg.size(); ++i) gg[i] += tmp[i];
            }
            if (auto gk = t.accumulate(kernel); !gk.empty())
                raw::conv2d_kernel_grad(dx, input_shape, t.value(grad_out).values(), ys, g, gk, ks);
        });
}

} // namespace featalign
