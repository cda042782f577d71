#pragma once

// Differentiable operations recorded on a tape. Every op validates its
// operand extents and throws shape_error on mismatch.

#include "featalign/tape.hpp"

#include <span>
#include <vector>

namespace featalign {

/// Reduction applied by squared-error losses.
enum class reduction {
    sum,        ///< sum over every element
    mean_batch, ///< sum over features, mean over the leading (batch) axis
    mean,       ///< mean over every element
};

var matmul(var a, var b);
var transpose(var a);
var reshape(var a, shape_t shape);

var add(var a, var b);
var sub(var a, var b);
var mul(var a, var b);
var scale(var a, double factor);
var add_scalar(var a, double c);

/// x[N x F] + b[F], or x[N x C x ...] + b[C] per channel.
var add_bias(var x, var b);

var leaky_relu(var x, double slope = 0.01);
/// g * f'(x) for the leaky rectifier; the derivative is piecewise constant in x.
var leaky_relu_vjp(var g, var x, double slope = 0.01);

var arsinh(var x);
var sinh(var x);
/// g / sqrt(1 + x^2), differentiable in both g and x.
var arsinh_vjp(var g, var x);

var exp(var x);
var log(var x);
var sqrt(var x);
var square(var x);

var sum(var x);
/// Squared L2 distance between a and b under the given reduction.
var mse(var a, var b, reduction r = reduction::sum);
/// Softmax cross-entropy of logits [N x K] against integer labels, averaged over N.
var cross_entropy(var logits, std::span<const int> labels);

/// Column-wise concatenation of [N x p] and [N x q].
var concat_cols(var a, var b);
/// Columns [begin, end) of a [N x F] tensor.
var slice_cols(var a, std::size_t begin, std::size_t end);

struct conv_geometry {
    std::size_t stride = 1;
    std::size_t padding = 0;
};

/// Output spatial extent floor((in + 2p - k) / s) + 1; throws for non-positive results.
std::size_t conv_out_extent(std::size_t in, std::size_t k, conv_geometry g);

/// Cross-correlation of input [N x C x H x W] with kernel [F x C x k x k].
var conv2d(var input, var kernel, conv_geometry g);
/// Adjoint of conv2d with respect to its input: maps [N x F x H' x W'] back to
/// `input_shape` ([N x C x H x W]). Differentiable in both operands.
var conv2d_input_vjp(var grad_out, var kernel, const shape_t& input_shape, conv_geometry g);

namespace raw {
// Untaped kernels, exposed for oracles and reuse.
void conv2d_forward(std::span<const double> x, const shape_t& xs, std::span<const double> k, const shape_t& ks,
                    conv_geometry g, std::span<double> y, const shape_t& ys);
void conv2d_input_grad(std::span<const double> gy, const shape_t& ys, std::span<const double> k, const shape_t& ks,
                       conv_geometry g, std::span<double> gx, const shape_t& xs);
void conv2d_kernel_grad(std::span<const double> x, const shape_t& xs, std::span<const double> gy,
                        const shape_t& ys, conv_geometry g, std::span<double> gk, const shape_t& ks);
} // namespace raw

} // namespace featalign
