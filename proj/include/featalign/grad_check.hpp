#pragma once

#include "featalign/tape.hpp"

#include <functional>

namespace featalign {

/// Scalar-valued function built on the tape that owns its argument.
using scalar_fn = std::function<var(var)>;

struct grad_check_result {
    double max_error = 0.0;    ///< worst relative (or absolute, near zero) error
    std::size_t worst_index = 0;
};

/// Compares tape gradients against central differences (f(x+h) - f(x-h)) / 2h.
/// Relative error per coordinate, falling back to absolute error when both
/// magnitudes are below 1e-8.
grad_check_result grad_check(const scalar_fn& f, const tensor& point, double h = 1e-6);

} // namespace featalign
