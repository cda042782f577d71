#pragma once

// Finite-difference checks for every differentiable operation, on seeded
// random instances.

#include "featalign/grad_check.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace featalign {

struct op_check_summary {
    std::string op;
    std::size_t instances = 0;
    double max_error = 0.0;
};

/// Names of all checked operations, in run order.
std::vector<std::string> grad_suite_ops();

/// Runs `instances` random checks per operation (optionally only `only`).
std::vector<op_check_summary> run_grad_suite(std::uint64_t seed, std::size_t instances,
                                             const std::string& only = {});

} // namespace featalign
