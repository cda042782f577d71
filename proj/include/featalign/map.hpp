#pragma once

#include "featalign/tape.hpp"

#include <vector>

namespace featalign {

/// Values a forward pass keeps for the matching input-gradient pass.
struct map_trace {
    std::vector<var> saved;
    var output;
};

/// A map from [N x in] to [N x out] that can also express its input
/// vector-Jacobian product as recorded tape operations. Recording the VJP
/// (instead of running tape::backward) is what lets the feature loop be
/// differentiated with respect to the parameters.
class differentiable_map {
public:
    virtual ~differentiable_map() = default;
    virtual map_trace forward(var x) const = 0;
    /// Returns J^T g for the Jacobian J of the forward pass in `trace`.
    virtual var input_vjp(const map_trace& trace, var g_out) const = 0;
    virtual std::size_t input_size() const = 0;
    virtual std::size_t output_size() const = 0;
};

} // namespace featalign
