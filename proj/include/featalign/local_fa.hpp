#pragma once

// Layer-local feature alignment: each parametric layer, together with the
// activations that follow it, is trained to reconstruct its own input.

#include "featalign/feature_alignment.hpp"

namespace featalign {

/// A layer range [first, last) holding exactly one parametric layer.
struct local_unit {
    std::size_t first = 0;
    std::size_t last = 0;
};

/// Splits a network into units; leading activations join the first unit.
std::vector<local_unit> local_units(const network& net);

/// One optimizer per unit, over that unit's parameters only.
std::vector<adam_state> make_local_adams(network& net, adam_settings settings = {});

struct local_step_report {
    std::vector<double> unit_loss; ///< reconstruction loss per unit
};

/// Updates every unit on its own input. The input of unit k+1 is the detached
/// output of unit k computed before that unit's update.
local_step_report local_train_step(network& net, const tensor& x, const fa_options& opts,
                                   std::vector<adam_state>& adams, rng& r_stream);

/// Throws spec_error when some activation lacks an exact inverse.
void require_invertible(const network& net);

/// Reconstructs inputs from top-level features by walking the network
/// backwards: exact inverses for activations, extraction from zeros for each
/// parametric layer.
tensor local_reconstruct(const network& net, const tensor& z, const feature_config& cfg);

} // namespace featalign
