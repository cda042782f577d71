#include "featalign/local_fa.hpp"

#include "featalign/ops.hpp"

#include <cmath>

namespace featalign {

std::vector<local_unit> local_units(const network& net)
{
    std::vector<local_unit> units;
    const auto& layers = net.layers();
    std::size_t start = 0;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (!is_parametric(layers[i].spec.kind)) continue;
        if (!units.empty()) {
            units.back().last = i;
            start = i;
        }
        units.push_back({start, layers.size()});
    }
    if (units.empty()) throw spec_error("local_fa: network has no parametric layer");
    return units;
}

std::vector<adam_state> make_local_adams(network& net, adam_settings settings)
{
    std::vector<adam_state> adams;
    for (const auto& u : local_units(net)) {
        std::vector<tensor*> params;
        for (std::size_t i = u.first; i < u.last; ++i) {
            auto& l = net.layers()[i];
            if (l.weight.size()) params.push_back(&l.weight);
            if (l.bias.size()) params.push_back(&l.bias);
        }
        adams.push_back(make_adam(params, settings));
    }
    return adams;
}

local_step_report local_train_step(network& net, const tensor& x, const fa_options& opts,
                                   std::vector<adam_state>& adams, rng& r_stream)
{
    const auto units = local_units(net);
    if (adams.size() != units.size())
        throw std::invalid_argument("local_train_step: expected " + std::to_string(units.size()) + " optimizers");
    local_step_report rep;
    tensor input = x;
    for (std::size_t k = 0; k < units.size(); ++k) {
        fa_step_report r = align_layers(net, units[k].first, units[k].last, input, opts, adams[k], r_stream);
        rep.unit_loss.push_back(r.recon_loss);
        input = std::move(r.target);
    }
    return rep;
}

void require_invertible(const network& net)
{
    for (std::size_t i = 0; i < net.layers().size(); ++i) {
        const auto k = net.layers()[i].spec.kind;
        if (!is_parametric(k) && !has_exact_inverse(k))
            throw spec_error("local_reconstruct: layer " + std::to_string(i) + " (" + std::string(to_string(k))
                             + ") has no exact inverse");
    }
}

tensor local_reconstruct(const network& net, const tensor& z, const feature_config& cfg)
{
    require_invertible(net);
    cfg.validate();
    if (z.rank() != 2 || z.extent(1) != net.output_size())
        throw shape_error("local_reconstruct: features " + shape_str(z.shape()) + " do not match output extent "
                          + std::to_string(net.output_size()));
    feature_config c = cfg;
    c.r_init = r_init_kind::zeros;
    const std::size_t n = z.extent(0);
    tensor cur = z;
    const auto& layers = net.layers();
    for (std::size_t i = layers.size(); i-- > 0;) {
        const auto& l = layers[i];
        if (l.spec.kind == layer_kind::arsinh) {
            for (double& v : cur.values()) v = std::sinh(v);
            continue;
        }
        const std::size_t in = shape_size(l.in_shape);
        cur = extract_frozen(frozen_binder(net, i, i + 1), cur, tensor({n, in}), c).r_hat;
    }
    return cur;
}

} // namespace featalign
