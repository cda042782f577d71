#include "featalign/feature_alignment.hpp"

#include <cmath>
#include <sstream>

namespace featalign {

void feature_config::validate() const
{
    if (steps < 1) throw std::invalid_argument("feature config: steps must be >= 1");
    if (!(tau > 0.0)) throw std::invalid_argument("feature config: tau must be > 0");
    if (r_init == r_init_kind::gaussian && !(r_init_std >= 0.0))
        throw std::invalid_argument("feature config: r_init_std must be >= 0");
}

map_binder frozen_binder(const network& net, std::size_t first, std::size_t last)
{
    return [&net, first, last](tape& t) -> std::unique_ptr<differentiable_map> {
        return std::make_unique<bound_network>(net, t, first, last);
    };
}

tensor initial_features(std::size_t n, std::size_t dim, const feature_config& cfg, rng& gen)
{
    if (cfg.r_init == r_init_kind::zeros) return tensor({n, dim});
    return gen.normal_tensor({n, dim}, cfg.r_init_std);
}

namespace {

double half_squared_norm(const tensor& d)
{
    double s = 0.0;
    for (double v : d.values()) s += v * v;
    return 0.5 * s;
}

void check_target(std::size_t map_out, const tensor& z)
{
    if (z.rank() != 2 || z.extent(1) != map_out)
        throw shape_error("extract_feature: target " + shape_str(z.shape()) + " does not match output extent "
                          + std::to_string(map_out));
}

void record_loss(std::vector<double>* trace, double loss, long step)
{
    if (!std::isfinite(loss)) throw numeric_error("extract_feature: non-finite auxiliary loss", step);
    if (trace) trace->push_back(loss);
}

} // namespace

var extract_taped(const differentiable_map& map, var z_target, var r0, const feature_config& cfg,
                  std::vector<double>* trace)
{
    cfg.validate();
    check_target(map.output_size(), z_target.value());
    if (r0.shape() != shape_t{z_target.shape()[0], map.input_size()})
        throw shape_error("extract_feature: r0 " + shape_str(r0.shape()) + " does not match input extent");
    var r = r0;
    for (int t = 0; t < cfg.steps; ++t) {
        map_trace tr = map.forward(r);
        var diff = sub(tr.output, z_target);
        const double loss = half_squared_norm(diff.value());
        if (t > 0)
            record_loss(trace, loss, t);
        else if (!std::isfinite(loss))
            throw numeric_error("extract_feature: non-finite auxiliary loss", 0);
        var g = map.input_vjp(tr, diff);
        r = sub(r, scale(g, cfg.tau));
    }
    const double last = half_squared_norm(sub(map.forward(r).output, z_target).value());
    record_loss(trace, last, cfg.steps);
    return r;
}

feature_result extract_frozen(const map_binder& bind, const tensor& z_target, tensor r0, const feature_config& cfg)
{
    cfg.validate();
    feature_result res;
    res.r_hat = std::move(r0);
    for (int t = 0; t <= cfg.steps; ++t) {
        tape tp;
        auto map = bind(tp);
        if (t == 0) {
            check_target(map->output_size(), z_target);
            if (res.r_hat.shape() != shape_t{z_target.extent(0), map->input_size()})
                throw shape_error("extract_feature: r0 " + shape_str(res.r_hat.shape()) + " does not match input extent");
        }
        var r = tp.constant(res.r_hat);
        map_trace tr = map->forward(r);
        var diff = sub(tr.output, tp.constant(z_target));
        const double loss = half_squared_norm(diff.value());
        if (t > 0)
            record_loss(&res.aux_loss_trace, loss, t);
        else if (!std::isfinite(loss))
            throw numeric_error("extract_feature: non-finite auxiliary loss", 0);
        if (t == cfg.steps) break;
        const tensor& g = map->input_vjp(tr, diff).value();
        auto rv = res.r_hat.values();
        for (std::size_t i = 0; i < rv.size(); ++i) rv[i] -= cfg.tau * g[i];
    }
    return res;
}

feature_result extract_feature(const network& net, const tensor& z_target, const feature_config& cfg, rng& gen)
{
    cfg.validate();
    check_target(net.output_size(), z_target);
    return extract_frozen(frozen_binder(net), z_target, initial_features(z_target.extent(0), net.input_size(), cfg, gen),
                          cfg);
}

var extract_for_update(const differentiable_map& map, const map_binder& frozen, var z_target, tensor r0,
                       const fa_options& opts, std::vector<double>* trace)
{
    tape& t = *z_target.owner;
    if (opts.path == gradient_path::unrolled || opts.feature.steps == 1)
        return extract_taped(map, z_target, t.constant(std::move(r0)), opts.feature, trace);
    feature_config head = opts.feature;
    head.steps = opts.feature.steps - 1;
    feature_result fr = extract_frozen(frozen, z_target.value(), std::move(r0), head);
    if (trace) *trace = std::move(fr.aux_loss_trace);
    feature_config tail = opts.feature;
    tail.steps = 1;
    return extract_taped(map, z_target, t.constant(std::move(fr.r_hat)), tail, trace);
}

fa_step_report align_layers(network& net, std::size_t first, std::size_t last, const tensor& x,
                            const fa_options& opts, adam_state& opt, rng& r_stream)
{
    opts.feature.validate();
    last = std::min(last, net.layers().size());
    std::vector<tensor*> params;
    for (std::size_t i = first; i < last; ++i) {
        auto& l = net.layers()[i];
        if (l.weight.size()) params.push_back(&l.weight);
        if (l.bias.size()) params.push_back(&l.bias);
    }
    for (auto* p : params) p->zero_grad();

    tape t;
    bound_network enc(net, t, binding::trainable, first, last);
    if (x.rank() != 2 || x.extent(1) != enc.input_size())
        throw shape_error("fa_train_step: batch " + shape_str(x.shape()) + " does not match input extent "
                          + std::to_string(enc.input_size()));
    const std::size_t n = x.extent(0);
    var xv = t.constant(x);
    var zx = enc.forward(xv).output;
    if (!opts.target_gradient) zx = t.constant(zx.value());

    fa_step_report rep;
    rep.target = zx.value();
    var r_hat = extract_for_update(enc, frozen_binder(net, first, last), zx,
                                   initial_features(n, enc.input_size(), opts.feature, r_stream), opts, &rep.aux_trace);
    var c = mse(xv, r_hat, opts.recon_reduction);
    rep.recon_loss = c.value().item();
    if (!std::isfinite(rep.recon_loss)) throw numeric_error("fa_train_step: non-finite reconstruction loss", 0);
    t.backward(c);
    for (auto* p : params) p->grad(); // parameters the loss never reached still get a zero buffer
    adam_step(params, opt);
    if (opts.clamp) {
        std::vector<tensor*> w;
        for (std::size_t i = first; i < last; ++i)
            if (net.layers()[i].weight.size()) w.push_back(&net.layers()[i].weight);
        clamp_weights(w);
    }
    return rep;
}

fa_step_report fa_train_step(network& net, const tensor& x, const fa_options& opts, adam_state& opt, rng& r_stream)
{
    return align_layers(net, 0, net.layers().size(), x, opts, opt, r_stream);
}

double closed_form_feature(double w, double a_hat, double r0, int p)
{
    if (p < 1) throw std::invalid_argument("closed_form_feature: p must be >= 1");
    const double k = 1.0 - w * w;
    double geometric = 0.0;
    for (int q = 0; q < p; ++q) geometric += std::pow(k, q);
    return r0 * std::pow(k, p) + geometric * w * a_hat;
}

double iterate_scalar_feature(double w, double a_hat, double r0, int p)
{
    network_spec spec{"scalar", {1}, {layer_spec::linear(1, 1, false)}};
    network net = build_network(spec, 0);
    net.layers()[0].weight[0] = w;
    feature_config cfg;
    cfg.tau = 1.0;
    cfg.steps = p;
    return extract_frozen(frozen_binder(net), tensor({1, 1}, {a_hat}), tensor({1, 1}, {r0}), cfg).r_hat[0];
}

std::vector<stability_row> stability_scan(std::span<const double> w_grid, int p_max, double a_hat, double r0,
                                          double tol)
{
    if (p_max < 1) throw std::invalid_argument("stability_scan: p_max must be >= 1");
    std::vector<stability_row> rows;
    for (double w : w_grid) {
        if (!std::isfinite(w)) throw std::invalid_argument("stability_scan: non-finite grid value");
        stability_row row;
        row.w = w;
        row.steps = p_max;
        if (std::abs(w) < 1e-6) {
            row.status = stability::near_singular;
            row.limit_abs_error = std::numeric_limits<double>::infinity();
            rows.push_back(row);
            continue;
        }
        const double limit = a_hat / w;
        const double scale = std::max(1.0, std::abs(limit));
        double r = r0;
        double prev_err = std::abs(r0 - limit);
        bool found = false;
        int sign_flips = 0, growth = 0;
        network_spec spec{"scalar", {1}, {layer_spec::linear(1, 1, false)}};
        network net = build_network(spec, 0);
        net.layers()[0].weight[0] = w;
        feature_config cfg;
        cfg.tau = 1.0;
        cfg.steps = 1;
        for (int p = 1; p <= p_max; ++p) {
            const double next = extract_frozen(frozen_binder(net), tensor({1, 1}, {a_hat}), tensor({1, 1}, {r}), cfg).r_hat[0];
            if (!std::isfinite(next)) {
                r = next;
                break;
            }
            const double err = std::abs(next - limit);
            if ((next - limit) * (r - limit) < 0.0) ++sign_flips;
            if (err > prev_err) ++growth;
            r = next;
            prev_err = err;
            if (!found && err < tol * scale) {
                found = true;
                row.steps = p;
            }
        }
        row.limit_abs_error = std::isfinite(r) ? std::abs(r - limit) : std::numeric_limits<double>::infinity();
        if (row.limit_abs_error < tol * scale)
            row.status = stability::converged;
        else if (!std::isfinite(r) || row.limit_abs_error > 1e6 * (scale + std::abs(r0)) || growth * 2 > p_max)
            row.status = stability::diverged;
        else if (sign_flips * 2 > p_max)
            row.status = stability::oscillating;
        else
            row.status = stability::unconverged;
        rows.push_back(row);
    }
    return rows;
}

std::string stability_csv(std::span<const stability_row> rows)
{
    std::ostringstream os;
    os.precision(17);
    os << "w,converged,limit_abs_error,steps\n";
    for (const auto& r : rows) os << r.w << ',' << (r.converged() ? "true" : "false") << ',' << r.limit_abs_error << ',' << r.steps << '\n';
    return os.str();
}

} // namespace featalign
