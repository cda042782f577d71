#include "featalign/vfa.hpp"

#include <cmath>

namespace featalign {

nlohmann::json to_json(const vfa_spec& s)
{
    return {{"trunk", to_json(s.trunk)},
            {"latent", s.latent},
            {"classes", s.classes},
            {"reparam", s.reparam == reparam_kind::variance ? "variance" : "stddev"}};
}

vfa_spec vfa_spec_from_json(const nlohmann::json& j)
{
    vfa_spec s;
    try {
        s.trunk = network_spec_from_json(j.at("trunk"));
        s.latent = j.at("latent").get<std::size_t>();
        s.classes = j.value("classes", std::size_t{0});
        const std::string r = j.value("reparam", "variance");
        if (r == "variance")
            s.reparam = reparam_kind::variance;
        else if (r == "stddev")
            s.reparam = reparam_kind::stddev;
        else
            throw spec_error("unknown reparam '" + r + "'");
    }
    catch (const nlohmann::json::exception& e) {
        throw spec_error(std::string("malformed vfa spec: ") + e.what());
    }
    return s;
}

std::vector<tensor*> vfa_model::parameters()
{
    std::vector<tensor*> p = trunk.parameters();
    for (network* n : {&mu_head, &logvar_head}) {
        auto q = n->parameters();
        p.insert(p.end(), q.begin(), q.end());
    }
    if (class_head) {
        auto q = class_head->parameters();
        p.insert(p.end(), q.begin(), q.end());
    }
    return p;
}

std::vector<const tensor*> vfa_model::parameters() const
{
    std::vector<const tensor*> p;
    for (auto* q : const_cast<vfa_model*>(this)->parameters()) p.push_back(q);
    return p;
}

std::vector<tensor*> vfa_model::weights()
{
    std::vector<tensor*> p = trunk.weights();
    for (network* n : {&mu_head, &logvar_head}) {
        auto q = n->weights();
        p.insert(p.end(), q.begin(), q.end());
    }
    if (class_head) {
        auto q = class_head->weights();
        p.insert(p.end(), q.begin(), q.end());
    }
    return p;
}

void vfa_model::zero_grad()
{
    for (auto* p : parameters()) p->zero_grad();
}

bool vfa_model::all_finite() const
{
    for (const auto* p : parameters())
        if (!p->all_finite()) return false;
    return true;
}

vfa_model build_vfa(const vfa_spec& spec, std::uint64_t seed)
{
    if (spec.latent == 0) throw spec_error("vfa: latent size must be positive");
    vfa_model m;
    m.spec = spec;
    m.trunk = build_network(spec.trunk, rng::derive(seed, "trunk"));
    const std::size_t h = m.trunk.output_size();
    auto head = [&](const char* name, std::size_t out) {
        network_spec s{name, {h}, {layer_spec::linear(h, out)}};
        return build_network(s, rng::derive(seed, name));
    };
    m.mu_head = head("mu", spec.latent);
    m.logvar_head = head("logvar", spec.latent);
    if (spec.classes > 0) m.class_head = head("classes", spec.classes);
    return m;
}

bound_vfa::bound_vfa(vfa_model& model, tape& t, binding mode, bool with_classes)
    : model_(&model),
      with_classes_(with_classes && model.class_head),
      trunk_(model.trunk, t, mode),
      mu_(model.mu_head, t, mode),
      logvar_(model.logvar_head, t, mode)
{
    if (model.class_head) class_.emplace(*model.class_head, t, mode);
}

bound_vfa::bound_vfa(const vfa_model& model, tape& t, bool with_classes)
    : model_(&model),
      with_classes_(with_classes && model.class_head),
      trunk_(model.trunk, t),
      mu_(model.mu_head, t),
      logvar_(model.logvar_head, t)
{
    if (model.class_head) class_.emplace(*model.class_head, t);
}

std::size_t bound_vfa::output_size() const
{
    return model_->spec.latent + (with_classes_ ? model_->spec.classes : 0);
}

head_outputs bound_vfa::heads(var x) const
{
    head_outputs h;
    h.trunk_out = trunk_.forward(x).output;
    h.mu = mu_.forward(h.trunk_out).output;
    h.logvar = logvar_.forward(h.trunk_out).output;
    if (class_) h.logits = class_->forward(h.trunk_out).output;
    return h;
}

map_trace bound_vfa::forward(var x) const
{
    map_trace tr = trunk_.forward(x);
    const var h = tr.output;
    map_trace mu = mu_.forward(h);
    tr.saved.insert(tr.saved.end(), mu.saved.begin(), mu.saved.end());
    tr.output = mu.output;
    if (with_classes_) {
        map_trace c = class_->forward(h);
        tr.saved.insert(tr.saved.end(), c.saved.begin(), c.saved.end());
        tr.output = concat_cols(tr.output, c.output);
    }
    return tr;
}

var bound_vfa::input_vjp(const map_trace& trace, var g_out) const
{
    const std::size_t nt = model_->trunk.layers().size();
    const std::size_t latent = model_->spec.latent;
    auto part = [&](std::size_t begin, std::size_t count) {
        map_trace sub;
        sub.saved.assign(trace.saved.begin() + static_cast<long>(begin),
                         trace.saved.begin() + static_cast<long>(begin + count));
        return sub;
    };
    var g_mu = with_classes_ ? slice_cols(g_out, 0, latent) : g_out;
    var gh = mu_.input_vjp(part(nt, 1), g_mu);
    if (with_classes_) {
        var g_c = slice_cols(g_out, latent, latent + model_->spec.classes);
        gh = add(gh, class_->input_vjp(part(nt + 1, 1), g_c));
    }
    return trunk_.input_vjp(part(0, nt), gh);
}

map_binder frozen_vfa_binder(const vfa_model& model, bool with_classes)
{
    return [&model, with_classes](tape& t) -> std::unique_ptr<differentiable_map> {
        return std::make_unique<bound_vfa>(model, t, with_classes);
    };
}

latent_sample reparameterize(const tensor& mu, const tensor& sigma2, rng& gen, reparam_kind kind)
{
    if (mu.shape() != sigma2.shape())
        throw shape_error("reparameterize: mu " + shape_str(mu.shape()) + " vs sigma2 " + shape_str(sigma2.shape()));
    for (double s : sigma2.values())
        if (!(s > 0.0)) throw std::invalid_argument("reparameterize: sigma2 must be positive");
    latent_sample out{mu, sigma2, gen.normal_tensor(mu.shape()), tensor(mu.shape()), std::nullopt};
    for (std::size_t i = 0; i < mu.size(); ++i) {
        const double spread = kind == reparam_kind::variance ? sigma2[i] : std::sqrt(sigma2[i]);
        out.z[i] = mu[i] + out.eps[i] * spread;
    }
    return out;
}

var reparameterize(var mu, var sigma2, const tensor& eps, reparam_kind kind)
{
    tape& t = *mu.owner;
    var spread = kind == reparam_kind::variance ? sigma2 : sqrt(sigma2);
    return add(mu, mul(t.constant(eps), spread));
}

double kl_std_normal(const tensor& mu, const tensor& sigma2)
{
    if (mu.shape() != sigma2.shape()) throw shape_error("kl_std_normal: shape mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < mu.size(); ++i) {
        if (!(sigma2[i] > 0.0)) throw std::invalid_argument("kl_std_normal: sigma2 must be positive");
        s += mu[i] * mu[i] + sigma2[i] - std::log(sigma2[i]) - 1.0;
    }
    return 0.5 * s;
}

var weighted_kl(var mu, var logvar, std::span<const double> betas)
{
    if (mu.shape() != logvar.shape() || mu.shape().size() != 2)
        throw shape_error("weighted_kl: expected matching [N x d] operands");
    const std::size_t n = mu.shape()[0], d = mu.shape()[1];
    if (betas.size() != n) throw shape_error("weighted_kl: one beta per example required");
    const auto& m = mu.value();
    const auto& lv = logvar.value();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const std::size_t k = i * d + j;
            s += m[k] * m[k] + std::exp(lv[k]) - lv[k] - 1.0;
        }
        total += betas[i] * 0.5 * s;
    }
    std::vector<double> b(betas.begin(), betas.end());
    return mu.owner->record(tensor::scalar(total / static_cast<double>(n)), {mu, logvar},
                            [mu, logvar, b = std::move(b), n, d](tape& t, std::span<const double> g) {
                                const auto& m = t.value(mu);
                                const auto& lv = t.value(logvar);
                                auto gm = t.accumulate(mu);
                                auto gl = t.accumulate(logvar);
                                for (std::size_t i = 0; i < n; ++i) {
                                    const double c = g[0] * b[i] / static_cast<double>(n);
                                    for (std::size_t j = 0; j < d; ++j) {
                                        const std::size_t k = i * d + j;
                                        if (!gm.empty()) gm[k] += c * m[k];
                                        if (!gl.empty()) gl[k] += c * 0.5 * (std::exp(lv[k]) - 1.0);
                                    }
                                }
                            });
}

double sample_beta(rng& gen) { return gen.uniform(); }

vfa_streams::vfa_streams(std::uint64_t seed)
    : r_init(rng::derive(seed, "r_init")), eps(rng::derive(seed, "eps")), beta(rng::derive(seed, "beta"))
{
}

vfa_step_report vfa_train_step(vfa_model& model, const tensor& x, std::span<const int> labels,
                               const vfa_options& opts, adam_state& opt, vfa_streams& streams)
{
    opts.fa.feature.validate();
    if (x.rank() != 2 || x.extent(1) != model.input_size())
        throw shape_error("vfa_train_step: batch " + shape_str(x.shape()) + " does not match input extent "
                          + std::to_string(model.input_size()));
    if (!labels.empty() && !model.class_head) throw std::invalid_argument("vfa_train_step: labels need a class head");
    const std::size_t n = x.extent(0);
    const bool with_classes = model.class_head.has_value();
    auto params = model.parameters();
    for (auto* p : params) p->zero_grad();

    tape t;
    bound_vfa enc(model, t, binding::trainable, with_classes);
    var xv = t.constant(x);
    head_outputs h = enc.heads(xv);
    var sigma2 = exp(h.logvar);
    const tensor eps = streams.eps.normal_tensor({n, model.latent_size()});
    var target = reparameterize(h.mu, sigma2, eps, model.spec.reparam);
    if (with_classes) target = concat_cols(target, h.logits);
    if (!opts.fa.target_gradient) target = t.constant(target.value());

    vfa_step_report rep;
    rep.betas.resize(n);
    for (auto& b : rep.betas) b = opts.beta == beta_mode::uniform ? sample_beta(streams.beta) : opts.beta_value;
    for (double b : rep.betas) rep.beta_mean += b / static_cast<double>(n);

    var r_hat = extract_for_update(enc, frozen_vfa_binder(model, with_classes), target,
                                   initial_features(n, model.input_size(), opts.fa.feature, streams.r_init), opts.fa,
                                   &rep.aux_trace);
    var recon = mse(xv, r_hat, opts.fa.recon_reduction);
    rep.recon_loss = recon.value().item();
    rep.r_hat = r_hat.value();
    rep.mu = h.mu.value();
    rep.kl = kl_std_normal(h.mu.value(), sigma2.value()) / static_cast<double>(n);

    var loss = scale(recon, opts.recon_weight);
    if (opts.include_kl) loss = add(loss, weighted_kl(h.mu, h.logvar, rep.betas));
    if (!labels.empty()) {
        var ce = cross_entropy(h.logits, labels);
        rep.class_loss = ce.value().item();
        loss = add(loss, scale(ce, opts.class_weight));
    }
    if (!std::isfinite(loss.value().item())) throw numeric_error("vfa_train_step: non-finite loss", 0);
    t.backward(loss);
    for (auto* p : params) p->grad();
    adam_step(params, opt);
    if (opts.fa.clamp) {
        auto w = model.weights();
        clamp_weights(w);
    }
    return rep;
}

encoded encode(const vfa_model& model, const tensor& x)
{
    tape t;
    bound_vfa enc(model, t, false);
    head_outputs h = enc.heads(t.constant(x));
    encoded e;
    e.mu = h.mu.value();
    e.sigma2 = exp(h.logvar).value();
    if (h.logits.valid()) e.logits = h.logits.value();
    return e;
}

tensor features_from_latent(const vfa_model& model, const tensor& z, const feature_config& cfg, rng& gen)
{
    const std::size_t latent = model.latent_size();
    const bool with_classes = z.rank() == 2 && model.class_head && z.extent(1) == latent + model.spec.classes;
    if (z.rank() != 2 || (z.extent(1) != latent && !with_classes))
        throw shape_error("features_from_latent: latent " + shape_str(z.shape()) + " does not match the model");
    tensor r0 = initial_features(z.extent(0), model.input_size(), cfg, gen);
    return extract_frozen(frozen_vfa_binder(model, with_classes), z, std::move(r0), cfg).r_hat;
}

tensor generate(const vfa_model& model, std::size_t n, std::uint64_t seed, const generate_options& opts,
                const network* generator)
{
    if (!model.all_finite()) throw std::invalid_argument("generate: model parameters are not finite");
    if (generator && !generator->all_finite()) throw std::invalid_argument("generate: generator parameters are not finite");
    const std::size_t out_size = generator ? generator->output_size() : model.input_size();
    if (n == 0) return tensor({0, out_size});
    rng zs(rng::derive(seed, "generate"));
    tensor z = zs.normal_tensor({n, model.latent_size()});
    if (opts.label) {
        if (!model.class_head) throw std::invalid_argument("generate: conditional sampling needs a class head");
        const std::size_t k = model.spec.classes;
        if (*opts.label < 0 || static_cast<std::size_t>(*opts.label) >= k)
            throw std::invalid_argument("generate: class label out of range");
        const std::size_t d = model.latent_size();
        tensor zc({n, d + k});
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < d; ++j) zc[i * (d + k) + j] = z[i * d + j];
            zc[i * (d + k) + d + static_cast<std::size_t>(*opts.label)] = opts.class_scale;
        }
        z = std::move(zc);
    }
    rng rs(rng::derive(seed, "generate_r"));
    tensor images = features_from_latent(model, z, opts.feature, rs);
    return generator ? forward(*generator, images) : images;
}

std::vector<tensor> interpolate(const tensor& z_a, const tensor& z_b, std::size_t steps)
{
    if (steps < 2) throw std::invalid_argument("interpolate: steps must be >= 2");
    if (z_a.shape() != z_b.shape()) throw shape_error("interpolate: latent extents differ");
    std::vector<tensor> out;
    for (std::size_t s = 0; s < steps; ++s) {
        const double w = static_cast<double>(s) / static_cast<double>(steps - 1);
        tensor z(z_a.shape());
        for (std::size_t i = 0; i < z.size(); ++i) z[i] = (1.0 - w) * z_a[i] + w * z_b[i];
        out.push_back(std::move(z));
    }
    return out;
}

std::vector<tensor> interpolate_grid(const tensor& top_left, const tensor& top_right, const tensor& bottom_left,
                                     const tensor& bottom_right, std::size_t rows, std::size_t cols)
{
    auto left = interpolate(top_left, bottom_left, rows);
    auto right = interpolate(top_right, bottom_right, rows);
    std::vector<tensor> out;
    for (std::size_t r = 0; r < rows; ++r) {
        auto row = interpolate(left[r], right[r], cols);
        out.insert(out.end(), row.begin(), row.end());
    }
    return out;
}

} // namespace featalign
