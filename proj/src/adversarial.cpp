#include "featalign/adversarial.hpp"

#include "featalign/ops.hpp"
#include "featalign/rng.hpp"

#include <cmath>

namespace featalign {

void validate_bundle(const gan_bundle& b, std::size_t data_size)
{
    if (b.generator.input_size() != data_size || b.generator.output_size() != data_size)
        throw spec_error("gan: generator must map the data extent " + std::to_string(data_size) + " onto itself");
    if (b.discriminator.input_size() != data_size || b.discriminator.output_size() != 1)
        throw spec_error("gan: discriminator must map the data extent to a single value");
    if (!(b.lambda >= 0.0)) throw spec_error("gan: lambda must be >= 0");
}

var loss_generator(const differentiable_map& d, const differentiable_map& g, const bound_vfa* encoder, var r_hat,
                   var x, double lambda, generator_loss_parts* parts)
{
    if (r_hat.shape() != x.shape())
        throw shape_error("loss_generator: r_hat " + shape_str(r_hat.shape()) + " vs x " + shape_str(x.shape()));
    tape& t = *x.owner;
    var fake = g.forward(r_hat).output;
    var score = d.forward(fake).output;
    var adv = mse(t.constant(tensor::full(score.shape(), 1.0)), score, reduction::mean_batch);
    var total = adv;
    double perceptual = 0.0;
    if (lambda != 0.0) {
        if (!encoder) throw std::invalid_argument("loss_generator: perceptual term needs the encoder");
        head_outputs hx = encoder->heads(x);
        head_outputs hf = encoder->heads(fake);
        var mu_x = t.constant(hx.mu.value());
        var s2_x = t.constant(exp(hx.logvar).value());
        var perc = add(mse(mu_x, hf.mu, reduction::mean_batch), mse(s2_x, exp(hf.logvar), reduction::mean_batch));
        perceptual = perc.value().item();
        total = add(adv, scale(perc, lambda));
    }
    if (parts) *parts = {adv.value().item(), perceptual, total.value().item()};
    return total;
}

generator_loss_parts loss_generator(const network& d, const network& g, const vfa_model& encoder,
                                    const tensor& r_hat, const tensor& x, double lambda)
{
    tape t;
    bound_network bd(d, t), bg(g, t);
    bound_vfa be(encoder, t, false);
    generator_loss_parts parts;
    loss_generator(bd, bg, &be, t.constant(r_hat), t.constant(x), lambda, &parts);
    return parts;
}

var loss_discriminator(const differentiable_map& d, const differentiable_map& g, var x, var r_hat)
{
    if (r_hat.shape() != x.shape())
        throw shape_error("loss_discriminator: r_hat " + shape_str(r_hat.shape()) + " vs x " + shape_str(x.shape()));
    tape& t = *x.owner;
    var real = d.forward(x).output;
    var fake = d.forward(g.forward(r_hat).output).output;
    return add(mse(t.constant(tensor::full(real.shape(), 1.0)), real, reduction::mean_batch),
               mse(t.constant(tensor::full(fake.shape(), -1.0)), fake, reduction::mean_batch));
}

double loss_discriminator(const network& d, const network& g, const tensor& x, const tensor& r_hat)
{
    tape t;
    bound_network bd(d, t), bg(g, t);
    return loss_discriminator(bd, bg, t.constant(x), t.constant(r_hat)).value().item();
}

namespace {

std::vector<tensor> snapshot(std::vector<const tensor*> params)
{
    std::vector<tensor> s;
    for (const auto* p : params) s.emplace_back(p->shape(), std::vector<double>(p->values().begin(), p->values().end()));
    return s;
}

bool unchanged(const std::vector<tensor>& before, std::vector<const tensor*> now)
{
    if (before.size() != now.size()) return false;
    for (std::size_t i = 0; i < now.size(); ++i)
        if (!(before[i] == tensor(now[i]->shape(), std::vector<double>(now[i]->values().begin(), now[i]->values().end()))))
            return false;
    return true;
}

double mean_of(const tensor& t)
{
    double s = 0.0;
    for (double v : t.values()) s += v;
    return t.size() ? s / static_cast<double>(t.size()) : 0.0;
}

void update(network& net, adam_state& opt, bool clamp)
{
    auto params = net.parameters();
    for (auto* p : params) p->grad();
    adam_step(params, opt);
    if (clamp) clamp_weights(net);
}

} // namespace

gan_step_report gan_train_step(vfa_model& encoder, gan_bundle& bundle, const tensor& x, std::span<const int> labels,
                               const gan_options& opts, gan_optimizers& opt, vfa_streams& streams)
{
    validate_bundle(bundle, encoder.input_size());
    const bool check = opts.verify_isolation;
    const std::vector<const tensor*> enc_p = std::as_const(encoder).parameters();
    const auto g_p = std::as_const(bundle.generator).parameters();
    const auto d_p = std::as_const(bundle.discriminator).parameters();

    gan_step_report rep;
    std::vector<tensor> g0, d0, e0;
    if (check) {
        g0 = snapshot(g_p);
        d0 = snapshot(d_p);
    }
    rep.encoder = vfa_train_step(encoder, x, labels, opts.encoder, opt.encoder, streams);
    rep.encoder_loss = rep.encoder.recon_loss + rep.encoder.kl * rep.encoder.beta_mean;
    if (check) rep.isolation_ok = rep.isolation_ok && unchanged(g0, g_p) && unchanged(d0, d_p);
    const tensor r_hat = rep.encoder.r_hat; // detached

    if (check) {
        e0 = snapshot(enc_p);
        g0 = snapshot(g_p);
    }
    {
        bundle.discriminator.zero_grad();
        tape t;
        bound_network d(bundle.discriminator, t, binding::trainable);
        bound_network g(std::as_const(bundle.generator), t);
        var loss = loss_discriminator(d, g, t.constant(x), t.constant(r_hat));
        rep.discriminator_loss = loss.value().item();
        if (!std::isfinite(rep.discriminator_loss)) throw numeric_error("gan_train_step: non-finite discriminator loss", 0);
        t.backward(loss);
        update(bundle.discriminator, opt.discriminator, opts.encoder.fa.clamp);
    }
    if (check) rep.isolation_ok = rep.isolation_ok && unchanged(e0, enc_p) && unchanged(g0, g_p);

    if (check) {
        e0 = snapshot(enc_p);
        d0 = snapshot(d_p);
    }
    {
        bundle.generator.zero_grad();
        tape t;
        bound_network d(std::as_const(bundle.discriminator), t);
        bound_network g(bundle.generator, t, binding::trainable);
        bound_vfa e(std::as_const(encoder), t, false);
        var loss = loss_generator(d, g, &e, t.constant(r_hat), t.constant(x), bundle.lambda, &rep.generator);
        if (!std::isfinite(rep.generator.total)) throw numeric_error("gan_train_step: non-finite generator loss", 0);
        t.backward(loss);
        update(bundle.generator, opt.generator, opts.encoder.fa.clamp);
    }
    if (check) rep.isolation_ok = rep.isolation_ok && unchanged(e0, enc_p) && unchanged(d0, d_p);

    rep.d_real_mean = mean_of(forward(bundle.discriminator, x));
    rep.d_fake_mean = mean_of(forward(bundle.discriminator, forward(bundle.generator, r_hat)));
    return rep;
}

discriminator_scores score_discriminator(const vfa_model& encoder, const gan_bundle& bundle, const tensor& x,
                                         const feature_config& cfg, std::uint64_t seed)
{
    validate_bundle(bundle, encoder.input_size());
    rng eps(rng::derive(seed, "eps")), r_init(rng::derive(seed, "r_init"));
    const encoded enc = encode(encoder, x);
    tensor z = reparameterize(enc.mu, enc.sigma2, eps, encoder.spec.reparam).z;
    if (encoder.class_head) {
        tape t;
        z = concat_cols(t.constant(z), t.constant(enc.logits)).value();
    }
    const tensor r_hat = features_from_latent(encoder, z, cfg, r_init);
    return {mean_of(forward(bundle.discriminator, x)),
            mean_of(forward(bundle.discriminator, forward(bundle.generator, r_hat)))};
}

latent_search_result latent_search(const network& g, const tensor& x, int steps, double lr)
{
    if (steps < 1) throw std::invalid_argument("latent_search: steps must be >= 1");
    if (!(lr > 0.0)) throw std::invalid_argument("latent_search: lr must be > 0");
    if (x.rank() != 2 || x.extent(1) != g.output_size())
        throw shape_error("latent_search: target " + shape_str(x.shape()) + " does not match generator output");
    tensor z({x.extent(0), g.input_size()});
    latent_search_result best{z, std::numeric_limits<double>::infinity()};
    for (int s = 0; s <= steps; ++s) {
        tape t;
        bound_network bg(g, t);
        var zv = t.variable(z);
        var loss = mse(t.constant(x), bg.forward(zv).output, reduction::sum);
        const double l = loss.value().item();
        if (!std::isfinite(l)) throw numeric_error("latent_search: non-finite loss", s);
        if (l < best.loss) best = {z, l};
        if (s == steps) break;
        t.backward(loss);
        auto grad = t.grad(zv);
        for (std::size_t i = 0; i < z.size(); ++i) z[i] -= lr * grad[i];
    }
    return best;
}

} // namespace featalign
