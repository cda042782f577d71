#pragma once

// Generator and discriminator coupled to the extracted features, trained with
// least-squares adversarial losses (real target +1, fake target -1) and a
// perceptual term measured on the encoder's mean and variance heads.

#include "featalign/vfa.hpp"

namespace featalign {

struct gan_bundle {
    network generator;     ///< refiner: data extent -> data extent
    network discriminator; ///< data extent -> one value
    double lambda = 0.01;  ///< perceptual weight
};

/// Checks the extent contract between encoder, generator and discriminator.
void validate_bundle(const gan_bundle& b, std::size_t data_size);

struct generator_loss_parts {
    double adversarial = 0.0;
    double perceptual = 0.0; ///< unweighted
    double total = 0.0;
};

/// ||1 - D(G(r_hat))||^2 + lambda (||mu(x) - mu(G(r_hat))||^2 + ||s2(x) - s2(G(r_hat))||^2),
/// batch-averaged. The perceptual term is skipped entirely when lambda == 0.
var loss_generator(const differentiable_map& d, const differentiable_map& g, const bound_vfa* encoder, var r_hat,
                   var x, double lambda, generator_loss_parts* parts = nullptr);
generator_loss_parts loss_generator(const network& d, const network& g, const vfa_model& encoder,
                                    const tensor& r_hat, const tensor& x, double lambda);

/// ||1 - D(x)||^2 + ||-1 - D(G(r_hat))||^2, batch-averaged.
var loss_discriminator(const differentiable_map& d, const differentiable_map& g, var x, var r_hat);
double loss_discriminator(const network& d, const network& g, const tensor& x, const tensor& r_hat);

struct gan_optimizers {
    adam_state encoder, generator, discriminator;
};

struct gan_options {
    vfa_options encoder;
    bool verify_isolation = false;
};

struct gan_step_report {
    vfa_step_report encoder;
    double encoder_loss = 0.0;
    generator_loss_parts generator;
    double discriminator_loss = 0.0;
    double d_real_mean = 0.0; ///< D(x) after the update
    double d_fake_mean = 0.0; ///< D(G(r_hat)) after the update
    bool isolation_ok = true; ///< only meaningful with verify_isolation
};

/// Encoder step, then discriminator (generator frozen), then generator
/// (discriminator and encoder frozen). r_hat is detached before entering G.
gan_step_report gan_train_step(vfa_model& encoder, gan_bundle& bundle, const tensor& x, std::span<const int> labels,
                               const gan_options& opts, gan_optimizers& opt, vfa_streams& streams);

struct discriminator_scores {
    double real_mean = 0.0;
    double fake_mean = 0.0;
    double gap() const { return real_mean - fake_mean; }
};

/// Mean D(x) against mean D(G(r_hat)) where r_hat is extracted from a
/// reparameterized sample of the encoder posterior, as during training.
discriminator_scores score_discriminator(const vfa_model& encoder, const gan_bundle& bundle, const tensor& x,
                                         const feature_config& cfg, std::uint64_t seed);

struct latent_search_result {
    tensor z;
    double loss = 0.0;
};

/// Gradient descent on z for argmin ||x - G(z)||^2, starting at zero.
latent_search_result latent_search(const network& g, const tensor& x, int steps, double lr);

} // namespace featalign
