#pragma once

// Variational feature alignment: a Gaussian latent head on top of the
// encoder trunk, KL regularization with per-example random weights, and
// sampling by feature extraction from random latents.

#include "featalign/feature_alignment.hpp"

#include <optional>

namespace featalign {

/// How the noise enters the latent: z = mu + eps * sigma^2 (variance, the
/// default) or the conventional z = mu + eps * sigma (stddev).
enum class reparam_kind { variance, stddev };

struct vfa_spec {
    network_spec trunk;
    std::size_t latent = 0;
    std::size_t classes = 0; ///< 0 disables the class head
    reparam_kind reparam = reparam_kind::variance;
};

nlohmann::json to_json(const vfa_spec& s);
vfa_spec vfa_spec_from_json(const nlohmann::json& j);

/// Trunk plus parallel mean, log-variance and (optional) class heads.
struct vfa_model {
    vfa_spec spec;
    network trunk;
    network mu_head;
    network logvar_head;
    std::optional<network> class_head;

    std::size_t input_size() const { return trunk.input_size(); }
    std::size_t latent_size() const { return spec.latent; }
    std::vector<tensor*> parameters();
    std::vector<const tensor*> parameters() const;
    std::vector<tensor*> weights();
    void zero_grad();
    bool all_finite() const;
};

/// Heads are single linear layers; the log-variance head parameterizes sigma^2 = exp(.).
vfa_model build_vfa(const vfa_spec& spec, std::uint64_t seed);

struct head_outputs {
    var trunk_out;
    var mu;
    var logvar;
    var logits; ///< invalid without a class head
};

/// The extraction map E(r) = mu(trunk(r)), optionally concatenated with the
/// class logits. There is no noise on this side.
class bound_vfa : public differentiable_map {
public:
    bound_vfa(vfa_model& model, tape& t, binding mode, bool with_classes);
    bound_vfa(const vfa_model& model, tape& t, bool with_classes);

    head_outputs heads(var x) const;

    map_trace forward(var x) const override;
    var input_vjp(const map_trace& trace, var g_out) const override;
    std::size_t input_size() const override { return trunk_.input_size(); }
    std::size_t output_size() const override;

private:
    const vfa_model* model_;
    bool with_classes_;
    bound_network trunk_, mu_, logvar_;
    std::optional<bound_network> class_;
};

map_binder frozen_vfa_binder(const vfa_model& model, bool with_classes);

struct latent_sample {
    tensor mu;
    tensor sigma2;
    tensor eps;
    tensor z;
    std::optional<tensor> class_logits;
};

/// z = mu + eps * sigma2 with eps ~ N(0, I) drawn from `gen`.
latent_sample reparameterize(const tensor& mu, const tensor& sigma2, rng& gen,
                             reparam_kind kind = reparam_kind::variance);
/// Taped form with a fixed noise draw; differentiable in mu and sigma2.
var reparameterize(var mu, var sigma2, const tensor& eps, reparam_kind kind = reparam_kind::variance);

/// 0.5 * sum(mu^2 + sigma2 - ln sigma2 - 1): KL(N(mu, sigma2) || N(0, I)).
double kl_std_normal(const tensor& mu, const tensor& sigma2);
/// (1/N) sum_n beta_n * KL_n over a batch, from the log-variance; taped.
var weighted_kl(var mu, var logvar, std::span<const double> betas);

/// One U(0, 1) draw.
double sample_beta(rng& gen);

enum class beta_mode { uniform, fixed };

struct vfa_options {
    fa_options fa;
    beta_mode beta = beta_mode::uniform;
    double beta_value = 1.0; ///< fixed mode only
    bool include_kl = true;
    double recon_weight = 1.0;
    double class_weight = 1.0;
};

/// Per-purpose random streams; each is seeded independently from the run seed.
struct vfa_streams {
    rng r_init;
    rng eps;
    rng beta;
    explicit vfa_streams(std::uint64_t seed);
};

struct vfa_step_report {
    double recon_loss = 0.0;
    double kl = 0.0;          ///< unweighted KL, mean over the batch
    double beta_mean = 0.0;
    double class_loss = 0.0;
    std::vector<double> betas;
    std::vector<double> aux_trace;
    tensor r_hat;             ///< extracted features (detached)
    tensor mu;
};

/// Minimizes ||x - r_hat||^2 + beta * KL (+ cross-entropy with labels).
vfa_step_report vfa_train_step(vfa_model& model, const tensor& x, std::span<const int> labels,
                               const vfa_options& opts, adam_state& opt, vfa_streams& streams);

/// Encoder heads evaluated without a tape.
struct encoded {
    tensor mu;
    tensor sigma2;
    tensor logits;
};
encoded encode(const vfa_model& model, const tensor& x);

struct generate_options {
    feature_config feature; ///< inference extraction settings
    std::optional<int> label;
    double class_scale = 1.0;
};

/// Samples z ~ N(0, I), appends class_scale * one_hot(label) when requested,
/// and extracts the matching features; optionally refined by `generator`.
tensor generate(const vfa_model& model, std::size_t n, std::uint64_t seed, const generate_options& opts,
                const network* generator = nullptr);

/// Feature extraction from given latents (and optional class block).
tensor features_from_latent(const vfa_model& model, const tensor& z, const feature_config& cfg, rng& gen);

/// Linear interpolation with inclusive endpoints; steps >= 2.
std::vector<tensor> interpolate(const tensor& z_a, const tensor& z_b, std::size_t steps);
/// rows x cols bilinear grid spanned by four corner latents, row-major.
std::vector<tensor> interpolate_grid(const tensor& top_left, const tensor& top_right, const tensor& bottom_left,
                                     const tensor& bottom_right, std::size_t rows, std::size_t cols);

} // namespace featalign
