#pragma once

// Feature extraction by gradient descent on the input, and encoder training
// that makes the extracted features reproduce the inputs.
//
// The auxiliary loss minimized over r is 0.5 * ||E(r) - z||^2 summed over the
// batch, so every example's r follows its own recurrence
//     r <- r - tau * J^T (E(r) - z)
// independent of batch size. With a scalar linear map w and tau = 1 this is
// r <- r (1 - w^2) + w a, which converges to a / w whenever w^2 < 2.

#include "featalign/model.hpp"

#include <functional>
#include <memory>
#include <vector>

namespace featalign {

enum class r_init_kind { zeros, gaussian };

struct feature_config {
    double tau = 1.0;
    int steps = 1;
    r_init_kind r_init = r_init_kind::gaussian;
    double r_init_std = 0.01;

    void validate() const;
};

struct feature_result {
    tensor r_hat;
    /// Auxiliary loss after each of the `steps` updates.
    std::vector<double> aux_loss_trace;
};

/// Binds a map's parameters as constants onto a fresh tape.
using map_binder = std::function<std::unique_ptr<differentiable_map>(tape&)>;

map_binder frozen_binder(const network& net, std::size_t first = 0, std::size_t last = bound_network::all_layers);

/// Starting point for r: zeros or seeded N(0, std^2), shape [n x dim].
tensor initial_features(std::size_t n, std::size_t dim, const feature_config& cfg, rng& gen);

/// Extraction recorded on the tape that owns `z_target` and `r0`. The result
/// is differentiable with respect to every trainable quantity the map uses.
var extract_taped(const differentiable_map& map, var z_target, var r0, const feature_config& cfg,
                  std::vector<double>* trace = nullptr);

/// Extraction with frozen parameters; only r moves. Each step runs on a
/// fresh tape so memory does not grow with the step count.
feature_result extract_frozen(const map_binder& bind, const tensor& z_target, tensor r0, const feature_config& cfg);

feature_result extract_feature(const network& net, const tensor& z_target, const feature_config& cfg, rng& gen);

/// How the reconstruction loss reaches the encoder parameters.
enum class gradient_path {
    unrolled,  ///< differentiate through every extraction step
    truncated, ///< first steps frozen, only the final step differentiated
};

struct fa_options {
    feature_config feature;
    gradient_path path = gradient_path::unrolled;
    /// When false z_x = E(x) is a constant target; when true C also
    /// differentiates through z_x.
    bool target_gradient = false;
    reduction recon_reduction = reduction::mean_batch;
    bool clamp = true;
};

struct fa_step_report {
    double recon_loss = 0.0;
    std::vector<double> aux_trace;
    tensor target; ///< z_x = E(x) before the update
};

/// Training-time extraction: differentiable per `opts.path`. `frozen` must
/// bind the same map with constant parameters.
var extract_for_update(const differentiable_map& map, const map_binder& frozen, var z_target, tensor r0,
                       const fa_options& opts, std::vector<double>* trace);

/// One feature-alignment update of layers [first, last) on inputs `x`.
fa_step_report align_layers(network& net, std::size_t first, std::size_t last, const tensor& x,
                            const fa_options& opts, adam_state& opt, rng& r_stream);

/// Encoder update: z_x = E(x), extract r_hat, C = ||x - r_hat||^2, Adam, clamp.
fa_step_report fa_train_step(network& net, const tensor& x, const fa_options& opts, adam_state& opt, rng& r_stream);

/// Closed form of the scalar recurrence after p steps:
/// r0 (1 - w^2)^p + sum_{q<p} (1 - w^2)^q w a.
double closed_form_feature(double w, double a_hat, double r0, int p);

/// Runs the scalar recurrence on a one-weight linear network.
double iterate_scalar_feature(double w, double a_hat, double r0, int p);

enum class stability { converged, diverged, oscillating, near_singular, unconverged };

struct stability_row {
    double w = 0.0;
    stability status = stability::unconverged;
    double limit_abs_error = 0.0; ///< |r_p - a/w| at the last step
    int steps = 0;                ///< first step within tolerance, else p_max
    bool converged() const { return status == stability::converged; }
};

std::vector<stability_row> stability_scan(std::span<const double> w_grid, int p_max, double a_hat = 1.0,
                                          double r0 = 0.0, double tol = 1e-9);
/// CSV with header `w,converged,limit_abs_error,steps`.
std::string stability_csv(std::span<const stability_row> rows);

} // namespace featalign
