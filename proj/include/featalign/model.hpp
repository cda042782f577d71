#pragma once

// Network construction, orthogonal initialization, the weight clamp and Adam.

#include "featalign/map.hpp"
#include "featalign/ops.hpp"
#include "featalign/rng.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace featalign {

enum class layer_kind { linear, conv2d, leaky_relu, arsinh };

std::string_view to_string(layer_kind k);
layer_kind parse_layer_kind(std::string_view s);
bool is_parametric(layer_kind k);
/// Activations with an exact, well-conditioned inverse usable by layer-wise reconstruction.
bool has_exact_inverse(layer_kind k);

struct layer_spec {
    layer_kind kind = layer_kind::linear;
    std::size_t in = 0;  ///< features (linear) or channels (conv2d)
    std::size_t out = 0;
    std::size_t kernel = 3;
    std::size_t stride = 1;
    std::size_t padding = 0;
    bool bias = true;
    double slope = 0.01; ///< leaky_relu only

    static layer_spec linear(std::size_t in, std::size_t out, bool bias = true);
    static layer_spec conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t stride,
                             std::size_t padding, bool bias = true);
    static layer_spec leaky_relu(double slope = 0.01);
    static layer_spec arsinh();

    friend bool operator==(const layer_spec&, const layer_spec&) = default;
};

enum class init_kind { orthogonal, gaussian };

struct network_spec {
    std::string name = "net";
    shape_t input_shape; ///< per-example extent, e.g. {784} or {1, 28, 28}
    std::vector<layer_spec> layers;
    init_kind init = init_kind::orthogonal;
    double init_std = 1.0; ///< gaussian init only

    friend bool operator==(const network_spec&, const network_spec&) = default;
};

/// Raised for specs whose layers do not chain.
class spec_error : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

nlohmann::json to_json(const network_spec& s);
network_spec network_spec_from_json(const nlohmann::json& j);

struct layer {
    layer_spec spec;
    shape_t in_shape;  ///< per example
    shape_t out_shape; ///< per example
    tensor weight;     ///< [out x in] or [F x C x k x k]; empty for activations
    tensor bias;       ///< [out]; empty when absent
};

class network {
public:
    network() = default;
    network(network_spec spec, std::vector<layer> layers);

    const network_spec& spec() const noexcept { return spec_; }
    const std::vector<layer>& layers() const noexcept { return layers_; }
    std::vector<layer>& layers() noexcept { return layers_; }

    std::size_t input_size() const { return shape_size(spec_.input_shape); }
    std::size_t output_size() const;

    /// Weights and biases in layer order (weight before bias).
    std::vector<tensor*> parameters();
    std::vector<const tensor*> parameters() const;
    std::vector<tensor*> weights();
    void zero_grad();
    bool all_finite() const;

private:
    network_spec spec_;
    std::vector<layer> layers_;
};

/// Per-layer (input, output) per-example shapes; throws spec_error when the chain breaks.
std::vector<std::pair<shape_t, shape_t>> chain_shapes(const network_spec& spec);

/// Builds a network with seeded initialization and zero biases.
network build_network(const network_spec& spec, std::uint64_t seed);

/// Orthogonal (rows x cols) matrix from the QR factorization of a seeded
/// Gaussian matrix; orthonormal columns when rows >= cols, rows otherwise.
tensor orthogonal_matrix(std::size_t rows, std::size_t cols, rng& gen);

enum class binding { constant, trainable };

/// Network parameters (optionally a layer range [first, last)) placed on a
/// tape, either trainable or as constants.
class bound_network : public differentiable_map {
public:
    static constexpr std::size_t all_layers = static_cast<std::size_t>(-1);

    bound_network(network& net, tape& t, binding mode, std::size_t first = 0, std::size_t last = all_layers);
    bound_network(const network& net, tape& t, std::size_t first = 0, std::size_t last = all_layers);

    map_trace forward(var x) const override;
    var input_vjp(const map_trace& trace, var g_out) const override;
    std::size_t input_size() const override;
    std::size_t output_size() const override;

private:
    void bind(network* mutable_net, tape& t, binding mode);

    const network* net_;
    std::size_t first_, last_;
    std::vector<var> weights_, biases_;
};

/// Untaped forward pass; returns [N x output_size].
tensor forward(const network& net, const tensor& x);

inline constexpr double weight_bound = std::numbers::sqrt2;

/// Clamps every weight (not bias) to [-sqrt(2), sqrt(2)].
void clamp_weights(network& net);
void clamp_weights(std::span<tensor* const> weights);

struct adam_settings {
    double lr = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct adam_state {
    adam_settings settings;
    std::uint64_t step = 0;
    std::vector<tensor> m, v;
};

adam_state make_adam(std::span<tensor* const> params, adam_settings settings = {});
/// Bias-corrected Adam update. Every parameter must carry a gradient buffer.
void adam_step(std::span<tensor* const> params, adam_state& state);

} // namespace featalign
