#include "featalign/model.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <cmath>

namespace featalign {

std::string_view to_string(layer_kind k)
{
    switch (k) {
    case layer_kind::linear: return "linear";
    case layer_kind::conv2d: return "conv2d";
    case layer_kind::leaky_relu: return "leaky_relu";
    case layer_kind::arsinh: return "arsinh";
    }
    return "?";
}

layer_kind parse_layer_kind(std::string_view s)
{
    for (auto k : {layer_kind::linear, layer_kind::conv2d, layer_kind::leaky_relu, layer_kind::arsinh})
        if (to_string(k) == s) return k;
    throw spec_error("unknown layer kind '" + std::string(s) + "'");
}

bool is_parametric(layer_kind k) { return k == layer_kind::linear || k == layer_kind::conv2d; }

// The leaky rectifier is bijective, but inverting it multiplies
// negative targets by 1/slope; only arsinh is accepted.
bool has_exact_inverse(layer_kind k) { return k == layer_kind::arsinh; }

layer_spec layer_spec::linear(std::size_t in, std::size_t out, bool bias)
{
    layer_spec s;
    s.kind = layer_kind::linear;
    s.in = in;
    s.out = out;
    s.bias = bias;
    return s;
}

layer_spec layer_spec::conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t stride,
                              std::size_t padding, bool bias)
{
    layer_spec s;
    s.kind = layer_kind::conv2d;
    s.in = in_ch;
    s.out = out_ch;
    s.kernel = kernel;
    s.stride = stride;
    s.padding = padding;
    s.bias = bias;
    return s;
}

layer_spec layer_spec::leaky_relu(double slope)
{
    layer_spec s;
    s.kind = layer_kind::leaky_relu;
    s.slope = slope;
    s.bias = false;
    return s;
}

layer_spec layer_spec::arsinh()
{
    layer_spec s;
    s.kind = layer_kind::arsinh;
    s.bias = false;
    return s;
}

nlohmann::json to_json(const network_spec& s)
{
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : s.layers) {
        nlohmann::json j{{"kind", to_string(l.kind)}};
        switch (l.kind) {
        case layer_kind::linear:
            j["in"] = l.in;
            j["out"] = l.out;
            j["bias"] = l.bias;
            break;
        case layer_kind::conv2d:
            j["in"] = l.in;
            j["out"] = l.out;
            j["kernel"] = l.kernel;
            j["stride"] = l.stride;
            j["padding"] = l.padding;
            j["bias"] = l.bias;
            break;
        case layer_kind::leaky_relu: j["slope"] = l.slope; break;
        case layer_kind::arsinh: break;
        }
        layers.push_back(std::move(j));
    }
    nlohmann::json j{{"name", s.name}, {"input_shape", s.input_shape}, {"layers", layers},
                     {"init", s.init == init_kind::orthogonal ? "orthogonal" : "gaussian"}};
    if (s.init == init_kind::gaussian) j["init_std"] = s.init_std;
    return j;
}

network_spec network_spec_from_json(const nlohmann::json& j)
{
    try {
        network_spec s;
        s.name = j.value("name", "net");
        s.input_shape = j.at("input_shape").get<shape_t>();
        const std::string init = j.value("init", "orthogonal");
        if (init == "orthogonal")
            s.init = init_kind::orthogonal;
        else if (init == "gaussian") {
            s.init = init_kind::gaussian;
            s.init_std = j.at("init_std").get<double>();
        }
        else
            throw spec_error("unknown init '" + init + "'");
        for (const auto& lj : j.at("layers")) {
            layer_spec l;
            l.kind = parse_layer_kind(lj.at("kind").get<std::string>());
            switch (l.kind) {
            case layer_kind::linear:
                l = layer_spec::linear(lj.at("in"), lj.at("out"), lj.value("bias", true));
                break;
            case layer_kind::conv2d:
                l = layer_spec::conv2d(lj.at("in"), lj.at("out"), lj.value("kernel", 3), lj.value("stride", 1),
                                       lj.value("padding", 0), lj.value("bias", true));
                break;
            case layer_kind::leaky_relu: l = layer_spec::leaky_relu(lj.value("slope", 0.01)); break;
            case layer_kind::arsinh: l = layer_spec::arsinh(); break;
            }
            s.layers.push_back(l);
        }
        return s;
    }
    catch (const nlohmann::json::exception& e) {
        throw spec_error(std::string("malformed network spec: ") + e.what());
    }
}

std::vector<std::pair<shape_t, shape_t>> chain_shapes(const network_spec& spec)
{
    if (spec.input_shape.empty() || shape_size(spec.input_shape) == 0)
        throw spec_error("network '" + spec.name + "': empty input shape");
    std::vector<std::pair<shape_t, shape_t>> out;
    shape_t cur = spec.input_shape;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const auto& l = spec.layers[i];
        const std::string where = "network '" + spec.name + "' layer " + std::to_string(i) + " ("
                                + std::string(to_string(l.kind)) + "): ";
        shape_t next;
        switch (l.kind) {
        case layer_kind::linear:
            if (shape_size(cur) != l.in)
                throw spec_error(where + "expects " + std::to_string(l.in) + " inputs, chain provides "
                                 + shape_str(cur));
            if (l.out == 0) throw spec_error(where + "zero outputs");
            next = {l.out};
            break;
        case layer_kind::conv2d:
            if (cur.size() != 3 || cur[0] != l.in)
                throw spec_error(where + "expects [" + std::to_string(l.in) + " x H x W], chain provides "
                                 + shape_str(cur));
            if (l.out == 0 || l.kernel == 0 || l.stride == 0) throw spec_error(where + "zero extent");
            try {
                next = {l.out, conv_out_extent(cur[1], l.kernel, {l.stride, l.padding}),
                        conv_out_extent(cur[2], l.kernel, {l.stride, l.padding})};
            }
            catch (const shape_error& e) {
                throw spec_error(where + e.what());
            }
            break;
        case layer_kind::leaky_relu:
            if (!(l.slope > 0.0 && l.slope < 1.0)) throw spec_error(where + "slope must lie in (0, 1)");
            next = cur;
            break;
        case layer_kind::arsinh: next = cur; break;
        }
        out.emplace_back(cur, next);
        cur = next;
    }
    return out;
}

network::network(network_spec spec, std::vector<layer> layers) : spec_(std::move(spec)), layers_(std::move(layers)) {}

std::size_t network::output_size() const
{
    return layers_.empty() ? input_size() : shape_size(layers_.back().out_shape);
}

std::vector<tensor*> network::parameters()
{
    std::vector<tensor*> p;
    for (auto& l : layers_) {
        if (l.weight.size()) p.push_back(&l.weight);
        if (l.bias.size()) p.push_back(&l.bias);
    }
    return p;
}

std::vector<const tensor*> network::parameters() const
{
    std::vector<const tensor*> p;
    for (const auto& l : layers_) {
        if (l.weight.size()) p.push_back(&l.weight);
        if (l.bias.size()) p.push_back(&l.bias);
    }
    return p;
}

std::vector<tensor*> network::weights()
{
    std::vector<tensor*> p;
    for (auto& l : layers_)
        if (l.weight.size()) p.push_back(&l.weight);
    return p;
}

void network::zero_grad()
{
    for (auto* p : parameters()) p->zero_grad();
}

bool network::all_finite() const
{
    for (const auto* p : parameters())
        if (!p->all_finite()) return false;
    return true;
}

tensor orthogonal_matrix(std::size_t rows, std::size_t cols, rng& gen)
{
    const std::size_t big = std::max(rows, cols), small = std::min(rows, cols);
    Eigen::MatrixXd g(big, small);
    // Fill row-major so the draw order does not depend on Eigen's storage order.
    for (std::size_t i = 0; i < big; ++i)
        for (std::size_t j = 0; j < small; ++j) g(i, j) = gen.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(big, small);
    const Eigen::MatrixXd r = qr.matrixQR().topLeftCorner(small, small);
    for (std::size_t j = 0; j < small; ++j)
        if (r(j, j) < 0.0) q.col(j) *= -1.0;
    tensor w({rows, cols});
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) w[i * cols + j] = rows >= cols ? q(i, j) : q(j, i);
    return w;
}

network build_network(const network_spec& spec, std::uint64_t seed)
{
    const auto shapes = chain_shapes(spec);
    rng gen(rng::derive(seed, "init"));
    std::vector<layer> layers;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        layer l{spec.layers[i], shapes[i].first, shapes[i].second, {}, {}};
        if (is_parametric(l.spec.kind)) {
            const std::size_t rows = l.spec.out;
            const std::size_t cols = l.spec.kind == layer_kind::linear ? l.spec.in
                                                                       : l.spec.in * l.spec.kernel * l.spec.kernel;
            tensor w = spec.init == init_kind::orthogonal ? orthogonal_matrix(rows, cols, gen)
                                                          : gen.normal_tensor({rows, cols}, spec.init_std);
            if (l.spec.kind == layer_kind::conv2d) w = w.reshaped({l.spec.out, l.spec.in, l.spec.kernel, l.spec.kernel});
            l.weight = std::move(w);
            if (l.spec.bias) l.bias = tensor({l.spec.out});
        }
        layers.push_back(std::move(l));
    }
    return network(spec, std::move(layers));
}

bound_network::bound_network(network& net, tape& t, binding mode, std::size_t first, std::size_t last)
    : net_(&net), first_(first), last_(std::min(last, net.layers().size()))
{
    bind(&net, t, mode);
}

bound_network::bound_network(const network& net, tape& t, std::size_t first, std::size_t last)
    : net_(&net), first_(first), last_(std::min(last, net.layers().size()))
{
    bind(nullptr, t, binding::constant);
}

void bound_network::bind(network* mutable_net, tape& t, binding mode)
{
    if (first_ > last_) throw std::invalid_argument("bound_network: empty layer range");
    for (std::size_t i = first_; i < last_; ++i) {
        const auto& l = net_->layers()[i];
        var w, b;
        if (mode == binding::trainable) {
            auto& ml = mutable_net->layers()[i];
            if (ml.weight.size()) w = t.parameter(ml.weight);
            if (ml.bias.size()) b = t.parameter(ml.bias);
        }
        else {
            if (l.weight.size()) w = t.constant(l.weight);
            if (l.bias.size()) b = t.constant(l.bias);
        }
        weights_.push_back(w);
        biases_.push_back(b);
    }
}

std::size_t bound_network::input_size() const
{
    return first_ < last_ ? shape_size(net_->layers()[first_].in_shape) : net_->input_size();
}

std::size_t bound_network::output_size() const
{
    return first_ < last_ ? shape_size(net_->layers()[last_ - 1].out_shape) : input_size();
}

map_trace bound_network::forward(var x) const
{
    const auto& layers = net_->layers();
    const std::size_t n = x.shape().empty() ? 0 : x.shape()[0];
    if (x.shape().size() < 2 || shape_size(x.shape()) != n * input_size())
        throw shape_error("forward: input " + shape_str(x.shape()) + " does not match per-example extent "
                          + std::to_string(input_size()));
    map_trace tr;
    shape_t s{n};
    if (first_ < last_) {
        const auto& in = layers[first_].in_shape;
        s.insert(s.end(), in.begin(), in.end());
    }
    var h = x.shape() == s ? x : reshape(x, s);
    for (std::size_t i = first_; i < last_; ++i) {
        const auto& l = layers[i];
        tr.saved.push_back(h);
        const var w = weights_[i - first_], b = biases_[i - first_];
        switch (l.spec.kind) {
        case layer_kind::linear: {
            var flat = h.shape().size() == 2 ? h : reshape(h, {n, l.spec.in});
            h = matmul(flat, transpose(w));
            if (b.valid()) h = add_bias(h, b);
            break;
        }
        case layer_kind::conv2d:
            h = conv2d(h, w, {l.spec.stride, l.spec.padding});
            if (b.valid()) h = add_bias(h, b);
            break;
        case layer_kind::leaky_relu: h = leaky_relu(h, l.spec.slope); break;
        case layer_kind::arsinh: h = arsinh(h); break;
        }
    }
    tr.output = h.shape().size() == 2 ? h : reshape(h, {n, output_size()});
    return tr;
}

var bound_network::input_vjp(const map_trace& trace, var g_out) const
{
    const auto& layers = net_->layers();
    const std::size_t n = g_out.shape()[0];
    if (trace.saved.size() != last_ - first_) throw std::invalid_argument("input_vjp: trace from another map");
    var g = g_out;
    for (std::size_t i = last_; i-- > first_;) {
        const auto& l = layers[i];
        const var h = trace.saved[i - first_];
        const var w = weights_[i - first_];
        shape_t out_full{n};
        out_full.insert(out_full.end(), l.out_shape.begin(), l.out_shape.end());
        if (g.shape() != out_full) g = reshape(g, out_full);
        switch (l.spec.kind) {
        case layer_kind::linear:
            g = matmul(g, w);
            if (h.shape() != g.shape()) g = reshape(g, h.shape());
            break;
        case layer_kind::conv2d: g = conv2d_input_vjp(g, w, h.shape(), {l.spec.stride, l.spec.padding}); break;
        case layer_kind::leaky_relu: g = leaky_relu_vjp(g, h, l.spec.slope); break;
        case layer_kind::arsinh: g = arsinh_vjp(g, h); break;
        }
    }
    return g.shape().size() == 2 ? g : reshape(g, {n, input_size()});
}

tensor forward(const network& net, const tensor& x)
{
    tape t;
    bound_network b(net, t);
    return b.forward(t.constant(x)).output.value();
}

void clamp_weights(std::span<tensor* const> weights)
{
    for (auto* w : weights)
        for (auto& v : w->values()) {
            if (v < -weight_bound)
                v = -weight_bound;
            else if (v > weight_bound)
                v = weight_bound;
        }
}

void clamp_weights(network& net)
{
    auto w = net.weights();
    clamp_weights(w);
}

adam_state make_adam(std::span<tensor* const> params, adam_settings settings)
{
    adam_state s;
    s.settings = settings;
    for (auto* p : params) {
        s.m.emplace_back(p->shape());
        s.v.emplace_back(p->shape());
    }
    return s;
}

void adam_step(std::span<tensor* const> params, adam_state& state)
{
    if (params.size() != state.m.size()) throw std::invalid_argument("adam_step: parameter count changed");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i]->has_grad())
            throw std::invalid_argument("adam_step: parameter " + std::to_string(i) + " has no gradient");
        if (params[i]->shape() != state.m[i].shape())
            throw shape_error("adam_step: moment shape " + shape_str(state.m[i].shape()) + " vs parameter "
                              + shape_str(params[i]->shape()));
    }
    const auto& c = state.settings;
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(c.beta1, t);
    const double bc2 = 1.0 - std::pow(c.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto vals = params[i]->values();
        auto g = std::as_const(*params[i]).grad();
        auto m = state.m[i].values();
        auto v = state.v[i].values();
        for (std::size_t k = 0; k < vals.size(); ++k) {
            m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
            v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
            const double mh = m[k] / bc1;
            const double vh = v[k] / bc2;
            vals[k] -= c.lr * mh / (std::sqrt(vh) + c.eps);
        }
    }
}

} // namespace featalign
