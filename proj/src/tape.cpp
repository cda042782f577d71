#include "featalign/tape.hpp"

#include <algorithm>

namespace featalign {

const tensor& var::value() const { return owner->value(*this); }
bool var::requires_grad() const { return owner->requires_grad(*this); }

var tape::push(node n)
{
    nodes_.push_back(std::move(n));
    return var{this, nodes_.size() - 1};
}

tape::node& tape::at(var v)
{
    if (v.owner != this || v.id >= nodes_.size()) throw std::invalid_argument("tape: foreign or invalid var");
    return nodes_[v.id];
}

const tape::node& tape::at(var v) const
{
    if (v.owner != this || v.id >= nodes_.size()) throw std::invalid_argument("tape: foreign or invalid var");
    return nodes_[v.id];
}

var tape::constant(tensor value)
{
    node n;
    n.value = std::move(value);
    return push(std::move(n));
}

var tape::variable(tensor value)
{
    node n;
    n.value = std::move(value);
    n.kind = node_kind::variable;
    n.requires_grad = true;
    n.leaf_grad.assign(n.value.size(), 0.0);
    return push(std::move(n));
}

var tape::parameter(tensor& bound)
{
    node n;
    n.value = tensor(bound.shape(), std::vector<double>(bound.values().begin(), bound.values().end()));
    n.kind = node_kind::parameter;
    n.requires_grad = true;
    n.bound = &bound;
    return push(std::move(n));
}

var tape::record(tensor value, std::initializer_list<var> inputs, backward_fn fn)
{
    node n;
    n.value = std::move(value);
    n.kind = node_kind::op;
    for (var in : inputs) {
        if (in.owner != this) throw std::invalid_argument("tape: input recorded on a different tape");
        n.requires_grad = n.requires_grad || at(in).requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(fn);
    return push(std::move(n));
}

const tensor& tape::value(var v) const { return at(v).value; }
bool tape::requires_grad(var v) const { return at(v).requires_grad; }

std::span<double> tape::accumulate(var v)
{
    node& n = at(v);
    if (!n.requires_grad) return {};
    if (n.pass_grad.empty()) n.pass_grad.assign(n.value.size(), 0.0);
    return n.pass_grad;
}

std::span<const double> tape::grad(var v) const
{
    const node& n = at(v);
    if (n.kind == node_kind::parameter) return n.bound->grad();
    return n.leaf_grad;
}

void tape::backward(var loss)
{
    node& root = at(loss);
    if (root.value.size() != 1)
        throw shape_error("backward: loss must be scalar, got " + shape_str(root.value.shape()));
    for (auto& n : nodes_) n.pass_grad.clear();
    if (!root.requires_grad) return;
    root.pass_grad.assign(1, 1.0);

    for (std::size_t i = loss.id + 1; i-- > 0;) {
        node& n = nodes_[i];
        if (n.pass_grad.empty()) continue;
        switch (n.kind) {
        case node_kind::op:
            if (n.backward) {
                // The rule may touch other nodes' buffers; keep our gradient alive by moving it out.
                std::vector<double> g = std::move(n.pass_grad);
                n.backward(*this, g);
                n.pass_grad = std::move(g);
            }
            break;
        case node_kind::variable:
            for (std::size_t k = 0; k < n.pass_grad.size(); ++k) n.leaf_grad[k] += n.pass_grad[k];
            break;
        case node_kind::parameter: {
            auto dst = n.bound->grad();
            for (std::size_t k = 0; k < n.pass_grad.size(); ++k) dst[k] += n.pass_grad[k];
            break;
        }
        case node_kind::constant: break;
        }
    }
}

} // namespace featalign
