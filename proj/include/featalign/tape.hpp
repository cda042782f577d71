#pragma once

// Reverse-mode automatic differentiation over an explicit recording tape.
//
// A tape is rebuilt for every forward pass. Nodes are appended in evaluation
// order, so the recording order is a topological order and backward simply
// walks the nodes in reverse. Nodes whose inputs do not require gradients are
// recorded without a backward rule.

#include "featalign/tensor.hpp"

#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <vector>

namespace featalign {

class tape;

/// Handle to a node on a tape.
struct var {
    tape* owner = nullptr;
    std::size_t id = std::numeric_limits<std::size_t>::max();

    bool valid() const noexcept { return owner != nullptr; }
    const tensor& value() const;
    const shape_t& shape() const { return value().shape(); }
    bool requires_grad() const;
};

class tape {
public:
    /// Backward rule: receives the gradient flowing into the node's output and
    /// accumulates into its inputs via `tape::accumulate`.
    using backward_fn = std::function<void(tape&, std::span<const double>)>;

    tape() = default;
    tape(const tape&) = delete;
    tape& operator=(const tape&) = delete;

    var constant(tensor value);
    /// Differentiable leaf. Its gradient accumulates across backward calls.
    var variable(tensor value);
    /// Differentiable leaf mirroring `bound`; backward accumulates into bound.grad().
    var parameter(tensor& bound);

    var record(tensor value, std::initializer_list<var> inputs, backward_fn fn);

    const tensor& value(var v) const;
    bool requires_grad(var v) const;

    /// Gradient buffer of `v` for the current backward pass, or an empty span
    /// when `v` does not require gradients.
    std::span<double> accumulate(var v);

    /// Accumulated gradient of a leaf (zeros before any backward).
    std::span<const double> grad(var v) const;

    /// Populates d(loss)/d(leaf) for every leaf. Rejects non-scalar losses.
    void backward(var loss);

    std::size_t size() const noexcept { return nodes_.size(); }

private:
    enum class node_kind { constant, variable, parameter, op };
    struct node {
        tensor value;
        node_kind kind = node_kind::constant;
        bool requires_grad = false;
        std::vector<double> pass_grad; // per backward pass
        std::vector<double> leaf_grad; // accumulated, variables only
        tensor* bound = nullptr;
        backward_fn backward;
    };

    var push(node n);
    node& at(var v);
    const node& at(var v) const;

    std::vector<node> nodes_;
};

} // namespace featalign
