#pragma once

// Dense row-major tensors of 64-bit floats with an optional gradient buffer.

#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace featalign {

using shape_t = std::vector<std::size_t>;

/// Raised when operand extents do not line up.
class shape_error : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a loop produces a non-finite value; carries the step index.
class numeric_error : public std::runtime_error {
public:
    numeric_error(const std::string& what, long step)
        : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step_(step)
    {
    }
    long step() const noexcept { return step_; }

private:
    long step_;
};

std::size_t shape_size(const shape_t& shape);
std::string shape_str(const shape_t& shape);

class tensor {
public:
    tensor() = default;
    explicit tensor(shape_t shape);
    tensor(shape_t shape, std::vector<double> values);

    static tensor scalar(double v) { return tensor({}, {v}); }
    static tensor full(shape_t shape, double v);

    const shape_t& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t extent(std::size_t axis) const;
    std::size_t size() const noexcept { return values_.size(); }

    std::span<double> values() noexcept { return values_; }
    std::span<const double> values() const noexcept { return values_; }
    const std::vector<double>& storage() const noexcept { return values_; }
    double& operator[](std::size_t i) { return values_[i]; }
    double operator[](std::size_t i) const { return values_[i]; }

    /// Value of a single-element tensor.
    double item() const;

    bool has_grad() const noexcept { return grad_.has_value(); }
    /// Allocates a zero gradient buffer on first use.
    std::span<double> grad();
    std::span<const double> grad() const;
    void zero_grad();
    void clear_grad() { grad_.reset(); }

    tensor reshaped(shape_t shape) const;
    bool all_finite() const noexcept;

    /// Bitwise equality of shape and values (gradients ignored).
    friend bool operator==(const tensor& a, const tensor& b);

private:
    shape_t shape_;
    std::vector<double> values_;
    std::optional<std::vector<double>> grad_;
};

} // namespace featalign
