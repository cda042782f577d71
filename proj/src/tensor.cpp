#include "featalign/tensor.hpp"

#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>
#include <sstream>

namespace featalign {

std::size_t shape_size(const shape_t& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

std::string shape_str(const shape_t& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

tensor::tensor(shape_t shape) : shape_(std::move(shape)), values_(shape_size(shape_), 0.0) {}

tensor::tensor(shape_t shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values))
{
    if (shape_size(shape_) != values_.size())
        throw shape_error("tensor: shape " + shape_str(shape_) + " holds " + std::to_string(shape_size(shape_))
                          + " values, got " + std::to_string(values_.size()));
}

tensor tensor::full(shape_t shape, double v)
{
    tensor t(std::move(shape));
    std::fill(t.values_.begin(), t.values_.end(), v);
    return t;
}

std::size_t tensor::extent(std::size_t axis) const
{
    if (axis >= shape_.size())
        throw shape_error("tensor: axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
    return shape_[axis];
}

double tensor::item() const
{
    if (values_.size() != 1) throw shape_error("tensor::item on " + shape_str(shape_));
    return values_[0];
}

std::span<double> tensor::grad()
{
    if (!grad_) grad_.emplace(values_.size(), 0.0);
    return *grad_;
}

std::span<const double> tensor::grad() const
{
    if (!grad_) return {};
    return *grad_;
}

void tensor::zero_grad()
{
    if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
}

tensor tensor::reshaped(shape_t shape) const
{
    if (shape_size(shape) != values_.size())
        throw shape_error("reshape " + shape_str(shape_) + " -> " + shape_str(shape));
    return tensor(std::move(shape), values_);
}

bool tensor::all_finite() const noexcept
{
    for (double v : values_)
        if (!std::isfinite(v)) return false;
    return true;
}

bool operator==(const tensor& a, const tensor& b)
{
    return a.shape_ == b.shape_ && a.values_.size() == b.values_.size()
        && (a.values_.empty()
            || std::memcmp(a.values_.data(), b.values_.data(), a.values_.size() * sizeof(double)) == 0);
}

} // namespace featalign
