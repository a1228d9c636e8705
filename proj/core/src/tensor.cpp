#include "pr2r/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace pr2r {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << "]";
    return os.str();
}

void fail(const std::string& msg) { throw std::runtime_error(msg); }
void fail_arg(const std::string& msg) { throw std::invalid_argument(msg); }

std::int64_t Tensor::numel_of(const Shape& s) {
    std::int64_t n = 1;
    for (auto e : s) {
        if (e <= 0) fail_arg("tensor extent must be positive, got shape " + shape_str(s));
        n *= e;
    }
    return n;
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<std::size_t>(numel_of(shape_)), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (numel_of(shape_) != static_cast<std::int64_t>(data_.size()))
        fail_arg("tensor data length " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

Tensor Tensor::full(Shape shape, double v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
}

Tensor Tensor::of(Shape shape, std::initializer_list<double> v) {
    return Tensor(std::move(shape), std::vector<double>(v));
}

namespace {
std::int64_t flat_index(const Shape& shape, std::initializer_list<std::int64_t> idx, std::int64_t rank) {
    if (static_cast<std::int64_t>(idx.size()) != rank)
        fail_arg("index rank " + std::to_string(idx.size()) + " does not match tensor rank " +
                 std::to_string(rank));
    std::int64_t flat = 0;
    std::size_t axis = 0;
    for (auto i : idx) {
        flat = flat * shape[axis] + i;
        ++axis;
    }
    return flat;
}
}  // namespace

double& Tensor::at(std::initializer_list<std::int64_t> idx) {
    return data_[static_cast<std::size_t>(flat_index(shape_, idx, rank()))];
}

double Tensor::at(std::initializer_list<std::int64_t> idx) const {
    return data_[static_cast<std::size_t>(flat_index(shape_, idx, rank()))];
}

double Tensor::item() const {
    if (numel() != 1) fail("item() on non-scalar tensor of shape " + shape_str(shape_));
    return data_[0];
}

bool Tensor::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace pr2r
