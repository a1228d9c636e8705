#ifndef PR2R_TENSOR_HPP
#define PR2R_TENSOR_HPP

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

namespace pr2r {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);

// Dense row-major tensor of 64-bit reals. Images use N×C×H×W.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);  // zero-filled
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double v);
    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, double v);
    static Tensor of(Shape shape, std::initializer_list<double> v);

    const Shape& shape() const { return shape_; }
    std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
    std::int64_t extent(std::int64_t axis) const { return shape_[static_cast<std::size_t>(axis)]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    // row-major index
    double& at(std::initializer_list<std::int64_t> idx);
    double at(std::initializer_list<std::int64_t> idx) const;

    double item() const;  // scalar tensors only
    bool all_finite() const;
    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    static std::int64_t numel_of(const Shape& s);

private:
    Shape shape_;
    std::vector<double> data_;
};

[[noreturn]] void fail(const std::string& msg);          // std::runtime_error
[[noreturn]] void fail_arg(const std::string& msg);      // std::invalid_argument

}  // namespace pr2r

#endif
