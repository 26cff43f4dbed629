#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rfga/errors.hpp"

namespace rfga {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& shape);
std::vector<int64_t> row_major_strides(const Shape& shape);
std::string shape_str(const Shape& shape);
bool same_shape(const Shape& a, const Shape& b);

// Dense row-major double tensor, the universal value type. Shapes follow the
// deep-learning layout conventions used throughout: [C,H,W] per sample,
// [N,C,H,W] batched.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(Shape shape);  // zero-filled
    Tensor(Shape shape, std::vector<double> values);

    static Tensor full(Shape shape, double v);
    static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
    int64_t dim(int64_t i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }
    const Shape& shape() const { return shape_; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // strided element access, rank checked once per call
    template <class... I>
    double& operator()(I... idx) {
        return data_[static_cast<size_t>(offset_of(idx...))];
    }
    template <class... I>
    double operator()(I... idx) const {
        return data_[static_cast<size_t>(offset_of(idx...))];
    }

    Tensor reshaped(Shape new_shape) const;

    void fill(double v);
    double min() const;
    double max() const;
    double sum() const;
    double mean() const;

  private:
    template <class... I>
    int64_t offset_of(I... idx) const {
        constexpr int64_t n = sizeof...(I);
        if (n != rank()) throw ShapeError("tensor index rank mismatch");
        const int64_t ids[] = {static_cast<int64_t>(idx)...};
        int64_t off = 0;
        for (int64_t d = 0; d < n; ++d) off = off * shape_[static_cast<size_t>(d)] + ids[d];
        return off;
    }

    Shape shape_;
    std::vector<double> data_;
};

// elementwise |a-b| max; shapes must match
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace rfga
