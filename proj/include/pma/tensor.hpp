#pragma once

#include <array>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace pma {

/// Tensor extents, rank 1 to 4, stored inline.
class Shape {
public:
    static constexpr std::size_t kMaxRank = 4;

    Shape() = default;
    Shape(std::initializer_list<std::size_t> dims);
    explicit Shape(std::span<const std::size_t> dims);

    std::size_t rank() const { return rank_; }
    std::size_t operator[](std::size_t i) const { return dims_[i]; }
    std::size_t numel() const;
    std::string str() const;

    friend bool operator==(const Shape& a, const Shape& b);

private:
    std::array<std::size_t, kMaxRank> dims_{};
    std::size_t rank_ = 0;
};

/// Dense row-major array of doubles. Rank-2 tensors are the common case;
/// rank-1 tensors behave as a single row where an operation needs a matrix.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
        return Tensor(Shape{rows, cols}, fill);
    }
    static Tensor vector(std::size_t n, double fill = 0.0) { return Tensor(Shape{n}, fill); }
    static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
    static Tensor identity(std::size_t n);

    const Shape& shape() const { return shape_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    /// Leading extent for rank 2, 1 for rank 1.
    std::size_t rows() const;
    /// Trailing extent.
    std::size_t cols() const;

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

    void fill(double v);
    bool all_finite() const;
    Tensor reshaped(Shape shape) const;

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_;
    std::vector<double> data_;
};

/// Rows [r0, r0+n) of a matrix.
Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t n);
/// Columns [c0, c0+n) of a matrix.
Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t n);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor transpose(const Tensor& x);

/// Largest |a-b| over elements; shapes must agree.
double max_abs_diff(const Tensor& a, const Tensor& b);
double frobenius_norm(const Tensor& x);

}  // namespace pma
