#include "pma/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "pma/errors.hpp"

namespace pma {

Shape::Shape(std::initializer_list<std::size_t> dims) : Shape(std::span<const std::size_t>(dims.begin(), dims.size())) {}

Shape::Shape(std::span<const std::size_t> dims) {
    if (dims.empty() || dims.size() > kMaxRank) {
        throw DimensionError("tensor rank must be in [1, 4], got " + std::to_string(dims.size()));
    }
    rank_ = dims.size();
    std::copy(dims.begin(), dims.end(), dims_.begin());
}

std::size_t Shape::numel() const {
    if (rank_ == 0) return 0;
    std::size_t n = 1;
    for (std::size_t i = 0; i < rank_; ++i) n *= dims_[i];
    return n;
}

std::string Shape::str() const {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < rank_; ++i) {
        if (i) os << ", ";
        os << dims_[i];
    }
    os << ')';
    return os.str();
}

bool operator==(const Shape& a, const Shape& b) {
    if (a.rank_ != b.rank_) return false;
    for (std::size_t i = 0; i < a.rank_; ++i) {
        if (a.dims_[i] != b.dims_[i]) return false;
    }
    return true;
}

Tensor::Tensor(Shape shape, double fill) : shape_(shape), data_(shape.numel(), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) {
        throw DimensionError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                             shape_.str());
    }
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw DimensionError("ragged rows in Tensor::from_rows");
        data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor(Shape{r, c}, std::move(data));
}

Tensor Tensor::identity(std::size_t n) {
    Tensor t = matrix(n, n);
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
}

std::size_t Tensor::rows() const {
    if (shape_.rank() == 1) return 1;
    std::size_t r = 1;
    for (std::size_t i = 0; i + 1 < shape_.rank(); ++i) r *= shape_[i];
    return r;
}

std::size_t Tensor::cols() const { return shape_.rank() ? shape_[shape_.rank() - 1] : 0; }

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape.numel() != data_.size()) {
        throw DimensionError("cannot reshape " + shape_.str() + " to " + shape.str());
    }
    return Tensor(shape, data_);
}

Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t n) {
    if (r0 + n > x.rows()) {
        throw DimensionError("row slice [" + std::to_string(r0) + ", " + std::to_string(r0 + n) +
                             ") out of range for " + x.shape().str());
    }
    const std::size_t c = x.cols();
    std::vector<double> out(x.data() + r0 * c, x.data() + (r0 + n) * c);
    return Tensor(Shape{n, c}, std::move(out));
}

Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t n) {
    if (c0 + n > x.cols()) {
        throw DimensionError("column slice [" + std::to_string(c0) + ", " + std::to_string(c0 + n) +
                             ") out of range for " + x.shape().str());
    }
    Tensor out = Tensor::matrix(x.rows(), n);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        std::copy_n(x.data() + r * x.cols() + c0, n, out.data() + r * n);
    }
    return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) throw DimensionError("concat_rows of nothing");
    const std::size_t c = parts.front().cols();
    std::size_t r = 0;
    for (const auto& p : parts) {
        if (p.cols() != c) {
            throw DimensionError("concat_rows width mismatch: " + parts.front().shape().str() + " vs " +
                                 p.shape().str());
        }
        r += p.rows();
    }
    std::vector<double> out;
    out.reserve(r * c);
    for (const auto& p : parts) out.insert(out.end(), p.data(), p.data() + p.size());
    return Tensor(Shape{r, c}, std::move(out));
}

Tensor transpose(const Tensor& x) {
    Tensor out = Tensor::matrix(x.cols(), x.rows());
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < x.cols(); ++c) out.at(c, r) = x.at(r, c);
    return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!(a.shape() == b.shape())) {
        throw DimensionError("max_abs_diff shape mismatch: " + a.shape().str() + " vs " + b.shape().str());
    }
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

double frobenius_norm(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v * v;
    return std::sqrt(s);
}

}  // namespace pma
