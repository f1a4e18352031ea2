#include "pma/numerics.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

#include "pma/errors.hpp"

namespace pma {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_matrix(const Tensor& t) {
    return ConstMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

MutMap as_matrix(Tensor& t) {
    return MutMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

[[noreturn]] void shape_mismatch(const char* op, const Tensor& a, const Tensor& b) {
    throw DimensionError(std::string(op) + ": incompatible shapes " + a.shape().str() + " and " + b.shape().str());
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows()) shape_mismatch("matmul", a, b);
    Tensor out = Tensor::matrix(a.rows(), b.cols());
    if (a.cols() == 0) return out;
    as_matrix(out).noalias() = as_matrix(a) * as_matrix(b);
    return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.cols()) shape_mismatch("matmul_nt", a, b);
    Tensor out = Tensor::matrix(a.rows(), b.rows());
    as_matrix(out).noalias() = as_matrix(a) * as_matrix(b).transpose();
    return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    if (a.rows() != b.rows()) shape_mismatch("matmul_tn", a, b);
    Tensor out = Tensor::matrix(a.cols(), b.cols());
    as_matrix(out).noalias() = as_matrix(a).transpose() * as_matrix(b);
    return out;
}

Tensor softmax_rows(const Tensor& logits) {
    Tensor out = Tensor::matrix(logits.rows(), logits.cols());
    const std::size_t c = logits.cols();
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        const double* in = logits.data() + r * c;
        double* o = out.data() + r * c;
        const double mx = *std::max_element(in, in + c);
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            o[j] = std::exp(in[j] - mx);
            sum += o[j];
        }
        const double inv = 1.0 / sum;
        for (std::size_t j = 0; j < c; ++j) o[j] *= inv;
    }
    return out;
}

Tensor log_softmax_rows(const Tensor& logits) {
    Tensor out = Tensor::matrix(logits.rows(), logits.cols());
    const std::size_t c = logits.cols();
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        const double* in = logits.data() + r * c;
        double* o = out.data() + r * c;
        const double mx = *std::max_element(in, in + c);
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) sum += std::exp(in[j] - mx);
        const double lse = mx + std::log(sum);
        for (std::size_t j = 0; j < c; ++j) o[j] = in[j] - lse;
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const std::size_t d = x.cols();
    if (gain.size() != d || bias.size() != d) {
        throw DimensionError("layer_norm: gain/bias " + gain.shape().str() + "/" + bias.shape().str() +
                             " do not match width of " + x.shape().str());
    }
    if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
    Tensor out = Tensor::matrix(x.rows(), d);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const double* in = x.data() + r * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += in[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
        var /= static_cast<double>(d);
        const double inv_std = 1.0 / std::sqrt(var + eps);
        double* o = out.data() + r * d;
        for (std::size_t j = 0; j < d; ++j) o[j] = (in[j] - mean) * inv_std * gain[j] + bias[j];
    }
    return out;
}

double cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets, std::int64_t ignore_index) {
    if (targets.size() != logits.rows()) {
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                             logits.shape().str());
    }
    const auto vocab = static_cast<std::int64_t>(logits.cols());
    const Tensor logp = log_softmax_rows(logits);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t r = 0; r < targets.size(); ++r) {
        const std::int64_t t = targets[r];
        if (t == ignore_index) continue;
        if (t < 0 || t >= vocab) {
            throw IndexError("cross_entropy: target " + std::to_string(t) + " outside [0, " + std::to_string(vocab) +
                             ")");
        }
        total -= logp.at(r, static_cast<std::size_t>(t));
        ++count;
    }
    return count ? total / static_cast<double>(count) : 0.0;
}

}  // namespace pma
