#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pma/tensor.hpp"

namespace pma {

// Value-level kernels. The differentiable versions in autodiff.hpp call these
// for their forward pass, so both routes share one definition of each op.

Tensor matmul(const Tensor& a, const Tensor& b);
/// a · bᵀ without materializing the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// aᵀ · b without materializing the transpose.
Tensor matmul_tn(const Tensor& a, const Tensor& b);

/// Row-wise softmax with per-row max subtraction.
Tensor softmax_rows(const Tensor& logits);
Tensor log_softmax_rows(const Tensor& logits);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

/// Mean negative log-likelihood of `targets` over rows whose target is not
/// `ignore_index`. Zero when every row is ignored.
double cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets, std::int64_t ignore_index);

}  // namespace pma
