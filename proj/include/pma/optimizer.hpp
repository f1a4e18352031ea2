#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pma/autodiff.hpp"
#include "pma/tensor.hpp"

namespace pma {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction. Moments are kept per parameter in the store's
/// registration order.
class Adam {
public:
    explicit Adam(const ParameterStore& params, AdamConfig cfg = {});

    /// One update from the gradients currently held in the store.
    void step(ParameterStore& params, double lr);

    std::int64_t steps_taken() const { return t_; }
    const AdamConfig& config() const { return cfg_; }
    std::vector<Tensor>& first_moments() { return m_; }
    std::vector<Tensor>& second_moments() { return v_; }
    const std::vector<Tensor>& first_moments() const { return m_; }
    const std::vector<Tensor>& second_moments() const { return v_; }
    void set_steps_taken(std::int64_t t) { t_ = t; }

private:
    AdamConfig cfg_;
    std::int64_t t_ = 0;
    std::vector<Tensor> m_, v_;
};

}  // namespace pma
