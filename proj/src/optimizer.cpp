#include "pma/optimizer.hpp"

#include <cmath>

#include "pma/errors.hpp"

namespace pma {

Adam::Adam(const ParameterStore& params, AdamConfig cfg) : cfg_(cfg) {
    for (const auto& p : params) {
        m_.push_back(Tensor(p->value.shape()));
        v_.push_back(Tensor(p->value.shape()));
    }
}

void Adam::step(ParameterStore& params, double lr) {
    if (params.size() != m_.size()) {
        throw ContractError("adam: store has " + std::to_string(params.size()) + " parameters, optimizer tracks " +
                            std::to_string(m_.size()));
    }
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    std::size_t i = 0;
    for (auto& p : params) {
        double* w = p->value.data();
        const double* g = p->grad.data();
        double* m = m_[i].data();
        double* v = v_[i].data();
        for (std::size_t j = 0, n = p->value.size(); j < n; ++j) {
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
            w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
        }
        ++i;
    }
}

}  // namespace pma
