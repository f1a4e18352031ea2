#pragma once

// Central-difference check over every parameter of a captioner.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "pma/autodiff.hpp"
#include "pma/captioner.hpp"

namespace pma::testing {

struct GradReport {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t coords = 0;
    bool segments_seen = false;
};

inline GradReport model_gradcheck(Captioner& model, const std::function<Var(Tape&)>& loss, double h = 1e-5) {
    model.params().zero_grad();
    {
        Tape t;
        t.backward(loss(t));
    }
    GradReport rep;
    auto eval = [&] {
        Tape t;
        return loss(t).value()[0];
    };
    for (auto& owned : model.params()) {
        Parameter& p = *owned;
        if (p.name.find(".seg.") != std::string::npos) rep.segments_seen = true;
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double x0 = p.value[i];
            p.value[i] = x0 + h;
            const double up = eval();
            p.value[i] = x0 - h;
            const double down = eval();
            p.value[i] = x0;
            const double cd = (up - down) / (2.0 * h);
            const double an = p.grad[i];
            const double err = std::abs(an - cd) / std::max({std::abs(an), std::abs(cd), 1e-8});
            if (err > rep.max_rel_error) rep.max_rel_error = err, rep.worst_param = p.name;
            ++rep.coords;
        }
    }
    model.params().zero_grad();
    return rep;
}

}  // namespace pma::testing
