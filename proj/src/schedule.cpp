#include "pma/schedule.hpp"

#include <cmath>

#include "pma/errors.hpp"

namespace pma {

void ScheduleConfig::validate() const {
    if (warmup_steps < 0 || warmup_steps > constant_until || constant_until > decay_until) {
        throw ConfigError("schedule needs 0 <= warmup <= constant_until <= decay_until");
    }
    if (!(floor_lr > 0.0) || !(peak_lr > floor_lr)) throw ConfigError("schedule needs peak_lr > floor_lr > 0");
}

double lr_at(std::int64_t step, const ScheduleConfig& s) {
    if (step <= 0) return s.warmup_steps == 0 ? s.peak_lr : 0.0;
    if (step < s.warmup_steps) return s.peak_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
    if (step <= s.constant_until) return s.peak_lr;
    if (step >= s.decay_until) return s.floor_lr;
    const double t = static_cast<double>(step - s.constant_until) / static_cast<double>(s.decay_until - s.constant_until);
    if (s.decay == DecayShape::Linear) return s.peak_lr + t * (s.floor_lr - s.peak_lr);
    return s.peak_lr * std::pow(s.floor_lr / s.peak_lr, t);
}

}  // namespace pma
