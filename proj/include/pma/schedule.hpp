#pragma once

#include <cstdint>

namespace pma {

enum class DecayShape { Geometric, Linear };

struct ScheduleConfig {
    std::int64_t warmup_steps = 100;
    double peak_lr = 2.5e-4;
    std::int64_t constant_until = 1000;
    std::int64_t decay_until = 1500;
    double floor_lr = 1e-5;
    DecayShape decay = DecayShape::Geometric;

    /// Throws ConfigError unless warmup ≤ constant_until ≤ decay_until and
    /// peak > floor > 0.
    void validate() const;
};

/// Linear warmup 0 → peak, constant peak, decay peak → floor, then floor.
double lr_at(std::int64_t step, const ScheduleConfig& sched);

}  // namespace pma
