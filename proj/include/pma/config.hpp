#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pma/captioner.hpp"
#include "pma/dataset.hpp"
#include "pma/prototypes.hpp"
#include "pma/schedule.hpp"

namespace pma {

/// Everything a run depends on. Keys of the text form match the CLI flag
/// names without the leading dashes.
struct TrainConfig {
    ModelConfig model;
    DatasetConfig data;
    std::string holdout = "red:dog,blue:cat";
    ScheduleConfig schedule;
    PrototypeOptions proto{64, 16, 20, 1e-4, false};
    std::size_t batch = 32;
    std::int64_t steps = 2000;
    std::uint64_t seed = 1;
    std::size_t t_bank = 100;
    std::size_t stride = 25;
    std::size_t beam = 1;
    std::size_t trials = 10000;

    /// Model config with vocabulary size and feature width filled in from the
    /// dataset settings.
    ModelConfig model_config() const;
    /// Dataset config with the holdout list resolved.
    DatasetConfig data_config() const;
    /// True when training fills banks and distils prototypes.
    bool uses_banks() const;
    void validate() const;
};

using ConfigPairs = std::vector<std::pair<std::string, std::string>>;

/// Parses "key = value" lines; '#' starts a comment. Throws ConfigError with
/// the line number on malformed input.
ConfigPairs parse_config_text(const std::string& text);
ConfigPairs load_config_file(const std::string& path);

/// Sets one key. Throws ConfigError for unknown keys or unparsable values.
void apply_config_value(TrainConfig& cfg, const std::string& key, const std::string& value);
void apply_config(TrainConfig& cfg, const ConfigPairs& pairs);

/// Every key with its current value, in a fixed order.
ConfigPairs config_pairs(const TrainConfig& cfg);
std::string echo_config(const TrainConfig& cfg);
/// Names of all recognised keys.
std::vector<std::string> config_keys();

}  // namespace pma
