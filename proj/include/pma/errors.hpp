#pragma once

#include <stdexcept>
#include <string>

namespace pma {

// Error vocabulary shared by every module. Each class maps onto one failure
// family so callers (and the CLI exit-code table) can discriminate them.

struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct IndexError : std::out_of_range {
    using std::out_of_range::out_of_range;
};

struct SizeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

struct OrderingError : std::logic_error {
    using std::logic_error::logic_error;
};

struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct LoadError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Raised when training produces a non-finite loss.
struct NumericAbort : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace pma
