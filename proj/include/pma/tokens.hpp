#pragma once

#include <cstdint>

namespace pma::tokens {

inline constexpr std::int64_t kPad = 0;
inline constexpr std::int64_t kBos = 1;
inline constexpr std::int64_t kEos = 2;

}  // namespace pma::tokens
