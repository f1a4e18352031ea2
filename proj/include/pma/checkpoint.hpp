#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pma/trainer.hpp"

namespace pma {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Layout: "PMAC", u32 version, u64 header length, JSON header, payload of
/// little-endian float64 values, SHA-256 of the payload. The header lists
/// every tensor (name, shape, byte offset into the payload) together with
/// the config, step, refresh count and RNG state. Banks are not stored: a
/// resumed run refills them and keeps using the saved prototypes until the
/// next refresh.
std::vector<std::uint8_t> serialize_checkpoint(const TrainState& state);
TrainState deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const TrainState& state, const std::string& path);
/// Throws LoadError naming the offending field.
TrainState load_checkpoint(const std::string& path);

struct CheckpointSummary {
    std::uint32_t version = 0;
    bool digest_ok = false;
    std::string header_json;
};

/// Reads the framing and checks the digest without rebuilding the model.
CheckpointSummary inspect_checkpoint_file(const std::string& path);

std::string sha256_hex(const std::uint8_t* data, std::size_t n);

}  // namespace pma
