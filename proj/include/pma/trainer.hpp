#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pma/captioner.hpp"
#include "pma/config.hpp"
#include "pma/dataset.hpp"
#include "pma/membank.hpp"
#include "pma/optimizer.hpp"
#include "pma/rng.hpp"

namespace pma {

struct StepMetrics {
    std::int64_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
    double token_acc = 0.0;
    std::optional<double> mem_attn_score;  // absent while no memory is attended
    bool refresh = false;
};

/// One JSON object, no trailing newline.
std::string to_json_line(const StepMetrics& m);

/// Everything needed to continue a run. Banks are training-only and are not
/// part of checkpoints.
struct TrainState {
    explicit TrainState(const TrainConfig& cfg);

    TrainConfig config;
    std::int64_t step = 0;
    Captioner model;
    Adam optimizer;
    /// [layer][head]; empty when the run distils no prototypes.
    std::vector<std::vector<MemoryBank>> banks;
    Rng rng;
    std::uint64_t refresh_count = 0;

    /// (Re)creates empty banks for every memory-carrying layer.
    void reset_banks();
};

struct TrainOptions {
    /// Worker threads for the per-(layer, head) prototype computation.
    std::size_t workers = 1;
    std::function<void(const StepMetrics&)> on_step;
};

/// Teacher-forced inputs/targets for one caption.
std::vector<std::int64_t> decoder_inputs(const std::vector<std::int64_t>& caption);
std::vector<std::int64_t> decoder_targets(const std::vector<std::int64_t>& caption);

/// One iteration: forward, bank push, refresh when due (then slide), loss,
/// backward, optimizer update. Throws NumericAbort on a non-finite loss or
/// gradient before any parameter is touched.
StepMetrics train_step(TrainState& state, const std::vector<ToySample>& data, const TrainOptions& opts = {});

/// Runs `steps` further iterations.
std::vector<StepMetrics> train(TrainState& state, const std::vector<ToySample>& data, std::int64_t steps,
                               const TrainOptions& opts = {});

/// Builds prototypes for every bank and installs them. Seeds derive from
/// (config seed, layer, head, refresh index).
void refresh_memories(TrainState& state, std::size_t workers = 1);

struct EvalMetrics {
    std::size_t samples = 0;
    double token_acc = 0.0;
    double exact_match = 0.0;
    /// Generated color, object and scene token correct.
    std::array<double, 3> slot_acc{};
    std::optional<double> mem_attn_score;
};

std::string to_json(const EvalMetrics& m);

/// Teacher-forced token accuracy, greedy (or beam) exact match, per-slot
/// accuracy and mean memory attention score. Deterministic.
EvalMetrics evaluate(Captioner& model, const std::vector<ToySample>& samples, std::size_t beam = 1);

/// Mean memory attention score over every sample and position of a decode
/// result, using only layers that attend memory. nullopt if none does.
std::optional<double> mean_memory_score(const Captioner& model, const DecodeResult& res);

}  // namespace pma
