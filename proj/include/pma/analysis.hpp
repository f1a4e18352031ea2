#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pma/attention.hpp"
#include "pma/captioner.hpp"
#include "pma/config.hpp"
#include "pma/dataset.hpp"
#include "pma/trainer.hpp"

namespace pma {

// ---- Lipschitz bound of softmax under a single key perturbation ----

struct BoundViolation {
    std::size_t trial = 0;
    bool scaled = false;
    std::vector<double> query;
    Tensor keys;             // n_keys × d, before perturbation
    std::size_t key_index = 0;
    std::vector<double> delta;  // perturbation added to that key
    double epsilon = 0.0;
    double ratio = 0.0;
    double bound = 0.0;
};

struct BoundTrialReport {
    std::size_t trials = 0;
    double max_ratio = 0.0;         // unscaled logits, bound 1
    double max_scaled_excess = 0.0;  // max of ratio·sqrt(d) with scaled logits, bound 1
    double max_scaled_ratio = 0.0;
    /// First trial whose ratio exceeded its bound by more than 1e-9.
    std::optional<BoundViolation> violating_trial;

    bool passed() const { return !violating_trial.has_value(); }
};

struct BoundOptions {
    std::size_t d_min = 2, d_max = 16;
    std::size_t keys_min = 2, keys_max = 32;
    std::size_t trials = 10000;
    double eps_max = 2.0;
    std::uint64_t seed = 1;
};

/// Per trial: draw q and K, replace one key by a point at distance ε ≤
/// eps_max and measure ‖softmax(qKᵀ) − softmax(qK̃ᵀ)‖₂ / (ε‖q‖₂), both on raw
/// logits (must stay ≤ 1) and on logits scaled by 1/sqrt(d) (must stay ≤
/// 1/sqrt(d)). A zero denominator counts as ratio 0.
BoundTrialReport verify_lipschitz_bound(const BoundOptions& opts);
BoundTrialReport verify_lipschitz_bound(std::size_t d, std::size_t n_keys, std::size_t trials, double eps_max,
                                        std::uint64_t seed);

/// The ratio for one explicit instance; `scale` multiplies the logits.
double lipschitz_ratio(std::span<const double> q, const Tensor& keys, std::size_t key_index,
                       std::span<const double> delta, double scale);

std::string to_json(const BoundTrialReport& r);

// ---- memory usage over generation positions ----

struct ProfilePoint {
    std::size_t position = 0;
    double mean = 0.0;
    double stddev = 0.0;
    std::size_t count = 0;
};

/// `traces[sample]` holds one trace per memory-carrying layer. Each
/// position is averaged over the samples that reach it; the population
/// standard deviation is reported. Throws ContractError when a trace has no
/// memory columns.
std::vector<ProfilePoint> profile_from_traces(const std::vector<std::vector<AttentionTrace>>& traces);

/// Greedy-decodes every sample, replays the generated prefix with traces on
/// and profiles the score per generation position. Throws ContractError when
/// no decoder layer attends memory.
std::vector<ProfilePoint> memory_usage_profile(Captioner& model, const std::vector<ToySample>& samples);

std::string profile_csv(const std::vector<ProfilePoint>& profile);

// ---- ablation grid ----

struct AblationCell {
    std::string name;
    ConfigPairs overrides;
};

struct AblationRow {
    std::string cell;
    std::uint64_t seed = 0;
    ConfigPairs config;
    EvalMetrics val;
    EvalMetrics compositional;
    double final_loss = 0.0;
    std::size_t refreshes = 0;
};

struct AblationReport {
    std::vector<AblationRow> rows;  // sorted by (cell order, seed)
    std::vector<std::string> cell_order;

    std::string csv() const;
    std::string jsonl() const;
    /// Mean ± std of exact match per cell on both splits.
    std::string summary_table() const;
    /// Mean of a metric over a cell's seeds.
    double mean_exact_match(const std::string& cell, bool compositional) const;
};

/// The Table-1 style axes: pma, baseline, learnable-mem, no segment
/// embeddings, no memory in the first layer, smaller m and smaller bank.
std::vector<AblationCell> standard_ablation_cells(const TrainConfig& base);

struct AblationOptions {
    std::vector<std::uint64_t> seeds{1, 2, 3};
    std::size_t workers = 1;
    /// Called after each finished run.
    std::function<void(const AblationRow&)> on_row;
};

/// Trains and evaluates every (cell, seed) on the base config's dataset.
AblationReport run_ablation_grid(const TrainConfig& base, const std::vector<AblationCell>& cells,
                                 const AblationOptions& opts);

/// One train + evaluate run, as used by every grid cell.
AblationRow run_single(const TrainConfig& cfg, const std::string& cell_name, std::size_t workers = 1);

// ---- attention cost ----

struct BenchRow {
    std::size_t t_k = 0;
    std::size_t m = 0;
    double median_us = 0.0;
    double p95_us = 0.0;
};

struct BenchOptions {
    std::vector<std::size_t> t_k{8, 16, 32, 64};
    std::vector<std::size_t> m{0, 16, 32, 64, 128};
    std::size_t d_model = 64;
    std::size_t heads = 4;
    std::size_t repeats = 21;
    std::uint64_t seed = 1;
};

/// Wall time of one causal self-attention block forward (projections,
/// memory-augmented heads, output projection). m = 0 takes the plain path.
std::vector<BenchRow> bench_attention(const BenchOptions& opts);
std::string bench_csv(const std::vector<BenchRow>& rows);

}  // namespace pma
