#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "pma/autodiff.hpp"
#include "pma/tensor.hpp"

namespace pma {

struct AttentionConfig {
    std::size_t d_model = 64;
    std::size_t heads = 4;
    bool causal = false;
    std::size_t memory_slots = 0;

    std::size_t head_dim() const { return d_model / heads; }
    double scale() const;
    /// Throws ConfigError unless d_model is a positive multiple of heads.
    void validate() const;
};

/// Learnable markers added to memory keys and input keys respectively.
/// Each holds head_dim elements; values are never touched.
struct SegmentEmbeddings {
    Var memory;
    Var input;
};

/// Attention weights of one head (or a head average) with memory columns
/// first, then input columns.
struct AttentionTrace {
    Tensor weights;
    std::size_t memory_cols = 0;
    /// Unmasked input columns per row. Empty means every input column.
    std::vector<std::size_t> visible_inputs;

    std::size_t input_cols() const { return weights.cols() - memory_cols; }
    std::size_t visible_at(std::size_t row) const {
        return visible_inputs.empty() ? input_cols() : visible_inputs[row];
    }
};

/// Prototype (or learnable) memory rows for one head, as tape handles.
struct HeadMemory {
    Var keys;
    Var values;
};

struct AugmentedKV {
    Var keys;
    Var values;
};

/// K̃ = [M_K + seg.memory ; K + seg.input], Ṽ = [M_V ; V]. A null `seg`
/// skips the embeddings. Memory gradients flow only if the memory vars
/// themselves require them.
AugmentedKV augment_kv(Var keys, Var values, Var memory_keys, Var memory_values, const SegmentEmbeddings* seg);

/// 1 where a query row may see a column. Memory columns are always visible;
/// input column j is visible from row i iff j <= i + (t_k - t_q).
Tensor causal_mask(std::size_t t_q, std::size_t t_k, std::size_t memory_cols);

struct AttentionOutput {
    Var out;
    AttentionTrace trace;
};

/// softmax(Q K̃ᵀ / sqrt(d) + bias) Ṽ with bias = -1e9 on masked entries.
AttentionOutput scaled_dot_attention(Var queries, Var keys, Var values, const Tensor* mask = nullptr,
                                     std::size_t memory_cols = 0);

/// Per-layer tape handles of the projection weights (row-vector convention,
/// y = x W + b). `bk` may be left invalid for no key bias.
struct AttentionWeights {
    Var wq, bq, wk, bk, wv, bv, wo, bo;
};

struct MultiHeadOutput {
    Var out;
    std::vector<AttentionTrace> traces;  // one per head
};

/// Split projected q/k/v [T × d_model] into heads, attend (optionally over
/// per-head memory) and concatenate heads back to [T_q × d_model]. An empty
/// `memory` span selects the plain path that never touches augment_kv.
MultiHeadOutput attend_heads(Var q, Var k, Var v, std::span<const HeadMemory> memory, const SegmentEmbeddings* seg,
                             const AttentionConfig& cfg);

/// Full block: projections, attend_heads, output projection.
MultiHeadOutput multi_head_attention(Var x_q, Var x_kv, const AttentionWeights& w, std::span<const HeadMemory> memory,
                                     const SegmentEmbeddings* seg, const AttentionConfig& cfg);

/// Head-averaged trace; rows of the average still sum to one.
AttentionTrace average_traces(std::span<const AttentionTrace> traces);

struct MemoryScore {
    std::vector<double> per_layer;
    double mean = 0.0;
};

/// mean(a_m) / (mean(a_m) + mean(a_p)) at `position`, per layer trace, then
/// averaged uniformly over layers. a_p covers the visible input columns.
MemoryScore memory_attention_score(std::span<const AttentionTrace> layer_traces, std::size_t position);

}  // namespace pma
