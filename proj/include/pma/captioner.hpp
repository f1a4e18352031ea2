#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "pma/attention.hpp"
#include "pma/autodiff.hpp"
#include "pma/prototypes.hpp"
#include "pma/tensor.hpp"
#include "pma/tokens.hpp"

namespace pma {

enum class MemoryMode {
    None,       // plain transformer
    Prototype,  // memories distilled from activation banks
    Learnable,  // memories are trained parameters
};

std::string to_string(MemoryMode mode);
MemoryMode memory_mode_from_string(const std::string& s);

struct ModelConfig {
    std::size_t layers = 2;
    std::size_t d_model = 64;
    std::size_t heads = 4;
    std::size_t ffn_dim = 128;
    std::size_t vocab = 32;
    std::size_t max_len = 16;
    std::size_t d_feat = 32;
    std::size_t memory_slots = 64;
    bool memory_in_first_layer = true;
    bool use_segment_embeddings = true;
    MemoryMode memory_mode = MemoryMode::Prototype;
    double ln_eps = 1e-5;

    std::size_t head_dim() const { return d_model / heads; }
    bool layer_has_memory(std::size_t layer) const;
    bool layer_has_segments(std::size_t layer) const;
    void validate() const;
};

/// Closed-form parameter count for a configuration.
std::size_t parameter_count(const ModelConfig& cfg);

/// Row range of one sample inside a stacked batch tensor.
struct RowSpan {
    std::size_t offset;
    std::size_t length;
};

/// Raw (pre-segment-embedding) self-attention keys/values of one decoder
/// layer and head, stacked over every token of the batch.
struct KVActivations {
    Tensor keys;
    Tensor values;
};

struct DecodeOptions {
    bool collect_traces = false;
    bool collect_activations = false;
};

struct EncodedBatch {
    Var states;  // Σ n_f × d_model
    std::vector<RowSpan> spans;
};

struct DecodeResult {
    Var logits;  // Σ T_i × vocab, sample-major
    std::vector<RowSpan> spans;
    /// [sample][layer] head-averaged decoder self-attention trace.
    std::vector<std::vector<AttentionTrace>> traces;
    /// [layer][head]; empty for layers without memory.
    std::vector<std::vector<KVActivations>> activations;
    /// [layer][head] memory handles fed to self-attention; empty for layers
    /// without memory.
    std::vector<std::vector<HeadMemory>> memory;
};

enum class DecodeMode { Greedy, Beam };

/// Encoder-decoder transformer, pre-norm residual blocks, with optional
/// memory in every decoder self-attention layer. Cross-attention and the
/// encoder never carry memory.
class Captioner {
public:
    Captioner(ModelConfig cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    ParameterStore& params() { return params_; }
    const ParameterStore& params() const { return params_; }

    /// Replaces all prototype memories at once. Outer index is the decoder
    /// layer, inner the head; an empty inner vector leaves that layer without
    /// memory. Slots for layers that may not carry memory are ignored.
    void install_memories(std::vector<std::vector<PrototypeMemory>> memories);
    void clear_memories();
    const std::vector<std::vector<PrototypeMemory>>& memories() const { return memories_; }
    bool has_installed_memory() const;
    /// True when decoder layer `layer` will attend over memory in the next
    /// forward (installed prototypes or learnable slots).
    bool layer_uses_memory(std::size_t layer) const;

    EncodedBatch encode(Tape& tape, std::span<const Tensor* const> features);
    DecodeResult decode(Tape& tape, const EncodedBatch& enc, std::span<const RowSpan> enc_spans,
                        std::span<const std::vector<std::int64_t>> tokens, const DecodeOptions& opts = {});
    /// Teacher-forced pass over a batch: encode then decode with each
    /// sample's own encoder rows.
    DecodeResult forward(Tape& tape, std::span<const Tensor* const> features,
                         std::span<const std::vector<std::int64_t>> tokens, const DecodeOptions& opts = {});

    /// Single-sample value-level helpers.
    Tensor encode(const Tensor& features);
    DecodeResult decode_teacher_forced(Tape& tape, const std::vector<std::int64_t>& tokens, const Tensor& features,
                                       const DecodeOptions& opts = {});

    /// Generated tokens after <bos>, ending with <eos> when produced; never
    /// longer than max_len.
    std::vector<std::vector<std::int64_t>> generate(std::span<const Tensor* const> features, std::size_t max_len,
                                                    DecodeMode mode = DecodeMode::Greedy, std::size_t beam_width = 1);
    std::vector<std::int64_t> generate(const Tensor& features, std::size_t max_len,
                                       DecodeMode mode = DecodeMode::Greedy, std::size_t beam_width = 1);

private:
    void init_params(std::uint64_t seed);
    std::vector<std::int64_t> beam_search(Tape& tape, const EncodedBatch& enc, std::size_t sample,
                                          std::size_t max_len, std::size_t width);

    ModelConfig cfg_;
    ParameterStore params_;
    std::vector<std::vector<PrototypeMemory>> memories_;
};

}  // namespace pma
