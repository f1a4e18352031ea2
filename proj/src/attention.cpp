#include "pma/attention.hpp"

#include <cmath>
#include <string>

#include "pma/errors.hpp"

namespace pma {

namespace {

constexpr double kMaskBias = -1e9;

std::string dims(const Tensor& t) { return t.shape().str(); }

}  // namespace

double AttentionConfig::scale() const { return 1.0 / std::sqrt(static_cast<double>(head_dim())); }

void AttentionConfig::validate() const {
    if (heads == 0 || d_model == 0 || d_model % heads != 0) {
        throw ConfigError("d_model (" + std::to_string(d_model) + ") must be a positive multiple of heads (" +
                          std::to_string(heads) + ")");
    }
}

AugmentedKV augment_kv(Var keys, Var values, Var memory_keys, Var memory_values, const SegmentEmbeddings* seg) {
    const Tensor& k = keys.value();
    const Tensor& v = values.value();
    const Tensor& mk = memory_keys.value();
    const Tensor& mv = memory_values.value();
    const std::size_t d = k.cols();
    if (v.cols() != d || mk.cols() != d || mv.cols() != d) {
        throw DimensionError("augment_kv: last dimensions differ: K " + dims(k) + ", V " + dims(v) + ", M_K " +
                             dims(mk) + ", M_V " + dims(mv));
    }
    if (k.rows() != v.rows() || mk.rows() != mv.rows()) {
        throw DimensionError("augment_kv: row counts differ: K " + dims(k) + " vs V " + dims(v) + ", M_K " + dims(mk) +
                             " vs M_V " + dims(mv));
    }
    Var mem_k = memory_keys;
    Var in_k = keys;
    if (seg) {
        if (seg->memory.value().size() != d || seg->input.value().size() != d) {
            throw DimensionError("augment_kv: segment embeddings " + dims(seg->memory.value()) + "/" +
                                 dims(seg->input.value()) + " do not match key width " + std::to_string(d));
        }
        mem_k = add_row(memory_keys, seg->memory);
        in_k = add_row(keys, seg->input);
    }
    const Var kparts[] = {mem_k, in_k};
    const Var vparts[] = {memory_values, values};
    return {concat_rows(kparts), concat_rows(vparts)};
}

Tensor causal_mask(std::size_t t_q, std::size_t t_k, std::size_t memory_cols) {
    Tensor mask = Tensor::matrix(t_q, memory_cols + t_k);
    const std::size_t offset = t_k >= t_q ? t_k - t_q : 0;
    for (std::size_t i = 0; i < t_q; ++i) {
        for (std::size_t j = 0; j < memory_cols; ++j) mask.at(i, j) = 1.0;
        for (std::size_t j = 0; j < t_k; ++j) mask.at(i, memory_cols + j) = (j <= i + offset) ? 1.0 : 0.0;
    }
    return mask;
}

AttentionOutput scaled_dot_attention(Var queries, Var keys, Var values, const Tensor* mask,
                                     std::size_t memory_cols) {
    const Tensor& q = queries.value();
    const Tensor& k = keys.value();
    const Tensor& v = values.value();
    if (k.cols() != q.cols() || v.rows() != k.rows()) {
        throw DimensionError("scaled_dot_attention: Q " + dims(q) + ", K " + dims(k) + ", V " + dims(v));
    }
    if (memory_cols > k.rows()) throw DimensionError("scaled_dot_attention: memory_cols exceeds key count");

    const double s = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    Var logits = scale(matmul_nt(queries, keys), s);

    AttentionTrace trace;
    trace.memory_cols = memory_cols;
    if (mask) {
        if (mask->rows() != q.rows() || mask->cols() != k.rows()) {
            throw DimensionError("scaled_dot_attention: mask " + dims(*mask) + " for logits (" +
                                 std::to_string(q.rows()) + ", " + std::to_string(k.rows()) + ")");
        }
        Tensor bias = Tensor::matrix(q.rows(), k.rows());
        trace.visible_inputs.resize(q.rows());
        for (std::size_t i = 0; i < q.rows(); ++i) {
            std::size_t visible = 0, visible_inputs = 0;
            for (std::size_t j = 0; j < k.rows(); ++j) {
                if (mask->at(i, j) != 0.0) {
                    ++visible;
                    if (j >= memory_cols) ++visible_inputs;
                } else {
                    bias.at(i, j) = kMaskBias;
                }
            }
            if (visible == 0) throw ContractError("scaled_dot_attention: row " + std::to_string(i) + " fully masked");
            trace.visible_inputs[i] = visible_inputs;
        }
        logits = add(logits, logits.tape->constant(std::move(bias)));
    }
    Var probs = softmax_rows(logits);
    trace.weights = probs.value();
    return {matmul(probs, values), std::move(trace)};
}

MultiHeadOutput attend_heads(Var q, Var k, Var v, std::span<const HeadMemory> memory, const SegmentEmbeddings* seg,
                             const AttentionConfig& cfg) {
    cfg.validate();
    const std::size_t hd = cfg.head_dim();
    const std::size_t t_q = q.value().rows();
    const std::size_t t_k = k.value().rows();
    if (q.value().cols() != cfg.d_model || k.value().cols() != cfg.d_model || v.value().cols() != cfg.d_model) {
        throw DimensionError("attend_heads: projections must have width d_model=" + std::to_string(cfg.d_model));
    }
    if (!memory.empty()) {
        if (cfg.memory_slots == 0) throw ContractError("attend_heads: memory given but memory_slots is 0");
        if (memory.size() != cfg.heads) {
            throw DimensionError("attend_heads: " + std::to_string(memory.size()) + " memories for " +
                                 std::to_string(cfg.heads) + " heads");
        }
    }
    const std::size_t m = memory.empty() ? 0 : memory.front().keys.value().rows();
    std::optional<Tensor> mask;
    if (cfg.causal) mask = causal_mask(t_q, t_k, m);

    MultiHeadOutput result;
    std::vector<Block> blocks;
    blocks.reserve(cfg.heads);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        Var qh = slice(q, 0, t_q, h * hd, hd);
        Var kh = slice(k, 0, t_k, h * hd, hd);
        Var vh = slice(v, 0, t_k, h * hd, hd);
        AttentionOutput head;
        if (memory.empty()) {
            head = scaled_dot_attention(qh, kh, vh, mask ? &*mask : nullptr, 0);
        } else {
            if (memory[h].keys.value().rows() != m) {
                throw DimensionError("attend_heads: heads carry different memory sizes");
            }
            AugmentedKV kv = augment_kv(kh, vh, memory[h].keys, memory[h].values, seg);
            head = scaled_dot_attention(qh, kv.keys, kv.values, mask ? &*mask : nullptr, m);
        }
        blocks.push_back({head.out, 0, h * hd});
        result.traces.push_back(std::move(head.trace));
    }
    result.out = stitch(t_q, cfg.d_model, blocks);
    return result;
}

MultiHeadOutput multi_head_attention(Var x_q, Var x_kv, const AttentionWeights& w, std::span<const HeadMemory> memory,
                                     const SegmentEmbeddings* seg, const AttentionConfig& cfg) {
    Var q = add_row(matmul(x_q, w.wq), w.bq);
    Var k = w.bk.valid() ? add_row(matmul(x_kv, w.wk), w.bk) : matmul(x_kv, w.wk);
    Var v = add_row(matmul(x_kv, w.wv), w.bv);
    MultiHeadOutput heads = attend_heads(q, k, v, memory, seg, cfg);
    heads.out = add_row(matmul(heads.out, w.wo), w.bo);
    return heads;
}

AttentionTrace average_traces(std::span<const AttentionTrace> traces) {
    if (traces.empty()) throw ContractError("average_traces of nothing");
    AttentionTrace avg;
    avg.memory_cols = traces.front().memory_cols;
    avg.visible_inputs = traces.front().visible_inputs;
    avg.weights = Tensor(traces.front().weights.shape(), 0.0);
    for (const auto& t : traces) {
        if (!(t.weights.shape() == avg.weights.shape()) || t.memory_cols != avg.memory_cols) {
            throw DimensionError("average_traces: traces disagree in shape");
        }
        for (std::size_t i = 0; i < t.weights.size(); ++i) avg.weights[i] += t.weights[i];
    }
    const double inv = 1.0 / static_cast<double>(traces.size());
    for (double& x : avg.weights.values()) x *= inv;
    return avg;
}

MemoryScore memory_attention_score(std::span<const AttentionTrace> layer_traces, std::size_t position) {
    if (layer_traces.empty()) throw ContractError("memory_attention_score: no layers");
    MemoryScore score;
    for (const auto& t : layer_traces) {
        const std::size_t m = t.memory_cols;
        if (m == 0) throw ContractError("memory_attention_score: layer has no memory columns (m == 0)");
        if (position >= t.weights.rows()) {
            throw IndexError("memory_attention_score: position " + std::to_string(position) + " outside " +
                             dims(t.weights));
        }
        const auto row = t.weights.row(position);
        const std::size_t visible = t.visible_at(position);
        double mem = 0.0, inp = 0.0;
        for (std::size_t j = 0; j < m; ++j) mem += row[j];
        // Masked columns carry exactly zero weight, so summing all of them is safe.
        for (std::size_t j = m; j < row.size(); ++j) inp += row[j];
        const double mean_m = mem / static_cast<double>(m);
        const double mean_p = visible ? inp / static_cast<double>(visible) : 0.0;
        const double denom = mean_m + mean_p;
        score.per_layer.push_back(denom > 0.0 ? mean_m / denom : 0.0);
    }
    double total = 0.0;
    for (double s : score.per_layer) total += s;
    score.mean = total / static_cast<double>(score.per_layer.size());
    return score;
}

}  // namespace pma
