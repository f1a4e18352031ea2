#include "pma/captioner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>

#include "pma/errors.hpp"
#include "pma/numerics.hpp"
#include "pma/rng.hpp"

namespace pma {

std::string to_string(MemoryMode mode) {
    switch (mode) {
        case MemoryMode::None: return "baseline";
        case MemoryMode::Prototype: return "pma";
        case MemoryMode::Learnable: return "learnable-mem";
    }
    return "?";
}

MemoryMode memory_mode_from_string(const std::string& s) {
    if (s == "baseline" || s == "none") return MemoryMode::None;
    if (s == "pma") return MemoryMode::Prototype;
    if (s == "learnable-mem" || s == "learnable") return MemoryMode::Learnable;
    throw ConfigError("unknown mode '" + s + "' (expected pma, learnable-mem or baseline)");
}

bool ModelConfig::layer_has_memory(std::size_t layer) const {
    return memory_mode != MemoryMode::None && memory_slots > 0 && (layer > 0 || memory_in_first_layer);
}

bool ModelConfig::layer_has_segments(std::size_t layer) const {
    return use_segment_embeddings && layer_has_memory(layer);
}

void ModelConfig::validate() const {
    if (layers == 0) throw ConfigError("layers must be positive");
    if (heads == 0 || d_model % heads != 0) throw ConfigError("d_model must be a positive multiple of heads");
    if (ffn_dim == 0 || vocab < 4 || max_len < 2 || d_feat == 0) {
        throw ConfigError("ffn_dim, d_feat must be positive, vocab >= 4, max_len >= 2");
    }
    if (!(ln_eps > 0.0)) throw ConfigError("ln_eps must be positive");
}

std::size_t parameter_count(const ModelConfig& c) {
    const std::size_t d = c.d_model, f = c.ffn_dim;
    const std::size_t attn = 4 * d * d + 3 * d;  // no key bias
    const std::size_t ln = 2 * d;
    const std::size_t ffn = d * f + f + f * d + d;
    std::size_t n = c.d_feat * d + d;        // feature projection
    n += c.layers * (2 * ln + attn + ffn);  // encoder
    n += ln;                                // encoder final norm
    n += c.vocab * d + c.max_len * d;       // token + position embeddings
    for (std::size_t l = 0; l < c.layers; ++l) {
        n += 3 * ln + 2 * attn + ffn;
        if (c.layer_has_segments(l)) n += 2 * c.head_dim();
        if (c.memory_mode == MemoryMode::Learnable && c.layer_has_memory(l)) n += 2 * c.memory_slots * d;
    }
    n += ln;                  // decoder final norm
    n += d * c.vocab + c.vocab;  // output projection
    return n;
}

namespace {

std::string lname(const char* stack, std::size_t l, const char* what) {
    return std::string(stack) + "." + std::to_string(l) + "." + what;
}

Tensor xavier(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor t = Tensor::matrix(fan_in, fan_out);
    for (double& v : t.values()) v = rng.uniform(-a, a);
    return t;
}

Tensor gaussian(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
    Tensor t = Tensor::matrix(rows, cols);
    for (double& v : t.values()) v = rng.normal(0.0, stddev);
    return t;
}

struct Norm {
    Var gain, bias;
};

struct Ffn {
    Var w1, b1, w2, b2;
};

Var project(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }

Var feed_forward(Var x, const Ffn& f) { return project(relu(project(x, f.w1, f.b1)), f.w2, f.b2); }

}  // namespace


Captioner::Captioner(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    init_params(seed);
}

void Captioner::init_params(std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t d = cfg_.d_model, f = cfg_.ffn_dim, hd = cfg_.head_dim();
    auto add_norm = [&](const std::string& prefix) {
        params_.add(prefix + ".g", Tensor::vector(d, 1.0));
        params_.add(prefix + ".b", Tensor::vector(d, 0.0));
    };
    auto add_attn = [&](const std::string& prefix) {
        // No key bias: it shifts every logit of a row equally, and next to
        // memory columns it would act as an unlisted segment embedding.
        for (const char* p : {"q", "k", "v", "o"}) {
            params_.add(prefix + ".w" + p, xavier(rng, d, d));
            if (p[0] != 'k') params_.add(prefix + ".b" + p, Tensor::vector(d, 0.0));
        }
    };
    auto add_ffn = [&](const std::string& prefix) {
        params_.add(prefix + ".w1", xavier(rng, d, f));
        params_.add(prefix + ".b1", Tensor::vector(f, 0.0));
        params_.add(prefix + ".w2", xavier(rng, f, d));
        params_.add(prefix + ".b2", Tensor::vector(d, 0.0));
    };

    params_.add("feat.w", xavier(rng, cfg_.d_feat, d));
    params_.add("feat.b", Tensor::vector(d, 0.0));
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
        add_norm(lname("enc", l, "ln1"));
        add_attn(lname("enc", l, "attn"));
        add_norm(lname("enc", l, "ln2"));
        add_ffn(lname("enc", l, "ffn"));
    }
    add_norm("enc.ln_f");

    params_.add("tok_emb", gaussian(rng, cfg_.vocab, d, 1.0 / std::sqrt(static_cast<double>(d))));
    params_.add("pos_emb", gaussian(rng, cfg_.max_len, d, 1.0 / std::sqrt(static_cast<double>(d))));
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
        add_norm(lname("dec", l, "ln1"));
        add_attn(lname("dec", l, "self"));
        if (cfg_.layer_has_segments(l)) {
            params_.add(lname("dec", l, "seg.mem"), gaussian(rng, 1, hd, 0.02).reshaped(Shape{hd}));
            params_.add(lname("dec", l, "seg.in"), gaussian(rng, 1, hd, 0.02).reshaped(Shape{hd}));
        }
        if (cfg_.memory_mode == MemoryMode::Learnable && cfg_.layer_has_memory(l)) {
            params_.add(lname("dec", l, "mem.k"),
                        gaussian(rng, cfg_.memory_slots, d, 1.0 / std::sqrt(static_cast<double>(hd))));
            params_.add(lname("dec", l, "mem.v"),
                        gaussian(rng, cfg_.memory_slots, d, 1.0 / std::sqrt(static_cast<double>(cfg_.memory_slots))));
        }
        add_norm(lname("dec", l, "ln2"));
        add_attn(lname("dec", l, "cross"));
        add_norm(lname("dec", l, "ln3"));
        add_ffn(lname("dec", l, "ffn"));
    }
    add_norm("dec.ln_f");
    params_.add("out.w", xavier(rng, d, cfg_.vocab));
    params_.add("out.b", Tensor::vector(cfg_.vocab, 0.0));
}

void Captioner::install_memories(std::vector<std::vector<PrototypeMemory>> memories) {
    if (memories.size() > cfg_.layers) {
        throw DimensionError("install_memories: " + std::to_string(memories.size()) + " layers given, model has " +
                             std::to_string(cfg_.layers));
    }
    memories.resize(cfg_.layers);
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
        auto& layer = memories[l];
        if (layer.empty()) continue;
        if (!cfg_.layer_has_memory(l) || cfg_.memory_mode != MemoryMode::Prototype) {
            layer.clear();
            continue;
        }
        if (layer.size() != cfg_.heads) {
            throw DimensionError("install_memories: layer " + std::to_string(l) + " has " +
                                 std::to_string(layer.size()) + " head memories, expected " +
                                 std::to_string(cfg_.heads));
        }
        for (const auto& mem : layer) {
            const Shape want{cfg_.memory_slots, cfg_.head_dim()};
            if (!(mem.keys.shape() == want) || !(mem.values.shape() == want)) {
                throw DimensionError("install_memories: layer " + std::to_string(l) + " expects " + want.str() +
                                     ", got keys " + mem.keys.shape().str() + " values " + mem.values.shape().str());
            }
        }
    }
    memories_.swap(memories);
}

void Captioner::clear_memories() { memories_.clear(); }

bool Captioner::has_installed_memory() const {
    return std::any_of(memories_.begin(), memories_.end(), [](const auto& l) { return !l.empty(); });
}

bool Captioner::layer_uses_memory(std::size_t layer) const {
    if (!cfg_.layer_has_memory(layer)) return false;
    if (cfg_.memory_mode == MemoryMode::Learnable) return true;
    return layer < memories_.size() && !memories_[layer].empty();
}

EncodedBatch Captioner::encode(Tape& tape, std::span<const Tensor* const> features) {
    const std::size_t d = cfg_.d_model;
    EncodedBatch enc;
    std::vector<Tensor> rows;
    std::size_t offset = 0;
    for (const Tensor* f : features) {
        if (f->cols() != cfg_.d_feat) {
            throw DimensionError("encode: features " + f->shape().str() + " but d_feat=" + std::to_string(cfg_.d_feat));
        }
        if (f->rows() == 0) throw ContractError("encode: a sample has no feature rows");
        enc.spans.push_back({offset, f->rows()});
        offset += f->rows();
        rows.push_back(*f);
    }
    auto P = [&](const std::string& n) { return tape.param(params_.get(n)); };
    const AttentionConfig acfg{d, cfg_.heads, false, 0};

    Var h = project(tape.constant(concat_rows(rows)), P("feat.w"), P("feat.b"));
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
        Var a = layer_norm(h, P(lname("enc", l, "ln1.g")), P(lname("enc", l, "ln1.b")), cfg_.ln_eps);
        const std::string pre = lname("enc", l, "attn.");
        Var q = project(a, P(pre + "wq"), P(pre + "bq"));
        Var k = matmul(a, P(pre + "wk"));
        Var v = project(a, P(pre + "wv"), P(pre + "bv"));
        std::vector<Block> blocks;
        for (const RowSpan& s : enc.spans) {
            auto heads = attend_heads(slice(q, s.offset, s.length, 0, d), slice(k, s.offset, s.length, 0, d),
                                      slice(v, s.offset, s.length, 0, d), {}, nullptr, acfg);
            blocks.push_back({heads.out, s.offset, 0});
        }
        Var att = stitch(offset, d, blocks);
        h = add(h, project(att, P(pre + "wo"), P(pre + "bo")));
        Var b = layer_norm(h, P(lname("enc", l, "ln2.g")), P(lname("enc", l, "ln2.b")), cfg_.ln_eps);
        const std::string fp = lname("enc", l, "ffn.");
        h = add(h, feed_forward(b, {P(fp + "w1"), P(fp + "b1"), P(fp + "w2"), P(fp + "b2")}));
    }
    enc.states = layer_norm(h, P("enc.ln_f.g"), P("enc.ln_f.b"), cfg_.ln_eps);
    return enc;
}

DecodeResult Captioner::decode(Tape& tape, const EncodedBatch& enc, std::span<const RowSpan> enc_spans,
                               std::span<const std::vector<std::int64_t>> tokens, const DecodeOptions& opts) {
    const std::size_t d = cfg_.d_model, hd = cfg_.head_dim(), n_seq = tokens.size();
    if (enc_spans.size() != n_seq) throw DimensionError("decode: one encoder span per sequence required");
    auto P = [&](const std::string& n) { return tape.param(params_.get(n)); };

    DecodeResult res;
    std::vector<std::int64_t> flat, positions;
    std::size_t offset = 0;
    for (const auto& seq : tokens) {
        if (seq.empty()) throw ContractError("decode: empty token sequence");
        if (seq.size() > cfg_.max_len) {
            throw IndexError("decode: sequence of " + std::to_string(seq.size()) + " tokens exceeds max_len " +
                             std::to_string(cfg_.max_len));
        }
        for (std::int64_t t : seq) {
            if (t < 0 || static_cast<std::size_t>(t) >= cfg_.vocab) {
                throw IndexError("decode: token id " + std::to_string(t) + " outside vocabulary of " +
                                 std::to_string(cfg_.vocab));
            }
        }
        res.spans.push_back({offset, seq.size()});
        offset += seq.size();
        flat.insert(flat.end(), seq.begin(), seq.end());
        for (std::size_t p = 0; p < seq.size(); ++p) positions.push_back(static_cast<std::int64_t>(p));
    }
    if (opts.collect_traces) res.traces.assign(n_seq, {});
    if (opts.collect_activations) res.activations.assign(cfg_.layers, {});

    res.memory.assign(cfg_.layers, {});

    Var h = add(gather_rows(P("tok_emb"), flat), gather_rows(P("pos_emb"), positions));
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
        const bool use_mem = layer_uses_memory(l);
        AttentionConfig self_cfg{d, cfg_.heads, true, use_mem ? cfg_.memory_slots : 0};
        const AttentionConfig cross_cfg{d, cfg_.heads, false, 0};

        // Self-attention with memory.
        Var a = layer_norm(h, P(lname("dec", l, "ln1.g")), P(lname("dec", l, "ln1.b")), cfg_.ln_eps);
        const std::string sp = lname("dec", l, "self.");
        Var q = project(a, P(sp + "wq"), P(sp + "bq"));
        Var k = matmul(a, P(sp + "wk"));
        Var v = project(a, P(sp + "wv"), P(sp + "bv"));
        if (opts.collect_activations && cfg_.layer_has_memory(l)) {
            for (std::size_t hh = 0; hh < cfg_.heads; ++hh) {
                res.activations[l].push_back({slice_cols(k.value(), hh * hd, hd), slice_cols(v.value(), hh * hd, hd)});
            }
        }
        std::vector<HeadMemory> memory;
        std::optional<SegmentEmbeddings> seg;
        if (use_mem) {
            if (cfg_.memory_mode == MemoryMode::Learnable) {
                Var mk = P(lname("dec", l, "mem.k"));
                Var mv = P(lname("dec", l, "mem.v"));
                for (std::size_t hh = 0; hh < cfg_.heads; ++hh) {
                    memory.push_back({slice(mk, 0, cfg_.memory_slots, hh * hd, hd),
                                      slice(mv, 0, cfg_.memory_slots, hh * hd, hd)});
                }
            } else {
                for (const auto& mem : memories_[l]) {
                    memory.push_back({tape.constant(mem.keys), tape.constant(mem.values)});
                }
            }
            if (cfg_.layer_has_segments(l)) seg = SegmentEmbeddings{P(lname("dec", l, "seg.mem")), P(lname("dec", l, "seg.in"))};
        }
        res.memory[l] = memory;
        std::vector<Block> blocks;
        for (std::size_t s = 0; s < n_seq; ++s) {
            const RowSpan r = res.spans[s];
            auto heads = attend_heads(slice(q, r.offset, r.length, 0, d), slice(k, r.offset, r.length, 0, d),
                                      slice(v, r.offset, r.length, 0, d), memory, seg ? &*seg : nullptr, self_cfg);
            blocks.push_back({heads.out, r.offset, 0});
            if (opts.collect_traces) res.traces[s].push_back(average_traces(heads.traces));
        }
        h = add(h, project(stitch(offset, d, blocks), P(sp + "wo"), P(sp + "bo")));

        // Cross-attention over the encoder states.
        Var c = layer_norm(h, P(lname("dec", l, "ln2.g")), P(lname("dec", l, "ln2.b")), cfg_.ln_eps);
        const std::string cp = lname("dec", l, "cross.");
        Var cq = project(c, P(cp + "wq"), P(cp + "bq"));
        Var ck = matmul(enc.states, P(cp + "wk"));
        Var cv = project(enc.states, P(cp + "wv"), P(cp + "bv"));
        blocks.clear();
        for (std::size_t s = 0; s < n_seq; ++s) {
            const RowSpan r = res.spans[s];
            const RowSpan e = enc_spans[s];
            auto heads = attend_heads(slice(cq, r.offset, r.length, 0, d), slice(ck, e.offset, e.length, 0, d),
                                      slice(cv, e.offset, e.length, 0, d), {}, nullptr, cross_cfg);
            blocks.push_back({heads.out, r.offset, 0});
        }
        h = add(h, project(stitch(offset, d, blocks), P(cp + "wo"), P(cp + "bo")));

        Var b = layer_norm(h, P(lname("dec", l, "ln3.g")), P(lname("dec", l, "ln3.b")), cfg_.ln_eps);
        const std::string fp = lname("dec", l, "ffn.");
        h = add(h, feed_forward(b, {P(fp + "w1"), P(fp + "b1"), P(fp + "w2"), P(fp + "b2")}));
    }
    Var out = layer_norm(h, P("dec.ln_f.g"), P("dec.ln_f.b"), cfg_.ln_eps);
    res.logits = project(out, P("out.w"), P("out.b"));
    return res;
}

DecodeResult Captioner::forward(Tape& tape, std::span<const Tensor* const> features,
                                std::span<const std::vector<std::int64_t>> tokens, const DecodeOptions& opts) {
    if (features.size() != tokens.size()) throw DimensionError("forward: features and tokens differ in batch size");
    EncodedBatch enc = encode(tape, features);
    return decode(tape, enc, enc.spans, tokens, opts);
}

Tensor Captioner::encode(const Tensor& features) {
    Tape tape;
    const Tensor* f[] = {&features};
    return encode(tape, f).states.value();
}

DecodeResult Captioner::decode_teacher_forced(Tape& tape, const std::vector<std::int64_t>& tokens,
                                              const Tensor& features, const DecodeOptions& opts) {
    const Tensor* f[] = {&features};
    const std::vector<std::int64_t> t[] = {tokens};
    return forward(tape, f, t, opts);
}

namespace {

std::size_t argmax_row(const Tensor& logits, std::size_t row) {
    const auto r = logits.row(row);
    return static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
}

}  // namespace

std::vector<std::vector<std::int64_t>> Captioner::generate(std::span<const Tensor* const> features,
                                                           std::size_t max_len, DecodeMode mode,
                                                           std::size_t beam_width) {
    const std::size_t limit = std::min(max_len, cfg_.max_len);
    Tape tape;
    EncodedBatch enc = encode(tape, features);
    const std::size_t n = features.size();
    std::vector<std::vector<std::int64_t>> out(n);

    if (mode == DecodeMode::Beam && beam_width > 1) {
        for (std::size_t s = 0; s < n; ++s) out[s] = beam_search(tape, enc, s, limit, beam_width);
        return out;
    }

    std::vector<std::vector<std::int64_t>> prefix(n, std::vector<std::int64_t>{tokens::kBos});
    std::vector<std::size_t> live(n);
    std::iota(live.begin(), live.end(), 0);
    for (std::size_t step = 0; step < limit && !live.empty(); ++step) {
        std::vector<std::vector<std::int64_t>> seqs;
        std::vector<RowSpan> spans;
        for (std::size_t s : live) {
            seqs.push_back(prefix[s]);
            spans.push_back(enc.spans[s]);
        }
        DecodeResult r = decode(tape, enc, spans, seqs);
        const Tensor& logits = r.logits.value();
        std::vector<std::size_t> still;
        for (std::size_t i = 0; i < live.size(); ++i) {
            const std::size_t s = live[i];
            const auto tok = static_cast<std::int64_t>(argmax_row(logits, r.spans[i].offset + r.spans[i].length - 1));
            prefix[s].push_back(tok);
            out[s].push_back(tok);
            if (tok != tokens::kEos) still.push_back(s);
        }
        live.swap(still);
    }
    return out;
}

std::vector<std::int64_t> Captioner::generate(const Tensor& features, std::size_t max_len, DecodeMode mode,
                                              std::size_t beam_width) {
    const Tensor* f[] = {&features};
    return generate(f, max_len, mode, beam_width).front();
}

std::vector<std::int64_t> Captioner::beam_search(Tape& tape, const EncodedBatch& enc, std::size_t sample,
                                                 std::size_t max_len, std::size_t width) {
    struct Hyp {
        std::vector<std::int64_t> tokens;  // includes <bos>
        double score = 0.0;
    };
    std::vector<Hyp> live{Hyp{{tokens::kBos}, 0.0}};
    std::vector<Hyp> finished;
    for (std::size_t step = 0; step < max_len && !live.empty(); ++step) {
        std::vector<std::vector<std::int64_t>> seqs;
        std::vector<RowSpan> spans;
        for (const auto& h : live) {
            seqs.push_back(h.tokens);
            spans.push_back(enc.spans[sample]);
        }
        DecodeResult r = decode(tape, enc, spans, seqs);
        const Tensor& logits = r.logits.value();

        struct Cand {
            double score;
            std::size_t beam;
            std::size_t token;
        };
        std::vector<Cand> cands;
        for (std::size_t b = 0; b < live.size(); ++b) {
            const std::size_t row = r.spans[b].offset + r.spans[b].length - 1;
            const Tensor one = slice_rows(logits, row, 1);
            const Tensor logp = log_softmax_rows(one);
            for (std::size_t t = 0; t < logp.cols(); ++t) cands.push_back({live[b].score + logp[t], b, t});
        }
        std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.score > b.score; });

        std::vector<Hyp> next;
        for (const Cand& c : cands) {
            if (next.size() == width) break;
            Hyp h{live[c.beam].tokens, c.score};
            h.tokens.push_back(static_cast<std::int64_t>(c.token));
            if (static_cast<std::int64_t>(c.token) == tokens::kEos) {
                finished.push_back(std::move(h));
                if (finished.size() >= width) break;
            } else {
                next.push_back(std::move(h));
            }
        }
        live.swap(next);
        if (!finished.empty() && !live.empty()) {
            const double best_done =
                std::max_element(finished.begin(), finished.end(), [](const Hyp& a, const Hyp& b) {
                    return a.score < b.score;
                })->score;
            // Scores only decrease as hypotheses grow.
            if (best_done >= live.front().score) break;
        }
        if (finished.size() >= width) break;
    }
    const Hyp* best = nullptr;
    for (const auto* pool : {&finished, &live}) {
        for (const auto& h : *pool)
            if (!best || h.score > best->score) best = &h;
    }
    return std::vector<std::int64_t>(best->tokens.begin() + 1, best->tokens.end());
}

}  // namespace pma
