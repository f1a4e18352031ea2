#include <cmath>
#include <vector>

#include "doctest.h"
#include "model_gradcheck.hpp"
#include "pma/captioner.hpp"
#include "pma/errors.hpp"
#include "pma/numerics.hpp"
#include "pma/oracles.hpp"
#include "pma/rng.hpp"
#include "pma/tokens.hpp"

using namespace pma;

namespace {

Tensor randn(Rng& rng, std::size_t r, std::size_t c, double s = 1.0) {
    Tensor t = Tensor::matrix(r, c);
    for (double& v : t.values()) v = s * rng.normal();
    return t;
}

ModelConfig tiny(std::size_t m = 0, MemoryMode mode = MemoryMode::Prototype) {
    ModelConfig c;
    c.layers = 2;
    c.d_model = 16;
    c.heads = 2;
    c.ffn_dim = 24;
    c.vocab = 12;
    c.max_len = 8;
    c.d_feat = 6;
    c.memory_slots = m;
    c.memory_mode = m == 0 ? MemoryMode::None : mode;
    return c;
}

std::vector<std::vector<PrototypeMemory>> random_memories(const ModelConfig& c, Rng& rng) {
    std::vector<std::vector<PrototypeMemory>> mem(c.layers);
    for (std::size_t l = 0; l < c.layers; ++l)
        for (std::size_t h = 0; h < c.heads; ++h)
            mem[l].push_back({randn(rng, c.memory_slots, c.head_dim()), randn(rng, c.memory_slots, c.head_dim()), 0, 1});
    return mem;
}

// Value-level reference transformer written against the parameter names
// only. Loops and softmax_rows; nothing from the tape.
struct Reference {
    const Captioner& model;
    const ParameterStore& p;
    explicit Reference(const Captioner& m) : model(m), p(m.params()) {}
    const Tensor& w(const std::string& n) const { return p.get(n).value; }

    Tensor affine(const Tensor& x, const std::string& wn, const std::string& bn) const {
        const Tensor& W = w(wn);
        const Tensor& b = w(bn);
        Tensor y = Tensor::matrix(x.rows(), W.cols());
        for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t j = 0; j < W.cols(); ++j) {
                double acc = 0.0;
                for (std::size_t c = 0; c < x.cols(); ++c) acc += x.at(i, c) * W.at(c, j);
                y.at(i, j) = acc + b[j];
            }
        return y;
    }
    Tensor norm(const Tensor& x, const std::string& pre) const {
        return layer_norm(x, w(pre + ".g"), w(pre + ".b"), model.config().ln_eps);
    }
    Tensor attention(const Tensor& xq, const Tensor& xkv, const std::string& pre, bool causal, std::size_t layer,
                     bool self) const {
        const ModelConfig& c = model.config();
        const std::size_t d = c.d_model, hd = c.head_dim();
        Tensor q = affine(xq, pre + "wq", pre + "bq"), k = matmul(xkv, w(pre + "wk")),
               v = affine(xkv, pre + "wv", pre + "bv");
        const bool mem = self && model.layer_uses_memory(layer);
        const std::size_t m = mem ? c.memory_slots : 0;
        const bool seg = mem && c.layer_has_segments(layer);
        Tensor cat = Tensor::matrix(xq.rows(), d);
        for (std::size_t h = 0; h < c.heads; ++h) {
            const std::size_t tk = k.rows();
            Tensor keys = Tensor::matrix(m + tk, hd), vals = Tensor::matrix(m + tk, hd);
            for (std::size_t j = 0; j < m; ++j)
                for (std::size_t e = 0; e < hd; ++e) {
                    const auto& pm = model.memories()[layer][h];
                    keys.at(j, e) = pm.keys.at(j, e) + (seg ? w("dec." + std::to_string(layer) + ".seg.mem")[e] : 0.0);
                    vals.at(j, e) = pm.values.at(j, e);
                }
            for (std::size_t j = 0; j < tk; ++j)
                for (std::size_t e = 0; e < hd; ++e) {
                    keys.at(m + j, e) = k.at(j, h * hd + e) + (seg ? w("dec." + std::to_string(layer) + ".seg.in")[e] : 0.0);
                    vals.at(m + j, e) = v.at(j, h * hd + e);
                }
            Tensor logits = Tensor::matrix(xq.rows(), m + tk);
            for (std::size_t i = 0; i < xq.rows(); ++i)
                for (std::size_t j = 0; j < m + tk; ++j) {
                    double acc = 0.0;
                    for (std::size_t e = 0; e < hd; ++e) acc += q.at(i, h * hd + e) * keys.at(j, e);
                    const bool hidden = causal && j >= m && (j - m) > i;
                    logits.at(i, j) = acc / std::sqrt(static_cast<double>(hd)) + (hidden ? -1e9 : 0.0);
                }
            Tensor a = softmax_rows(logits);
            for (std::size_t i = 0; i < xq.rows(); ++i)
                for (std::size_t e = 0; e < hd; ++e) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < m + tk; ++j) acc += a.at(i, j) * vals.at(j, e);
                    cat.at(i, h * hd + e) = acc;
                }
        }
        return affine(cat, pre + "wo", pre + "bo");
    }
    Tensor ffn(const Tensor& x, const std::string& pre) const {
        Tensor hdn = affine(x, pre + "w1", pre + "b1");
        for (double& v : hdn.values()) v = std::max(v, 0.0);
        return affine(hdn, pre + "w2", pre + "b2");
    }
    static void acc(Tensor& h, const Tensor& d) {
        for (std::size_t i = 0; i < h.size(); ++i) h[i] += d[i];
    }
    Tensor encode(const Tensor& f) const {
        Tensor h = affine(f, "feat.w", "feat.b");
        for (std::size_t l = 0; l < model.config().layers; ++l) {
            const std::string e = "enc." + std::to_string(l) + ".";
            Tensor a = norm(h, e + "ln1");
            acc(h, attention(a, a, e + "attn.", false, l, false));
            acc(h, ffn(norm(h, e + "ln2"), e + "ffn."));
        }
        return norm(h, "enc.ln_f");
    }
    Tensor logits(const Tensor& f, const std::vector<std::int64_t>& toks) const {
        const Tensor enc = encode(f);
        const std::size_t d = model.config().d_model;
        Tensor h = Tensor::matrix(toks.size(), d);
        for (std::size_t i = 0; i < toks.size(); ++i)
            for (std::size_t c = 0; c < d; ++c)
                h.at(i, c) = w("tok_emb").at(static_cast<std::size_t>(toks[i]), c) + w("pos_emb").at(i, c);
        for (std::size_t l = 0; l < model.config().layers; ++l) {
            const std::string e = "dec." + std::to_string(l) + ".";
            Tensor a = norm(h, e + "ln1");
            acc(h, attention(a, a, e + "self.", true, l, true));
            acc(h, attention(norm(h, e + "ln2"), enc, e + "cross.", false, l, false));
            acc(h, ffn(norm(h, e + "ln3"), e + "ffn."));
        }
        return affine(norm(h, "dec.ln_f"), "out.w", "out.b");
    }
};

Tensor logits_of(Captioner& m, const Tensor& f, const std::vector<std::int64_t>& toks) {
    Tape t;
    return m.decode_teacher_forced(t, toks, f).logits.value();
}

}  // namespace

TEST_CASE("parameter count matches the store") {
    for (std::size_t m : {0u, 4u})
        for (MemoryMode mode : {MemoryMode::Prototype, MemoryMode::Learnable})
            for (bool first : {true, false})
                for (bool seg : {true, false}) {
                    ModelConfig c = tiny(m, mode);
                    c.memory_in_first_layer = first;
                    c.use_segment_embeddings = seg;
                    Captioner model(c, 3);
                    CHECK(parameter_count(c) == model.params().scalar_count());
                }
    // hand count for the no-memory tiny config
    ModelConfig c = tiny();
    const std::size_t d = 16, f = 24, V = 12;
    const std::size_t attn = 4 * d * d + 3 * d, ffn = 2 * d * f + f + d;
    const std::size_t enc = 6 * d + d + 2 * (4 * d + attn + ffn) + 2 * d;
    const std::size_t dec = V * d + 8 * d + 2 * (6 * d + 2 * attn + ffn) + 2 * d + d * V + V;
    CHECK(parameter_count(c) == enc + dec);
}

TEST_CASE("encoder is permutation equivariant") {
    Captioner model(tiny(), 5);
    Rng rng(1);
    Tensor f = randn(rng, 4, 6);
    Tensor out = model.encode(f);
    CHECK(out.rows() == 4);
    CHECK(out.cols() == 16);
    const std::size_t perm[4] = {2, 0, 3, 1};
    Tensor g = Tensor::matrix(4, 6);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 6; ++j) g.at(i, j) = f.at(perm[i], j);
    Tensor pout = model.encode(g);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 16; ++j) CHECK(std::abs(pout.at(i, j) - out.at(perm[i], j)) < 1e-12);

    Tensor dup = Tensor::matrix(2, 6);
    for (std::size_t j = 0; j < 6; ++j) dup.at(0, j) = dup.at(1, j) = f.at(0, j);
    Tensor dout = model.encode(dup);
    for (std::size_t j = 0; j < 16; ++j) CHECK(dout.at(0, j) == dout.at(1, j));

    CHECK_THROWS_AS(model.encode(randn(rng, 2, 5)), DimensionError);
}

TEST_CASE("decoder matches the reference and is causal") {
    Rng rng(7);
    for (std::size_t m : {0u, 3u}) {
        ModelConfig c = tiny(m);
        Captioner model(c, 11);
        if (m > 0) model.install_memories(random_memories(c, rng));
        Tensor f = randn(rng, 3, 6);
        std::vector<std::int64_t> toks{1, 5, 7, 3, 9, 2};
        Tensor got = logits_of(model, f, toks);
        CHECK(got.rows() == toks.size());
        CHECK(got.cols() == c.vocab);
        CHECK(max_abs_diff(got, Reference(model).logits(f, toks)) <= 1e-10);

        for (int edit = 0; edit < 10; ++edit) {
            const std::size_t t = rng.below(toks.size() - 1);
            auto changed = toks;
            for (std::size_t j = t + 1; j < toks.size(); ++j) changed[j] = static_cast<std::int64_t>(rng.below(c.vocab));
            Tensor alt = logits_of(model, f, changed);
            for (std::size_t i = 0; i <= t; ++i)
                for (std::size_t v = 0; v < c.vocab; ++v) CHECK(alt.at(i, v) == got.at(i, v));
        }

        std::vector<std::int64_t> bad{1, 40};
        Tape tp;
        CHECK_THROWS_AS(model.decode_teacher_forced(tp, bad, f), IndexError);
        std::vector<std::int64_t> too_long(9, 1);
        CHECK_THROWS_AS(model.decode_teacher_forced(tp, too_long, f), IndexError);
    }
}

TEST_CASE("install_memories") {
    Rng rng(13);
    ModelConfig c = tiny(4);
    Captioner a(c, 2), b(c, 2);
    auto mem = random_memories(c, rng);
    Tensor f = randn(rng, 3, 6);
    std::vector<std::int64_t> toks{1, 4, 6, 3};

    CHECK_FALSE(a.layer_uses_memory(0));
    const Tensor before = logits_of(a, f, toks);
    a.install_memories(random_memories(c, rng));
    a.install_memories(mem);
    b.install_memories(mem);
    CHECK(logits_of(a, f, toks) == logits_of(b, f, toks));
    CHECK(a.layer_uses_memory(0));
    a.clear_memories();
    CHECK(logits_of(a, f, toks) == before);

    ModelConfig nf = c;
    nf.memory_in_first_layer = false;
    Captioner gated(nf, 2);
    gated.install_memories(mem);
    CHECK_FALSE(gated.layer_uses_memory(0));
    CHECK(gated.layer_uses_memory(1));
    Tape t;
    auto res = gated.decode_teacher_forced(t, toks, f, {true, false});
    CHECK(res.traces[0][0].memory_cols == 0);
    CHECK(res.traces[0][1].memory_cols == 4);

    auto wrong = random_memories(tiny(5, MemoryMode::Prototype), rng);
    CHECK_THROWS_AS(a.install_memories(wrong), DimensionError);
}

TEST_CASE("baseline identity oracle") {
    auto r = oracle::check_baseline_identity(3, 4);
    CHECK_MESSAGE(r.passed, r.detail);
}

TEST_CASE("generate") {
    Rng rng(17);
    ModelConfig c = tiny(3);
    Captioner model(c, 4);
    model.install_memories(random_memories(c, rng));
    for (int i = 0; i < 5; ++i) {
        Tensor f = randn(rng, 3, 6);
        auto g = model.generate(f, 6);
        CHECK(g.size() <= 6);
        CHECK(model.generate(f, 6, DecodeMode::Beam, 1) == g);
        CHECK(model.generate(f, 6) == g);
        CHECK(model.generate(f, 100).size() <= c.max_len);
        auto beam = model.generate(f, 6, DecodeMode::Beam, 3);
        CHECK(beam.size() <= 6);
    }
}

TEST_CASE("tiny model gradients") {
    ModelConfig c = tiny(4);
    c.layers = 1;
    Rng rng(19);
    Captioner model(c, 6);
    model.install_memories(random_memories(c, rng));
    Tensor f = randn(rng, 3, 6);
    std::vector<std::int64_t> in{1, 5, 7, 3}, tg{5, 7, 3, 2};
    auto rep = testing::model_gradcheck(model, [&](Tape& t) {
        auto r = model.decode_teacher_forced(t, in, f);
        return cross_entropy(r.logits, tg, tokens::kPad);
    });
    CHECK(rep.segments_seen);
    CHECK_MESSAGE(rep.max_rel_error < 1e-4, rep.worst_param);
}
