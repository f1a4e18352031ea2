#include "pma/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "pma/analysis.hpp"
#include "pma/attention.hpp"
#include "pma/captioner.hpp"
#include "pma/errors.hpp"
#include "pma/membank.hpp"
#include "pma/prototypes.hpp"
#include "pma/rng.hpp"

namespace pma::oracle {

namespace {

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c, double sd = 1.0) {
    Tensor t = Tensor::matrix(r, c);
    for (double& x : t.values()) x = sd * rng.normal();
    return t;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

std::string fmt(double x) {
    std::ostringstream os;
    os.precision(6);
    os << x;
    return os.str();
}

}  // namespace

Tensor value_prototypes_brute_force(const Tensor& prototype_keys, const Tensor& bank_keys, const Tensor& bank_values,
                                    std::size_t k, bool normalize) {
    const std::size_t m = prototype_keys.rows(), n = bank_keys.rows(), d = bank_keys.cols();
    if (k == 0 || k > n) throw SizeError("brute force: bad k");
    Tensor out = Tensor::matrix(m, bank_values.cols());
    for (std::size_t i = 0; i < m; ++i) {
        std::vector<std::pair<double, std::size_t>> all;
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                const double e = prototype_keys.at(i, c) - bank_keys.at(j, c);
                s += e * e;
            }
            all.emplace_back(std::sqrt(s), j);
        }
        std::sort(all.begin(), all.end());
        double total = 0.0;
        for (std::size_t t = 0; t < k; ++t) total += std::exp(-all[t].first);
        for (std::size_t t = 0; t < k; ++t) {
            const double w = normalize ? std::exp(-all[t].first) / total : std::exp(-all[t].first);
            for (std::size_t c = 0; c < bank_values.cols(); ++c) out.at(i, c) += w * bank_values.at(all[t].second, c);
        }
    }
    return out;
}

bool BankReplay::refresh_at(std::size_t n) const { return n >= capacity_ && (n - capacity_) % stride_ == 0; }

std::size_t BankReplay::retained_count(std::size_t n) const {
    if (n < capacity_) return n;
    const std::size_t last = capacity_ + (n - capacity_) / stride_ * stride_;
    return capacity_ - stride_ + (n - last);
}

bool BankReplay::push(std::size_t id) {
    ids_.push_back(id);
    return refresh_at(ids_.size());
}

std::vector<std::size_t> BankReplay::window_at_refresh() const {
    const std::size_t n = ids_.size();
    return {ids_.end() - static_cast<std::ptrdiff_t>(std::min(n, capacity_)), ids_.end()};
}

std::vector<std::size_t> BankReplay::retained() const {
    const std::size_t keep = retained_count(ids_.size());
    return {ids_.end() - static_cast<std::ptrdiff_t>(keep), ids_.end()};
}

CheckResult check_value_prototypes(std::uint64_t seed, std::size_t instances, double tol, bool inject_fault) {
    CheckResult res{"value-prototypes-brute-force", true, instances, 0.0, ""};
    Rng rng(seed);
    for (std::size_t t = 0; t < instances; ++t) {
        const std::size_t n = 1 + rng.below(512);
        const std::size_t d = 1 + rng.below(16);
        const std::size_t m = 1 + rng.below(std::min<std::size_t>(n, 16));
        const std::size_t k = 1 + rng.below(std::min<std::size_t>(n, 48));
        const bool normalize = t % 2 == 1;
        const Tensor keys = random_matrix(rng, n, d, 0.5);
        const Tensor values = random_matrix(rng, n, d);
        // Half the queries sit on bank keys so zero distances are covered.
        Tensor protos = random_matrix(rng, m, d, 0.5);
        for (std::size_t i = 0; i < m; i += 2) {
            const std::size_t j = rng.below(n);
            std::copy(keys.row(j).begin(), keys.row(j).end(), protos.row(i).begin());
        }
        Tensor got = build_value_prototypes(protos, keys, values, k, normalize);
        if (inject_fault) got[0] *= 1.0 + 1e-6;
        const Tensor want = value_prototypes_brute_force(protos, keys, values, k, normalize);
        const double err = max_abs_diff(got, want);
        res.max_error = std::max(res.max_error, err);
        if (err > tol && res.passed) {
            res.passed = false;
            res.detail = "instance " + std::to_string(t) + " (N=" + std::to_string(n) + ", d=" + std::to_string(d) +
                         ", m=" + std::to_string(m) + ", k=" + std::to_string(k) +
                         ", normalize=" + (normalize ? "true" : "false") + "): max error " + fmt(err);
        }
    }
    return res;
}

CheckResult check_bank_replay(std::uint64_t seed, std::size_t histories) {
    CheckResult res{"bank-replay", true, histories, 0.0, ""};
    Rng rng(seed);
    auto fail = [&](std::size_t h, const std::string& why) {
        if (res.passed) res.detail = "history " + std::to_string(h) + ": " + why;
        res.passed = false;
    };
    for (std::size_t h = 0; h < histories && res.passed; ++h) {
        const std::size_t cap = 1 + rng.below(20);
        const std::size_t stride = 1 + rng.below(cap);
        const std::size_t pushes = 1 + rng.below(6 * cap + 10);
        const std::size_t d = 1 + rng.below(4);
        MemoryBank bank(cap, stride);
        BankReplay replay(cap, stride);
        std::vector<Tensor> keys, values;
        std::vector<std::int64_t> steps;
        std::int64_t step = 0;
        for (std::size_t p = 0; p < pushes && res.passed; ++p) {
            step += 1 + static_cast<std::int64_t>(rng.below(3));
            const std::size_t rows = 1 + rng.below(4);
            keys.push_back(random_matrix(rng, rows, d));
            values.push_back(random_matrix(rng, rows, d));
            steps.push_back(step);
            const bool due = bank.push_batch(step, keys.back(), values.back());
            const bool want_due = replay.push(p);
            if (due != want_due) {
                fail(h, "push " + std::to_string(p + 1) + ": refresh " + (due ? "fired" : "missing") + " (T=" +
                            std::to_string(cap) + ", s=" + std::to_string(stride) + ")");
                break;
            }
            if (due) {
                const auto window = replay.window_at_refresh();
                std::vector<Tensor> wk, wv;
                for (std::size_t id : window) {
                    wk.push_back(keys[id]);
                    wv.push_back(values[id]);
                }
                const auto snap = bank.snapshot();
                if (!bitwise_equal(snap.keys, concat_rows(wk)) || !bitwise_equal(snap.values, concat_rows(wv))) {
                    fail(h, "snapshot at push " + std::to_string(p + 1) + " differs from the replay window");
                    break;
                }
                bank.slide(stride);
            }
            const auto kept = replay.retained();
            if (kept.size() != bank.size()) {
                fail(h, "after push " + std::to_string(p + 1) + ": bank holds " + std::to_string(bank.size()) +
                            " batches, replay " + std::to_string(kept.size()));
                break;
            }
            for (std::size_t e = 0; e < kept.size(); ++e) {
                const auto& entry = bank.entries()[e];
                if (entry.step != steps[kept[e]] || !bitwise_equal(entry.keys, keys[kept[e]]) ||
                    !bitwise_equal(entry.values, values[kept[e]])) {
                    fail(h, "after push " + std::to_string(p + 1) + ": entry " + std::to_string(e) + " differs");
                    break;
                }
            }
        }
    }
    return res;
}

CheckResult check_baseline_identity(std::uint64_t seed, std::size_t configs) {
    CheckResult res{"baseline-identity", true, configs, 0.0, ""};
    Rng rng(seed);
    auto fail = [&](std::size_t c, const std::string& why) {
        if (res.passed) res.detail = "config " + std::to_string(c) + ": " + why;
        res.passed = false;
    };
    for (std::size_t c = 0; c < configs; ++c) {
        ModelConfig base;
        base.layers = 1 + rng.below(3);
        base.heads = std::size_t{1} << rng.below(3);
        base.d_model = base.heads * (std::size_t{2} << rng.below(3));
        base.ffn_dim = 4 + rng.below(29);
        base.vocab = 6 + rng.below(15);
        base.max_len = 3 + rng.below(8);
        base.d_feat = 2 + rng.below(11);
        base.memory_in_first_layer = rng.below(2) == 0;
        base.use_segment_embeddings = rng.below(2) == 0;
        const std::uint64_t model_seed = rng.next_u64();

        const std::size_t batch = 1 + rng.below(3);
        std::vector<Tensor> feats;
        std::vector<std::vector<std::int64_t>> toks;
        for (std::size_t b = 0; b < batch; ++b) {
            feats.push_back(random_matrix(rng, 1 + rng.below(4), base.d_feat));
            std::vector<std::int64_t> seq(1 + rng.below(base.max_len));
            for (auto& t : seq) t = static_cast<std::int64_t>(rng.below(base.vocab));
            toks.push_back(seq);
        }
        std::vector<const Tensor*> fptr;
        for (const auto& f : feats) fptr.push_back(&f);

        ModelConfig plain_cfg = base;
        plain_cfg.memory_mode = MemoryMode::None;
        Captioner plain(plain_cfg, model_seed);
        Tape t_plain;
        const Tensor plain_logits = plain.forward(t_plain, fptr, toks).logits.value();

        // m = 0 through the memory-capable configuration.
        ModelConfig zero_cfg = base;
        zero_cfg.memory_mode = MemoryMode::Prototype;
        zero_cfg.memory_slots = 0;
        Captioner zero(zero_cfg, model_seed);
        Tape t_zero;
        if (!bitwise_equal(zero.forward(t_zero, fptr, toks).logits.value(), plain_logits)) {
            fail(c, "m = 0 logits differ from the memoryless model");
            continue;
        }

        // m > 0 before any prototype exists, sharing the plain weights.
        ModelConfig mem_cfg = base;
        mem_cfg.memory_mode = MemoryMode::Prototype;
        mem_cfg.memory_slots = 1 + rng.below(8);
        Captioner mem(mem_cfg, model_seed);
        for (const auto& p : plain.params()) mem.params().get(p->name).value = p->value;
        Tape t_mem;
        if (!bitwise_equal(mem.forward(t_mem, fptr, toks).logits.value(), plain_logits)) {
            fail(c, "memoryless prototype model differs from the plain model");
            continue;
        }

        // Zero prototypes with zero segment embeddings: every memory logit is
        // 0, so input columns are the plain weights rescaled by the mass
        // left over, and the memory columns are all equal.
        AttentionConfig acfg{base.d_model, base.heads, true, mem_cfg.memory_slots};
        const std::size_t t_len = 1 + rng.below(base.max_len);
        const std::size_t hd = acfg.head_dim(), m = mem_cfg.memory_slots;
        Tape tape;
        Var q = tape.constant(random_matrix(rng, t_len, base.d_model));
        Var k = tape.constant(random_matrix(rng, t_len, base.d_model));
        Var v = tape.constant(random_matrix(rng, t_len, base.d_model));
        AttentionConfig plain_acfg = acfg;
        plain_acfg.memory_slots = 0;
        const auto plain_heads = attend_heads(q, k, v, {}, nullptr, plain_acfg);
        std::vector<HeadMemory> zeros;
        for (std::size_t h = 0; h < base.heads; ++h)
            zeros.push_back({tape.constant(Tensor::matrix(m, hd)), tape.constant(Tensor::matrix(m, hd))});
        SegmentEmbeddings seg{tape.constant(Tensor::vector(hd)), tape.constant(Tensor::vector(hd))};
        const auto mem_heads = attend_heads(q, k, v, zeros, &seg, acfg);
        for (std::size_t h = 0; h < base.heads && res.passed; ++h) {
            const Tensor& pw = plain_heads.traces[h].weights;
            const Tensor& mw = mem_heads.traces[h].weights;
            for (std::size_t r = 0; r < t_len; ++r) {
                double mass = 0.0;
                for (std::size_t j = 0; j < m; ++j) {
                    mass += mw.at(r, j);
                    if (mw.at(r, j) != mw.at(r, 0)) fail(c, "memory columns are not uniform");
                }
                for (std::size_t j = 0; j < t_len; ++j) {
                    const double want = pw.at(r, j) * (1.0 - mass);
                    const double err = std::abs(mw.at(r, m + j) - want);
                    res.max_error = std::max(res.max_error, err);
                    if ((pw.at(r, j) == 0.0) != (mw.at(r, m + j) == 0.0)) fail(c, "masking differs");
                    if (err > 1e-12) fail(c, "input columns differ beyond the memory rescaling (" + fmt(err) + ")");
                }
            }
        }
    }
    return res;
}

std::vector<CheckResult> run_suite(const SuiteOptions& o) {
    std::vector<CheckResult> out;
    BoundOptions bo;
    bo.trials = o.bound_trials;
    bo.seed = derive_seed(o.seed, 1);
    const BoundTrialReport rep = verify_lipschitz_bound(bo);
    CheckResult bound{"lipschitz-bound", rep.passed(), rep.trials, rep.max_ratio, ""};
    bound.detail = "max_ratio " + fmt(rep.max_ratio) + " (bound 1), scaled max ratio·sqrt(d) " +
                   fmt(rep.max_scaled_excess) + " (bound 1)";
    if (!rep.passed()) bound.detail += "; violation: " + to_json(rep);
    out.push_back(bound);
    out.push_back(check_value_prototypes(derive_seed(o.seed, 2), o.value_proto_instances, 1e-12, o.inject_fault));
    out.push_back(check_bank_replay(derive_seed(o.seed, 3), o.replay_histories));
    out.push_back(check_baseline_identity(derive_seed(o.seed, 4), o.baseline_configs));
    return out;
}

}  // namespace pma::oracle
