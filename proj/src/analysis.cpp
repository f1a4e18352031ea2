#include "pma/analysis.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "pma/errors.hpp"
#include "pma/rng.hpp"
#include "pma/tokens.hpp"

namespace pma {

namespace {

std::string num(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

std::vector<double> softmax_of(std::span<const double> z) {
    const double mx = *std::max_element(z.begin(), z.end());
    std::vector<double> p(z.size());
    double total = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) total += (p[i] = std::exp(z[i] - mx));
    for (double& x : p) x /= total;
    return p;
}

std::vector<double> logits_of(std::span<const double> q, const Tensor& keys, double scale) {
    std::vector<double> z(keys.rows());
    for (std::size_t i = 0; i < keys.rows(); ++i) {
        const auto k = keys.row(i);
        z[i] = scale * std::inner_product(q.begin(), q.end(), k.begin(), 0.0);
    }
    return z;
}

double norm2(std::span<const double> v) { return std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0)); }

}  // namespace

// ---- Lipschitz bound ----

double lipschitz_ratio(std::span<const double> q, const Tensor& keys, std::size_t key_index,
                       std::span<const double> delta, double scale) {
    if (q.size() != keys.cols() || delta.size() != keys.cols()) {
        throw DimensionError("lipschitz_ratio: query/delta length must match key width " + keys.shape().str());
    }
    if (key_index >= keys.rows()) throw IndexError("lipschitz_ratio: key index out of range");
    Tensor moved = keys;
    for (std::size_t j = 0; j < delta.size(); ++j) moved.at(key_index, j) += delta[j];
    const auto p = softmax_of(logits_of(q, keys, scale));
    const auto p2 = softmax_of(logits_of(q, moved, scale));
    double diff = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) diff += (p[i] - p2[i]) * (p[i] - p2[i]);
    const double denom = norm2(delta) * norm2(q);
    return denom > 0.0 ? std::sqrt(diff) / denom : 0.0;
}

BoundTrialReport verify_lipschitz_bound(const BoundOptions& o) {
    if (o.d_min == 0 || o.d_min > o.d_max || o.keys_min == 0 || o.keys_min > o.keys_max) {
        throw ConfigError("verify_lipschitz_bound: empty dimension or key-count range");
    }
    if (!(o.eps_max >= 0.0)) throw ConfigError("verify_lipschitz_bound: eps_max must be non-negative");
    Rng rng(o.seed);
    BoundTrialReport rep;
    rep.trials = o.trials;
    for (std::size_t t = 0; t < o.trials; ++t) {
        const std::size_t d = o.d_min + rng.below(o.d_max - o.d_min + 1);
        const std::size_t n = o.keys_min + rng.below(o.keys_max - o.keys_min + 1);
        // Query and key magnitudes vary over two orders so both the flat and
        // the saturated regimes of softmax are visited.
        const double q_scale = std::exp(rng.uniform(std::log(0.05), std::log(5.0)));
        const double k_scale = std::exp(rng.uniform(std::log(0.05), std::log(5.0)));
        std::vector<double> q(d);
        for (double& x : q) x = q_scale * rng.normal();
        Tensor keys = Tensor::matrix(n, d);
        for (double& x : keys.values()) x = k_scale * rng.normal();
        const std::size_t idx = rng.below(n);
        const double eps = o.eps_max * (1.0 - rng.uniform());
        std::vector<double> delta(d);
        for (double& x : delta) x = rng.normal();
        const double dn = norm2(delta);
        for (double& x : delta) x = dn > 0.0 ? x * eps / dn : 0.0;

        const double scale = 1.0 / std::sqrt(static_cast<double>(d));
        const double raw = lipschitz_ratio(q, keys, idx, delta, 1.0);
        const double scaled = lipschitz_ratio(q, keys, idx, delta, scale);
        rep.max_ratio = std::max(rep.max_ratio, raw);
        rep.max_scaled_ratio = std::max(rep.max_scaled_ratio, scaled);
        rep.max_scaled_excess = std::max(rep.max_scaled_excess, scaled / scale);
        if (!rep.violating_trial) {
            const bool raw_bad = raw > 1.0 + 1e-9;
            const bool scaled_bad = scaled > scale + 1e-9;
            if (raw_bad || scaled_bad) {
                rep.violating_trial =
                    BoundViolation{t, !raw_bad, q, keys, idx, delta, eps, raw_bad ? raw : scaled, raw_bad ? 1.0 : scale};
            }
        }
    }
    return rep;
}

BoundTrialReport verify_lipschitz_bound(std::size_t d, std::size_t n_keys, std::size_t trials, double eps_max,
                                        std::uint64_t seed) {
    BoundOptions o;
    o.d_min = o.d_max = d;
    o.keys_min = o.keys_max = n_keys;
    o.trials = trials;
    o.eps_max = eps_max;
    o.seed = seed;
    return verify_lipschitz_bound(o);
}

std::string to_json(const BoundTrialReport& r) {
    nlohmann::ordered_json j;
    j["trials"] = r.trials;
    j["max_ratio"] = r.max_ratio;
    j["max_scaled_ratio"] = r.max_scaled_ratio;
    j["max_scaled_ratio_times_sqrt_d"] = r.max_scaled_excess;
    if (r.violating_trial) {
        const auto& v = *r.violating_trial;
        std::vector<std::vector<double>> keys;
        for (std::size_t i = 0; i < v.keys.rows(); ++i) keys.emplace_back(v.keys.row(i).begin(), v.keys.row(i).end());
        j["violating_trial"] = {{"trial", v.trial},     {"scaled", v.scaled}, {"q", v.query},
                                {"K", keys},            {"key_index", v.key_index}, {"delta", v.delta},
                                {"epsilon", v.epsilon}, {"ratio", v.ratio},   {"bound", v.bound}};
    } else {
        j["violating_trial"] = nullptr;
    }
    return j.dump();
}

// ---- memory usage profile ----

std::vector<ProfilePoint> profile_from_traces(const std::vector<std::vector<AttentionTrace>>& traces) {
    std::vector<double> sum, sum_sq;
    std::vector<std::size_t> count;
    std::vector<std::vector<double>> values;
    for (const auto& layers : traces) {
        if (layers.empty()) throw ContractError("profile_from_traces: sample without memory layers");
        const std::size_t rows = layers.front().weights.rows();
        if (values.size() < rows) values.resize(rows);
        for (std::size_t pos = 0; pos < rows; ++pos) values[pos].push_back(memory_attention_score(layers, pos).mean);
    }
    std::vector<ProfilePoint> out;
    for (std::size_t pos = 0; pos < values.size(); ++pos) {
        const auto& v = values[pos];
        ProfilePoint p;
        p.position = pos;
        p.count = v.size();
        p.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
        double var = 0.0;
        for (double x : v) var += (x - p.mean) * (x - p.mean);
        p.stddev = std::sqrt(var / static_cast<double>(v.size()));
        out.push_back(p);
    }
    return out;
}

std::vector<ProfilePoint> memory_usage_profile(Captioner& model, const std::vector<ToySample>& samples) {
    std::vector<std::size_t> layers;
    for (std::size_t l = 0; l < model.config().layers; ++l)
        if (model.layer_uses_memory(l)) layers.push_back(l);
    if (layers.empty()) throw ContractError("memory_usage_profile: model attends no memory (m == 0 or none installed)");

    std::vector<std::vector<AttentionTrace>> traces;
    constexpr std::size_t kChunk = 64;
    for (std::size_t start = 0; start < samples.size(); start += kChunk) {
        const std::size_t end = std::min(samples.size(), start + kChunk);
        std::vector<const Tensor*> feats;
        for (std::size_t i = start; i < end; ++i) feats.push_back(&samples[i].features);
        const auto gen = model.generate(feats, model.config().max_len);
        // Causal attention makes a replay of the generated prefix identical
        // to the incremental decode, so one teacher-forced pass gives every
        // position's trace.
        std::vector<const Tensor*> kept;
        std::vector<std::vector<std::int64_t>> inputs;
        for (std::size_t i = 0; i < gen.size(); ++i) {
            if (gen[i].empty()) continue;
            std::vector<std::int64_t> in{tokens::kBos};
            in.insert(in.end(), gen[i].begin(), gen[i].end() - 1);
            inputs.push_back(std::move(in));
            kept.push_back(feats[i]);
        }
        if (inputs.empty()) continue;
        Tape tape;
        const DecodeResult res = model.forward(tape, kept, inputs, {true, false});
        for (const auto& per_layer : res.traces) {
            std::vector<AttentionTrace> picked;
            for (std::size_t l : layers) picked.push_back(per_layer[l]);
            traces.push_back(std::move(picked));
        }
    }
    return profile_from_traces(traces);
}

std::string profile_csv(const std::vector<ProfilePoint>& profile) {
    std::string out = "position,mean,std,count\n";
    for (const auto& p : profile) {
        out += std::to_string(p.position) + "," + num(p.mean) + "," + num(p.stddev) + "," + std::to_string(p.count) + "\n";
    }
    return out;
}

// ---- ablation grid ----

std::vector<AblationCell> standard_ablation_cells(const TrainConfig& base) {
    const std::size_t small_m = std::max<std::size_t>(1, base.model.memory_slots / 4);
    const std::size_t small_bank = std::max<std::size_t>(1, base.t_bank / 2);
    return {
        {"pma", {{"mode", "pma"}}},
        {"baseline", {{"mode", "baseline"}}},
        {"learnable-mem", {{"mode", "learnable-mem"}}},
        {"no-segment-emb", {{"mode", "pma"}, {"no-segment-emb", "true"}}},
        {"no-first-layer-mem", {{"mode", "pma"}, {"no-first-layer-mem", "true"}}},
        {"m=" + std::to_string(small_m), {{"mode", "pma"}, {"m", std::to_string(small_m)}}},
        {"t-bank=" + std::to_string(small_bank),
         {{"mode", "pma"},
          {"t-bank", std::to_string(small_bank)},
          {"stride", std::to_string(std::min(base.stride, small_bank))}}},
    };
}

AblationRow run_single(const TrainConfig& cfg, const std::string& cell_name, std::size_t workers) {
    const ToyDataset ds = make_toy_dataset(cfg.data_config());
    TrainState state(cfg);
    TrainOptions topts;
    topts.workers = workers;
    double last_loss = 0.0;
    topts.on_step = [&](const StepMetrics& m) { last_loss = m.loss; };
    train(state, ds.train, cfg.steps, topts);
    AblationRow row;
    row.cell = cell_name;
    row.seed = cfg.seed;
    row.config = config_pairs(cfg);
    row.val = evaluate(state.model, ds.val, cfg.beam);
    row.compositional = evaluate(state.model, ds.test_compositional, cfg.beam);
    row.final_loss = last_loss;
    row.refreshes = state.refresh_count;
    return row;
}

AblationReport run_ablation_grid(const TrainConfig& base, const std::vector<AblationCell>& cells,
                                 const AblationOptions& opts) {
    if (cells.empty()) throw ConfigError("ablation grid needs at least one cell");
    if (opts.seeds.empty()) throw ConfigError("ablation grid needs at least one seed");
    struct Job {
        std::size_t cell;
        std::uint64_t seed;
        TrainConfig cfg;
    };
    std::vector<Job> jobs;
    for (std::size_t c = 0; c < cells.size(); ++c) {
        for (std::uint64_t seed : opts.seeds) {
            TrainConfig cfg = base;
            apply_config(cfg, cells[c].overrides);
            cfg.seed = seed;
            cfg.validate();
            jobs.push_back({c, seed, cfg});
        }
    }
    AblationReport rep;
    for (const auto& c : cells) rep.cell_order.push_back(c.name);
    rep.rows.resize(jobs.size());
    const std::size_t workers = std::max<std::size_t>(1, std::min(opts.workers, jobs.size()));
    std::atomic<std::size_t> next{0};
    std::mutex report_mu;
    std::vector<std::exception_ptr> errors(workers);
    auto work = [&](std::size_t w) {
        try {
            for (std::size_t j; (j = next.fetch_add(1)) < jobs.size();) {
                rep.rows[j] = run_single(jobs[j].cfg, cells[jobs[j].cell].name, 1);
                if (opts.on_row) {
                    std::lock_guard<std::mutex> lock(report_mu);
                    opts.on_row(rep.rows[j]);
                }
            }
        } catch (...) {
            errors[w] = std::current_exception();
        }
    };
    if (workers == 1) {
        work(0);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return rep;
}

namespace {

nlohmann::ordered_json eval_json(const EvalMetrics& m) { return nlohmann::ordered_json::parse(to_json(m)); }

std::string opt_num(const std::optional<double>& v) { return v ? num(*v) : ""; }

}  // namespace

std::string AblationReport::csv() const {
    std::string out =
        "cell,seed,val_token_acc,val_exact_match,val_mem_attn_score,comp_token_acc,comp_exact_match,"
        "comp_color_acc,comp_object_acc,comp_scene_acc,final_loss,refreshes,config\n";
    for (const auto& r : rows) {
        std::string cfg;
        for (const auto& [k, v] : r.config) cfg += (cfg.empty() ? "" : ";") + k + "=" + v;
        out += r.cell + "," + std::to_string(r.seed) + "," + num(r.val.token_acc) + "," + num(r.val.exact_match) + "," +
               opt_num(r.val.mem_attn_score) + "," + num(r.compositional.token_acc) + "," +
               num(r.compositional.exact_match) + "," + num(r.compositional.slot_acc[0]) + "," +
               num(r.compositional.slot_acc[1]) + "," + num(r.compositional.slot_acc[2]) + "," + num(r.final_loss) +
               "," + std::to_string(r.refreshes) + ",\"" + cfg + "\"\n";
    }
    return out;
}

std::string AblationReport::jsonl() const {
    std::string out;
    for (const auto& r : rows) {
        nlohmann::ordered_json j;
        j["cell"] = r.cell;
        j["seed"] = r.seed;
        nlohmann::ordered_json cfg = nlohmann::ordered_json::object();
        for (const auto& [k, v] : r.config) cfg[k] = v;
        j["config"] = cfg;
        j["val"] = eval_json(r.val);
        j["compositional"] = eval_json(r.compositional);
        j["final_loss"] = r.final_loss;
        j["refreshes"] = r.refreshes;
        out += j.dump() + "\n";
    }
    return out;
}

double AblationReport::mean_exact_match(const std::string& cell, bool compositional) const {
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& r : rows) {
        if (r.cell != cell) continue;
        total += compositional ? r.compositional.exact_match : r.val.exact_match;
        ++n;
    }
    if (n == 0) throw ContractError("no rows for ablation cell '" + cell + "'");
    return total / static_cast<double>(n);
}

std::string AblationReport::summary_table() const {
    auto stats = [&](const std::string& cell, bool comp) {
        std::vector<double> v;
        for (const auto& r : rows)
            if (r.cell == cell) v.push_back(100.0 * (comp ? r.compositional.exact_match : r.val.exact_match));
        const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
        double var = 0.0;
        for (double x : v) var += (x - mean) * (x - mean);
        std::ostringstream os;
        os.setf(std::ios::fixed);
        os.precision(2);
        os << mean << " ± " << std::sqrt(var / static_cast<double>(v.size()));
        return std::pair{os.str(), v.size()};
    };
    std::ostringstream os;
    os << "| cell | seeds | val exact match (%) | compositional exact match (%) |\n";
    os << "|---|---|---|---|\n";
    for (const auto& cell : cell_order) {
        const auto [val, n] = stats(cell, false);
        const auto [comp, n2] = stats(cell, true);
        (void)n2;
        os << "| " << cell << " | " << n << " | " << val << " | " << comp << " |\n";
    }
    return os.str();
}

// ---- attention benchmark ----

std::vector<BenchRow> bench_attention(const BenchOptions& o) {
    if (o.repeats < 5) throw ConfigError("bench_attention: repeats must be at least 5");
    AttentionConfig base{o.d_model, o.heads, true, 0};
    base.validate();
    const std::size_t d = o.d_model, hd = base.head_dim();
    Rng rng(o.seed);
    auto random = [&](std::size_t r, std::size_t c, double sd) {
        Tensor t = Tensor::matrix(r, c);
        for (double& x : t.values()) x = sd * rng.normal();
        return t;
    };
    const double wsd = 1.0 / std::sqrt(static_cast<double>(d));
    const Tensor wq = random(d, d, wsd), wk = random(d, d, wsd), wv = random(d, d, wsd), wo = random(d, d, wsd);
    const Tensor bias = Tensor::vector(d, 0.0);
    const Tensor seg_m = random(1, hd, 0.02).reshaped(Shape{hd}), seg_i = random(1, hd, 0.02).reshaped(Shape{hd});

    std::vector<BenchRow> rows;
    for (std::size_t t_k : o.t_k) {
        const Tensor x = random(t_k, d, 1.0);
        for (std::size_t m : o.m) {
            std::vector<Tensor> mk, mv;
            for (std::size_t h = 0; h < o.heads && m > 0; ++h) {
                mk.push_back(random(m, hd, 1.0));
                mv.push_back(random(m, hd, 1.0));
            }
            AttentionConfig cfg = base;
            cfg.memory_slots = m;
            std::vector<double> times;
            for (std::size_t rep = 0; rep <= o.repeats; ++rep) {
                const auto start = std::chrono::steady_clock::now();
                Tape tape;
                AttentionWeights w{tape.constant(wq), tape.constant(bias), tape.constant(wk), Var{},
                                   tape.constant(wv), tape.constant(bias), tape.constant(wo), tape.constant(bias)};
                Var xv = tape.constant(x);
                std::vector<HeadMemory> mem;
                for (std::size_t h = 0; h < mk.size(); ++h) mem.push_back({tape.constant(mk[h]), tape.constant(mv[h])});
                SegmentEmbeddings seg{tape.constant(seg_m), tape.constant(seg_i)};
                const auto out = multi_head_attention(xv, xv, w, mem, m > 0 ? &seg : nullptr, cfg);
                (void)out;
                const auto stop = std::chrono::steady_clock::now();
                if (rep > 0) times.push_back(std::chrono::duration<double, std::micro>(stop - start).count());
            }
            std::sort(times.begin(), times.end());
            const std::size_t n = times.size();
            const double median = n % 2 ? times[n / 2] : 0.5 * (times[n / 2 - 1] + times[n / 2]);
            const std::size_t p95 = std::min(n - 1, static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n))) - 1);
            rows.push_back({t_k, m, median, times[p95]});
        }
    }
    return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
    std::string out = "T_k,m,median_us,p95_us\n";
    for (const auto& r : rows) {
        out += std::to_string(r.t_k) + "," + std::to_string(r.m) + "," + num(r.median_us) + "," + num(r.p95_us) + "\n";
    }
    return out;
}

}  // namespace pma
