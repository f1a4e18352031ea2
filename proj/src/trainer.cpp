#include "pma/trainer.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "pma/errors.hpp"
#include "pma/tokens.hpp"

namespace pma {

namespace {

std::size_t argmax_row(const Tensor& t, std::size_t r) {
    const auto row = t.row(r);
    std::size_t best = 0;
    for (std::size_t j = 1; j < row.size(); ++j)
        if (row[j] > row[best]) best = j;
    return best;
}

struct Batch {
    std::vector<const Tensor*> features;
    std::vector<std::vector<std::int64_t>> inputs;
    std::vector<std::int64_t> targets;
};

Batch make_batch(const std::vector<ToySample>& data, std::span<const std::size_t> idx) {
    Batch b;
    for (std::size_t i : idx) {
        const auto& s = data[i];
        b.features.push_back(&s.features);
        b.inputs.push_back(decoder_inputs(s.caption));
        const auto t = decoder_targets(s.caption);
        b.targets.insert(b.targets.end(), t.begin(), t.end());
    }
    return b;
}

// Correct and counted (non-pad) teacher-forced predictions.
std::pair<std::size_t, std::size_t> count_correct(const Tensor& logits, std::span<const std::int64_t> targets) {
    std::size_t correct = 0, counted = 0;
    for (std::size_t r = 0; r < targets.size(); ++r) {
        if (targets[r] == tokens::kPad) continue;
        ++counted;
        if (static_cast<std::int64_t>(argmax_row(logits, r)) == targets[r]) ++correct;
    }
    return {correct, counted};
}

std::string nonfinite_report(const ParameterStore& params) {
    std::string out;
    for (const auto& p : params) {
        if (!p->grad.all_finite()) out += (out.empty() ? "" : ", ") + p->name;
    }
    return out.empty() ? "none" : out;
}

}  // namespace

std::string to_json_line(const StepMetrics& m) {
    nlohmann::ordered_json j;
    j["step"] = m.step;
    j["loss"] = m.loss;
    j["lr"] = m.lr;
    j["token_acc"] = m.token_acc;
    j["mem_attn_score"] = m.mem_attn_score ? nlohmann::ordered_json(*m.mem_attn_score) : nlohmann::ordered_json();
    j["refresh"] = m.refresh;
    return j.dump();
}

TrainState::TrainState(const TrainConfig& cfg)
    : config(cfg),
      model((cfg.validate(), cfg.model_config()), derive_seed(cfg.seed, 0x6d6f64656cULL)),
      optimizer(model.params()),
      rng(derive_seed(cfg.seed, 0x62617463ULL)) {
    reset_banks();
}

void TrainState::reset_banks() {
    banks.clear();
    if (!config.uses_banks()) return;
    const ModelConfig& mc = model.config();
    banks.resize(mc.layers);
    for (std::size_t l = 0; l < mc.layers; ++l) {
        if (!mc.layer_has_memory(l)) continue;
        for (std::size_t h = 0; h < mc.heads; ++h) banks[l].emplace_back(config.t_bank, config.stride);
    }
}

std::vector<std::int64_t> decoder_inputs(const std::vector<std::int64_t>& caption) {
    if (caption.size() < 2) throw ContractError("caption needs at least <bos> and one more token");
    return {caption.begin(), caption.end() - 1};
}

std::vector<std::int64_t> decoder_targets(const std::vector<std::int64_t>& caption) {
    if (caption.size() < 2) throw ContractError("caption needs at least <bos> and one more token");
    return {caption.begin() + 1, caption.end()};
}

std::optional<double> mean_memory_score(const Captioner& model, const DecodeResult& res) {
    std::vector<std::size_t> layers;
    for (std::size_t l = 0; l < model.config().layers; ++l)
        if (model.layer_uses_memory(l)) layers.push_back(l);
    if (layers.empty() || res.traces.empty()) return std::nullopt;
    double total = 0.0;
    std::size_t count = 0;
    std::vector<AttentionTrace> picked;
    for (const auto& sample : res.traces) {
        picked.clear();
        for (std::size_t l : layers) picked.push_back(sample[l]);
        for (std::size_t pos = 0; pos < picked.front().weights.rows(); ++pos) {
            total += memory_attention_score(picked, pos).mean;
            ++count;
        }
    }
    if (count == 0) return std::nullopt;
    return total / static_cast<double>(count);
}

void refresh_memories(TrainState& state, std::size_t workers) {
    const ModelConfig& mc = state.model.config();
    std::vector<std::vector<PrototypeMemory>> mems(mc.layers);
    std::vector<std::pair<std::size_t, std::size_t>> jobs;
    for (std::size_t l = 0; l < state.banks.size(); ++l) {
        if (state.banks[l].empty()) continue;
        mems[l].resize(state.banks[l].size());
        for (std::size_t h = 0; h < state.banks[l].size(); ++h) jobs.emplace_back(l, h);
    }
    auto run = [&](std::size_t j) {
        const auto [l, h] = jobs[j];
        mems[l][h] = compute_prototypes(state.banks[l][h], state.config.proto,
                                        derive_seed(state.config.seed, l, h, state.refresh_count), state.step);
    };
    workers = std::max<std::size_t>(1, std::min(workers, jobs.size()));
    if (workers == 1) {
        for (std::size_t j = 0; j < jobs.size(); ++j) run(j);
    } else {
        // Each job writes its own slot, so the result does not depend on scheduling.
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(workers);
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                try {
                    for (std::size_t j = w; j < jobs.size(); j += workers) run(j);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
        for (auto& t : pool) t.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }
    state.model.install_memories(std::move(mems));
    ++state.refresh_count;
}

StepMetrics train_step(TrainState& state, const std::vector<ToySample>& data, const TrainOptions& opts) {
    if (data.empty()) throw ContractError("train_step: empty training set");
    const std::int64_t step = state.step + 1;
    std::vector<std::size_t> idx(state.config.batch);
    for (auto& i : idx) i = static_cast<std::size_t>(state.rng.below(data.size()));
    const Batch batch = make_batch(data, idx);

    Captioner& model = state.model;
    const bool want_score = [&] {
        for (std::size_t l = 0; l < model.config().layers; ++l)
            if (model.layer_uses_memory(l)) return true;
        return false;
    }();
    Tape tape;
    DecodeResult res = model.forward(tape, batch.features, batch.inputs, {want_score, !state.banks.empty()});

    StepMetrics m;
    m.step = step;
    m.lr = lr_at(step, state.config.schedule);
    m.mem_attn_score = want_score ? mean_memory_score(model, res) : std::nullopt;

    // Detached K/V go into the banks; prototypes built here serve the next step.
    bool due = false;
    for (std::size_t l = 0; l < state.banks.size(); ++l) {
        for (std::size_t h = 0; h < state.banks[l].size(); ++h) {
            const auto& act = res.activations[l][h];
            due = state.banks[l][h].push_batch(step, act.keys, act.values) || due;
        }
    }
    state.step = step;
    if (due) {
        refresh_memories(state, opts.workers);
        for (auto& layer : state.banks)
            for (auto& bank : layer) bank.slide(state.config.stride);
        m.refresh = true;
    }

    Var loss = cross_entropy(res.logits, batch.targets, tokens::kPad);
    m.loss = tape.value(loss).data()[0];
    const auto [correct, counted] = count_correct(tape.value(res.logits), batch.targets);
    m.token_acc = counted ? static_cast<double>(correct) / static_cast<double>(counted) : 0.0;
    if (!std::isfinite(m.loss)) {
        throw NumericAbort("non-finite loss " + std::to_string(m.loss) + " at step " + std::to_string(step) +
                           " (lr " + std::to_string(m.lr) + ")");
    }
    model.params().zero_grad();
    tape.backward(loss);
    for (const auto& p : model.params()) {
        if (!p->grad.all_finite()) {
            throw NumericAbort("non-finite gradient at step " + std::to_string(step) +
                               " in: " + nonfinite_report(model.params()));
        }
    }
    state.optimizer.step(model.params(), m.lr);
    if (opts.on_step) opts.on_step(m);
    return m;
}

std::vector<StepMetrics> train(TrainState& state, const std::vector<ToySample>& data, std::int64_t steps,
                               const TrainOptions& opts) {
    std::vector<StepMetrics> log;
    for (std::int64_t i = 0; i < steps; ++i) log.push_back(train_step(state, data, opts));
    return log;
}

std::string to_json(const EvalMetrics& m) {
    nlohmann::ordered_json j;
    j["samples"] = m.samples;
    j["token_acc"] = m.token_acc;
    j["exact_match"] = m.exact_match;
    j["slot_acc"] = {{"color", m.slot_acc[0]}, {"object", m.slot_acc[1]}, {"scene", m.slot_acc[2]}};
    j["mem_attn_score"] = m.mem_attn_score ? nlohmann::ordered_json(*m.mem_attn_score) : nlohmann::ordered_json();
    return j.dump();
}

EvalMetrics evaluate(Captioner& model, const std::vector<ToySample>& samples, std::size_t beam) {
    EvalMetrics out;
    out.samples = samples.size();
    if (samples.empty()) return out;
    constexpr std::size_t kChunk = 64;
    std::size_t correct = 0, counted = 0, exact = 0;
    std::array<std::size_t, 3> slot{};
    double score_total = 0.0;
    std::size_t score_weight = 0;
    // Caption layout: <bos> color object in scene <eos>; generated tokens drop <bos>.
    constexpr std::array<std::size_t, 3> slot_pos{0, 1, 3};
    for (std::size_t start = 0; start < samples.size(); start += kChunk) {
        const std::size_t end = std::min(samples.size(), start + kChunk);
        std::vector<std::size_t> idx(end - start);
        std::iota(idx.begin(), idx.end(), start);
        const Batch batch = make_batch(samples, idx);
        Tape tape;
        const DecodeResult res = model.forward(tape, batch.features, batch.inputs, {true, false});
        const auto [c, n] = count_correct(tape.value(res.logits), batch.targets);
        correct += c;
        counted += n;
        if (auto s = mean_memory_score(model, res)) {
            score_total += *s * static_cast<double>(idx.size());
            score_weight += idx.size();
        }
        const auto gen = model.generate(batch.features, model.config().max_len,
                                        beam > 1 ? DecodeMode::Beam : DecodeMode::Greedy, beam);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const auto want = decoder_targets(samples[idx[i]].caption);
            if (gen[i] == want) ++exact;
            for (std::size_t k = 0; k < 3; ++k) {
                const std::size_t p = slot_pos[k];
                if (p < gen[i].size() && p < want.size() && gen[i][p] == want[p]) ++slot[k];
            }
        }
    }
    const double n = static_cast<double>(samples.size());
    out.token_acc = counted ? static_cast<double>(correct) / static_cast<double>(counted) : 0.0;
    out.exact_match = static_cast<double>(exact) / n;
    for (std::size_t k = 0; k < 3; ++k) out.slot_acc[k] = static_cast<double>(slot[k]) / n;
    if (score_weight) out.mem_attn_score = score_total / static_cast<double>(score_weight);
    return out;
}

}  // namespace pma
