// Command-line front end: train / eval / verify / ablate / bench / inspect.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "pma/analysis.hpp"
#include "pma/checkpoint.hpp"
#include "pma/config.hpp"
#include "pma/errors.hpp"
#include "pma/oracles.hpp"
#include "pma/trainer.hpp"

namespace fs = std::filesystem;
using namespace pma;

namespace {

enum Exit { kOk = 0, kFailed = 1, kConfig = 2, kNumeric = 3 };

const std::set<std::string> kBoolKeys = {"normalize-weights", "no-segment-emb", "no-first-layer-mem"};

struct ConfigFlags {
    std::string config_path;
    std::map<std::string, std::string> values;
    std::map<std::string, bool> switches;
    CLI::App* app = nullptr;

    void attach(CLI::App* sub) {
        app = sub;
        sub->add_option("--config", config_path, "key = value config file")->check(CLI::ExistingFile);
        for (const auto& key : config_keys()) {
            if (kBoolKeys.count(key)) {
                sub->add_flag("--" + key, switches[key], "set " + key);
            } else {
                sub->add_option("--" + key, values[key], "override " + key);
            }
        }
    }

    bool given(const std::string& key) const { return app->count("--" + key) > 0; }

    ConfigPairs overrides() const {
        ConfigPairs out;
        for (const auto& key : config_keys()) {
            if (!given(key)) continue;
            out.emplace_back(key, kBoolKeys.count(key) ? std::string("true") : values.at(key));
        }
        return out;
    }

    // File first, then flags, so flags always win.
    TrainConfig build() const {
        TrainConfig cfg;
        if (!config_path.empty()) apply_config(cfg, load_config_file(config_path));
        apply_config(cfg, overrides());
        cfg.validate();
        return cfg;
    }
};

std::size_t worker_count() {
    std::size_t n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("PMA_THREADS")) {
        try {
            const long cap = std::stol(env);
            if (cap < 1) throw ConfigError("PMA_THREADS must be at least 1");
            n = std::min(n, static_cast<std::size_t>(cap));
        } catch (const std::logic_error&) {
            throw ConfigError(std::string("PMA_THREADS is not a number: '") + env + "'");
        }
    }
    return n;
}

fs::path prepare_out(const std::string& out) {
    if (out.empty()) throw ConfigError("--out is required");
    fs::create_directories(out);
    return fs::path(out);
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << text;
}

// Wall-clock data lives apart from the primary artifacts so those stay
// byte-reproducible.
void write_meta(const fs::path& dir, const std::string& command, double seconds) {
    nlohmann::ordered_json j;
    j["command"] = command;
    j["wall_seconds"] = seconds;
    j["finished_unix"] = std::chrono::duration_cast<std::chrono::seconds>(
                             std::chrono::system_clock::now().time_since_epoch())
                             .count();
    write_text(dir / "run_meta.json", j.dump(2) + "\n");
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<std::uint64_t> parse_u64_list(const std::string& text, const char* what) {
    std::vector<std::uint64_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            std::size_t used = 0;
            out.push_back(std::stoull(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::logic_error&) {
            throw ConfigError(std::string(what) + ": '" + item + "' is not a non-negative integer");
        }
    }
    if (out.empty()) throw ConfigError(std::string(what) + " is empty");
    return out;
}

// ---- train ----

struct TrainArgs {
    ConfigFlags flags;
    std::string out, resume;
    std::int64_t log_every = 100;
};

int cmd_train(const TrainArgs& a) {
    const auto t0 = std::chrono::steady_clock::now();
    const fs::path dir = prepare_out(a.out);
    std::unique_ptr<TrainState> state;
    if (!a.resume.empty()) {
        for (const auto& [k, v] : a.flags.overrides()) {
            if (k != "steps") throw ConfigError("--resume takes the run config from the checkpoint; only --steps may be given");
        }
        state = std::make_unique<TrainState>(load_checkpoint(a.resume));
        if (a.flags.given("steps")) apply_config_value(state->config, "steps", a.flags.values.at("steps"));
    } else {
        state = std::make_unique<TrainState>(a.flags.build());
    }
    const TrainConfig& cfg = state->config;
    write_text(dir / "config.txt", echo_config(cfg));

    const ToyDataset ds = make_toy_dataset(cfg.data_config());
    std::ofstream log(dir / "metrics.jsonl", a.resume.empty() ? std::ios::trunc : std::ios::app);
    if (!log) throw std::runtime_error("cannot write metrics log");
    TrainOptions opts;
    opts.workers = worker_count();
    opts.on_step = [&](const StepMetrics& m) {
        log << to_json_line(m) << "\n";
        if (m.refresh || (a.log_every > 0 && m.step % a.log_every == 0)) {
            std::cout << "step " << m.step << " loss " << m.loss << " acc " << m.token_acc
                      << (m.refresh ? " refresh" : "") << "\n";
        }
    };
    const std::int64_t remaining = std::max<std::int64_t>(0, cfg.steps - state->step);
    try {
        train(*state, ds.train, remaining, opts);
    } catch (const NumericAbort& e) {
        log.flush();
        write_text(dir / "abort.txt", std::string(e.what()) + "\n");
        save_checkpoint(*state, (dir / "abort.pmac").string());
        throw;
    }
    log.close();
    save_checkpoint(*state, (dir / "checkpoint.pmac").string());
    std::cout << "trained to step " << state->step << ", " << state->refresh_count << " refreshes; wrote "
              << (dir / "checkpoint.pmac").string() << "\n";
    write_meta(dir, "train", seconds_since(t0));
    return kOk;
}

// ---- eval ----

struct EvalArgs {
    std::string checkpoint, out;
    std::size_t beam = 0;
};

int cmd_eval(const EvalArgs& a) {
    const auto t0 = std::chrono::steady_clock::now();
    const fs::path dir = prepare_out(a.out);
    TrainState state = load_checkpoint(a.checkpoint);
    if (a.beam > 0) state.config.beam = a.beam;
    write_text(dir / "config.txt", echo_config(state.config));
    const ToyDataset ds = make_toy_dataset(state.config.data_config());

    nlohmann::ordered_json j;
    j["step"] = state.step;
    j["beam"] = state.config.beam;
    j["train"] = nlohmann::ordered_json::parse(to_json(evaluate(state.model, ds.train, state.config.beam)));
    j["val"] = nlohmann::ordered_json::parse(to_json(evaluate(state.model, ds.val, state.config.beam)));
    j["compositional"] =
        nlohmann::ordered_json::parse(to_json(evaluate(state.model, ds.test_compositional, state.config.beam)));
    write_text(dir / "eval.json", j.dump(2) + "\n");
    std::cout << j.dump(2) << "\n";

    bool any_memory = false;
    for (std::size_t l = 0; l < state.model.config().layers; ++l) any_memory |= state.model.layer_uses_memory(l);
    if (any_memory) {
        const auto profile = memory_usage_profile(state.model, ds.val);
        write_text(dir / "memory_profile.csv", profile_csv(profile));
        std::cout << "memory profile over " << profile.size() << " positions -> " << (dir / "memory_profile.csv").string()
                  << "\n";
    } else {
        std::cout << "no memory attended; memory profile skipped\n";
    }
    write_meta(dir, "eval", seconds_since(t0));
    return kOk;
}

// ---- verify ----

struct VerifyArgs {
    ConfigFlags flags;
    std::string out;
    bool inject_fault = false;
};

int cmd_verify(const VerifyArgs& a) {
    const TrainConfig cfg = a.flags.build();
    oracle::SuiteOptions o;
    o.seed = cfg.seed;
    o.bound_trials = cfg.trials;
    o.inject_fault = a.inject_fault;
    const auto results = oracle::run_suite(o);

    bool ok = true;
    nlohmann::ordered_json report = nlohmann::ordered_json::array();
    std::cout << "trials: " << cfg.trials << "\n";
    for (const auto& r : results) {
        ok &= r.passed;
        std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << " (" << r.cases << " cases)";
        if (r.name == "lipschitz-bound") std::cout << (r.passed ? "  max_ratio ≤ 1" : "  max_ratio > 1");
        std::cout << "  " << r.detail << "\n";
        report.push_back({{"check", r.name},
                          {"passed", r.passed},
                          {"cases", r.cases},
                          {"max_error", r.max_error},
                          {"detail", r.detail}});
    }
    if (!a.out.empty()) {
        const fs::path dir = prepare_out(a.out);
        write_text(dir / "config.txt", echo_config(cfg));
        write_text(dir / "verify.json", report.dump(2) + "\n");
    }
    std::cout << (ok ? "all checks passed" : "verification FAILED") << "\n";
    return ok ? kOk : kFailed;
}

// ---- ablate ----

struct AblateArgs {
    ConfigFlags flags;
    std::string out, seeds = "1,2,3", cells;
};

int cmd_ablate(const AblateArgs& a) {
    const auto t0 = std::chrono::steady_clock::now();
    const TrainConfig base = a.flags.build();
    const fs::path dir = prepare_out(a.out);
    write_text(dir / "config.txt", echo_config(base));

    auto cells = standard_ablation_cells(base);
    if (!a.cells.empty()) {
        std::vector<AblationCell> picked;
        std::stringstream ss(a.cells);
        std::string name;
        while (std::getline(ss, name, ',')) {
            auto it = std::find_if(cells.begin(), cells.end(), [&](const AblationCell& c) { return c.name == name; });
            if (it == cells.end()) throw ConfigError("unknown ablation cell '" + name + "'");
            picked.push_back(*it);
        }
        cells = picked;
    }
    AblationOptions opts;
    opts.seeds = parse_u64_list(a.seeds, "--seeds");
    opts.workers = worker_count();
    opts.on_row = [](const AblationRow& r) {
        std::cout << r.cell << " seed " << r.seed << ": val exact " << r.val.exact_match << ", compositional exact "
                  << r.compositional.exact_match << "\n";
    };
    const AblationReport rep = run_ablation_grid(base, cells, opts);
    write_text(dir / "ablation.csv", rep.csv());
    write_text(dir / "ablation.jsonl", rep.jsonl());
    write_text(dir / "summary.md", rep.summary_table());
    std::cout << rep.summary_table();
    write_meta(dir, "ablate", seconds_since(t0));
    return kOk;
}

// ---- bench ----

struct BenchArgs {
    ConfigFlags flags;
    std::string out, t_k = "8,16,32,64", slots = "0,16,32,64,128";
    std::size_t repeats = 21;
};

int cmd_bench(const BenchArgs& a) {
    const auto t0 = std::chrono::steady_clock::now();
    const TrainConfig cfg = a.flags.build();
    const fs::path dir = prepare_out(a.out);
    write_text(dir / "config.txt", echo_config(cfg));
    BenchOptions o;
    o.t_k.clear();
    o.m.clear();
    for (auto v : parse_u64_list(a.t_k, "--tk")) o.t_k.push_back(v);
    for (auto v : parse_u64_list(a.slots, "--slots")) o.m.push_back(v);
    o.d_model = cfg.model.d_model;
    o.heads = cfg.model.heads;
    o.repeats = a.repeats;
    o.seed = cfg.seed;
    const auto rows = bench_attention(o);
    const std::string csv = bench_csv(rows);
    // Timings are measurements, not reproducible artifacts.
    write_text(dir / "bench.csv", csv);
    std::cout << csv;
    write_meta(dir, "bench", seconds_since(t0));
    return kOk;
}

// ---- inspect ----

int cmd_inspect(const std::string& path) {
    const CheckpointSummary s = inspect_checkpoint_file(path);
    std::cout << "checkpoint: " << path << "\nformat version: " << s.version << "\n";
    if (!s.digest_ok) {
        std::cout << "digest: MISMATCH (payload corrupted)\n";
        return kFailed;
    }
    std::cout << "digest: ok\n";
    const TrainState state = load_checkpoint(path);
    std::cout << "step: " << state.step << "\nrefreshes: " << state.refresh_count << "\n\n[config]\n"
              << echo_config(state.config) << "\n";
    const ModelConfig& mc = state.model.config();
    const std::size_t counted = state.model.params().scalar_count();
    const std::size_t closed = parameter_count(mc);
    std::cout << "[parameters]\ntensors: " << state.model.params().size() << "\nscalars: " << counted
              << "\nclosed form: " << closed << (counted == closed ? " (match)" : " (MISMATCH)") << "\n\n[prototypes]\n";
    const auto& mems = state.model.memories();
    bool any = false;
    for (std::size_t l = 0; l < mems.size(); ++l) {
        for (std::size_t h = 0; h < mems[l].size(); ++h) {
            any = true;
            const auto& mem = mems[l][h];
            std::vector<double> norms;
            for (std::size_t i = 0; i < mem.keys.rows(); ++i) {
                const auto r = mem.keys.row(i);
                norms.push_back(std::sqrt(std::inner_product(r.begin(), r.end(), r.begin(), 0.0)));
            }
            std::sort(norms.begin(), norms.end());
            std::cout << "layer " << l << " head " << h << ": m=" << mem.slots() << " built_at_step=" << mem.built_at_step
                      << " k=" << mem.k_used << " key_norm min/median/max=" << norms.front() << "/"
                      << norms[norms.size() / 2] << "/" << norms.back() << "\n";
        }
    }
    if (!any) std::cout << "absent (no refresh has happened yet)\n";
    return counted == closed ? kOk : kFailed;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Prototype-memory captioning toolkit"};
    app.require_subcommand(1);

    TrainArgs train;
    auto* t = app.add_subcommand("train", "train a captioner and write metrics + checkpoint");
    train.flags.attach(t);
    t->add_option("--out", train.out, "output directory")->required();
    t->add_option("--resume", train.resume, "continue from a checkpoint")->check(CLI::ExistingFile);
    t->add_option("--log-every", train.log_every, "progress line interval (steps)");

    EvalArgs eval;
    auto* e = app.add_subcommand("eval", "evaluate a checkpoint on train, val and the held-out-pair split");
    e->add_option("--checkpoint", eval.checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
    e->add_option("--out", eval.out, "output directory")->required();
    e->add_option("--beam", eval.beam, "beam width (default: from checkpoint)");

    VerifyArgs verify;
    auto* v = app.add_subcommand("verify", "run the Lipschitz bound check and the oracle-equivalence suite");
    verify.flags.attach(v);
    v->add_option("--out", verify.out, "optional output directory for verify.json");
    v->add_flag("--inject-fault", verify.inject_fault, "perturb the prototype value weights (self-test)");

    AblateArgs ablate;
    auto* ab = app.add_subcommand("ablate", "train the ablation grid and emit CSV/JSON and a summary table");
    ablate.flags.attach(ab);
    ab->add_option("--out", ablate.out, "output directory")->required();
    ab->add_option("--seeds", ablate.seeds, "comma-separated training seeds");
    ab->add_option("--cells", ablate.cells, "comma-separated subset of cells");

    BenchArgs bench;
    auto* b = app.add_subcommand("bench", "time plain vs memory-augmented attention");
    bench.flags.attach(b);
    b->add_option("--out", bench.out, "output directory")->required();
    b->add_option("--tk", bench.t_k, "comma-separated key lengths");
    b->add_option("--slots", bench.slots, "comma-separated memory sizes");
    b->add_option("--repeats", bench.repeats, "timed repeats per cell (>= 5)");

    std::string inspect_path;
    auto* in = app.add_subcommand("inspect", "print a checkpoint summary and check its digest");
    in->add_option("checkpoint", inspect_path, "checkpoint file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? kOk : kConfig;
    }

    try {
        if (*t) return cmd_train(train);
        if (*e) return cmd_eval(eval);
        if (*v) return cmd_verify(verify);
        if (*ab) return cmd_ablate(ablate);
        if (*b) return cmd_bench(bench);
        if (*in) return cmd_inspect(inspect_path);
    } catch (const ConfigError& err) {
        std::cerr << "config error: " << err.what() << "\n";
        return kConfig;
    } catch (const NumericAbort& err) {
        std::cerr << "numeric abort: " << err.what() << "\n";
        return kNumeric;
    } catch (const LoadError& err) {
        std::cerr << "load error: " << err.what() << "\n";
        return kFailed;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return kFailed;
    }
    return kOk;
}
