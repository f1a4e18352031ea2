#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
    int code = -1;
    std::string output;
};

Run run(const std::string& args) {
    const std::string cmd = std::string(PMA_CLI_PATH) + " " + args + " 2>&1";
    Run r;
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    std::array<char, 4096> buf;
    while (std::size_t n = fread(buf.data(), 1, buf.size(), pipe)) r.output.append(buf.data(), n);
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::size_t count_lines(const std::string& s) {
    std::size_t n = 0;
    for (char c : s) n += c == '\n';
    return n;
}

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("pma_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

const char* kToy =
    "# small model for quick runs\n"
    "layers = 1\nd-model = 16\nheads = 2\nffn-dim = 32\n"
    "m = 4\nt-bank = 4\nstride = 2\ntopk = 4\nbatch = 8\n"
    "n-train = 48\nn-val = 12\nn-test = 12\nd-feat = 8\n"
    "warmup = 4\nconstant-until = 10\ndecay-until = 20\npeak-lr = 3e-3\nfloor-lr = 1e-4\n";

std::string toy_config(const fs::path& dir) {
    const auto p = dir / "toy.cfg";
    std::ofstream(p) << kToy;
    return p.string();
}

}  // namespace

TEST_CASE("verify") {
    auto ok = run("verify --trials 500");
    CHECK(ok.code == 0);
    CHECK(ok.output.find("trials: 500") != std::string::npos);
    CHECK(ok.output.find("max_ratio ≤ 1") != std::string::npos);
    CHECK(ok.output.find("FAIL") == std::string::npos);

    auto bad = run("verify --trials 200 --inject-fault");
    CHECK(bad.code == 1);
    CHECK(bad.output.find("FAIL") != std::string::npos);
}

TEST_CASE("train, rerun, inspect and eval") {
    const auto dir = scratch("train");
    const auto cfg = toy_config(dir);
    const auto a = dir / "a", b = dir / "b";
    auto r1 = run("train --config " + cfg + " --steps 12 --seed 7 --out " + a.string());
    REQUIRE_MESSAGE(r1.code == 0, r1.output);
    auto r2 = run("train --config " + cfg + " --steps 12 --seed 7 --out " + b.string());
    REQUIRE(r2.code == 0);

    const std::string metrics = slurp(a / "metrics.jsonl");
    CHECK(count_lines(metrics) == 12);
    CHECK(metrics == slurp(b / "metrics.jsonl"));
    CHECK(slurp(a / "checkpoint.pmac") == slurp(b / "checkpoint.pmac"));
    const std::string echoed = slurp(a / "config.txt");
    CHECK(echoed.find("seed = 7") != std::string::npos);
    CHECK(echoed.find("steps = 12") != std::string::npos);
    CHECK(echoed.find("m = 4") != std::string::npos);

    std::size_t refreshes = 0;
    std::stringstream ss(metrics);
    for (std::string line; std::getline(ss, line);) refreshes += nlohmann::json::parse(line)["refresh"].get<bool>();
    CHECK(refreshes > 0);

    auto insp = run("inspect " + (a / "checkpoint.pmac").string());
    CHECK(insp.code == 0);
    CHECK(insp.output.find("digest") != std::string::npos);

    auto ev = run("eval --checkpoint " + (a / "checkpoint.pmac").string() + " --out " + (dir / "ev").string());
    CHECK_MESSAGE(ev.code == 0, ev.output);
    auto j = nlohmann::json::parse(slurp(dir / "ev" / "eval.json"));
    CHECK(j.contains("val"));
    CHECK(j.contains("compositional"));
    CHECK(fs::exists(dir / "ev" / "memory_profile.csv"));

    // tamper with one payload byte
    std::string bytes = slurp(a / "checkpoint.pmac");
    bytes[bytes.size() - 50] ^= 0x10;
    const auto bad = dir / "bad.pmac";
    std::ofstream(bad, std::ios::binary) << bytes;
    CHECK(run("inspect " + bad.string()).code == 1);
    CHECK(run("eval --checkpoint " + bad.string() + " --out " + (dir / "ev2").string()).code == 1);
}

TEST_CASE("fresh checkpoint lists prototypes as absent") {
    const auto dir = scratch("fresh");
    const auto cfg = toy_config(dir);
    REQUIRE(run("train --config " + cfg + " --steps 2 --out " + (dir / "o").string()).code == 0);
    auto insp = run("inspect " + (dir / "o" / "checkpoint.pmac").string());
    CHECK(insp.code == 0);
    CHECK(insp.output.find("absent") != std::string::npos);
}

TEST_CASE("m 0 never refreshes") {
    const auto dir = scratch("m0");
    const auto cfg = toy_config(dir);
    REQUIRE(run("train --config " + cfg + " --steps 10 --m 0 --out " + (dir / "o").string()).code == 0);
    const std::string metrics = slurp(dir / "o" / "metrics.jsonl");
    CHECK(count_lines(metrics) == 10);
    CHECK(metrics.find("\"refresh\":true") == std::string::npos);
}

TEST_CASE("flags override the config file") {
    const auto dir = scratch("override");
    const auto cfg = toy_config(dir);
    REQUIRE(run("train --config " + cfg + " --steps 3 --batch 4 --out " + (dir / "o").string()).code == 0);
    const std::string echoed = slurp(dir / "o" / "config.txt");
    CHECK(echoed.find("batch = 4") != std::string::npos);
    CHECK(echoed.find("d-model = 16") != std::string::npos);
}

TEST_CASE("exit codes") {
    const auto dir = scratch("codes");
    const auto cfg = toy_config(dir);
    CHECK(run("train --config " + cfg + " --stride 9 --out " + (dir / "a").string()).code == 2);
    CHECK(run("train --config " + cfg + " --mode sideways --out " + (dir / "b").string()).code == 2);
    const auto bad_cfg = dir / "bad.cfg";
    std::ofstream(bad_cfg) << "no-such-key = 3\n";
    CHECK(run("train --config " + bad_cfg.string() + " --out " + (dir / "c").string()).code == 2);

    auto nan = run("train --config " + cfg + " --steps 30 --peak-lr 1e300 --floor-lr 1e299 --out " + (dir / "d").string());
    CHECK(nan.code == 3);
    CHECK(fs::exists(dir / "d" / "abort.txt"));

    CHECK(run("inspect " + (dir / "missing.pmac").string()).code != 0);
}

TEST_CASE("bench and ablate write their artifacts") {
    const auto dir = scratch("reports");
    const auto cfg = toy_config(dir);
    auto b = run("bench --tk 4,8 --slots 0,8 --repeats 5 --out " + (dir / "bench").string());
    CHECK_MESSAGE(b.code == 0, b.output);
    CHECK(count_lines(slurp(dir / "bench" / "bench.csv")) == 5);

    auto a = run("ablate --config " + cfg + " --steps 6 --seeds 1,2 --cells pma,baseline --out " + (dir / "abl").string());
    CHECK_MESSAGE(a.code == 0, a.output);
    CHECK(count_lines(slurp(dir / "abl" / "ablation.csv")) == 5);
    CHECK(count_lines(slurp(dir / "abl" / "ablation.jsonl")) == 4);
    CHECK(fs::exists(dir / "abl" / "summary.md"));
}
