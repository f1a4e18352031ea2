#include "pma/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "pma/errors.hpp"

namespace pma {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_integer(const std::string& key, const std::string& v) {
    T out{};
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) {
        throw ConfigError("'" + key + "' expects an integer, got '" + v + "'");
    }
    return out;
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used == v.size()) return d;
    } catch (const std::exception&) {
    }
    throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("'" + key + "' expects true or false, got '" + v + "'");
}

std::string fmt_double(double d) {
    std::ostringstream os;
    os.precision(17);
    os << d;
    return os.str();
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

struct Field {
    const char* key;
    std::function<void(TrainConfig&, const std::string&, const std::string&)> set;
    std::function<std::string(const TrainConfig&)> get;
};

#define PMA_SIZE(name, member)                                                                               \
    Field {                                                                                                  \
        name, [](TrainConfig& c, const std::string& k, const std::string& v) {                              \
            c.member = parse_integer<std::size_t>(k, v);                                                     \
        },                                                                                                   \
            [](const TrainConfig& c) { return std::to_string(c.member); }                                   \
    }
#define PMA_INT(name, member)                                                                                \
    Field {                                                                                                  \
        name, [](TrainConfig& c, const std::string& k, const std::string& v) {                              \
            c.member = parse_integer<std::int64_t>(k, v);                                                    \
        },                                                                                                   \
            [](const TrainConfig& c) { return std::to_string(c.member); }                                   \
    }
#define PMA_REAL(name, member)                                                                               \
    Field {                                                                                                  \
        name, [](TrainConfig& c, const std::string& k, const std::string& v) { c.member = parse_double(k, v); }, \
            [](const TrainConfig& c) { return fmt_double(c.member); }                                        \
    }

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        PMA_INT("seed", seed),
        PMA_INT("steps", steps),
        PMA_SIZE("batch", batch),
        {"mode",
         [](TrainConfig& c, const std::string&, const std::string& v) { c.model.memory_mode = memory_mode_from_string(v); },
         [](const TrainConfig& c) { return to_string(c.model.memory_mode); }},
        {"m",
         [](TrainConfig& c, const std::string& k, const std::string& v) {
             c.model.memory_slots = c.proto.slots = parse_integer<std::size_t>(k, v);
         },
         [](const TrainConfig& c) { return std::to_string(c.model.memory_slots); }},
        PMA_SIZE("t-bank", t_bank),
        PMA_SIZE("stride", stride),
        PMA_SIZE("topk", proto.topk),
        {"normalize-weights",
         [](TrainConfig& c, const std::string& k, const std::string& v) { c.proto.normalize = parse_bool(k, v); },
         [](const TrainConfig& c) { return fmt_bool(c.proto.normalize); }},
        {"no-segment-emb",
         [](TrainConfig& c, const std::string& k, const std::string& v) {
             c.model.use_segment_embeddings = !parse_bool(k, v);
         },
         [](const TrainConfig& c) { return fmt_bool(!c.model.use_segment_embeddings); }},
        {"no-first-layer-mem",
         [](TrainConfig& c, const std::string& k, const std::string& v) {
             c.model.memory_in_first_layer = !parse_bool(k, v);
         },
         [](const TrainConfig& c) { return fmt_bool(!c.model.memory_in_first_layer); }},
        PMA_SIZE("kmeans-iters", proto.max_iters),
        PMA_REAL("kmeans-tol", proto.tol),
        PMA_SIZE("beam", beam),
        PMA_SIZE("trials", trials),
        PMA_SIZE("layers", model.layers),
        PMA_SIZE("d-model", model.d_model),
        PMA_SIZE("heads", model.heads),
        PMA_SIZE("ffn-dim", model.ffn_dim),
        PMA_SIZE("max-len", model.max_len),
        PMA_REAL("ln-eps", model.ln_eps),
        PMA_INT("warmup", schedule.warmup_steps),
        PMA_REAL("peak-lr", schedule.peak_lr),
        PMA_INT("constant-until", schedule.constant_until),
        PMA_INT("decay-until", schedule.decay_until),
        PMA_REAL("floor-lr", schedule.floor_lr),
        {"decay",
         [](TrainConfig& c, const std::string& k, const std::string& v) {
             if (v == "geometric") c.schedule.decay = DecayShape::Geometric;
             else if (v == "linear") c.schedule.decay = DecayShape::Linear;
             else throw ConfigError("'" + k + "' expects geometric or linear, got '" + v + "'");
         },
         [](const TrainConfig& c) {
             return std::string(c.schedule.decay == DecayShape::Linear ? "linear" : "geometric");
         }},
        PMA_INT("data-seed", data.seed),
        PMA_SIZE("n-colors", data.n_colors),
        PMA_SIZE("n-objects", data.n_objects),
        PMA_SIZE("n-scenes", data.n_scenes),
        PMA_SIZE("n-train", data.n_train),
        PMA_SIZE("n-val", data.n_val),
        PMA_SIZE("n-test", data.n_test),
        PMA_SIZE("d-feat", data.d_feat),
        PMA_REAL("feature-noise", data.feature_noise),
        {"holdout", [](TrainConfig& c, const std::string&, const std::string& v) { c.holdout = v; },
         [](const TrainConfig& c) { return c.holdout; }},
    };
    return table;
}

#undef PMA_SIZE
#undef PMA_INT
#undef PMA_REAL

}  // namespace

ModelConfig TrainConfig::model_config() const {
    ModelConfig m = model;
    m.vocab = 4 + data.n_colors + data.n_objects + data.n_scenes;
    m.d_feat = data.d_feat;
    return m;
}

DatasetConfig TrainConfig::data_config() const {
    DatasetConfig d = data;
    const Vocabulary vocab(d.n_colors, d.n_objects, d.n_scenes);
    d.holdout_pairs = parse_holdout_pairs(holdout, vocab, d.n_colors, d.n_objects);
    return d;
}

bool TrainConfig::uses_banks() const {
    const ModelConfig m = model_config();
    if (m.memory_mode != MemoryMode::Prototype || m.memory_slots == 0) return false;
    for (std::size_t l = 0; l < m.layers; ++l)
        if (m.layer_has_memory(l)) return true;
    return false;
}

void TrainConfig::validate() const {
    model_config().validate();
    schedule.validate();
    if (batch == 0) throw ConfigError("batch must be positive");
    if (steps < 0) throw ConfigError("steps must be non-negative");
    if (beam == 0) throw ConfigError("beam must be at least 1");
    if (uses_banks()) {
        if (t_bank == 0) throw ConfigError("t-bank must be positive");
        if (stride == 0 || stride > t_bank) throw ConfigError("stride must lie in [1, t-bank]");
        if (proto.topk == 0) throw ConfigError("topk must be positive");
        if (proto.slots != model.memory_slots) throw ConfigError("prototype slots disagree with m");
    }
    data_config();
}

ConfigPairs parse_config_text(const std::string& text) {
    ConfigPairs out;
    std::istringstream in(text);
    std::string line;
    for (std::size_t no = 1; std::getline(in, line); ++no) {
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(no) + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        if (key.rfind("--", 0) == 0) key.erase(0, 2);
        if (key.empty()) throw ConfigError("line " + std::to_string(no) + ": empty key");
        out.emplace_back(key, trim(line.substr(eq + 1)));
    }
    return out;
}

ConfigPairs load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

void apply_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
    for (const auto& f : fields()) {
        if (key == f.key) {
            f.set(cfg, key, value);
            return;
        }
    }
    throw ConfigError("unknown config key '" + key + "'");
}

void apply_config(TrainConfig& cfg, const ConfigPairs& pairs) {
    for (const auto& [k, v] : pairs) apply_config_value(cfg, k, v);
}

ConfigPairs config_pairs(const TrainConfig& cfg) {
    ConfigPairs out;
    for (const auto& f : fields()) out.emplace_back(f.key, f.get(cfg));
    return out;
}

std::string echo_config(const TrainConfig& cfg) {
    std::string out;
    for (const auto& [k, v] : config_pairs(cfg)) out += k + " = " + v + "\n";
    return out;
}

std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    for (const auto& f : fields()) keys.emplace_back(f.key);
    return keys;
}

}  // namespace pma
