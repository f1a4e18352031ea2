#include "pma/dataset.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include "pma/errors.hpp"
#include "pma/rng.hpp"
#include "pma/tokens.hpp"

namespace pma {

namespace {

const char* const kColors[] = {"red", "blue", "green", "yellow", "white", "black", "purple", "orange"};
const char* const kObjects[] = {"dog", "cat", "car", "bike", "bird", "horse", "boat", "train"};
const char* const kScenes[] = {"park", "street", "beach", "field", "kitchen", "forest"};

template <std::size_t N>
std::string pick_name(const char* const (&names)[N], const char* fallback, std::size_t i) {
    return i < N ? std::string(names[i]) : std::string(fallback) + std::to_string(i);
}

}  // namespace

Vocabulary::Vocabulary(std::size_t n_colors, std::size_t n_objects, std::size_t n_scenes)
    : n_colors_(n_colors), n_objects_(n_objects), n_scenes_(n_scenes) {
    words_ = {"<pad>", "<bos>", "<eos>", "in"};
    for (std::size_t i = 0; i < n_colors; ++i) words_.push_back(pick_name(kColors, "color", i));
    for (std::size_t i = 0; i < n_objects; ++i) words_.push_back(pick_name(kObjects, "object", i));
    for (std::size_t i = 0; i < n_scenes; ++i) words_.push_back(pick_name(kScenes, "scene", i));
}

std::int64_t Vocabulary::find(const std::string& w) const {
    auto it = std::find(words_.begin(), words_.end(), w);
    return it == words_.end() ? -1 : static_cast<std::int64_t>(it - words_.begin());
}

std::string Vocabulary::render(const std::vector<std::int64_t>& ids) const {
    std::string out;
    for (std::int64_t id : ids) {
        if (!out.empty()) out += ' ';
        out += (id >= 0 && static_cast<std::size_t>(id) < words_.size()) ? words_[static_cast<std::size_t>(id)] : "?";
    }
    return out;
}

ToyDataset make_toy_dataset(const DatasetConfig& cfg) {
    if (cfg.n_colors == 0 || cfg.n_objects == 0 || cfg.n_scenes == 0) {
        throw ConfigError("dataset needs at least one color, object and scene");
    }
    if (cfg.d_feat == 0) throw ConfigError("d_feat must be positive");
    if (cfg.feature_noise < 0.0) throw ConfigError("feature noise must be non-negative");

    std::set<std::pair<std::size_t, std::size_t>> held(cfg.holdout_pairs.begin(), cfg.holdout_pairs.end());
    for (const auto& [c, o] : held) {
        if (c >= cfg.n_colors || o >= cfg.n_objects) {
            throw ConfigError("holdout pair (" + std::to_string(c) + ", " + std::to_string(o) + ") outside the factor grid");
        }
    }
    std::vector<std::pair<std::size_t, std::size_t>> allowed;
    for (std::size_t c = 0; c < cfg.n_colors; ++c)
        for (std::size_t o = 0; o < cfg.n_objects; ++o)
            if (!held.count({c, o})) allowed.emplace_back(c, o);
    for (std::size_t c = 0; c < cfg.n_colors; ++c) {
        if (std::none_of(allowed.begin(), allowed.end(), [c](const auto& p) { return p.first == c; })) {
            throw ConfigError("holdout pairs remove color " + std::to_string(c) + " from training");
        }
    }
    for (std::size_t o = 0; o < cfg.n_objects; ++o) {
        if (std::none_of(allowed.begin(), allowed.end(), [o](const auto& p) { return p.second == o; })) {
            throw ConfigError("holdout pairs remove object " + std::to_string(o) + " from training");
        }
    }

    ToyDataset ds{cfg, Vocabulary(cfg.n_colors, cfg.n_objects, cfg.n_scenes), {}, {}, {}};
    Rng rng(cfg.seed);

    // Fixed per-factor embedding rows, drawn once.
    auto table = [&](std::size_t n) {
        Tensor t = Tensor::matrix(n, cfg.d_feat);
        for (double& v : t.values()) v = rng.normal();
        return t;
    };
    const Tensor colors = table(cfg.n_colors);
    const Tensor objects = table(cfg.n_objects);
    const Tensor scenes = table(cfg.n_scenes);

    auto make = [&](std::size_t c, std::size_t o, std::size_t s) {
        ToySample sample;
        sample.factors = {c, o, s};
        sample.caption = {tokens::kBos, ds.vocab.color(c), ds.vocab.object(o), ds.vocab.in_token(), ds.vocab.scene(s),
                          tokens::kEos};
        const Tensor* src[3] = {&colors, &objects, &scenes};
        const std::size_t idx[3] = {c, o, s};
        std::array<std::size_t, 3> order{0, 1, 2};
        for (std::size_t i = 2; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
        sample.features = Tensor::matrix(3, cfg.d_feat);
        for (std::size_t r = 0; r < 3; ++r) {
            const std::size_t f = order[r];
            for (std::size_t j = 0; j < cfg.d_feat; ++j) {
                const double noise = cfg.feature_noise > 0.0 ? cfg.feature_noise * rng.normal() : 0.0;
                sample.features.at(r, j) = src[f]->at(idx[f], j) + noise;
            }
        }
        return sample;
    };
    auto draw_allowed = [&](std::size_t n, std::vector<ToySample>& out) {
        for (std::size_t i = 0; i < n; ++i) {
            const auto& [c, o] = allowed[rng.below(allowed.size())];
            out.push_back(make(c, o, rng.below(cfg.n_scenes)));
        }
    };
    draw_allowed(cfg.n_train, ds.train);
    draw_allowed(cfg.n_val, ds.val);
    if (!held.empty()) {
        const std::vector<std::pair<std::size_t, std::size_t>> pairs(held.begin(), held.end());
        for (std::size_t i = 0; i < cfg.n_test; ++i) {
            const auto& [c, o] = pairs[rng.below(pairs.size())];
            ds.test_compositional.push_back(make(c, o, rng.below(cfg.n_scenes)));
        }
    }
    return ds;
}

std::vector<std::pair<std::size_t, std::size_t>> parse_holdout_pairs(const std::string& text, const Vocabulary& vocab,
                                                                     std::size_t n_colors, std::size_t n_objects) {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    std::stringstream ss(text);
    std::string item;
    auto resolve = [&](const std::string& tok, std::size_t n, std::int64_t first_id, const char* what) {
        const bool numeric = !tok.empty() && std::all_of(tok.begin(), tok.end(), ::isdigit);
        std::size_t idx;
        if (numeric) {
            idx = std::stoul(tok);
        } else {
            const std::int64_t id = vocab.find(tok);
            if (id < first_id || id >= first_id + static_cast<std::int64_t>(n)) {
                throw ConfigError(std::string("unknown ") + what + " '" + tok + "' in holdout list");
            }
            idx = static_cast<std::size_t>(id - first_id);
        }
        if (idx >= n) throw ConfigError(std::string(what) + " index " + tok + " out of range in holdout list");
        return idx;
    };
    while (std::getline(ss, item, ',')) {
        item.erase(std::remove_if(item.begin(), item.end(), ::isspace), item.end());
        if (item.empty()) continue;
        const auto colon = item.find(':');
        if (colon == std::string::npos) throw ConfigError("holdout entry '" + item + "' is not color:object");
        pairs.emplace_back(resolve(item.substr(0, colon), n_colors, vocab.color(0), "color"),
                           resolve(item.substr(colon + 1), n_objects, vocab.object(0), "object"));
    }
    return pairs;
}

}  // namespace pma
