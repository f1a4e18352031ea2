#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pma/tensor.hpp"

namespace pma {

/// A synthetic "image": one noisy feature row per factor (color, object,
/// scene) in shuffled order, captioned "<bos> color object in scene <eos>".
struct ToySample {
    Tensor features;  // 3 × d_feat
    std::vector<std::int64_t> caption;
    std::array<std::size_t, 3> factors;  // color, object, scene
};

struct DatasetConfig {
    std::uint64_t seed = 1;
    std::size_t n_colors = 4;
    std::size_t n_objects = 6;
    std::size_t n_scenes = 3;
    std::size_t n_train = 2000;
    std::size_t n_val = 200;
    std::size_t n_test = 200;
    std::size_t d_feat = 32;
    double feature_noise = 0.1;
    /// (color, object) pairs that never co-occur in train or val.
    std::vector<std::pair<std::size_t, std::size_t>> holdout_pairs;
};

/// Token layout: <pad>, <bos>, <eos>, "in", colors, objects, scenes.
class Vocabulary {
public:
    Vocabulary(std::size_t n_colors, std::size_t n_objects, std::size_t n_scenes);

    std::size_t size() const { return words_.size(); }
    std::int64_t in_token() const { return 3; }
    std::int64_t color(std::size_t i) const { return 4 + static_cast<std::int64_t>(i); }
    std::int64_t object(std::size_t i) const { return color(n_colors_) + static_cast<std::int64_t>(i); }
    std::int64_t scene(std::size_t i) const { return object(n_objects_) + static_cast<std::int64_t>(i); }
    const std::string& word(std::int64_t id) const { return words_.at(static_cast<std::size_t>(id)); }
    /// Id of a word, or -1.
    std::int64_t find(const std::string& w) const;
    std::string render(const std::vector<std::int64_t>& ids) const;

private:
    std::size_t n_colors_, n_objects_, n_scenes_;
    std::vector<std::string> words_;
};

struct ToyDataset {
    DatasetConfig config;
    Vocabulary vocab;
    std::vector<ToySample> train;
    std::vector<ToySample> val;
    /// Only held-out pairs; empty when there are none.
    std::vector<ToySample> test_compositional;
};

/// Deterministic given config.seed. Throws ConfigError when the held-out
/// pairs would remove a color or object from training entirely.
ToyDataset make_toy_dataset(const DatasetConfig& cfg);

/// Parses "red:dog,1:3" style pair lists (names or indices).
std::vector<std::pair<std::size_t, std::size_t>> parse_holdout_pairs(const std::string& text, const Vocabulary& vocab,
                                                                     std::size_t n_colors, std::size_t n_objects);

}  // namespace pma
