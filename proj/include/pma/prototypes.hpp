#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "pma/membank.hpp"
#include "pma/tensor.hpp"

namespace pma {

/// m prototype keys and values for one (layer, head).
struct PrototypeMemory {
    Tensor keys;    // m × head_dim
    Tensor values;  // m × head_dim
    std::int64_t built_at_step = 0;
    std::size_t k_used = 0;

    std::size_t slots() const { return keys.rows(); }
};

struct KMeansResult {
    Tensor centroids;  // m × d
    std::vector<std::size_t> assignments;
    double inertia = 0.0;
    std::size_t iterations_run = 0;
    /// Inertia after each assignment step; non-increasing.
    std::vector<double> inertia_history;
};

/// Lloyd iterations from k-means++ seeding. Stops when the largest centroid
/// movement drops below `tol` or after `max_iters` updates. Empty clusters
/// are reseeded at the point farthest from its centroid.
KMeansResult kmeans(const Tensor& points, std::size_t m, std::size_t max_iters, double tol, std::uint64_t seed);

struct Neighbor {
    std::size_t index;
    double distance;  // L2
};

/// Exact k nearest rows of `points` to `query` under L2, ascending by
/// distance with ties broken by lower index.
std::vector<Neighbor> knn_topk(const Tensor& points, std::span<const double> query, std::size_t k);

/// M_V^i = Σ_{j ∈ topk(M_K^i)} exp(-‖M_K^i − K^j‖₂) V^j. With `normalize`
/// the weights are divided by their sum.
Tensor build_value_prototypes(const Tensor& prototype_keys, const Tensor& bank_keys, const Tensor& bank_values,
                              std::size_t k, bool normalize);

struct PrototypeOptions {
    std::size_t slots = 64;  // m
    std::size_t topk = 32;
    std::size_t max_iters = 20;
    double tol = 1e-4;
    bool normalize = false;
};

PrototypeMemory compute_prototypes(const MemoryBank& bank, const PrototypeOptions& opts, std::uint64_t seed,
                                   std::int64_t step);
/// Same as above on an explicit snapshot.
PrototypeMemory compute_prototypes(const MemoryBank::Snapshot& snapshot, const PrototypeOptions& opts,
                                   std::uint64_t seed, std::int64_t step);

}  // namespace pma
