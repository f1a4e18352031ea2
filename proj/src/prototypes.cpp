#include "pma/prototypes.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "pma/errors.hpp"
#include "pma/numerics.hpp"
#include "pma/rng.hpp"

namespace pma {

namespace {

// Four independent partial sums keep the loop from being latency-bound.
double squared_distance(const double* a, const double* b, std::size_t d) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t j = 0;
    for (; j + 4 <= d; j += 4) {
        const double e0 = a[j] - b[j], e1 = a[j + 1] - b[j + 1], e2 = a[j + 2] - b[j + 2], e3 = a[j + 3] - b[j + 3];
        s0 += e0 * e0;
        s1 += e1 * e1;
        s2 += e2 * e2;
        s3 += e3 * e3;
    }
    for (; j < d; ++j) {
        const double e = a[j] - b[j];
        s0 += e * e;
    }
    return (s0 + s1) + (s2 + s3);
}

// Greedy k-means++: each step draws a few D²-weighted candidates and keeps
// the one that lowers the potential most. Candidate distances come from one
// product against all points per step.
Tensor kmeans_pp_seed(const Tensor& points, std::size_t m, Rng& rng) {
    const std::size_t n = points.rows(), d = points.cols();
    const std::size_t trials = 2 + static_cast<std::size_t>(std::log(static_cast<double>(m)));
    Tensor centroids = Tensor::matrix(m, d);
    std::vector<char> chosen(n, 0);
    std::vector<double> nearest(n), cum(n), norms(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double* x = points.data() + i * d;
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += x[j] * x[j];
        norms[i] = s;
    }

    auto draw = [&]() -> std::size_t {
        const double r = rng.uniform() * cum.back();
        std::size_t i = static_cast<std::size_t>(std::upper_bound(cum.begin(), cum.end(), r) - cum.begin());
        if (i >= n) i = n - 1;
        while (nearest[i] <= 0.0 && i > 0) --i;  // r in the rounding slack
        return i;
    };

    std::size_t pick = static_cast<std::size_t>(rng.below(n));
    for (std::size_t i = 0; i < n; ++i) nearest[i] = squared_distance(points.data() + i * d, points.data() + pick * d, d);
    chosen[pick] = 1;
    std::copy_n(points.data() + pick * d, d, centroids.data());

    Tensor cands = Tensor::matrix(trials, d);
    std::vector<std::size_t> ids(trials);
    for (std::size_t c = 1; c < m; ++c) {
        std::partial_sum(nearest.begin(), nearest.end(), cum.begin());
        if (!(cum.back() > 0.0)) {
            // every point coincides with a centroid already
            pick = static_cast<std::size_t>(std::find(chosen.begin(), chosen.end(), 0) - chosen.begin());
            for (std::size_t i = 0; i < n; ++i)
                nearest[i] = std::min(nearest[i], squared_distance(points.data() + i * d, points.data() + pick * d, d));
        } else {
            for (std::size_t t = 0; t < trials; ++t) {
                ids[t] = draw();
                std::copy_n(points.data() + ids[t] * d, d, cands.data() + t * d);
            }
            const Tensor dots = matmul_nt(points, cands);  // n × trials
            std::vector<double> pot(trials, 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                const double* g = dots.data() + i * trials;
                for (std::size_t t = 0; t < trials; ++t) {
                    const double dd = std::max(0.0, norms[i] + norms[ids[t]] - 2.0 * g[t]);
                    pot[t] += std::min(nearest[i], dd);
                }
            }
            const std::size_t best = static_cast<std::size_t>(std::min_element(pot.begin(), pot.end()) - pot.begin());
            pick = ids[best];
            for (std::size_t i = 0; i < n; ++i) {
                const double dd = std::max(0.0, norms[i] + norms[pick] - 2.0 * dots.at(i, best));
                nearest[i] = i == pick ? 0.0 : std::min(nearest[i], dd);
            }
        }
        chosen[pick] = 1;
        std::copy_n(points.data() + pick * d, d, centroids.data() + c * d);
    }
    return centroids;
}

struct Assignment {
    std::size_t m = 0;
    std::vector<std::size_t> cluster;
    std::vector<double> dist2;  // exact squared distance to the assigned centroid
    std::vector<double> lower;  // n × m lower bounds on point-centroid distances
    std::vector<std::size_t> counts;
    double inertia = 0.0;
};

void tally(Assignment& a) {
    a.counts.assign(a.m, 0);
    a.inertia = 0.0;
    for (std::size_t i = 0; i < a.cluster.size(); ++i) {
        a.counts[a.cluster[i]] += 1;
        a.inertia += a.dist2[i];
    }
}

// Exact scan over every centroid. The current cluster (when `has_current`)
// is kept unless some centroid is strictly closer; otherwise the
// lowest-index best wins. Keeping ties makes the inertia non-increasing.
void assign_all(const Tensor& points, const Tensor& centroids, Assignment& a, bool has_current) {
    const std::size_t n = points.rows(), d = points.cols(), m = centroids.rows();
    a.m = m;
    a.cluster.resize(n);
    a.dist2.resize(n);
    a.lower.resize(n * m);
    for (std::size_t i = 0; i < n; ++i) {
        const double* x = points.data() + i * d;
        double* lo = a.lower.data() + i * m;
        std::size_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < m; ++c) {
            const double dd = squared_distance(x, centroids.data() + c * d, d);
            lo[c] = std::sqrt(dd);
            if (dd < best_d) {
                best_d = dd;
                best = c;
            }
        }
        if (has_current && a.cluster[i] != best) {
            const double current = squared_distance(x, centroids.data() + a.cluster[i] * d, d);
            if (current <= best_d) {
                best = a.cluster[i];
                best_d = current;
            }
        }
        a.cluster[i] = best;
        a.dist2[i] = best_d;
    }
    tally(a);
}

// Lloyd assignment after the centroids moved from `prev` to `centroids`,
// pruned with per-centroid distance bounds (Elkan). A centroid is only
// measured when the bounds cannot exclude it, and a switch needs a strictly
// smaller distance, so the result matches assign_all with has_current.
void reassign(const Tensor& points, const Tensor& prev, const Tensor& centroids, Assignment& a) {
    const std::size_t n = points.rows(), d = points.cols(), m = centroids.rows();
    std::vector<double> moved(m);
    for (std::size_t c = 0; c < m; ++c)
        moved[c] = std::sqrt(squared_distance(prev.data() + c * d, centroids.data() + c * d, d));
    std::vector<double> half(m * m, 0.0);  // half the centroid-centroid distances
    std::vector<double> half_gap(m, std::numeric_limits<double>::infinity());
    for (std::size_t c = 0; c < m; ++c) {
        for (std::size_t o = c + 1; o < m; ++o) {
            const double g = 0.5 * std::sqrt(squared_distance(centroids.data() + c * d, centroids.data() + o * d, d));
            half[c * m + o] = half[o * m + c] = g;
            half_gap[c] = std::min(half_gap[c], g);
            half_gap[o] = std::min(half_gap[o], g);
        }
    }
    // Bounds only prune when clear by this margin, which absorbs rounding.
    auto clear_below = [](double u, double bound) { return u < bound - 1e-9 * (1.0 + bound); };
    for (std::size_t i = 0; i < n; ++i) {
        double* lo = a.lower.data() + i * m;
        for (std::size_t c = 0; c < m; ++c) lo[c] = std::max(0.0, lo[c] - moved[c]);
        const double* x = points.data() + i * d;
        std::size_t cur = a.cluster[i];
        double cur2 = squared_distance(x, centroids.data() + cur * d, d);
        double u = std::sqrt(cur2);
        lo[cur] = u;
        if (clear_below(u, half_gap[cur])) {
            a.dist2[i] = cur2;
            continue;
        }
        for (std::size_t c = 0; c < m; ++c) {
            if (c == cur || clear_below(u, lo[c]) || clear_below(u, half[cur * m + c])) continue;
            const double dd = squared_distance(x, centroids.data() + c * d, d);
            lo[c] = std::sqrt(dd);
            if (dd < cur2) {
                cur = c;
                cur2 = dd;
                u = lo[c];
            }
        }
        a.cluster[i] = cur;
        a.dist2[i] = cur2;
    }
    tally(a);
}

// Moves each empty cluster's centroid onto the point farthest from its own
// centroid (taken from a cluster with at least two members) and hands that
// point over. Returns false when nothing was empty.
bool repair_empty(const Tensor& points, Tensor& centroids, Assignment& a) {
    const std::size_t d = points.cols();
    bool repaired = false;
    for (std::size_t c = 0; c < centroids.rows(); ++c) {
        if (a.counts[c] != 0) continue;
        std::size_t far = points.rows();
        double far_d = -1.0;
        for (std::size_t i = 0; i < points.rows(); ++i) {
            if (a.counts[a.cluster[i]] > 1 && a.dist2[i] > far_d) {
                far_d = a.dist2[i];
                far = i;
            }
        }
        if (far == points.rows()) throw SizeError("kmeans: not enough points to fill every cluster");
        std::copy_n(points.data() + far * d, d, centroids.data() + c * d);
        a.counts[a.cluster[far]] -= 1;
        a.inertia -= a.dist2[far];
        a.cluster[far] = c;
        a.dist2[far] = 0.0;
        std::fill_n(a.lower.begin() + static_cast<std::ptrdiff_t>(far * a.m), a.m, 0.0);
        a.counts[c] = 1;
        repaired = true;
    }
    return repaired;
}

}  // namespace

KMeansResult kmeans(const Tensor& points, std::size_t m, std::size_t max_iters, double tol, std::uint64_t seed) {
    const std::size_t n = points.rows(), d = points.cols();
    if (m == 0) throw SizeError("kmeans: m must be at least 1");
    if (n < m) throw SizeError("kmeans: " + std::to_string(n) + " points cannot form " + std::to_string(m) + " clusters");

    Rng rng(seed);
    KMeansResult result;
    result.centroids = kmeans_pp_seed(points, m, rng);
    Assignment a;
    assign_all(points, result.centroids, a, false);
    result.inertia_history.push_back(a.inertia);

    for (std::size_t it = 0; it < max_iters; ++it) {
        Tensor next = Tensor::matrix(m, d);
        for (std::size_t i = 0; i < n; ++i) {
            double* dst = next.data() + a.cluster[i] * d;
            const double* x = points.data() + i * d;
            for (std::size_t j = 0; j < d; ++j) dst[j] += x[j];
        }
        for (std::size_t c = 0; c < m; ++c) {
            if (a.counts[c] == 0) continue;
            const double inv = 1.0 / static_cast<double>(a.counts[c]);
            for (std::size_t j = 0; j < d; ++j) next.at(c, j) *= inv;
        }
        // Empty clusters keep their old position until repaired.
        for (std::size_t c = 0; c < m; ++c)
            if (a.counts[c] == 0) std::copy_n(result.centroids.data() + c * d, d, next.data() + c * d);
        repair_empty(points, next, a);

        double movement = 0.0;
        for (std::size_t c = 0; c < m; ++c) {
            movement = std::max(movement, std::sqrt(squared_distance(next.data() + c * d,
                                                                     result.centroids.data() + c * d, d)));
        }
        reassign(points, result.centroids, next, a);
        result.centroids = std::move(next);
        result.iterations_run = it + 1;
        result.inertia_history.push_back(a.inertia);
        if (movement < tol) break;
    }

    // The final assignment may leave a cluster empty; repair until none is.
    for (std::size_t guard = 0; repair_empty(points, result.centroids, a); ++guard) {
        if (guard > n) throw SizeError("kmeans: could not repair empty clusters");
        assign_all(points, result.centroids, a, true);
        result.inertia_history.push_back(a.inertia);
    }

    result.assignments = std::move(a.cluster);
    result.inertia = a.inertia;
    return result;
}

std::vector<Neighbor> knn_topk(const Tensor& points, std::span<const double> query, std::size_t k) {
    const std::size_t n = points.rows(), d = points.cols();
    if (query.size() != d) {
        throw DimensionError("knn_topk: query of length " + std::to_string(query.size()) + " against points " +
                             points.shape().str());
    }
    if (k == 0 || k > n) {
        throw SizeError("knn_topk: k=" + std::to_string(k) + " must be in [1, " + std::to_string(n) + "]");
    }
    std::vector<Neighbor> all(n);
    for (std::size_t i = 0; i < n; ++i) {
        all[i] = {i, std::sqrt(squared_distance(points.data() + i * d, query.data(), d))};
    }
    auto closer = [](const Neighbor& a, const Neighbor& b) {
        return a.distance < b.distance || (a.distance == b.distance && a.index < b.index);
    };
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(), closer);
    all.resize(k);
    return all;
}

Tensor build_value_prototypes(const Tensor& prototype_keys, const Tensor& bank_keys, const Tensor& bank_values,
                              std::size_t k, bool normalize) {
    if (bank_keys.rows() != bank_values.rows()) {
        throw DimensionError("build_value_prototypes: bank keys " + bank_keys.shape().str() + " and values " +
                             bank_values.shape().str() + " are not row-aligned");
    }
    if (prototype_keys.cols() != bank_keys.cols()) {
        throw DimensionError("build_value_prototypes: prototype keys " + prototype_keys.shape().str() +
                             " vs bank keys " + bank_keys.shape().str());
    }
    const std::size_t m = prototype_keys.rows(), dv = bank_values.cols();
    Tensor out = Tensor::matrix(m, dv);
    for (std::size_t i = 0; i < m; ++i) {
        const auto nn = knn_topk(bank_keys, prototype_keys.row(i), k);
        std::vector<double> w(nn.size());
        if (normalize) {
            // Shift by the nearest distance so far-away neighborhoods cannot underflow to 0/0.
            const double d0 = nn.front().distance;
            double total = 0.0;
            for (std::size_t t = 0; t < nn.size(); ++t) total += (w[t] = std::exp(-(nn[t].distance - d0)));
            for (double& x : w) x /= total;
        } else {
            for (std::size_t t = 0; t < nn.size(); ++t) w[t] = std::exp(-nn[t].distance);
        }
        double* dst = out.data() + i * dv;
        for (std::size_t t = 0; t < nn.size(); ++t) {
            const double* v = bank_values.data() + nn[t].index * dv;
            for (std::size_t j = 0; j < dv; ++j) dst[j] += w[t] * v[j];
        }
    }
    return out;
}

PrototypeMemory compute_prototypes(const MemoryBank::Snapshot& snapshot, const PrototypeOptions& opts,
                                   std::uint64_t seed, std::int64_t step) {
    if (snapshot.keys.rows() < opts.slots) {
        throw SizeError("compute_prototypes: bank holds " + std::to_string(snapshot.keys.rows()) + " keys, need at least " +
                        std::to_string(opts.slots));
    }
    PrototypeMemory mem;
    mem.keys = kmeans(snapshot.keys, opts.slots, opts.max_iters, opts.tol, seed).centroids;
    mem.values = build_value_prototypes(mem.keys, snapshot.keys, snapshot.values, opts.topk, opts.normalize);
    mem.built_at_step = step;
    mem.k_used = opts.topk;
    return mem;
}

PrototypeMemory compute_prototypes(const MemoryBank& bank, const PrototypeOptions& opts, std::uint64_t seed,
                                   std::int64_t step) {
    return compute_prototypes(bank.snapshot(), opts, seed, step);
}

}  // namespace pma
