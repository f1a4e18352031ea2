#pragma once

// Independent reference implementations used by the test suites and by
// `pma verify`. Nothing here is used on the training path.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "pma/tensor.hpp"

namespace pma::oracle {

/// Prototype values by sorting every distance and summing the k nearest
/// with weights exp(-d) (optionally divided by their sum).
Tensor value_prototypes_brute_force(const Tensor& prototype_keys, const Tensor& bank_keys, const Tensor& bank_values,
                                    std::size_t k, bool normalize);

/// Closed-form model of the strided sliding window: the n-th push (1-based)
/// triggers a refresh iff n >= T and (n - T) is a multiple of s; the bank
/// then retains T - s batches, and grows by one per push until the next
/// refresh.
class BankReplay {
public:
    BankReplay(std::size_t capacity, std::size_t stride) : capacity_(capacity), stride_(stride) {}

    /// Records a push; returns whether it triggers a refresh.
    bool push(std::size_t id);
    /// Ids of the batches a refresh at the latest push sees, oldest first.
    std::vector<std::size_t> window_at_refresh() const;
    /// Ids retained after the latest push (and its slide, if any).
    std::vector<std::size_t> retained() const;
    std::size_t pushes() const { return ids_.size(); }

private:
    bool refresh_at(std::size_t n) const;
    std::size_t retained_count(std::size_t n) const;

    std::size_t capacity_, stride_;
    std::vector<std::size_t> ids_;
};

struct CheckResult {
    std::string name;
    bool passed = false;
    std::size_t cases = 0;
    double max_error = 0.0;
    std::string detail;
};

/// Random Eq.-4 instances (N ≤ 512, both weight modes) against the brute
/// force. `inject_fault` perturbs the module's weights to prove the check
/// can fail.
CheckResult check_value_prototypes(std::uint64_t seed, std::size_t instances, double tol, bool inject_fault = false);

/// Random push/refresh/slide histories against BankReplay.
CheckResult check_bank_replay(std::uint64_t seed, std::size_t histories);

/// m = 0 models against the memoryless model, bitwise, plus the
/// zero-prototype / zero-segment attention path against the plain path on
/// attention traces.
CheckResult check_baseline_identity(std::uint64_t seed, std::size_t configs);

struct SuiteOptions {
    std::uint64_t seed = 1;
    std::size_t bound_trials = 10000;
    std::size_t value_proto_instances = 200;
    std::size_t replay_histories = 1000;
    std::size_t baseline_configs = 20;
    bool inject_fault = false;
};

/// Lipschitz bound plus the three equivalence checks.
std::vector<CheckResult> run_suite(const SuiteOptions& opts);

}  // namespace pma::oracle
