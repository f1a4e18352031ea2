#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>

#include "pma/tensor.hpp"

namespace pma {

/// Bounded FIFO of per-iteration key/value batches for one (layer, head),
/// driven by the strided sliding-window refresh schedule: the first refresh
/// is due when the bank first holds `capacity` batches, and every `stride`
/// pushes after that.
class MemoryBank {
public:
    struct Entry {
        std::int64_t step;
        Tensor keys;    // n_i × head_dim
        Tensor values;  // n_i × head_dim
    };

    MemoryBank(std::size_t capacity, std::size_t stride);

    /// Appends a copy of the batch. Returns true when a refresh is due. If
    /// the bank is already at capacity the oldest entry is evicted first.
    bool push_batch(std::int64_t step, const Tensor& keys, const Tensor& values);

    /// Drops the oldest `count` entries.
    void slide(std::size_t count);

    /// All stored keys and values, oldest first, row-aligned.
    struct Snapshot {
        Tensor keys;
        Tensor values;
    };
    Snapshot snapshot() const;

    std::size_t capacity() const { return capacity_; }
    std::size_t stride() const { return stride_; }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    bool refreshed_once() const { return refreshed_once_; }
    std::size_t steps_since_refresh() const { return steps_since_refresh_; }
    std::size_t total_rows() const;
    const std::deque<Entry>& entries() const { return entries_; }

private:
    std::size_t capacity_;
    std::size_t stride_;
    std::deque<Entry> entries_;
    std::size_t steps_since_refresh_ = 0;
    bool refreshed_once_ = false;
};

}  // namespace pma
