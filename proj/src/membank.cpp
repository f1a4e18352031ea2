#include "pma/membank.hpp"

#include <string>
#include <vector>

#include "pma/errors.hpp"

namespace pma {

MemoryBank::MemoryBank(std::size_t capacity, std::size_t stride) : capacity_(capacity), stride_(stride) {
    if (capacity_ == 0) throw ConfigError("memory bank capacity must be positive");
    if (stride_ == 0 || stride_ > capacity_) {
        throw ConfigError("memory bank stride must be in [1, capacity], got " + std::to_string(stride_));
    }
}

bool MemoryBank::push_batch(std::int64_t step, const Tensor& keys, const Tensor& values) {
    if (!entries_.empty() && step <= entries_.back().step) {
        throw OrderingError("push_batch: step " + std::to_string(step) + " not after last stored step " +
                            std::to_string(entries_.back().step));
    }
    if (keys.rows() != values.rows() || keys.cols() != values.cols()) {
        throw DimensionError("push_batch: keys " + keys.shape().str() + " and values " + values.shape().str() +
                             " are not aligned");
    }
    if (!entries_.empty() && keys.cols() != entries_.front().keys.cols()) {
        throw DimensionError("push_batch: width " + std::to_string(keys.cols()) + " differs from stored width " +
                             std::to_string(entries_.front().keys.cols()));
    }
    if (entries_.size() == capacity_) entries_.pop_front();
    entries_.push_back(Entry{step, keys, values});

    bool due = false;
    if (!refreshed_once_) {
        due = entries_.size() == capacity_;
    } else {
        ++steps_since_refresh_;
        due = steps_since_refresh_ == stride_;
    }
    if (due) {
        refreshed_once_ = true;
        steps_since_refresh_ = 0;
    }
    return due;
}

void MemoryBank::slide(std::size_t count) {
    if (count > entries_.size()) {
        throw ContractError("slide: stride " + std::to_string(count) + " exceeds bank length " +
                            std::to_string(entries_.size()));
    }
    entries_.erase(entries_.begin(), entries_.begin() + static_cast<std::ptrdiff_t>(count));
}

std::size_t MemoryBank::total_rows() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.keys.rows();
    return n;
}

MemoryBank::Snapshot MemoryBank::snapshot() const {
    if (entries_.empty()) throw ContractError("snapshot of an empty memory bank");
    std::vector<Tensor> ks, vs;
    ks.reserve(entries_.size());
    vs.reserve(entries_.size());
    for (const auto& e : entries_) {
        ks.push_back(e.keys);
        vs.push_back(e.values);
    }
    return {concat_rows(ks), concat_rows(vs)};
}

}  // namespace pma
