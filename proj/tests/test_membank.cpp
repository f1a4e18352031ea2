#include <vector>

#include "doctest.h"
#include "pma/errors.hpp"
#include "pma/membank.hpp"
#include "pma/oracles.hpp"
#include "pma/rng.hpp"

using namespace pma;

namespace {

// Rows tagged with the batch id and row index so alignment is checkable.
MemoryBank::Snapshot tagged(std::size_t id, std::size_t rows) {
    MemoryBank::Snapshot s{Tensor::matrix(rows, 2), Tensor::matrix(rows, 2)};
    for (std::size_t r = 0; r < rows; ++r) {
        s.keys.at(r, 0) = static_cast<double>(id);
        s.keys.at(r, 1) = static_cast<double>(r);
        s.values.at(r, 0) = -static_cast<double>(id);
        s.values.at(r, 1) = -static_cast<double>(r);
    }
    return s;
}

}  // namespace

TEST_CASE("first fill and stride flags") {
    MemoryBank bank(3, 2);
    auto b = tagged(0, 1);
    CHECK_FALSE(bank.push_batch(1, b.keys, b.values));
    CHECK_FALSE(bank.push_batch(2, b.keys, b.values));
    CHECK(bank.push_batch(3, b.keys, b.values));
    bank.slide(2);
    CHECK(bank.size() == 1);
    CHECK_FALSE(bank.push_batch(4, b.keys, b.values));
    CHECK(bank.push_batch(5, b.keys, b.values));
    bank.slide(2);
    CHECK_FALSE(bank.push_batch(6, b.keys, b.values));
    CHECK(bank.push_batch(7, b.keys, b.values));

    CHECK_THROWS_AS(bank.push_batch(7, b.keys, b.values), OrderingError);
    CHECK_THROWS_AS(bank.push_batch(2, b.keys, b.values), OrderingError);
}

TEST_CASE("slide semantics") {
    MemoryBank bank(6, 2);
    for (std::size_t i = 0; i < 6; ++i) {
        auto b = tagged(i, 1);
        bank.push_batch(static_cast<std::int64_t>(i), b.keys, b.values);
    }
    bank.slide(0);
    CHECK(bank.size() == 6);
    bank.slide(2);
    REQUIRE(bank.size() == 4);
    CHECK(bank.entries().front().step == 2);
    CHECK(bank.entries().back().step == 5);
    CHECK_THROWS_AS(bank.slide(5), ContractError);
    bank.slide(4);
    CHECK(bank.empty());
    CHECK_THROWS_AS(bank.snapshot(), ContractError);
}

TEST_CASE("snapshot concatenates oldest first with aligned rows") {
    MemoryBank bank(4, 1);
    auto a = tagged(7, 3), b = tagged(8, 4);
    bank.push_batch(1, a.keys, a.values);
    CHECK(bank.snapshot().keys == a.keys);
    bank.push_batch(2, b.keys, b.values);
    auto s = bank.snapshot();
    REQUIRE(s.keys.rows() == 7);
    CHECK(bank.total_rows() == 7);
    for (std::size_t r = 0; r < 7; ++r) {
        CHECK(s.keys.at(r, 0) == (r < 3 ? 7.0 : 8.0));
        CHECK(s.values.at(r, 0) == -s.keys.at(r, 0));
        CHECK(s.values.at(r, 1) == -s.keys.at(r, 1));
    }
}

TEST_CASE("stored tensors are copies") {
    MemoryBank bank(2, 1);
    auto a = tagged(1, 2);
    bank.push_batch(1, a.keys, a.values);
    a.keys.fill(99.0);
    CHECK(bank.snapshot().keys.at(0, 0) == 1.0);
}

TEST_CASE("random histories match the replay oracle") {
    Rng rng(17);
    for (int h = 0; h < 200; ++h) {
        const std::size_t T = 1 + rng.below(12), s = 1 + rng.below(T);
        MemoryBank bank(T, s);
        oracle::BankReplay replay(T, s);
        const std::size_t pushes = 1 + rng.below(60);
        for (std::size_t n = 0; n < pushes; ++n) {
            auto b = tagged(n, 1 + rng.below(3));
            const bool due = bank.push_batch(static_cast<std::int64_t>(n), b.keys, b.values);
            CHECK(due == replay.push(n));
            if (due) {
                auto want = replay.window_at_refresh();
                REQUIRE(bank.size() == want.size());
                for (std::size_t i = 0; i < want.size(); ++i)
                    CHECK(bank.entries()[i].step == static_cast<std::int64_t>(want[i]));
                bank.slide(s);
            }
            auto kept = replay.retained();
            REQUIRE(bank.size() == kept.size());
            for (std::size_t i = 0; i < kept.size(); ++i)
                CHECK(bank.entries()[i].step == static_cast<std::int64_t>(kept[i]));
        }
    }
}

TEST_CASE("invalid construction and widths") {
    CHECK_THROWS_AS(MemoryBank(0, 1), ConfigError);
    CHECK_THROWS_AS(MemoryBank(3, 4), ConfigError);
    CHECK_THROWS_AS(MemoryBank(3, 0), ConfigError);
    MemoryBank bank(3, 1);
    auto a = tagged(1, 2);
    bank.push_batch(1, a.keys, a.values);
    CHECK_THROWS_AS(bank.push_batch(2, Tensor::matrix(2, 3), Tensor::matrix(2, 3)), DimensionError);
    CHECK_THROWS_AS(bank.push_batch(2, Tensor::matrix(2, 2), Tensor::matrix(3, 2)), DimensionError);
}
