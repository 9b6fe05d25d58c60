#pragma once

// Closed-form communication cost in weight units (parameter counts).
//
// FedT sends N blocks per stack every round: T * N * (W1 + W2).
// FedDT holds depth (N/c)(n+1) for T/c rounds in stage n, n = 0 .. c-1
// (the bound is sometimes written "n from 0 to c - c/N"), which sums to
// T * N * (W1 + W2) * (c+1) / (2c). The reference formula
// (T / 2c)(N+1)(W1+W2) with ratio 1/(2c) + 1/(2cN) is kept for comparison;
// the stage sum exceeds it by a factor of N(c+1) / (N+1).

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fdt/fed.hpp"

namespace fdt {

// Non-negative exact fraction in lowest terms.
struct Rational {
    std::uint64_t num = 0;
    std::uint64_t den = 1;

    static Rational make(std::uint64_t num, std::uint64_t den);
    double value() const { return static_cast<double>(num) / static_cast<double>(den); }
    bool is_integer() const { return den == 1; }
    std::string str() const;
    bool operator==(const Rational&) const = default;
};

Rational operator/(const Rational& a, const Rational& b);

struct CostInputs {
    std::uint64_t rounds = 0;  // T
    std::uint64_t parts = 0;   // c
    std::uint64_t blocks = 0;  // N
    std::uint64_t w1 = 0;
    std::uint64_t w2 = 0;

    // Throws ConfigError unless all positive and N divisible by c.
    void validate() const;
};

Rational fedt_total(const CostInputs& in);
Rational feddt_total_series(const CostInputs& in);
Rational feddt_total_reference(const CostInputs& in);

struct ReductionRatio {
    Rational series;  // (c+1) / (2c)
    Rational reference;  // 1/(2c) + 1/(2cN) = (N+1) / (2cN)
};

ReductionRatio reduction_ratio(const CostInputs& in);

// Depth held in each round under the stage-sum model: (N/c)(n+1) for the
// n-th block of T/c rounds. Requires T divisible by c.
std::vector<std::uint64_t> stage_depths(const CostInputs& in);

struct LedgerVerification {
    bool ok = false;
    std::optional<std::size_t> first_divergent_round;
    std::uint64_t measured_units = 0;  // block weight units per direction per client
    Rational expected_units;           // feddt_total_series or fedt_total
    std::uint64_t fixed_bytes = 0;
    std::string message;
};

// Compares the ledger round by round with the stage-sum (FedDT) or constant
// (FedT) depth model in integer arithmetic, then the totals.
LedgerVerification verify_ledger(const CommLedger& ledger, const CostInputs& in, Mode mode);

}  // namespace fdt
