#include "fdt/cost.hpp"

#include <numeric>

#include "fdt/errors.hpp"

namespace fdt {

namespace {

std::uint64_t mul(std::uint64_t a, std::uint64_t b) {
    std::uint64_t r = 0;
    if (__builtin_mul_overflow(a, b, &r)) {
        throw ContractError("cost: 64-bit overflow in weight-unit arithmetic");
    }
    return r;
}

}  // namespace

Rational Rational::make(std::uint64_t num, std::uint64_t den) {
    if (den == 0) {
        throw ContractError("Rational: zero denominator");
    }
    const std::uint64_t g = std::gcd(num, den);
    return g == 0 ? Rational{0, 1} : Rational{num / g, den / g};
}

std::string Rational::str() const {
    return den == 1 ? std::to_string(num) : std::to_string(num) + "/" + std::to_string(den);
}

Rational operator/(const Rational& a, const Rational& b) {
    if (b.num == 0) {
        throw ContractError("Rational: division by zero");
    }
    // Cross-reduce before multiplying to keep the terms small.
    const std::uint64_t g1 = std::gcd(a.num, b.num);
    const std::uint64_t g2 = std::gcd(b.den, a.den);
    return Rational::make(mul(a.num / g1, b.den / g2), mul(a.den / g2, b.num / g1));
}

void CostInputs::validate() const {
    if (rounds == 0 || parts == 0 || blocks == 0 || w1 == 0 || w2 == 0) {
        throw ConfigError("cost: T, c, N, W1 and W2 must all be positive");
    }
    if (blocks % parts != 0) {
        throw ConfigError("cost: N (" + std::to_string(blocks) + ") must be divisible by c (" +
                          std::to_string(parts) + ")");
    }
}

Rational fedt_total(const CostInputs& in) {
    in.validate();
    return Rational::make(mul(mul(in.rounds, in.blocks), in.w1 + in.w2), 1);
}

Rational feddt_total_series(const CostInputs& in) {
    in.validate();
    const std::uint64_t c = in.parts;
    return Rational::make(mul(mul(mul(in.rounds, in.blocks), in.w1 + in.w2), c + 1), 2 * c);
}

Rational feddt_total_reference(const CostInputs& in) {
    in.validate();
    return Rational::make(mul(mul(in.rounds, in.blocks + 1), in.w1 + in.w2), 2 * in.parts);
}

ReductionRatio reduction_ratio(const CostInputs& in) {
    in.validate();
    const std::uint64_t c = in.parts;
    return {Rational::make(c + 1, 2 * c), Rational::make(in.blocks + 1, mul(2 * c, in.blocks))};
}

std::vector<std::uint64_t> stage_depths(const CostInputs& in) {
    in.validate();
    if (in.rounds % in.parts != 0) {
        throw ConfigError("cost: T (" + std::to_string(in.rounds) + ") must be divisible by c (" +
                          std::to_string(in.parts) + ") for a per-round stage trace");
    }
    const std::uint64_t stage_len = in.rounds / in.parts;
    const std::uint64_t q = in.blocks / in.parts;
    std::vector<std::uint64_t> out;
    out.reserve(in.rounds);
    for (std::uint64_t t = 0; t < in.rounds; ++t) {
        out.push_back(q * (t / stage_len + 1));
    }
    return out;
}

LedgerVerification verify_ledger(const CommLedger& ledger, const CostInputs& in, Mode mode) {
    LedgerVerification out;
    const std::vector<std::uint64_t> depths =
        mode == Mode::feddt ? stage_depths(in) : std::vector<std::uint64_t>(in.rounds, in.blocks);
    out.expected_units = mode == Mode::feddt ? feddt_total_series(in) : fedt_total(in);
    const std::uint64_t per_layer = in.w1 + in.w2;

    for (const auto& row : ledger.rows) {
        out.fixed_bytes += row.fixed_bytes;
        const std::uint64_t denom = 8ull * row.clients * 2;
        if (row.clients == 0 || row.block_bytes % denom != 0) {
            if (!out.first_divergent_round) {
                out.first_divergent_round = row.t;
            }
            continue;
        }
        out.measured_units += row.block_bytes / denom;
    }
    for (std::size_t i = 0; i < in.rounds && !out.first_divergent_round; ++i) {
        if (i >= ledger.rows.size()) {
            out.first_divergent_round = i + 1;
            break;
        }
        const auto& row = ledger.rows[i];
        const std::uint64_t expected = mul(depths[i], per_layer) * 8ull * row.clients * 2;
        if (row.t != i + 1 || row.block_bytes != expected) {
            out.first_divergent_round = i + 1;
        }
    }
    if (!out.first_divergent_round && ledger.rows.size() > in.rounds) {
        out.first_divergent_round = in.rounds + 1;
    }

    const bool totals_match = out.expected_units == Rational::make(out.measured_units, 1);
    out.ok = totals_match && !out.first_divergent_round;
    if (out.ok) {
        out.message = "ledger matches " + std::string(mode == Mode::feddt ? "stage-sum" : "FedT") + " total " +
                      out.expected_units.str() + " weight units";
    } else {
        out.message = "ledger has " + std::to_string(out.measured_units) + " block weight units, expected " +
                      out.expected_units.str();
        if (out.first_divergent_round) {
            const std::size_t r = *out.first_divergent_round;
            out.message += "; first divergence at round " + std::to_string(r);
            if (r <= ledger.rows.size() && r <= in.rounds) {
                out.message += " (ledger depth " + std::to_string(ledger.rows[r - 1].layers) + ", model depth " +
                               std::to_string(depths[r - 1]) + ")";
            } else {
                out.message += " (missing or extra row)";
            }
        }
    }
    return out;
}

}  // namespace fdt
