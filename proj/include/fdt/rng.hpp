#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <utility>

namespace fdt {

// Recorded in every run summary; bump whenever a stream changes.
inline constexpr std::string_view kRngVersion = "splitmix64+boxmuller/1";

std::uint64_t mix64(std::uint64_t x) noexcept;
std::uint64_t fnv1a64(std::string_view text) noexcept;
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) noexcept;

// Derives an independent stream seed from a parent seed, a tag and an index.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0) noexcept;

// SplitMix64 stream. Distributions are implemented here rather than via
// <random> so the sampled values do not depend on the standard library build.
class Rng {
public:
    explicit Rng(std::uint64_t seed) noexcept : state_(seed) {}

    std::uint64_t next_u64() noexcept;
    // Uniform on [0, 1) with 53 bits.
    double uniform() noexcept;
    // Standard normal via Box-Muller (cosine branch only, no cached spare).
    double normal() noexcept;
    // Uniform integer in [0, n); n must be positive.
    std::size_t below(std::size_t n) noexcept;

    template <class T>
    void shuffle(std::span<T> items) noexcept {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::size_t j = below(i);
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    std::uint64_t state_;
};

}  // namespace fdt
