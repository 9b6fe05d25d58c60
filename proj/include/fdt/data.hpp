#pragma once

// Synthetic sequence-to-sequence corpus and client sharding.
//
// Teacher mapping: with r frames per token, frame j of a sample is the mean of
// the codebook rows of the tokens at positions floor(j/r)-1 .. floor(j/r)+1
// (clipped to the sequence), plus an optional fixed sinusoidal bias
// position_bias(j, d) = 0.5 * sin(0.3 * j + 0.7 * d).

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fdt/payload.hpp"
#include "fdt/sample.hpp"

namespace fdt {

struct SyntheticTask {
    std::uint64_t seed = 0;
    std::size_t vocab_size = 32;
    std::size_t frame_dim = 16;
    std::size_t min_len = 8;
    std::size_t max_len = 24;
    std::size_t frames_per_token = 2;
    bool position_bias = true;
    Tensor codebook;  // [vocab_size x frame_dim], pure function of (seed, vocab_size, frame_dim)

    static SyntheticTask create(std::uint64_t seed, std::size_t vocab_size, std::size_t frame_dim,
                                std::size_t min_len, std::size_t max_len, std::size_t frames_per_token,
                                bool position_bias = true);
};

double position_bias(std::size_t frame, std::size_t dim);

// Frames for one token sequence under the task's teacher mapping.
Tensor teacher_frames(const SyntheticTask& task, std::span<const int> tokens);

// Samples first_index .. first_index+n-1; sample i depends only on (task, i),
// so chunked generation matches a single call.
std::vector<Sample> generate(const SyntheticTask& task, std::size_t n_samples, std::size_t first_index = 0);

struct SplitSpec {
    std::vector<std::size_t> ratios;

    static SplitSpec balanced(std::size_t n_clients);
    static SplitSpec from_ratios(std::vector<std::size_t> ratios);
    bool operator==(const SplitSpec&) const = default;
};

// floor(total * r_i / sum(r)); the remainder goes to the largest ratio
// (lowest index on ties).
std::vector<std::size_t> split_sizes(std::size_t total, const SplitSpec& spec);
// Disjoint index sets covering [0, total), drawn from a seeded permutation.
std::vector<std::vector<std::size_t>> split_indices(std::size_t total, const SplitSpec& spec, std::uint64_t seed);
std::vector<std::vector<Sample>> split(const std::vector<Sample>& samples, const SplitSpec& spec,
                                       std::uint64_t seed);

struct HoldoutIndices {
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
};

struct HoldoutSplit {
    std::vector<Sample> train;
    std::vector<Sample> test;
};

HoldoutIndices holdout_indices(std::size_t total, std::size_t n_test, std::uint64_t seed);
HoldoutSplit holdout(const std::vector<Sample>& samples, std::size_t n_test, std::uint64_t seed);

// Flat corpus file: "FDTC", version u32, frame_dim u32, count u32, then per
// sample S u32, F u32, tokens u32 x S, frames f64 x (F * frame_dim).
Bytes dump_corpus(const std::vector<Sample>& samples);
std::vector<Sample> load_corpus(std::span<const std::uint8_t> bytes);

}  // namespace fdt
