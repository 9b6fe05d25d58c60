#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "doctest.h"
#include "fdt/data.hpp"
#include "fdt/errors.hpp"

using namespace fdt;

namespace {

SyntheticTask task(bool bias = true) { return SyntheticTask::create(3, 10, 4, 5, 9, 2, bias); }

// Straight from the definition: window of three token positions around j / r.
double teacher_oracle(const SyntheticTask& t, const std::vector<int>& tokens, std::size_t j, std::size_t d) {
    const long center = static_cast<long>(j / t.frames_per_token);
    double s = 0.0;
    int n = 0;
    for (long p = center - 1; p <= center + 1; ++p) {
        if (p >= 0 && p < static_cast<long>(tokens.size())) {
            s += t.codebook.at(static_cast<std::size_t>(tokens[static_cast<std::size_t>(p)]), d);
            ++n;
        }
    }
    double bias = t.position_bias ? 0.5 * std::sin(0.3 * static_cast<double>(j) + 0.7 * static_cast<double>(d)) : 0.0;
    return s / n + bias;
}

bool same(const std::vector<Sample>& a, const std::vector<Sample>& b) {
    if (a.size() != b.size()) {
        return false;
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].tokens != b[i].tokens || !bit_equal(a[i].frames, b[i].frames)) {
            return false;
        }
    }
    return true;
}

}  // namespace

TEST_CASE("generation is deterministic and chunk-independent") {
    const auto t = task();
    auto a = generate(t, 40);
    auto b = generate(t, 40);
    CHECK(same(a, b));
    auto head = generate(t, 15);
    auto tail = generate(t, 25, 15);
    head.insert(head.end(), tail.begin(), tail.end());
    CHECK(same(a, head));
    CHECK(bit_equal(SyntheticTask::create(3, 10, 4, 5, 9, 2).codebook, t.codebook));
    CHECK_FALSE(bit_equal(SyntheticTask::create(4, 10, 4, 5, 9, 2).codebook, t.codebook));
}

TEST_CASE("samples respect the length range and F = r S") {
    const auto t = task();
    std::set<std::size_t> lengths;
    for (const auto& s : generate(t, 200)) {
        CHECK(s.tokens.size() >= 5);
        CHECK(s.tokens.size() <= 9);
        CHECK(s.frames.dim(0) == 2 * s.tokens.size());
        CHECK(s.frames.dim(1) == 4);
        lengths.insert(s.tokens.size());
        for (int tok : s.tokens) {
            CHECK(tok >= 0);
            CHECK(tok < 10);
        }
    }
    CHECK(lengths.size() == 5);
}

TEST_CASE("constant tokens without position bias reproduce the codebook row") {
    const auto t = task(false);
    const std::vector<int> tokens(6, 7);
    Tensor f = teacher_frames(t, tokens);
    for (std::size_t j = 0; j < f.dim(0); ++j) {
        for (std::size_t d = 0; d < 4; ++d) {
            CHECK(std::abs(f.at(j, d) - t.codebook.at(7, d)) < 1e-15);
        }
    }
}

TEST_CASE("frames match the window-mean oracle") {
    for (bool bias : {true, false}) {
        const auto t = task(bias);
        for (const auto& s : generate(t, 30)) {
            for (std::size_t j = 0; j < s.frames.dim(0); ++j) {
                for (std::size_t d = 0; d < 4; ++d) {
                    CHECK(std::abs(s.frames.at(j, d) - teacher_oracle(t, s.tokens, j, d)) < 1e-12);
                }
            }
        }
    }
}

TEST_CASE("split sizes") {
    CHECK(split_sizes(12600, SplitSpec::balanced(5)) == std::vector<std::size_t>(5, 2520));
    CHECK(split_sizes(12600, SplitSpec::from_ratios({1, 1, 3})) == std::vector<std::size_t>{2520, 2520, 7560});
    CHECK(split_sizes(10, SplitSpec::from_ratios({1, 1, 8})) == std::vector<std::size_t>{1, 1, 8});
    // Remainder goes to the largest ratio, lowest index on ties.
    CHECK(split_sizes(11, SplitSpec::from_ratios({1, 2, 2})) == std::vector<std::size_t>{2, 5, 4});
    CHECK(split_sizes(7, SplitSpec::balanced(3)) == std::vector<std::size_t>{3, 2, 2});
    CHECK_THROWS_AS(SplitSpec::from_ratios({}), ConfigError);
    CHECK_THROWS_AS(SplitSpec::from_ratios({1, 0}), ConfigError);
    CHECK_THROWS_AS(split_sizes(10, SplitSpec{}), ConfigError);
}

TEST_CASE("splits partition the input for every spec") {
    const std::vector<SplitSpec> specs = {SplitSpec::balanced(1), SplitSpec::balanced(4),
                                          SplitSpec::from_ratios({1, 2, 4}), SplitSpec::from_ratios({1, 1, 8}),
                                          SplitSpec::from_ratios({3, 5})};
    for (std::size_t total : {1u, 9u, 100u, 12600u}) {
        for (const auto& spec : specs) {
            auto shards = split_indices(total, spec, 17);
            const auto sizes = split_sizes(total, spec);
            std::vector<std::size_t> all;
            for (std::size_t i = 0; i < shards.size(); ++i) {
                CHECK(shards[i].size() == sizes[i]);
                all.insert(all.end(), shards[i].begin(), shards[i].end());
            }
            std::sort(all.begin(), all.end());
            std::vector<std::size_t> expect(total);
            std::iota(expect.begin(), expect.end(), std::size_t{0});
            CHECK(all == expect);
        }
    }
    CHECK(split_indices(100, SplitSpec::balanced(4), 1) == split_indices(100, SplitSpec::balanced(4), 1));
    CHECK(split_indices(100, SplitSpec::balanced(4), 1) != split_indices(100, SplitSpec::balanced(4), 2));
}

TEST_CASE("sample-level split keeps every sample once") {
    auto samples = generate(task(), 23);
    auto shards = split(samples, SplitSpec::from_ratios({1, 2}), 5);
    CHECK(shards[0].size() + shards[1].size() == 23);
    std::multiset<std::vector<int>> in;
    std::multiset<std::vector<int>> out;
    for (const auto& s : samples) {
        in.insert(s.tokens);
    }
    for (const auto& shard : shards) {
        for (const auto& s : shard) {
            out.insert(s.tokens);
        }
    }
    CHECK(in == out);
}

TEST_CASE("holdout") {
    auto idx = holdout_indices(13100, 500, 3);
    CHECK(idx.train.size() == 12600);
    CHECK(idx.test.size() == 500);
    std::vector<std::size_t> all = idx.train;
    all.insert(all.end(), idx.test.begin(), idx.test.end());
    std::sort(all.begin(), all.end());
    CHECK(std::adjacent_find(all.begin(), all.end()) == all.end());
    CHECK(all.size() == 13100);
    CHECK(all.back() == 13099);
    auto again = holdout_indices(13100, 500, 3);
    CHECK(again.test == idx.test);
    CHECK(holdout_indices(13100, 500, 4).test != idx.test);
    CHECK_THROWS_AS(holdout_indices(10, 10, 0), ConfigError);

    auto samples = generate(task(), 12);
    auto h = holdout(samples, 4, 1);
    CHECK(h.train.size() == 8);
    CHECK(h.test.size() == 4);
}

TEST_CASE("corpus file round trip") {
    auto samples = generate(task(), 17);
    Bytes bytes = dump_corpus(samples);
    CHECK(same(load_corpus(bytes), samples));
    CHECK(dump_corpus(load_corpus(bytes)) == bytes);
    Bytes bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(load_corpus(bad), FormatError);
    Bytes trunc(bytes.begin(), bytes.end() - 1);
    CHECK_THROWS_AS(load_corpus(trunc), FormatError);
    Bytes extra = bytes;
    extra.push_back(0);
    CHECK_THROWS_AS(load_corpus(extra), FormatError);
}

TEST_CASE("task validation") {
    CHECK_THROWS_AS(SyntheticTask::create(1, 10, 4, 9, 5, 2), ConfigError);
    CHECK_THROWS_AS(SyntheticTask::create(1, 0, 4, 5, 9, 2), ConfigError);
}
