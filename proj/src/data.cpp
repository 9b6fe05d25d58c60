#include "fdt/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "fdt/errors.hpp"
#include "fdt/param.hpp"
#include "fdt/rng.hpp"

namespace fdt {

namespace {
constexpr std::uint8_t kCorpusMagic[4] = {'F', 'D', 'T', 'C'};
constexpr std::uint32_t kCorpusVersion = 1;
}  // namespace

SyntheticTask SyntheticTask::create(std::uint64_t seed, std::size_t vocab_size, std::size_t frame_dim,
                                    std::size_t min_len, std::size_t max_len, std::size_t frames_per_token,
                                    bool position_bias) {
    if (vocab_size == 0 || frame_dim == 0 || frames_per_token == 0) {
        throw ConfigError("task: vocab_size, frame_dim and frames_per_token must be positive");
    }
    if (min_len == 0 || min_len > max_len) {
        throw ConfigError("task: need 1 <= min_len <= max_len, got " + std::to_string(min_len) + ".." +
                          std::to_string(max_len));
    }
    SyntheticTask task;
    task.seed = seed;
    task.vocab_size = vocab_size;
    task.frame_dim = frame_dim;
    task.min_len = min_len;
    task.max_len = max_len;
    task.frames_per_token = frames_per_token;
    task.position_bias = position_bias;
    task.codebook = init_normal({vocab_size, frame_dim}, derive_seed(seed, "codebook"));
    return task;
}

double position_bias(std::size_t frame, std::size_t dim) {
    return 0.5 * std::sin(0.3 * static_cast<double>(frame) + 0.7 * static_cast<double>(dim));
}

Tensor teacher_frames(const SyntheticTask& task, std::span<const int> tokens) {
    const std::size_t S = tokens.size();
    const std::size_t F = task.frames_per_token * S;
    const std::size_t fd = task.frame_dim;
    Tensor frames({F, fd});
    for (std::size_t j = 0; j < F; ++j) {
        const std::size_t center = j / task.frames_per_token;
        const std::size_t lo = center == 0 ? 0 : center - 1;
        const std::size_t hi = std::min(S - 1, center + 1);
        const double count = static_cast<double>(hi - lo + 1);
        for (std::size_t d = 0; d < fd; ++d) {
            double acc = 0.0;
            for (std::size_t p = lo; p <= hi; ++p) {
                acc += task.codebook.at(static_cast<std::size_t>(tokens[p]), d);
            }
            frames.at(j, d) = acc / count + (task.position_bias ? position_bias(j, d) : 0.0);
        }
    }
    return frames;
}

std::vector<Sample> generate(const SyntheticTask& task, std::size_t n_samples, std::size_t first_index) {
    std::vector<Sample> out;
    out.reserve(n_samples);
    const std::size_t span = task.max_len - task.min_len + 1;
    for (std::size_t i = first_index; i < first_index + n_samples; ++i) {
        Rng rng(derive_seed(task.seed, "sample", i));
        const std::size_t len = task.min_len + rng.below(span);
        Sample s;
        s.tokens.resize(len);
        for (auto& t : s.tokens) {
            t = static_cast<int>(rng.below(task.vocab_size));
        }
        s.frames = teacher_frames(task, s.tokens);
        out.push_back(std::move(s));
    }
    return out;
}

SplitSpec SplitSpec::balanced(std::size_t n_clients) {
    if (n_clients == 0) {
        throw ConfigError("split: balanced split needs at least one client");
    }
    return SplitSpec{std::vector<std::size_t>(n_clients, 1)};
}

SplitSpec SplitSpec::from_ratios(std::vector<std::size_t> ratios) {
    if (ratios.empty()) {
        throw ConfigError("split: ratios must not be empty");
    }
    for (auto r : ratios) {
        if (r == 0) {
            throw ConfigError("split: ratios must be positive");
        }
    }
    return SplitSpec{std::move(ratios)};
}

std::vector<std::size_t> split_sizes(std::size_t total, const SplitSpec& spec) {
    if (spec.ratios.empty()) {
        throw ConfigError("split: ratios must not be empty");
    }
    const std::size_t sum = std::accumulate(spec.ratios.begin(), spec.ratios.end(), std::size_t{0});
    if (sum == 0) {
        throw ConfigError("split: ratios must be positive");
    }
    std::vector<std::size_t> sizes;
    std::size_t assigned = 0;
    for (auto r : spec.ratios) {
        sizes.push_back(total * r / sum);
        assigned += sizes.back();
    }
    const auto largest = static_cast<std::size_t>(
        std::distance(spec.ratios.begin(), std::max_element(spec.ratios.begin(), spec.ratios.end())));
    sizes[largest] += total - assigned;
    return sizes;
}

std::vector<std::vector<std::size_t>> split_indices(std::size_t total, const SplitSpec& spec, std::uint64_t seed) {
    const auto sizes = split_sizes(total, spec);
    std::vector<std::size_t> perm(total);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Rng rng(derive_seed(seed, "split"));
    rng.shuffle(std::span<std::size_t>(perm));
    std::vector<std::vector<std::size_t>> shards;
    std::size_t offset = 0;
    for (auto n : sizes) {
        std::vector<std::size_t> shard(perm.begin() + static_cast<std::ptrdiff_t>(offset),
                                       perm.begin() + static_cast<std::ptrdiff_t>(offset + n));
        std::sort(shard.begin(), shard.end());
        shards.push_back(std::move(shard));
        offset += n;
    }
    return shards;
}

std::vector<std::vector<Sample>> split(const std::vector<Sample>& samples, const SplitSpec& spec,
                                       std::uint64_t seed) {
    std::vector<std::vector<Sample>> shards;
    for (const auto& idx : split_indices(samples.size(), spec, seed)) {
        std::vector<Sample> shard;
        shard.reserve(idx.size());
        for (auto i : idx) {
            shard.push_back(samples[i]);
        }
        shards.push_back(std::move(shard));
    }
    return shards;
}

HoldoutIndices holdout_indices(std::size_t total, std::size_t n_test, std::uint64_t seed) {
    if (n_test >= total) {
        throw ConfigError("holdout: n_test (" + std::to_string(n_test) + ") must be smaller than the corpus (" +
                          std::to_string(total) + ")");
    }
    std::vector<std::size_t> perm(total);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Rng rng(derive_seed(seed, "holdout"));
    rng.shuffle(std::span<std::size_t>(perm));
    HoldoutIndices out;
    out.test.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_test));
    out.train.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_test), perm.end());
    std::sort(out.test.begin(), out.test.end());
    std::sort(out.train.begin(), out.train.end());
    return out;
}

HoldoutSplit holdout(const std::vector<Sample>& samples, std::size_t n_test, std::uint64_t seed) {
    const auto idx = holdout_indices(samples.size(), n_test, seed);
    HoldoutSplit out;
    for (auto i : idx.train) {
        out.train.push_back(samples[i]);
    }
    for (auto i : idx.test) {
        out.test.push_back(samples[i]);
    }
    return out;
}

Bytes dump_corpus(const std::vector<Sample>& samples) {
    Bytes out;
    ByteWriter w(out);
    w.raw(kCorpusMagic);
    w.u32(kCorpusVersion);
    const std::size_t fd = samples.empty() ? 0 : samples.front().frames.cols();
    w.u32(static_cast<std::uint32_t>(fd));
    w.u32(static_cast<std::uint32_t>(samples.size()));
    for (const auto& s : samples) {
        if (s.frames.rank() != 2 || s.frames.cols() != fd) {
            throw DimensionError("dump_corpus: inconsistent frame shape " + shape_str(s.frames.shape()));
        }
        w.u32(static_cast<std::uint32_t>(s.tokens.size()));
        w.u32(static_cast<std::uint32_t>(s.frames.dim(0)));
        for (int t : s.tokens) {
            w.u32(static_cast<std::uint32_t>(t));
        }
        for (double x : s.frames.values()) {
            w.f64(x);
        }
    }
    return out;
}

std::vector<Sample> load_corpus(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes, "corpus");
    auto magic = r.take(4);
    if (!std::equal(magic.begin(), magic.end(), kCorpusMagic)) {
        throw FormatError("corpus: bad magic (expected \"FDTC\")");
    }
    const auto version = r.u32();
    if (version != kCorpusVersion) {
        throw FormatError("corpus: version expected " + std::to_string(kCorpusVersion) + ", found " +
                          std::to_string(version));
    }
    const std::size_t fd = r.u32();
    const std::size_t count = r.u32();
    std::vector<Sample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        Sample s;
        const std::size_t S = r.u32();
        const std::size_t F = r.u32();
        s.tokens.resize(S);
        for (auto& t : s.tokens) {
            t = static_cast<int>(r.u32());
        }
        s.frames = Tensor({F, fd});
        for (double& x : s.frames.values()) {
            x = r.f64();
        }
        out.push_back(std::move(s));
    }
    if (r.remaining() != 0) {
        throw FormatError("corpus: " + std::to_string(r.remaining()) + " trailing bytes");
    }
    return out;
}

}  // namespace fdt
