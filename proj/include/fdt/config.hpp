#pragma once

// Experiment configuration: a sectioned key = value file.
//
//   [model]     vocab_size frame_dim d_model heads ffn_dim target_layers
//               growth_parts max_seq_len
//   [scaling]   literal_division
//   [federated] mode(fedt|feddt) num_clients clients_per_round batch_size lr
//               optimizer(adam|sgd) reset_moments_on_growth codec(identity|sealed)
//               seed
//   [schedule]  rounds local_iters
//   [adam]      beta1 beta2 epsilon
//   [task]      seed min_len max_len frames_per_token position_bias
//               train_samples test_samples holdout_seed
//   [split]     kind(balanced|ratios) ratios(e.g. 1,1,3) seed
//   [run]       verify_growth probe_samples
//
// Every key is optional and defaults as below; unknown sections or keys are
// rejected.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "fdt/data.hpp"
#include "fdt/fed.hpp"
#include "fdt/model.hpp"

namespace fdt {

struct TaskConfig {
    std::uint64_t seed = 7;
    std::size_t min_len = 8;
    std::size_t max_len = 24;
    std::size_t frames_per_token = 2;
    bool position_bias = true;
    std::size_t train_samples = 512;
    std::size_t test_samples = 64;
    std::uint64_t holdout_seed = 11;

    bool operator==(const TaskConfig&) const = default;
};

enum class SplitKind { balanced, ratios };

struct SplitConfig {
    SplitKind kind = SplitKind::balanced;
    std::vector<std::size_t> ratios;
    std::uint64_t seed = 13;

    bool operator==(const SplitConfig&) const = default;
};

struct ExperimentConfig {
    ModelConfig model;
    FederatedConfig fed;
    TaskConfig task;
    SplitConfig split;

    // Cross-section checks; throws ConfigError naming the field.
    void validate() const;
    SplitSpec split_spec() const;
    // Same corpus, holdout and shards.
    bool same_data(const ExperimentConfig& other) const;
    bool operator==(const ExperimentConfig&) const = default;
};

ExperimentConfig parse_config(const std::string& text, const std::string& origin = "<config>");
// Throws ConfigError mentioning the path when the file cannot be read.
ExperimentConfig load_config(const std::filesystem::path& path);

// Every field in schema order as (section, key, value) with canonical
// formatting. parse_config(to_ini(c)) == c.
std::vector<std::pair<std::string, std::vector<std::pair<std::string, std::string>>>> describe(
    const ExperimentConfig& config);
std::string to_ini(const ExperimentConfig& config);

// Shortest round-trip decimal form.
std::string format_double(double value);

}  // namespace fdt
