#pragma once

// Experiment driver behind the command-line tool. Exit codes: 0 success,
// 1 verification failure, 2 usage or configuration error.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "fdt/config.hpp"
#include "fdt/cost.hpp"
#include "fdt/data.hpp"
#include "fdt/fed.hpp"

namespace fdt {

inline constexpr int kSchemaVersion = 1;
inline constexpr int kExitOk = 0;
inline constexpr int kExitVerification = 1;
inline constexpr int kExitUsage = 2;

SyntheticTask make_task(const ExperimentConfig& config);

struct ExperimentData {
    std::vector<Sample> corpus;  // train_samples + test_samples, generation order
    std::vector<Sample> train;
    std::vector<Sample> test;
    std::vector<std::vector<Sample>> shards;
};

ExperimentData build_data(const ExperimentConfig& config);

CostInputs cost_inputs(const ExperimentConfig& config, const CommLedger& ledger);

struct RunOutput {
    TrainingResult training;
    LedgerVerification verification;
    Bytes corpus_bytes;
    std::string metrics_csv;
    std::string summary_json;
};

RunOutput run_experiment(const ExperimentConfig& config);

// Columns: t,l_t,mean_train_loss,eval_loss,downlink_bytes,uplink_bytes,cum_bytes
std::string metrics_csv(const std::vector<RoundReport>& reports);

// SHA-1 of "blob <size>\0" + content, as lowercase hex.
std::string git_blob_sha1(std::span<const std::uint8_t> bytes);

// Writes metrics.csv, summary.json, manifest.json, weights.bin and corpus.bin.
void write_run(const std::filesystem::path& out_dir, const ExperimentConfig& config, const RunOutput& run,
               const std::string& started_at, const std::string& finished_at);

std::string utc_timestamp();

double median(std::vector<double> values);

// Eval loss after the last round whose cumulative bytes fit in `budget`;
// NaN if even round 1 exceeds it.
double loss_at_bytes(const std::vector<RoundReport>& reports, std::uint64_t budget);

struct EqualBytesComparison {
    bool holds = false;
    std::uint64_t from_bytes = 0;
    std::uint64_t to_bytes = 0;
    std::size_t points = 0;
    double worst_gap = 0.0;  // max over points of median(grown) - median(fixed)
    std::uint64_t worst_bytes = 0;
};

// Checks median(grown) <= median(fixed) at every round boundary of either
// mode between from_fraction * B and B, B being the smaller final budget.
EqualBytesComparison compare_at_equal_bytes(const std::vector<std::vector<RoundReport>>& grown,
                                            const std::vector<std::vector<RoundReport>>& fixed,
                                            double from_fraction = 0.5);

int cmd_run(const std::filesystem::path& config_path, const std::filesystem::path& out_dir, std::ostream& out,
            std::ostream& err);
int cmd_compare(const std::filesystem::path& config_a, const std::filesystem::path& config_b,
                const std::vector<std::uint64_t>& seeds, const std::filesystem::path& out_dir, std::ostream& out,
                std::ostream& err);
int cmd_cost(const CostInputs& inputs, bool json, std::ostream& out, std::ostream& err);
int cmd_gradcheck(std::uint64_t seed, const std::optional<std::string>& fault_op, std::ostream& out,
                  std::ostream& err);

}  // namespace fdt
