#pragma once

// Federated training of the growable transformer: FedDT grows both stacks on
// a schedule of global-step thresholds, FedT trains the full depth throughout.

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fdt/model.hpp"
#include "fdt/optim.hpp"
#include "fdt/payload.hpp"
#include "fdt/rng.hpp"
#include "fdt/sample.hpp"

namespace fdt {

enum class Mode { fedt, feddt };
enum class CodecKind { identity, sealed };
enum class OptimizerKind { adam, sgd };

std::string to_string(Mode mode);
std::string to_string(CodecKind codec);
std::string to_string(OptimizerKind optimizer);

struct GrowthSchedule {
    std::size_t rounds = 0;        // T
    std::size_t parts = 0;         // c
    std::size_t target_layers = 0; // L
    std::size_t per_growth = 0;    // q = L / c
    std::size_t local_iters = 0;   // I
    std::vector<std::uint64_t> thresholds;  // K, strictly increasing

    // K = { j * (T / c) * I : j = 1 .. c-1 }.
    static GrowthSchedule uniform(std::size_t rounds, std::size_t parts, std::size_t target_layers,
                                  std::size_t local_iters);
    // Depth for round t given depth l coming in: l + q iff t * I is in K and l < L.
    std::size_t maybe_grow(std::size_t t, std::size_t layers) const;
    // l_t for t = 1 .. T starting from q.
    std::vector<std::size_t> trace() const;
};

struct FederatedConfig {
    Mode mode = Mode::feddt;
    std::size_t num_clients = 3;
    std::size_t clients_per_round = 3;  // M
    std::size_t batch_size = 16;        // B
    std::size_t rounds = 120;           // T
    std::size_t local_iters = 2;        // I
    double lr = 1e-3;
    OptimizerKind optimizer = OptimizerKind::adam;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    bool reset_moments_on_growth = false;
    CodecKind codec = CodecKind::identity;
    std::uint64_t seed = 0;
    bool verify_growth = true;
    std::size_t probe_samples = 4;

    void validate() const;
    bool operator==(const FederatedConfig&) const = default;
};

// Uniform sample of M ids out of [0, num_clients) without replacement, sorted.
std::vector<std::size_t> sample_clients(Rng& rng, std::size_t num_clients, std::size_t m);
// The per-round draw: an Rng derived from (seed, t).
std::vector<std::size_t> sample_clients_for_round(std::uint64_t seed, std::size_t t, std::size_t num_clients,
                                                  std::size_t m);

class PayloadCodec {
public:
    virtual ~PayloadCodec() = default;
    virtual CodecKind kind() const = 0;
    // `nonce` distinguishes messages; seal and unseal must use the same one.
    virtual Bytes seal(std::span<const std::uint8_t> plain, std::uint64_t nonce) const = 0;
    virtual Bytes unseal(std::span<const std::uint8_t> wire, std::uint64_t nonce) const = 0;
};

class IdentityCodec final : public PayloadCodec {
public:
    CodecKind kind() const override { return CodecKind::identity; }
    Bytes seal(std::span<const std::uint8_t> plain, std::uint64_t nonce) const override;
    Bytes unseal(std::span<const std::uint8_t> wire, std::uint64_t nonce) const override;
};

// Keyed XOR keystream plus an 8-byte trailer: fnv1a64(plain) ^ mix64(key ^ nonce).
// Any single corrupted byte changes the recomputed checksum. This is a
// stand-in for real encryption and offers no confidentiality guarantees.
class SealedCodec final : public PayloadCodec {
public:
    explicit SealedCodec(std::uint64_t key) : key_(key) {}
    CodecKind kind() const override { return CodecKind::sealed; }
    Bytes seal(std::span<const std::uint8_t> plain, std::uint64_t nonce) const override;
    // Throws IntegrityError on checksum mismatch or a short message.
    Bytes unseal(std::span<const std::uint8_t> wire, std::uint64_t nonce) const override;

private:
    std::uint64_t key_;
};

std::unique_ptr<PayloadCodec> make_codec(CodecKind kind, std::uint64_t key);

// Elementwise mean summed in the given order: a_1 + sum_{i>1}(a_i - a_1) / M.
// Identical inputs therefore average to themselves exactly.
WeightPayload aggregate(std::span<const WeightPayload> payloads);

struct ClientOptions {
    std::size_t local_iters = 1;
    std::size_t batch_size = 16;
    double lr = 1e-3;
    OptimizerKind optimizer = OptimizerKind::adam;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    bool reset_moments_on_growth = false;
};

struct ClientResult {
    Bytes wire;
    double mean_loss = 0.0;  // NaN when no local step ran
    std::size_t steps = 0;
};

// A participant owning its shard, its local model copy and its optimizer
// moments, which persist across rounds. Only raw weights cross the wire.
class Client {
public:
    Client(std::size_t id, std::vector<Sample> shard, const ModelConfig& config, std::uint64_t model_seed,
           std::uint64_t data_seed, ClientOptions options);

    std::size_t id() const { return id_; }
    const std::vector<Sample>& shard() const { return shard_; }
    DynamicTransformer& model() { return model_; }
    const AdamState& adam() const { return adam_; }

    // Unseals, checks the depth against l_t, rebuilds f(w, l_t), runs I local
    // steps and returns the sealed weights-only payload.
    ClientResult update(std::span<const std::uint8_t> wire, std::size_t expected_layers, const PayloadCodec& codec,
                        std::uint64_t nonce_down, std::uint64_t nonce_up);

    // Next B samples of a per-epoch seeded permutation; indices are sorted
    // within the batch and B is clamped to the shard size.
    Batch next_batch();

private:
    std::size_t id_;
    std::vector<Sample> shard_;
    DynamicTransformer model_;
    ClientOptions options_;
    AdamState adam_;
    Rng rng_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
};

struct RoundReport {
    std::size_t t = 0;
    std::size_t layers = 0;
    std::vector<std::size_t> clients;
    double mean_train_loss = 0.0;
    double eval_loss = 0.0;
    std::uint64_t downlink_bytes = 0;
    std::uint64_t uplink_bytes = 0;
    std::uint64_t cum_bytes = 0;
    bool grew = false;
};

struct LedgerRow {
    std::size_t t = 0;
    std::size_t layers = 0;
    std::size_t clients = 0;
    std::uint64_t downlink_bytes = 0;
    std::uint64_t uplink_bytes = 0;
    std::uint64_t block_bytes = 0;  // 8 * l_t * (W1 + W2) * M * 2
    std::uint64_t fixed_bytes = 0;  // everything else on the wire
    std::uint64_t param_steps = 0;  // local steps * trainable params at l_t
};

struct CommLedger {
    std::size_t per_enc_block = 0;  // W1
    std::size_t per_dec_block = 0;  // W2
    std::size_t fixed_params = 0;
    std::vector<LedgerRow> rows;

    std::uint64_t total_bytes() const;
    std::uint64_t total_block_bytes() const;
    std::uint64_t total_fixed_bytes() const;
    std::uint64_t total_param_steps() const;
};

// Server state for one experiment. Shards are assigned to clients by index.
class Simulation {
public:
    Simulation(ModelConfig model_config, FederatedConfig config, std::vector<std::vector<Sample>> shards,
               std::vector<Sample> test_set);

    // One communication round: sample S_t, maybe grow, dispatch, collect,
    // aggregate, overwrite, evaluate, record.
    RoundReport run_round();
    bool finished() const { return t_ >= config_.rounds; }

    std::size_t round() const { return t_; }
    const GrowthSchedule& schedule() const { return schedule_; }
    const FederatedConfig& config() const { return config_; }
    DynamicTransformer& global_model() { return global_; }
    std::vector<Client>& clients() { return clients_; }
    const CommLedger& ledger() const { return ledger_; }
    const std::vector<RoundReport>& reports() const { return reports_; }
    const std::vector<std::size_t>& growth_rounds() const { return growth_rounds_; }

private:
    void grow_global(std::size_t new_layers);

    ModelConfig model_config_;
    FederatedConfig config_;
    GrowthSchedule schedule_;
    DynamicTransformer global_;
    std::vector<Client> clients_;
    std::vector<Sample> test_set_;
    Batch probe_;
    std::unique_ptr<PayloadCodec> codec_;
    CommLedger ledger_;
    std::vector<RoundReport> reports_;
    std::vector<std::size_t> growth_rounds_;
    std::size_t t_ = 0;
};

struct TrainingResult {
    std::vector<RoundReport> reports;
    CommLedger ledger;
    std::vector<std::size_t> growth_rounds;
    Bytes final_weights;  // weights-only payload of the global model
    std::size_t final_layers = 0;
};

TrainingResult run_training(const ModelConfig& model_config, const FederatedConfig& config,
                            std::vector<std::vector<Sample>> shards, std::vector<Sample> test_set);

}  // namespace fdt
