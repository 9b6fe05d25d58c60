#include "fdt/fed.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <map>
#include <numeric>

#include "fdt/errors.hpp"

namespace fdt {

std::string to_string(Mode mode) { return mode == Mode::fedt ? "fedt" : "feddt"; }
std::string to_string(CodecKind codec) { return codec == CodecKind::identity ? "identity" : "sealed"; }
std::string to_string(OptimizerKind optimizer) { return optimizer == OptimizerKind::adam ? "adam" : "sgd"; }

GrowthSchedule GrowthSchedule::uniform(std::size_t rounds, std::size_t parts, std::size_t target_layers,
                                       std::size_t local_iters) {
    if (parts == 0 || target_layers == 0 || rounds == 0) {
        throw ConfigError("schedule: rounds, growth_parts and target_layers must be positive");
    }
    if (target_layers % parts != 0) {
        throw ConfigError("schedule: target_layers (" + std::to_string(target_layers) +
                          ") must be divisible by growth_parts (" + std::to_string(parts) + ")");
    }
    if (rounds % parts != 0) {
        throw ConfigError("schedule: rounds (" + std::to_string(rounds) + ") must be divisible by growth_parts (" +
                          std::to_string(parts) + ")");
    }
    if (local_iters == 0) {
        throw ConfigError("schedule: local_iters must be positive");
    }
    GrowthSchedule s;
    s.rounds = rounds;
    s.parts = parts;
    s.target_layers = target_layers;
    s.per_growth = target_layers / parts;
    s.local_iters = local_iters;
    for (std::size_t j = 1; j < parts; ++j) {
        s.thresholds.push_back(static_cast<std::uint64_t>(j * (rounds / parts) * local_iters));
    }
    return s;
}

std::size_t GrowthSchedule::maybe_grow(std::size_t t, std::size_t layers) const {
    const auto k = static_cast<std::uint64_t>(t * local_iters);
    const bool hit = std::binary_search(thresholds.begin(), thresholds.end(), k);
    return hit && layers < target_layers ? layers + per_growth : layers;
}

std::vector<std::size_t> GrowthSchedule::trace() const {
    std::vector<std::size_t> out;
    std::size_t l = per_growth;
    for (std::size_t t = 1; t <= rounds; ++t) {
        l = maybe_grow(t, l);
        out.push_back(l);
    }
    return out;
}

void FederatedConfig::validate() const {
    if (num_clients == 0) {
        throw ConfigError("federated.num_clients must be positive");
    }
    if (clients_per_round == 0 || clients_per_round > num_clients) {
        throw ConfigError("federated.clients_per_round must be in [1, num_clients=" + std::to_string(num_clients) +
                          "], got " + std::to_string(clients_per_round));
    }
    if (batch_size == 0) {
        throw ConfigError("federated.batch_size must be positive");
    }
    if (rounds == 0) {
        throw ConfigError("schedule.rounds must be positive");
    }
    if (local_iters == 0) {
        throw ConfigError("schedule.local_iters must be positive");
    }
    if (!(lr > 0.0) || !std::isfinite(lr)) {
        throw ConfigError("federated.lr must be a positive finite number");
    }
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
        throw ConfigError("adam.beta1 and adam.beta2 must lie in (0, 1)");
    }
    if (!(epsilon > 0.0)) {
        throw ConfigError("adam.epsilon must be positive");
    }
}

std::vector<std::size_t> sample_clients(Rng& rng, std::size_t num_clients, std::size_t m) {
    if (m > num_clients) {
        throw ConfigError("sample_clients: M=" + std::to_string(m) + " exceeds num_clients=" +
                          std::to_string(num_clients));
    }
    std::vector<std::size_t> ids(num_clients);
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    // Partial Fisher-Yates: the first m slots are a uniform sample.
    for (std::size_t i = 0; i < m; ++i) {
        std::size_t j = i + rng.below(num_clients - i);
        std::swap(ids[i], ids[j]);
    }
    ids.resize(m);
    std::sort(ids.begin(), ids.end());
    return ids;
}

std::vector<std::size_t> sample_clients_for_round(std::uint64_t seed, std::size_t t, std::size_t num_clients,
                                                  std::size_t m) {
    Rng rng(derive_seed(seed, "round", t));
    return sample_clients(rng, num_clients, m);
}

Bytes IdentityCodec::seal(std::span<const std::uint8_t> plain, std::uint64_t) const {
    return Bytes(plain.begin(), plain.end());
}

Bytes IdentityCodec::unseal(std::span<const std::uint8_t> wire, std::uint64_t) const {
    return Bytes(wire.begin(), wire.end());
}

namespace {

void apply_keystream(std::span<std::uint8_t> bytes, std::uint64_t key, std::uint64_t nonce) {
    Rng stream(mix64(key ^ mix64(nonce)));
    std::size_t i = 0;
    while (i < bytes.size()) {
        std::uint64_t word = stream.next_u64();
        for (int b = 0; b < 8 && i < bytes.size(); ++b, ++i) {
            bytes[i] ^= static_cast<std::uint8_t>(word >> (8 * b));
        }
    }
}

std::uint64_t seal_tag(std::span<const std::uint8_t> plain, std::uint64_t key, std::uint64_t nonce) {
    return fnv1a64(plain) ^ mix64(key ^ nonce);
}

}  // namespace

Bytes SealedCodec::seal(std::span<const std::uint8_t> plain, std::uint64_t nonce) const {
    Bytes out(plain.begin(), plain.end());
    apply_keystream(out, key_, nonce);
    ByteWriter w(out);
    w.u64(seal_tag(plain, key_, nonce));
    return out;
}

Bytes SealedCodec::unseal(std::span<const std::uint8_t> wire, std::uint64_t nonce) const {
    if (wire.size() < 8) {
        throw IntegrityError("sealed payload shorter than its 8-byte checksum");
    }
    Bytes plain(wire.begin(), wire.end() - 8);
    apply_keystream(plain, key_, nonce);
    ByteReader r(wire.subspan(wire.size() - 8), "sealed checksum");
    const std::uint64_t tag = r.u64();
    if (tag != seal_tag(plain, key_, nonce)) {
        throw IntegrityError("sealed payload failed its checksum (" + std::to_string(wire.size()) + " bytes)");
    }
    return plain;
}

std::unique_ptr<PayloadCodec> make_codec(CodecKind kind, std::uint64_t key) {
    if (kind == CodecKind::sealed) {
        return std::make_unique<SealedCodec>(key);
    }
    return std::make_unique<IdentityCodec>();
}

WeightPayload aggregate(std::span<const WeightPayload> payloads) {
    if (payloads.empty()) {
        throw ContractError("aggregate: no payloads");
    }
    const WeightPayload& first = payloads.front();
    for (std::size_t i = 1; i < payloads.size(); ++i) {
        const WeightPayload& p = payloads[i];
        if (p.layers != first.layers || p.table != first.table || p.weights.size() != first.weights.size()) {
            throw ProtocolError("aggregate: payload " + std::to_string(i) + " has " + std::to_string(p.layers) +
                                " layers / " + std::to_string(p.table.size()) + " tensors, payload 0 has " +
                                std::to_string(first.layers) + " / " + std::to_string(first.table.size()));
        }
    }
    WeightPayload out;
    out.layers = first.layers;
    out.table = first.table;
    out.weights = first.weights;
    const double m = static_cast<double>(payloads.size());
    std::vector<double> acc(first.weights.size(), 0.0);
    for (std::size_t i = 1; i < payloads.size(); ++i) {
        const auto& w = payloads[i].weights;
        for (std::size_t j = 0; j < acc.size(); ++j) {
            acc[j] += w[j] - first.weights[j];
        }
    }
    for (std::size_t j = 0; j < acc.size(); ++j) {
        out.weights[j] += acc[j] / m;
    }
    return out;
}

Client::Client(std::size_t id, std::vector<Sample> shard, const ModelConfig& config, std::uint64_t model_seed,
               std::uint64_t data_seed, ClientOptions options)
    : id_(id),
      shard_(std::move(shard)),
      model_(config, model_seed),
      options_(options),
      rng_(derive_seed(data_seed, "client", id)) {
    if (shard_.empty()) {
        throw DataError("client " + std::to_string(id) + ": empty shard");
    }
    adam_.lr = options.lr;
    adam_.beta1 = options.beta1;
    adam_.beta2 = options.beta2;
    adam_.epsilon = options.epsilon;
    order_.resize(shard_.size());
    cursor_ = shard_.size();
}

Batch Client::next_batch() {
    const std::size_t b = std::min(options_.batch_size, shard_.size());
    if (cursor_ + b > order_.size()) {
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        rng_.shuffle(std::span<std::size_t>(order_));
        cursor_ = 0;
    }
    std::vector<std::size_t> idx(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + b));
    cursor_ += b;
    std::sort(idx.begin(), idx.end());
    Batch batch;
    batch.reserve(b);
    for (auto i : idx) {
        batch.push_back(shard_[i]);
    }
    return batch;
}

ClientResult Client::update(std::span<const std::uint8_t> wire, std::size_t expected_layers,
                            const PayloadCodec& codec, std::uint64_t nonce_down, std::uint64_t nonce_up) {
    const Bytes plain = codec.unseal(wire, nonce_down);
    const WeightPayload incoming = decode_payload(plain);
    if (incoming.layers != expected_layers) {
        throw ProtocolError("client " + std::to_string(id_) + ": payload has " + std::to_string(incoming.layers) +
                            " layers, schedule says " + std::to_string(expected_layers));
    }
    if (model_.layers() > expected_layers) {
        throw ProtocolError("client " + std::to_string(id_) + ": local model has " +
                            std::to_string(model_.layers()) + " layers, cannot shrink to " +
                            std::to_string(expected_layers));
    }
    if (model_.layers() < expected_layers) {
        model_.grow(expected_layers - model_.layers());
        if (options_.reset_moments_on_growth) {
            for (Param* p : model_.params()) {
                p->reset_moments();
            }
            adam_.step_count = 0;
        }
    }
    model_.import_weights(incoming);

    ClientResult result;
    const auto params = model_.params();
    double loss_sum = 0.0;
    for (std::size_t step = 0; step < options_.local_iters; ++step) {
        const Batch batch = next_batch();
        ad::Var l = loss(model_.forward(batch), pack_frames(batch));
        loss_sum += l.value()[0];
        ad::backward(l);
        if (options_.optimizer == OptimizerKind::adam) {
            adam_step(params, adam_);
        } else {
            sgd_step(params, options_.lr);
        }
        ++result.steps;
    }
    result.mean_loss = result.steps == 0 ? std::numeric_limits<double>::quiet_NaN()
                                         : loss_sum / static_cast<double>(result.steps);
    result.wire = codec.seal(encode_payload(model_.export_weights(false)), nonce_up);
    return result;
}

std::uint64_t CommLedger::total_bytes() const {
    std::uint64_t s = 0;
    for (const auto& r : rows) {
        s += r.downlink_bytes + r.uplink_bytes;
    }
    return s;
}

std::uint64_t CommLedger::total_block_bytes() const {
    std::uint64_t s = 0;
    for (const auto& r : rows) {
        s += r.block_bytes;
    }
    return s;
}

std::uint64_t CommLedger::total_fixed_bytes() const {
    std::uint64_t s = 0;
    for (const auto& r : rows) {
        s += r.fixed_bytes;
    }
    return s;
}

std::uint64_t CommLedger::total_param_steps() const {
    std::uint64_t s = 0;
    for (const auto& r : rows) {
        s += r.param_steps;
    }
    return s;
}

namespace {

std::uint64_t nonce_for(std::uint64_t seed, const char* direction, std::size_t t, std::size_t client,
                        std::size_t num_clients) {
    return derive_seed(seed, direction, static_cast<std::uint64_t>(t) * num_clients + client);
}

ClientOptions client_options(const FederatedConfig& c) {
    ClientOptions o;
    o.local_iters = c.local_iters;
    o.batch_size = c.batch_size;
    o.lr = c.lr;
    o.optimizer = c.optimizer;
    o.beta1 = c.beta1;
    o.beta2 = c.beta2;
    o.epsilon = c.epsilon;
    o.reset_moments_on_growth = c.reset_moments_on_growth;
    return o;
}

}  // namespace

Simulation::Simulation(ModelConfig model_config, FederatedConfig config, std::vector<std::vector<Sample>> shards,
                       std::vector<Sample> test_set)
    : model_config_(model_config),
      config_(config),
      global_(model_config, config.seed),
      test_set_(std::move(test_set)) {
    model_config_.validate();
    config_.validate();
    if (shards.size() != config_.num_clients) {
        throw ConfigError("federated.num_clients is " + std::to_string(config_.num_clients) + " but the split has " +
                          std::to_string(shards.size()) + " shards");
    }
    if (test_set_.empty()) {
        throw ConfigError("task.test_samples must be positive");
    }
    if (config_.mode == Mode::feddt) {
        schedule_ = GrowthSchedule::uniform(config_.rounds, model_config_.growth_parts, model_config_.target_layers,
                                            config_.local_iters);
    } else {
        // Fixed depth: start at L with no thresholds.
        schedule_ = GrowthSchedule::uniform(config_.rounds, 1, model_config_.target_layers, config_.local_iters);
        if (global_.layers() < model_config_.target_layers) {
            global_.grow(model_config_.target_layers - global_.layers());
        }
    }
    codec_ = make_codec(config_.codec, derive_seed(config_.seed, "codec"));
    const auto opts = client_options(config_);
    clients_.reserve(shards.size());
    for (std::size_t i = 0; i < shards.size(); ++i) {
        clients_.emplace_back(i, std::move(shards[i]), model_config_, config_.seed, config_.seed, opts);
    }
    const std::size_t n_probe = std::min(config_.probe_samples, test_set_.size());
    probe_.assign(test_set_.begin(), test_set_.begin() + static_cast<std::ptrdiff_t>(n_probe));
    const auto counts = global_.param_count();
    ledger_.per_enc_block = counts.per_enc_block;
    ledger_.per_dec_block = counts.per_dec_block;
    ledger_.fixed_params = counts.fixed_params;
}

void Simulation::grow_global(std::size_t new_layers) {
    const std::size_t old_layers = global_.layers();
    if (!config_.verify_growth || probe_.empty()) {
        global_.grow(new_layers - old_layers);
        return;
    }
    std::map<std::string, Tensor> before;
    for (const auto& np : global_.named_params()) {
        before.emplace(np.name, np.param->raw);
    }
    const HiddenStates hidden_before = global_.probe_hidden_states(probe_, old_layers);
    global_.grow(new_layers - old_layers);
    std::size_t matched = 0;
    for (const auto& np : global_.named_params()) {
        auto it = before.find(np.name);
        if (it == before.end()) {
            continue;
        }
        ++matched;
        if (!bit_equal(it->second, np.param->raw)) {
            throw VerificationError("round " + std::to_string(t_) + ": growth changed tensor " + np.name);
        }
    }
    if (matched != before.size()) {
        throw VerificationError("round " + std::to_string(t_) + ": growth dropped " +
                                std::to_string(before.size() - matched) + " tensors");
    }
    const HiddenStates hidden_after = global_.probe_hidden_states(probe_, old_layers);
    for (std::size_t b = 0; b < old_layers; ++b) {
        if (!bit_equal(hidden_before.encoder[b], hidden_after.encoder[b]) ||
            !bit_equal(hidden_before.decoder[b], hidden_after.decoder[b])) {
            throw VerificationError("round " + std::to_string(t_) + ": growth changed hidden state of block " +
                                    std::to_string(b));
        }
    }
}

RoundReport Simulation::run_round() {
    if (finished()) {
        throw ContractError("run_round: all " + std::to_string(config_.rounds) + " rounds already ran");
    }
    ++t_;
    RoundReport report;
    report.t = t_;

    // (1) sample S_t
    report.clients = sample_clients_for_round(config_.seed, t_, config_.num_clients, config_.clients_per_round);

    // (2) grow before dispatch
    const std::size_t l_prev = global_.layers();
    const std::size_t l_t = schedule_.maybe_grow(t_, l_prev);
    if (l_t != l_prev) {
        grow_global(l_t);
        report.grew = true;
        growth_rounds_.push_back(t_);
    }
    report.layers = l_t;

    // (3) seal and send, (4) local updates and collection
    const Bytes plain = encode_payload(global_.export_weights(false));
    const std::size_t m = report.clients.size();
    std::vector<Bytes> down(m);
    for (std::size_t s = 0; s < m; ++s) {
        const std::size_t id = report.clients[s];
        down[s] = codec_->seal(plain, nonce_for(config_.seed, "down", t_, id, config_.num_clients));
        report.downlink_bytes += down[s].size();
    }
    std::vector<ClientResult> results(m);
    std::vector<std::exception_ptr> errors(m);
#pragma omp parallel for schedule(dynamic, 1) if (m > 1)
    for (std::size_t s = 0; s < m; ++s) {
        const std::size_t id = report.clients[s];
        try {
            results[s] = clients_[id].update(down[s], l_t, *codec_,
                                             nonce_for(config_.seed, "down", t_, id, config_.num_clients),
                                             nonce_for(config_.seed, "up", t_, id, config_.num_clients));
        } catch (...) {
            errors[s] = std::current_exception();
        }
    }
    for (auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }

    std::vector<WeightPayload> payloads;
    payloads.reserve(m);
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t s = 0; s < m; ++s) {
        const std::size_t id = report.clients[s];
        report.uplink_bytes += results[s].wire.size();
        payloads.push_back(
            decode_payload(codec_->unseal(results[s].wire, nonce_for(config_.seed, "up", t_, id, config_.num_clients))));
        if (results[s].steps > 0) {
            loss_sum += results[s].mean_loss;
        }
        steps += results[s].steps;
    }
    report.mean_train_loss = steps == 0 ? std::numeric_limits<double>::quiet_NaN() : loss_sum / static_cast<double>(m);

    // (5) aggregate, (6) overwrite
    global_.import_weights(aggregate(payloads));

    // (7) evaluate
    report.eval_loss = evaluate(global_, test_set_);

    // (8) record
    report.cum_bytes = (reports_.empty() ? 0 : reports_.back().cum_bytes) + report.downlink_bytes + report.uplink_bytes;
    LedgerRow row;
    row.t = t_;
    row.layers = l_t;
    row.clients = m;
    row.downlink_bytes = report.downlink_bytes;
    row.uplink_bytes = report.uplink_bytes;
    row.block_bytes = 8ull * l_t * (ledger_.per_enc_block + ledger_.per_dec_block) * m * 2;
    row.fixed_bytes = row.downlink_bytes + row.uplink_bytes - row.block_bytes;
    row.param_steps = static_cast<std::uint64_t>(steps) * global_.total_params();
    ledger_.rows.push_back(row);
    reports_.push_back(report);
    return report;
}

TrainingResult run_training(const ModelConfig& model_config, const FederatedConfig& config,
                            std::vector<std::vector<Sample>> shards, std::vector<Sample> test_set) {
    Simulation sim(model_config, config, std::move(shards), std::move(test_set));
    while (!sim.finished()) {
        sim.run_round();
    }
    TrainingResult out;
    out.reports = sim.reports();
    out.ledger = sim.ledger();
    out.growth_rounds = sim.growth_rounds();
    out.final_layers = sim.global_model().layers();
    out.final_weights = serialize(sim.global_model(), false);
    return out;
}

}  // namespace fdt
