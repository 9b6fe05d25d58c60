#include <omp.h>

#include <cmath>
#include <map>
#include <set>

#include "doctest.h"
#include "fdt/data.hpp"
#include "fdt/errors.hpp"
#include "fdt/fed.hpp"
#include "fdt/harness.hpp"
#include "oracles.hpp"

using namespace fdt;

namespace {

ModelConfig tiny(std::size_t L = 2, std::size_t c = 2) {
    ModelConfig m;
    m.vocab_size = 10;
    m.frame_dim = 4;
    m.d_model = 8;
    m.heads = 2;
    m.ffn_dim = 16;
    m.target_layers = L;
    m.growth_parts = c;
    m.max_seq_len = 16;
    return m;
}

std::vector<Sample> corpus(std::size_t n, std::uint64_t seed = 1) {
    return generate(SyntheticTask::create(seed, 10, 4, 3, 6, 2), n);
}

FederatedConfig fed(std::size_t clients = 3, std::size_t rounds = 4) {
    FederatedConfig f;
    f.num_clients = clients;
    f.clients_per_round = clients;
    f.batch_size = 4;
    f.rounds = rounds;
    f.local_iters = 1;
    f.lr = 3e-3;
    f.seed = 5;
    return f;
}

WeightPayload payload_of(std::vector<double> w) {
    WeightPayload p;
    p.layers = 1;
    p.table = {TensorRecord{42, {static_cast<std::uint32_t>(w.size())}}};
    p.weights = std::move(w);
    return p;
}

}  // namespace

TEST_CASE("client sampling") {
    Rng rng(1);
    for (int i = 0; i < 5; ++i) {
        CHECK(sample_clients(rng, 4, 4) == std::vector<std::size_t>{0, 1, 2, 3});
    }
    std::vector<std::vector<std::size_t>> a;
    std::vector<std::vector<std::size_t>> b;
    for (std::size_t t = 1; t <= 20; ++t) {
        a.push_back(sample_clients_for_round(9, t, 5, 1));
        b.push_back(sample_clients_for_round(9, t, 5, 1));
        CHECK(a.back().size() == 1);
    }
    CHECK(a == b);
    CHECK_THROWS_AS(sample_clients(rng, 3, 4), ConfigError);
}

TEST_CASE("client inclusion frequencies are uniform") {
    Rng rng(2024);
    std::vector<int> hits(5, 0);
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
        auto s = sample_clients(rng, 5, 2);
        REQUIRE(s.size() == 2);
        CHECK(s[0] < s[1]);
        for (auto id : s) {
            ++hits[id];
        }
    }
    const double p = 2.0 / 5.0;
    const double sigma = std::sqrt(draws * p * (1 - p));
    for (int h : hits) {
        CHECK(std::abs(h - draws * p) <= 3 * sigma);
    }
}

TEST_CASE("growth schedule") {
    const auto s = GrowthSchedule::uniform(120, 6, 6, 10);
    CHECK(s.per_growth == 1);
    CHECK(s.thresholds == std::vector<std::uint64_t>{200, 400, 600, 800, 1000});
    for (auto k : s.thresholds) {
        CHECK(k % 10 == 0);
    }
    const auto trace = s.trace();
    for (std::size_t t = 1; t <= 19; ++t) {
        CHECK(trace[t - 1] == 1);
    }
    CHECK(trace[19] == 2);
    for (std::size_t t = 100; t <= 120; ++t) {
        CHECK(trace[t - 1] == 6);
    }
    CHECK(trace == oracle::depth_trace(120, 6, 6, 10));
    for (std::size_t t = 1; t <= 120; ++t) {
        CHECK(s.maybe_grow(t, 6) == 6);
    }
    CHECK(GrowthSchedule::uniform(120, 1, 6, 3).thresholds.empty());
    CHECK(GrowthSchedule::uniform(12, 2, 4, 1).trace() == oracle::depth_trace(12, 2, 4, 1));
    CHECK_THROWS_AS(GrowthSchedule::uniform(120, 4, 6, 1), ConfigError);
    CHECK_THROWS_AS(GrowthSchedule::uniform(121, 6, 6, 1), ConfigError);
}

TEST_CASE("aggregation") {
    SUBCASE("identical payloads average to themselves") {
        auto a = payload_of({0.1, -3.7, 1e-300, 12345.678});
        std::vector<WeightPayload> ps(3, a);
        CHECK(aggregate(ps).weights == a.weights);
    }
    SUBCASE("two scalars") {
        std::vector<WeightPayload> ps = {payload_of({1.0}), payload_of({3.0})};
        CHECK(aggregate(ps).weights == std::vector<double>{2.0});
    }
    SUBCASE("loop oracle") {
        Rng rng(3);
        std::vector<WeightPayload> ps;
        for (int i = 0; i < 3; ++i) {
            std::vector<double> w(50);
            for (auto& x : w) {
                x = rng.normal();
            }
            ps.push_back(payload_of(w));
        }
        auto avg = aggregate(ps);
        for (std::size_t j = 0; j < 50; ++j) {
            const double expect = (ps[0].weights[j] + ps[1].weights[j] + ps[2].weights[j]) / 3.0;
            CHECK(std::abs(avg.weights[j] - expect) <= 1e-15);
        }
    }
    SUBCASE("linearity") {
        auto a = payload_of({0.3, -1.1, 2.5});
        auto b = payload_of({-0.7, 0.2, 4.0});
        for (std::size_t k = 0; k <= 4; ++k) {
            std::vector<WeightPayload> ps;
            for (std::size_t i = 0; i < 4; ++i) {
                ps.push_back(i < k ? a : b);
            }
            auto avg = aggregate(ps);
            for (std::size_t j = 0; j < 3; ++j) {
                const double expect = (k * a.weights[j] + (4 - k) * b.weights[j]) / 4.0;
                CHECK(std::abs(avg.weights[j] - expect) <= 1e-15);
            }
        }
    }
    SUBCASE("mismatched tables") {
        auto a = payload_of({1.0, 2.0});
        auto b = payload_of({1.0, 2.0});
        b.table[0].name_hash = 7;
        std::vector<WeightPayload> ps = {a, b};
        CHECK_THROWS_AS(aggregate(ps), ProtocolError);
        auto c = payload_of({1.0, 2.0});
        c.layers = 2;
        std::vector<WeightPayload> qs = {a, c};
        CHECK_THROWS_AS(aggregate(qs), ProtocolError);
    }
}

TEST_CASE("codecs") {
    DynamicTransformer m(tiny(), 1);
    const Bytes plain = serialize(m);
    IdentityCodec id;
    CHECK(id.unseal(id.seal(plain, 3), 3) == plain);
    SealedCodec sealed(99);
    const Bytes wire = sealed.seal(plain, 3);
    CHECK(wire.size() == plain.size() + 8);
    CHECK(sealed.unseal(wire, 3) == plain);
    CHECK(Bytes(wire.begin(), wire.end() - 8) != plain);
    CHECK(sealed.seal(plain, 4) != wire);
    CHECK_THROWS_AS(sealed.unseal(wire, 4), IntegrityError);
    CHECK_THROWS_AS(SealedCodec(98).unseal(wire, 3), IntegrityError);
    CHECK_THROWS_AS(sealed.unseal(Bytes(5), 3), IntegrityError);

    std::size_t detected = 0;
    for (std::size_t i = 0; i < wire.size(); ++i) {
        for (std::uint8_t flip : {std::uint8_t{0x01}, std::uint8_t{0x80}, std::uint8_t{0xff}}) {
            Bytes bad = wire;
            bad[i] ^= flip;
            try {
                sealed.unseal(bad, 3);
            } catch (const IntegrityError&) {
                ++detected;
            }
        }
    }
    CHECK(detected == 3 * wire.size());
}

TEST_CASE("linear toy: one SGD step matches the hand computation") {
    Param w(Tensor({2, 1}, {0.5, 0.25}), 1, Scaling::plain);
    const Tensor x({1, 2}, {1.0, 2.0});
    const Tensor y({1, 1}, {3.0});
    ad::backward(ad::mse_loss(ad::matmul(ad::constant(x), ad::param(w)), y));
    // pred = 1, d/dw (pred - 3)^2 = 2 (pred - 3) x = (-4, -8)
    CHECK(w.grad[0] == -4.0);
    CHECK(w.grad[1] == -8.0);
    Param* ps[] = {&w};
    sgd_step(ps, 0.1);
    CHECK(w.raw[0] == 0.5 - 0.1 * -4.0);
    CHECK(w.raw[1] == 0.25 - 0.1 * -8.0);
}

TEST_CASE("client update") {
    const ModelConfig cfg = tiny();
    auto shard = corpus(3);
    IdentityCodec codec;
    DynamicTransformer server(cfg, 11);
    const Bytes wire = encode_payload(server.export_weights());

    SUBCASE("zero local steps return the received weights") {
        ClientOptions o;
        o.local_iters = 0;
        Client c(0, shard, cfg, 11, 2, o);
        auto r = c.update(wire, 1, codec, 1, 2);
        CHECK(r.wire == wire);
        CHECK(r.steps == 0);
        CHECK(std::isnan(r.mean_loss));
    }
    SUBCASE("one full-batch SGD step equals w - lr grad") {
        ClientOptions o;
        o.local_iters = 1;
        o.batch_size = 3;
        o.optimizer = OptimizerKind::sgd;
        o.lr = 0.05;
        Client c(0, shard, cfg, 11, 2, o);
        auto r = c.update(wire, 1, codec, 1, 2);

        DynamicTransformer ref(cfg, 11);
        ad::backward(loss(ref.forward(shard), pack_frames(shard)));
        WeightPayload expect = ref.export_weights();
        std::size_t off = 0;
        for (Param* p : ref.params()) {
            for (std::size_t i = 0; i < p->size(); ++i) {
                expect.weights[off + i] = p->raw[i] - 0.05 * p->grad[i];
            }
            off += p->size();
        }
        CHECK(decode_payload(r.wire).weights == expect.weights);
    }
    SUBCASE("identical clients return identical payloads") {
        ClientOptions o;
        o.local_iters = 3;
        o.batch_size = 2;
        Client a(0, shard, cfg, 11, 2, o);
        Client b(0, shard, cfg, 11, 2, o);
        CHECK(a.update(wire, 1, codec, 1, 2).wire == b.update(wire, 1, codec, 1, 2).wire);
    }
    SUBCASE("depth must match the schedule") {
        Client c(0, shard, cfg, 11, 2, ClientOptions{});
        CHECK_THROWS_AS(c.update(wire, 2, codec, 1, 2), ProtocolError);
    }
    SUBCASE("corrupted sealed payload") {
        SealedCodec sealed(5);
        Bytes bad = sealed.seal(wire, 1);
        bad[bad.size() / 2] ^= 0x10;
        Client c(0, shard, cfg, 11, 2, ClientOptions{});
        CHECK_THROWS_AS(c.update(bad, 1, sealed, 1, 2), IntegrityError);
    }
    SUBCASE("client rebuilds the deeper model when the server grew") {
        for (bool reset : {false, true}) {
            ClientOptions o;
            o.reset_moments_on_growth = reset;
            Client c(0, shard, cfg, 11, 2, o);
            c.update(wire, 1, codec, 1, 2);
            DynamicTransformer deeper(cfg, 11);
            deeper.grow(1);
            c.update(encode_payload(deeper.export_weights()), 2, codec, 3, 4);
            CHECK(c.model().layers() == 2);
            CHECK(c.adam().step_count == (reset ? 1u : 2u));
        }
    }
}

TEST_CASE("batches cycle through a seeded permutation") {
    ClientOptions o;
    o.batch_size = 3;
    Client c(0, corpus(7), tiny(), 1, 4, o);
    std::multiset<std::vector<int>> seen;
    for (int i = 0; i < 2; ++i) {
        for (const auto& s : c.next_batch()) {
            seen.insert(s.tokens);
        }
    }
    CHECK(seen.size() == 6);
    std::set<std::vector<int>> distinct(seen.begin(), seen.end());
    CHECK(distinct.size() == 6);
}

TEST_CASE("one round with one client equals a centralized step") {
    const ModelConfig cfg = tiny();
    auto shard = corpus(4);
    auto test = corpus(3, 2);
    FederatedConfig f = fed(1, 4);
    f.batch_size = 4;
    Simulation sim(cfg, f, {shard}, test);
    sim.run_round();

    DynamicTransformer ref(cfg, f.seed);
    AdamState adam;
    adam.lr = f.lr;
    ad::backward(loss(ref.forward(shard), pack_frames(shard)));
    adam_step(ref.params(), adam);
    const auto got = sim.global_model().export_weights().weights;
    const auto want = ref.export_weights().weights;
    REQUIRE(got.size() == want.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i) {
        worst = std::max(worst, std::abs(got[i] - want[i]));
    }
    CHECK(worst <= 1e-15);
}

TEST_CASE("simulation invariants") {
    const ModelConfig cfg = tiny(2, 2);
    const auto data = corpus(30);
    const auto shards = split(data, SplitSpec::from_ratios({1, 2, 3}), 3);
    const auto test = corpus(5, 9);
    FederatedConfig f = fed(3, 6);
    Simulation sim(cfg, f, shards, test);
    std::uint64_t cum = 0;
    while (!sim.finished()) {
        const RoundReport r = sim.run_round();
        CHECK(r.layers == sim.global_model().layers());
        for (auto id : r.clients) {
            CHECK(sim.clients()[id].model().layers() == r.layers);
        }
        CHECK(r.downlink_bytes == r.uplink_bytes);
        cum += r.downlink_bytes + r.uplink_bytes;
        CHECK(r.cum_bytes == cum);
        CHECK(std::isfinite(r.eval_loss));
    }
    CHECK(sim.growth_rounds() == std::vector<std::size_t>{3});
    std::vector<std::size_t> depths;
    for (const auto& r : sim.reports()) {
        depths.push_back(r.layers);
    }
    CHECK(depths == oracle::depth_trace(6, 2, 2, 1));

    // Wire size is header + 8 * (fixed + l (W1 + W2)) per message.
    const auto& ledger = sim.ledger();
    for (const auto& row : ledger.rows) {
        DynamicTransformer at_depth(cfg, 0);
        if (row.layers > 1) {
            at_depth.grow(row.layers - 1);
        }
        const auto table = at_depth.export_weights().table;
        const std::uint64_t payload =
            payload_header_size(table) + 8 * (ledger.fixed_params + row.layers * (ledger.per_enc_block + ledger.per_dec_block));
        CHECK(row.downlink_bytes == row.clients * payload);
        CHECK(row.block_bytes == 8ull * row.layers * (ledger.per_enc_block + ledger.per_dec_block) * row.clients * 2);
        CHECK(row.block_bytes + row.fixed_bytes == row.downlink_bytes + row.uplink_bytes);
    }
    CHECK(ledger.total_bytes() == sim.reports().back().cum_bytes);
    CHECK_THROWS_AS(sim.run_round(), ContractError);
}

TEST_CASE("training is deterministic across runs and thread counts") {
    const ModelConfig cfg = tiny(2, 2);
    const auto shards = split(corpus(24), SplitSpec::balanced(3), 1);
    const auto test = corpus(4, 7);
    FederatedConfig f = fed(3, 4);
    f.clients_per_round = 2;
    f.codec = CodecKind::sealed;
    const int saved = omp_get_max_threads();
    omp_set_num_threads(1);
    auto a = run_training(cfg, f, shards, test);
    omp_set_num_threads(3);
    auto b = run_training(cfg, f, shards, test);
    omp_set_num_threads(saved);
    CHECK(metrics_csv(a.reports) == metrics_csv(b.reports));
    CHECK(a.final_weights == b.final_weights);
    for (std::size_t i = 0; i < a.reports.size(); ++i) {
        CHECK(a.reports[i].clients == b.reports[i].clients);
        CHECK(a.reports[i].clients.size() == 2);
    }
    // The sealed trailer shows up as fixed bytes.
    CHECK(a.ledger.rows[0].fixed_bytes > 0);
}

TEST_CASE("FedT keeps full depth and FedDT with one part matches it exactly") {
    const ModelConfig grown = tiny(2, 2);
    const ModelConfig single = tiny(2, 1);
    const auto shards = split(corpus(18), SplitSpec::balanced(2), 1);
    const auto test = corpus(4, 7);
    FederatedConfig fedt = fed(2, 4);
    fedt.mode = Mode::fedt;
    auto t = run_training(grown, fedt, shards, test);
    for (const auto& r : t.reports) {
        CHECK(r.layers == 2);
    }
    CHECK(t.growth_rounds.empty());
    FederatedConfig feddt = fed(2, 4);
    auto d = run_training(single, feddt, shards, test);
    FederatedConfig fedt1 = fedt;
    auto t1 = run_training(single, fedt1, shards, test);
    CHECK(metrics_csv(d.reports) == metrics_csv(t1.reports));
    CHECK(d.final_weights == t1.final_weights);
    CHECK(metrics_csv(t.reports) == metrics_csv(t1.reports));
}

TEST_CASE("config errors") {
    const ModelConfig cfg = tiny();
    const auto test = corpus(2);
    FederatedConfig f = fed(2, 2);
    CHECK_THROWS_AS(Simulation(cfg, f, {corpus(3)}, test), ConfigError);
    f.clients_per_round = 3;
    CHECK_THROWS_AS(f.validate(), ConfigError);
    f = fed(2, 2);
    f.batch_size = 0;
    CHECK_THROWS_AS(f.validate(), ConfigError);
}
