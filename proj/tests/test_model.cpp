#include <algorithm>
#include <cmath>
#include <map>

#include "doctest.h"
#include "fdt/errors.hpp"
#include "fdt/model.hpp"
#include "fdt/optim.hpp"
#include "fdt/rng.hpp"

using namespace fdt;

namespace {

ModelConfig small(std::size_t L = 4, std::size_t c = 2) {
    ModelConfig m;
    m.vocab_size = 11;
    m.frame_dim = 3;
    m.d_model = 8;
    m.heads = 2;
    m.ffn_dim = 16;
    m.target_layers = L;
    m.growth_parts = c;
    m.max_seq_len = 24;
    return m;
}

Sample random_sample(std::size_t S, std::size_t F, const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    Sample s;
    for (std::size_t i = 0; i < S; ++i) {
        s.tokens.push_back(static_cast<int>(rng.below(cfg.vocab_size)));
    }
    s.frames = init_normal({F, cfg.frame_dim}, seed + 1);
    return s;
}

Batch random_batch(const ModelConfig& cfg, std::uint64_t seed) {
    return {random_sample(5, 7, cfg, seed), random_sample(3, 4, cfg, seed + 10), random_sample(6, 9, cfg, seed + 20)};
}

std::map<std::string, Tensor> snapshot(DynamicTransformer& m) {
    std::map<std::string, Tensor> out;
    for (const auto& np : m.named_params()) {
        out.emplace(np.name, np.param->raw);
    }
    return out;
}

}  // namespace

TEST_CASE("construction starts at L/c blocks") {
    ModelConfig six;
    CHECK(DynamicTransformer(six, 1).layers() == 1);
    CHECK(DynamicTransformer(small(4, 2), 1).layers() == 2);
    DynamicTransformer a(small(), 5);
    DynamicTransformer b(small(), 5);
    CHECK(serialize(a) == serialize(b));
    DynamicTransformer c(small(), 6);
    CHECK(serialize(a) != serialize(c));
}

TEST_CASE("invalid configs are rejected with the field name") {
    auto cfg = small(5, 2);
    CHECK_THROWS_WITH_AS(DynamicTransformer(cfg, 0), doctest::Contains("target_layers"), ConfigError);
    cfg = small();
    cfg.heads = 3;
    CHECK_THROWS_WITH_AS(DynamicTransformer(cfg, 0), doctest::Contains("heads"), ConfigError);
}

TEST_CASE("forward output shape matches the target") {
    ModelConfig cfg = small();
    DynamicTransformer m(cfg, 3);
    std::vector<std::vector<int>> tokens = {{1, 2, 3, 4, 5}, {5, 4, 3, 2, 1}};
    Tensor frames = init_normal({2, 7, cfg.frame_dim}, 9);
    Batch batch = make_batch(tokens, frames);
    Tensor pred = m.forward(batch).value();
    CHECK(pred.shape() == Shape{14, cfg.frame_dim});
    auto per = unpack_frames(pred, batch);
    CHECK(per.size() == 2);
    CHECK(per[1].shape() == Shape{7, cfg.frame_dim});
}

TEST_CASE("forward rejects bad inputs") {
    ModelConfig cfg = small();
    DynamicTransformer m(cfg, 3);
    Batch b = {random_sample(4, 4, cfg, 1)};
    b[0].tokens[2] = static_cast<int>(cfg.vocab_size);
    CHECK_THROWS_AS(m.forward(b), DataError);
    Batch long_seq = {random_sample(cfg.max_seq_len + 1, 4, cfg, 2)};
    CHECK_THROWS_AS(m.forward(long_seq), DataError);
}

TEST_CASE("teacher frame j only affects predictions after j") {
    ModelConfig cfg = small();
    DynamicTransformer m(cfg, 4);
    Batch base = {random_sample(5, 8, cfg, 30)};
    const Tensor ref = m.forward(base).value();
    for (std::size_t j = 0; j < 8; ++j) {
        Batch pert = base;
        for (std::size_t d = 0; d < cfg.frame_dim; ++d) {
            pert[0].frames.at(j, d) += 0.75;
        }
        const Tensor out = m.forward(pert).value();
        for (std::size_t pos = 0; pos < 8; ++pos) {
            bool same = true;
            for (std::size_t d = 0; d < cfg.frame_dim; ++d) {
                same = same && out.at(pos, d) == ref.at(pos, d);
            }
            CAPTURE(j);
            CAPTURE(pos);
            if (pos <= j) {
                CHECK(same);
            } else if (pos == j + 1) {
                CHECK_FALSE(same);
            }
        }
    }
}

TEST_CASE("batch items are independent") {
    ModelConfig cfg = small();
    DynamicTransformer m(cfg, 4);
    Batch b = random_batch(cfg, 50);
    Batch perm = {b[2], b[0], b[1]};
    auto out = unpack_frames(m.forward(b).value(), b);
    auto out_perm = unpack_frames(m.forward(perm).value(), perm);
    // Row reductions are per-sample, so permutation is exact.
    CHECK(bit_equal(out[2], out_perm[0]));
    CHECK(bit_equal(out[0], out_perm[1]));
    CHECK(bit_equal(out[1], out_perm[2]));
}

TEST_CASE("loss") {
    Tensor t = init_normal({4, 3}, 1);
    CHECK(loss(ad::constant(t), t).value()[0] == 0.0);
    Tensor shifted = t;
    for (double& x : shifted.values()) {
        x += 1.0;
    }
    CHECK(loss(ad::constant(shifted), t).value()[0] == doctest::Approx(1.0).epsilon(1e-15));
    Tensor p = init_normal({4, 3}, 2);
    double s = 0.0;
    for (std::size_t i = 0; i < 12; ++i) {
        s += (p[i] - t[i]) * (p[i] - t[i]);
    }
    CHECK(std::abs(loss(ad::constant(p), t).value()[0] - s / 12.0) < 1e-12);
    CHECK_THROWS_AS(loss(ad::constant(Tensor({3, 4})), t), DimensionError);
}

TEST_CASE("grow appends blocks and keeps trained weights") {
    ModelConfig cfg = small(4, 4);
    DynamicTransformer m(cfg, 8);
    CHECK(m.layers() == 1);
    // Pretend some training happened.
    for (Param* p : m.params()) {
        for (double& x : p->raw.values()) {
            x += 0.125;
        }
    }
    const auto before = snapshot(m);
    const auto count_before = m.param_count();
    Batch probe = random_batch(cfg, 70);
    const HiddenStates hidden_before = m.probe_hidden_states(probe, 1);

    m.grow(1);
    CHECK(m.layers() == 2);
    const auto after = snapshot(m);
    for (const auto& [name, t] : before) {
        REQUIRE(after.count(name) == 1);
        CAPTURE(name);
        CHECK(bit_equal(t, after.at(name)));
    }
    const auto count_after = m.param_count();
    CHECK(count_after.block_params - count_before.block_params ==
          count_before.per_enc_block + count_before.per_dec_block);
    CHECK(count_after.fixed_params == count_before.fixed_params);
    for (const auto& np : m.named_params()) {
        if (np.name.rfind("enc.1.", 0) == 0 || np.name.rfind("dec.1.", 0) == 0) {
            for (double x : np.param->m.values()) {
                CHECK(x == 0.0);
            }
        }
    }
    const HiddenStates hidden_after = m.probe_hidden_states(probe, 1);
    CHECK(bit_equal(hidden_before.encoder[0], hidden_after.encoder[0]));
    CHECK(bit_equal(hidden_before.decoder[0], hidden_after.decoder[0]));

    m.grow(2);
    CHECK(m.layers() == 4);
    CHECK_THROWS_AS(m.grow(1), GrowthCapError);
}

TEST_CASE("a grown block matches the block built at full depth") {
    ModelConfig cfg = small(4, 4);
    DynamicTransformer grown(cfg, 8);
    grown.grow(3);
    DynamicTransformer full(cfg, 8);
    full.grow(3);
    CHECK(serialize(grown) == serialize(full));
}

TEST_CASE("per-block parameter counts match the tensor inventory") {
    ModelConfig cfg = small(2, 1);
    DynamicTransformer m(cfg, 1);
    const auto c = m.param_count();
    const std::size_t d = 8, f = 16, fd = 3, v = 11;
    const std::size_t norm = 2 * d;
    const std::size_t attn = 4 * (d * d + d);
    const std::size_t ffn = (d * f + f) + (f * d + d);
    CHECK(c.per_enc_block == 2 * norm + attn + ffn);
    CHECK(c.per_enc_block == 600);
    CHECK(c.per_dec_block == 3 * norm + 2 * attn + ffn);
    CHECK(c.per_dec_block == 904);
    const std::size_t fixed = v * d + (d * d + d) + (fd * d + d) + 2 * (d * d + d) + 2 * norm + (d * fd + fd);
    CHECK(c.fixed_params == fixed);
    CHECK(c.block_params == 2 * (600 + 904));
    CHECK(m.total_params() == c.fixed_params + c.block_params);
}

TEST_CASE("default toy model sizes") {
    DynamicTransformer m(ModelConfig{}, 0);
    const auto c = m.param_count();
    CHECK(c.per_enc_block == 8544);
    CHECK(c.per_dec_block == 12832);
}

TEST_CASE("serialization round trip") {
    ModelConfig cfg = small();
    DynamicTransformer m(cfg, 2);
    for (Param* p : m.params()) {
        for (std::size_t i = 0; i < p->size(); ++i) {
            p->m[i] = 0.01 * static_cast<double>(i);
            p->v[i] = 0.02 * static_cast<double>(i);
        }
    }
    const Bytes with = serialize(m, true);
    DynamicTransformer back = deserialize(with, cfg, 99);
    CHECK(serialize(back, true) == with);
    const Bytes plain = serialize(m, false);
    CHECK(plain.size() < with.size());
    DynamicTransformer plain_back = deserialize(plain, cfg);
    CHECK(serialize(plain_back, false) == plain);

    Bytes bad = plain;
    bad[4] = 2;
    CHECK_THROWS_AS(deserialize(bad, cfg), FormatError);
    Bytes trunc(plain.begin(), plain.end() - 3);
    CHECK_THROWS_AS(deserialize(trunc, cfg), FormatError);
    ModelConfig other = cfg;
    other.d_model = 12;
    CHECK_THROWS_AS(deserialize(plain, other), FormatError);
}

TEST_CASE("import rejects a depth mismatch") {
    ModelConfig cfg = small();
    DynamicTransformer a(cfg, 1);
    DynamicTransformer b(cfg, 1);
    b.grow(2);
    CHECK_THROWS_AS(a.import_weights(b.export_weights()), ProtocolError);
}

TEST_CASE("payload header size") {
    ModelConfig cfg = small();
    DynamicTransformer m(cfg, 1);
    const WeightPayload p = m.export_weights();
    std::size_t header = 17;
    for (const auto& rec : p.table) {
        header += 9 + 4 * rec.dims.size();
    }
    CHECK(payload_header_size(p.table) == header);
    CHECK(encode_payload(p).size() == header + 8 * m.total_params());
}

TEST_CASE("inference") {
    ModelConfig cfg = small();
    DynamicTransformer m(cfg, 6);
    const std::vector<int> tokens = {1, 4, 2};
    Tensor one = infer(m, tokens, 1);
    Sample s;
    s.tokens = tokens;
    s.frames = Tensor({1, cfg.frame_dim});
    CHECK(bit_equal(one, m.forward({s}).value()));
    Tensor a = infer(m, tokens, 5);
    Tensor b = infer(m, tokens, 5);
    CHECK(a.shape() == Shape{5, cfg.frame_dim});
    CHECK(bit_equal(a, b));
    CHECK_THROWS_AS(infer(m, tokens, 0), ContractError);
}

TEST_CASE("training lowers the teacher-forced loss") {
    ModelConfig cfg = small(2, 1);
    std::vector<Sample> data;
    for (std::uint64_t i = 0; i < 64; ++i) {
        Sample s = random_sample(4 + i % 3, 2 * (4 + i % 3), cfg, 1000 + i);
        // A learnable target: each frame echoes its token id.
        for (std::size_t j = 0; j < s.frames.dim(0); ++j) {
            for (std::size_t d = 0; d < cfg.frame_dim; ++d) {
                s.frames.at(j, d) = 0.1 * s.tokens[j / 2] - 0.3 * static_cast<double>(d);
            }
        }
        data.push_back(std::move(s));
    }
    DynamicTransformer untrained(cfg, 12);
    DynamicTransformer model(cfg, 12);
    AdamState adam;
    adam.lr = 3e-3;
    const auto params = model.params();
    for (int step = 0; step < 200; ++step) {
        Batch batch(data.begin() + (step % 4) * 16, data.begin() + (step % 4 + 1) * 16);
        ad::backward(loss(model.forward(batch), pack_frames(batch)));
        adam_step(params, adam);
    }
    CHECK(evaluate(model, data) < evaluate(untrained, data));
}

TEST_CASE("zeroed layer-norm gain turns its sublayer into the identity") {
    ModelConfig cfg = small(2, 1);
    Batch b = random_batch(cfg, 90);
    DynamicTransformer a(cfg, 3);
    DynamicTransformer c(cfg, 3);
    for (auto* m : {&a, &c}) {
        for (const auto& np : m->named_params()) {
            if (np.name.rfind("enc.0.attn_norm.", 0) == 0 || np.name.rfind("dec.1.ffn_norm.", 0) == 0) {
                np.param->raw.fill(0.0);
            }
        }
    }
    // Different weights inside the silenced sublayers must not matter.
    for (const auto& np : c.named_params()) {
        if (np.name.rfind("enc.0.self_attn.", 0) == 0 || np.name.rfind("dec.1.ffn.", 0) == 0) {
            np.param->raw = init_normal(np.param->raw.shape(), 77);
            if (np.name.ends_with(".b")) {
                np.param->raw.fill(0.0);
            }
        }
    }
    const HiddenStates ha = a.probe_hidden_states(b, 2);
    const HiddenStates hc = c.probe_hidden_states(b, 2);
    CHECK(bit_equal(ha.encoder[0], hc.encoder[0]));
    CHECK(bit_equal(ha.decoder[1], hc.decoder[1]));
    // And the sublayer does matter when the gain is restored.
    DynamicTransformer d(cfg, 3);
    DynamicTransformer e(cfg, 3);
    for (const auto& np : e.named_params()) {
        if (np.name.rfind("enc.0.self_attn.q.", 0) == 0) {
            np.param->raw = init_normal(np.param->raw.shape(), 78);
        }
    }
    CHECK_FALSE(bit_equal(d.probe_hidden_states(b, 1).encoder[0], e.probe_hidden_states(b, 1).encoder[0]));
}

TEST_CASE("gradient reaches the bottom blocks at full depth") {
    ModelConfig cfg = small(4, 1);
    DynamicTransformer m(cfg, 21);
    CHECK(m.layers() == 4);
    Batch b = random_batch(cfg, 5);
    ad::backward(loss(m.forward(b), pack_frames(b)));
    double enc = 0.0;
    double dec = 0.0;
    for (const auto& np : m.named_params()) {
        double s = 0.0;
        for (double g : np.param->grad.values()) {
            s += g * g;
        }
        if (np.name.rfind("enc.0.", 0) == 0) {
            enc += s;
        } else if (np.name.rfind("dec.0.", 0) == 0) {
            dec += s;
        }
    }
    CHECK(enc > 0.0);
    CHECK(dec > 0.0);
}

TEST_CASE("forward is deterministic and finite") {
    ModelConfig cfg = small();
    DynamicTransformer m(cfg, 4);
    Batch b = random_batch(cfg, 1);
    Tensor x = m.forward(b).value();
    CHECK(bit_equal(x, m.forward(b).value()));
    CHECK(all_finite(x));
}
