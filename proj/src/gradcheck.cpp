#include "fdt/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "fdt/param.hpp"
#include "fdt/rng.hpp"

namespace fdt {

double relative_error(double analytic, double numeric, double floor) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

const GradcheckEntry* GradcheckReport::worst() const {
    const GradcheckEntry* w = nullptr;
    for (const auto& e : entries) {
        if (!w || e.max_rel_error > w->max_rel_error || std::isnan(e.max_rel_error)) {
            w = &e;
        }
    }
    return w;
}

double GradcheckReport::max_rel_error() const {
    const GradcheckEntry* w = worst();
    return w ? w->max_rel_error : 0.0;
}

namespace {

void record(GradcheckEntry& e, std::size_t index, double analytic, double numeric) {
    const double err = relative_error(analytic, numeric);
    ++e.checked;
    if (e.checked == 1 || err > e.max_rel_error || std::isnan(err)) {
        e.max_rel_error = std::isnan(err) ? INFINITY : err;
        e.worst_index = index;
        e.analytic = analytic;
        e.numeric = numeric;
    }
}

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0, double min_abs = 0.0) {
    Tensor t(std::move(shape));
    for (double& x : t.values()) {
        double v = rng.normal() * scale;
        if (std::abs(v) < min_abs) {
            v = v < 0 ? v - min_abs : v + min_abs;
        }
        x = v;
    }
    return t;
}

using OpBuilder = std::function<ad::Var(const std::vector<ad::Var>&)>;

// Reduces the op output against a fixed random weighting so every output
// element contributes a distinct coefficient.
void check_op(GradcheckReport& report, const std::string& name, std::vector<Tensor> inputs, const OpBuilder& build,
              Rng& rng) {
    std::vector<ad::Var> vars;
    for (const auto& t : inputs) {
        vars.push_back(ad::variable(t));
    }
    const ad::Var out = build(vars);
    const ad::Var weights = ad::constant(random_tensor(out.shape(), rng));
    ad::backward(ad::sum(ad::mul(out, weights)));

    auto eval = [&](const std::vector<Tensor>& xs) {
        std::vector<ad::Var> vs;
        for (const auto& t : xs) {
            vs.push_back(ad::constant(t));
        }
        return ad::sum(ad::mul(build(vs), weights)).value()[0];
    };

    for (std::size_t i = 0; i < inputs.size(); ++i) {
        GradcheckEntry entry;
        entry.name = "op:" + name + "/" + std::to_string(i);
        const Tensor analytic = vars[i].grad().empty() ? Tensor(inputs[i].shape()) : vars[i].grad();
        for (std::size_t j = 0; j < inputs[i].size(); ++j) {
            const double x0 = inputs[i][j];
            inputs[i][j] = x0 + kGradcheckStep;
            const double lp = eval(inputs);
            inputs[i][j] = x0 - kGradcheckStep;
            const double lm = eval(inputs);
            inputs[i][j] = x0;
            record(entry, j, analytic[j], (lp - lm) / (2.0 * kGradcheckStep));
        }
        report.entries.push_back(std::move(entry));
    }
}

}  // namespace

GradcheckReport gradcheck_ops(std::uint64_t seed) {
    GradcheckReport report;
    Rng rng(derive_seed(seed, "gradcheck-ops"));

    check_op(report, "matmul", {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)},
             [](const auto& v) { return ad::matmul(v[0], v[1]); }, rng);
    check_op(report, "add", {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)},
             [](const auto& v) { return ad::add(v[0], v[1]); }, rng);
    check_op(report, "add_bias", {random_tensor({3, 4}, rng), random_tensor({4}, rng)},
             [](const auto& v) { return ad::add_bias(v[0], v[1]); }, rng);
    const Tensor shift = random_tensor({3, 4}, rng);
    check_op(report, "add_constant", {random_tensor({3, 4}, rng)},
             [&](const auto& v) { return ad::add_constant(v[0], shift); }, rng);
    check_op(report, "mul", {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)},
             [](const auto& v) { return ad::mul(v[0], v[1]); }, rng);
    check_op(report, "scale", {random_tensor({3, 4}, rng)}, [](const auto& v) { return ad::scale(v[0], -1.7); }, rng);
    check_op(report, "relu", {random_tensor({3, 4}, rng, 1.0, 0.1)}, [](const auto& v) { return ad::relu(v[0]); },
             rng);
    check_op(report, "sum", {random_tensor({3, 4}, rng)}, [](const auto& v) { return ad::sum(v[0]); }, rng);
    check_op(report, "softmax", {random_tensor({3, 5}, rng)}, [](const auto& v) { return ad::softmax(v[0]); }, rng);
    check_op(report, "layer_norm",
             {random_tensor({3, 6}, rng), random_tensor({6}, rng), random_tensor({6}, rng)},
             [](const auto& v) { return ad::layer_norm(v[0], v[1], v[2]); }, rng);
    const std::vector<int> ids = {2, 0, 3, 2};
    check_op(report, "embedding", {random_tensor({4, 3}, rng)},
             [&](const auto& v) { return ad::embedding(v[0], ids); }, rng);
    const Tensor target = random_tensor({3, 4}, rng);
    check_op(report, "mse_loss", {random_tensor({3, 4}, rng)},
             [&](const auto& v) { return ad::mse_loss(v[0], target); }, rng);

    const Tensor mask = random_tensor({3, 4}, rng);
    check_op(report, "scaled_dot_attention",
             {random_tensor({2, 3, 4}, rng), random_tensor({2, 4, 4}, rng), random_tensor({2, 4, 3}, rng)},
             [&](const auto& v) { return ad::scaled_dot_attention(v[0], v[1], v[2], &mask); }, rng);
    check_op(report, "scaled_dot_attention_causal",
             {random_tensor({2, 4, 4}, rng), random_tensor({2, 4, 4}, rng), random_tensor({2, 4, 3}, rng)},
             [](const auto& v) { return ad::scaled_dot_attention(v[0], v[1], v[2], nullptr, true); }, rng);

    // Two packed sequences: cross attention (3->2 rows, 2->4 rows) and causal self attention.
    const std::vector<kernels::AttentionSegment> cross = {{0, 3, 0, 2}, {3, 2, 2, 4}};
    check_op(report, "multi_head_attention",
             {random_tensor({5, 4}, rng), random_tensor({6, 4}, rng), random_tensor({6, 4}, rng)},
             [&](const auto& v) { return ad::multi_head_attention(v[0], v[1], v[2], cross, 2, false); }, rng);
    const std::vector<kernels::AttentionSegment> self = {{0, 3, 0, 3}, {3, 4, 3, 4}};
    check_op(report, "multi_head_attention_causal",
             {random_tensor({7, 4}, rng), random_tensor({7, 4}, rng), random_tensor({7, 4}, rng)},
             [&](const auto& v) { return ad::multi_head_attention(v[0], v[1], v[2], self, 2, true); }, rng);
    return report;
}

ModelConfig gradcheck_model_config() {
    ModelConfig c;
    c.vocab_size = 8;
    c.frame_dim = 4;
    c.d_model = 8;
    c.heads = 2;
    c.ffn_dim = 16;
    c.target_layers = 2;
    c.growth_parts = 1;
    c.max_seq_len = 16;
    return c;
}

GradcheckReport gradcheck_model(std::uint64_t seed) {
    const ModelConfig config = gradcheck_model_config();
    DynamicTransformer model(config, seed);
    Rng rng(derive_seed(seed, "gradcheck-model"));
    Batch batch;
    for (std::size_t len : {3u, 4u}) {
        Sample s;
        for (std::size_t i = 0; i < len; ++i) {
            s.tokens.push_back(static_cast<int>(rng.below(config.vocab_size)));
        }
        s.frames = random_tensor({2 * len, config.frame_dim}, rng);
        batch.push_back(std::move(s));
    }
    const Tensor target = pack_frames(batch);
    auto named = model.named_params();
    for (auto& np : named) {
        if (np.name.ends_with(".b")) {
            np.param->raw = random_tensor(np.param->raw.shape(), rng, 0.1);
        }
    }
    auto eval = [&] { return loss(model.forward(batch), target).value()[0]; };

    for (auto& np : named) {
        np.param->zero_grad();
    }
    ad::backward(loss(model.forward(batch), target));

    GradcheckReport report;
    for (auto& np : named) {
        Param& p = *np.param;
        GradcheckEntry entry;
        entry.name = np.name;
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double x0 = p.raw[j];
            p.raw[j] = x0 + kGradcheckStep;
            const double lp = eval();
            p.raw[j] = x0 - kGradcheckStep;
            const double lm = eval();
            p.raw[j] = x0;
            record(entry, j, p.grad[j], (lp - lm) / (2.0 * kGradcheckStep));
        }
        report.entries.push_back(std::move(entry));
    }
    for (auto& np : named) {
        np.param->zero_grad();
    }
    return report;
}

}  // namespace fdt
