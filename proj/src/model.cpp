#include "fdt/model.hpp"

#include <cmath>
#include <string>

#include "fdt/errors.hpp"
#include "fdt/rng.hpp"

namespace fdt {

void ModelConfig::validate() const {
    auto positive = [](std::size_t v, const char* field) {
        if (v == 0) {
            throw ConfigError(std::string("model.") + field + " must be positive");
        }
    };
    positive(vocab_size, "vocab_size");
    positive(frame_dim, "frame_dim");
    positive(d_model, "d_model");
    positive(heads, "heads");
    positive(ffn_dim, "ffn_dim");
    positive(target_layers, "target_layers");
    positive(growth_parts, "growth_parts");
    positive(max_seq_len, "max_seq_len");
    if (d_model % heads != 0) {
        throw ConfigError("model.d_model (" + std::to_string(d_model) + ") must be divisible by model.heads (" +
                          std::to_string(heads) + ")");
    }
    if (target_layers % growth_parts != 0) {
        throw ConfigError("model.target_layers (" + std::to_string(target_layers) +
                          ") must be divisible by model.growth_parts (" + std::to_string(growth_parts) + ")");
    }
}

namespace {

Linear make_linear(const std::string& name, std::size_t in, std::size_t out, std::uint64_t seed, bool literal) {
    return Linear{Param(init_normal({in, out}, derive_seed(seed, name + ".w")), in, Scaling::equalized, literal),
                  Param(Tensor({out}), 1, Scaling::plain)};
}

Norm make_norm(std::size_t d) { return Norm{Param(Tensor({d}, 1.0), 1, Scaling::plain), Param(Tensor({d}), 1, Scaling::plain)}; }

AttentionWeights make_attention(const std::string& name, std::size_t d, std::uint64_t seed, bool literal) {
    return AttentionWeights{make_linear(name + ".q", d, d, seed, literal), make_linear(name + ".k", d, d, seed, literal),
                            make_linear(name + ".v", d, d, seed, literal), make_linear(name + ".o", d, d, seed, literal)};
}

template <class F>
void visit_linear(const std::string& prefix, Linear& l, F& f) {
    f(prefix + ".w", l.weight);
    f(prefix + ".b", l.bias);
}

template <class F>
void visit_norm(const std::string& prefix, Norm& n, F& f) {
    f(prefix + ".gamma", n.gamma);
    f(prefix + ".beta", n.beta);
}

template <class F>
void visit_attention(const std::string& prefix, AttentionWeights& a, F& f) {
    visit_linear(prefix + ".q", a.query, f);
    visit_linear(prefix + ".k", a.key, f);
    visit_linear(prefix + ".v", a.value, f);
    visit_linear(prefix + ".o", a.output, f);
}

template <class F>
void visit_ffn(const std::string& prefix, FeedForward& ffn, F& f) {
    visit_linear(prefix + ".expand", ffn.expand, f);
    visit_linear(prefix + ".contract", ffn.contract, f);
}

template <class F>
void visit_block(const std::string& prefix, EncoderBlock& b, F& f) {
    visit_norm(prefix + ".attn_norm", b.attn_norm, f);
    visit_attention(prefix + ".self_attn", b.self_attn, f);
    visit_norm(prefix + ".ffn_norm", b.ffn_norm, f);
    visit_ffn(prefix + ".ffn", b.ffn, f);
}

template <class F>
void visit_block(const std::string& prefix, DecoderBlock& b, F& f) {
    visit_norm(prefix + ".self_norm", b.self_norm, f);
    visit_attention(prefix + ".self_attn", b.self_attn, f);
    visit_norm(prefix + ".cross_norm", b.cross_norm, f);
    visit_attention(prefix + ".cross_attn", b.cross_attn, f);
    visit_norm(prefix + ".ffn_norm", b.ffn_norm, f);
    visit_ffn(prefix + ".ffn", b.ffn, f);
}

template <class Block>
std::size_t block_size(const Block& block) {
    std::size_t n = 0;
    auto count = [&n](const std::string&, Param& p) { n += p.size(); };
    visit_block("", const_cast<Block&>(block), count);
    return n;
}

ad::Var apply_linear(Linear& l, const ad::Var& x) { return ad::add_bias(ad::matmul(x, ad::param(l.weight)), ad::param(l.bias)); }

ad::Var apply_norm(Norm& n, const ad::Var& x) { return ad::layer_norm(x, ad::param(n.gamma), ad::param(n.beta)); }

ad::Var apply_attention(AttentionWeights& a, const ad::Var& xq, const ad::Var& xkv,
                        const std::vector<kernels::AttentionSegment>& segments, std::size_t heads, bool causal) {
    auto q = apply_linear(a.query, xq);
    auto k = apply_linear(a.key, xkv);
    auto v = apply_linear(a.value, xkv);
    auto ctx = ad::multi_head_attention(q, k, v, segments, heads, causal);
    return apply_linear(a.output, ctx);
}

ad::Var apply_ffn(FeedForward& f, const ad::Var& x) { return apply_linear(f.contract, ad::relu(apply_linear(f.expand, x))); }

Tensor sinusoid_table(std::size_t max_len, std::size_t d) {
    Tensor table({max_len, d});
    for (std::size_t pos = 0; pos < max_len; ++pos) {
        for (std::size_t i = 0; i < d; ++i) {
            const double exponent = static_cast<double>(2 * (i / 2)) / static_cast<double>(d);
            const double angle = static_cast<double>(pos) / std::pow(10000.0, exponent);
            table.at(pos, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    }
    return table;
}

struct PackedLayout {
    std::vector<std::size_t> enc_offsets;
    std::vector<std::size_t> dec_offsets;
    std::size_t enc_rows = 0;
    std::size_t dec_rows = 0;
};

PackedLayout validate_batch(const Batch& batch, const ModelConfig& cfg) {
    if (batch.empty()) {
        throw DataError("forward: empty batch");
    }
    PackedLayout layout;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto& s = batch[b];
        const std::string where = "forward: sample " + std::to_string(b);
        if (s.tokens.empty()) {
            throw DataError(where + " has no tokens");
        }
        if (s.tokens.size() > cfg.max_seq_len) {
            throw DataError(where + " has " + std::to_string(s.tokens.size()) + " tokens, max_seq_len is " +
                            std::to_string(cfg.max_seq_len));
        }
        for (int t : s.tokens) {
            if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) {
                throw DataError(where + " token id " + std::to_string(t) + " outside vocabulary of " +
                                std::to_string(cfg.vocab_size));
            }
        }
        if (s.frames.rank() != 2 || s.frames.dim(1) != cfg.frame_dim || s.frames.dim(0) == 0) {
            throw DimensionError(where + " frames " + shape_str(s.frames.shape()) + " are not [F x " +
                                 std::to_string(cfg.frame_dim) + "] with F >= 1");
        }
        if (s.frames.dim(0) > cfg.max_seq_len) {
            throw DataError(where + " has " + std::to_string(s.frames.dim(0)) + " frames, max_seq_len is " +
                            std::to_string(cfg.max_seq_len));
        }
        layout.enc_offsets.push_back(layout.enc_rows);
        layout.dec_offsets.push_back(layout.dec_rows);
        layout.enc_rows += s.tokens.size();
        layout.dec_rows += s.frames.dim(0);
    }
    return layout;
}

}  // namespace

DynamicTransformer::DynamicTransformer(ModelConfig config, std::uint64_t seed)
    : config_(std::move(config)), seed_(seed) {
    config_.validate();
    const std::size_t d = config_.d_model;
    const bool lit = config_.literal_division;
    positions_ = sinusoid_table(config_.max_seq_len, d);
    embedding_ = Param(init_normal({config_.vocab_size, d}, derive_seed(seed_, "text.embedding")), 1, Scaling::plain);
    text_proj_ = make_linear("text.proj", d, d, seed_, lit);
    mel_fc1_ = make_linear("mel.fc1", config_.frame_dim, d, seed_, lit);
    mel_fc2_ = make_linear("mel.fc2", d, d, seed_, lit);
    mel_fc3_ = make_linear("mel.fc3", d, d, seed_, lit);
    enc_final_norm_ = make_norm(d);
    dec_final_norm_ = make_norm(d);
    head_ = make_linear("head", d, config_.frame_dim, seed_, lit);
    grow(config_.layers_per_growth());
}

EncoderBlock DynamicTransformer::make_encoder_block(std::size_t index) const {
    const std::string p = "enc." + std::to_string(index);
    const std::size_t d = config_.d_model;
    const bool lit = config_.literal_division;
    return EncoderBlock{make_norm(d), make_attention(p + ".self_attn", d, seed_, lit), make_norm(d),
                        FeedForward{make_linear(p + ".ffn.expand", d, config_.ffn_dim, seed_, lit),
                                    make_linear(p + ".ffn.contract", config_.ffn_dim, d, seed_, lit)}};
}

DecoderBlock DynamicTransformer::make_decoder_block(std::size_t index) const {
    const std::string p = "dec." + std::to_string(index);
    const std::size_t d = config_.d_model;
    const bool lit = config_.literal_division;
    return DecoderBlock{make_norm(d),
                        make_attention(p + ".self_attn", d, seed_, lit),
                        make_norm(d),
                        make_attention(p + ".cross_attn", d, seed_, lit),
                        make_norm(d),
                        FeedForward{make_linear(p + ".ffn.expand", d, config_.ffn_dim, seed_, lit),
                                    make_linear(p + ".ffn.contract", config_.ffn_dim, d, seed_, lit)}};
}

void DynamicTransformer::grow(std::size_t q) {
    if (q == 0) {
        throw ContractError("grow: q must be positive");
    }
    if (layers() + q > config_.target_layers) {
        throw GrowthCapError("grow: " + std::to_string(layers()) + " + " + std::to_string(q) +
                             " layers exceeds target L = " + std::to_string(config_.target_layers));
    }
    for (std::size_t i = 0; i < q; ++i) {
        const std::size_t index = encoder_.size();
        encoder_.push_back(make_encoder_block(index));
        decoder_.push_back(make_decoder_block(index));
    }
}

template <class F>
void DynamicTransformer::visit_params(F&& f) {
    f(std::string("text.embedding"), embedding_);
    visit_linear("text.proj", text_proj_, f);
    visit_linear("mel.fc1", mel_fc1_, f);
    visit_linear("mel.fc2", mel_fc2_, f);
    visit_linear("mel.fc3", mel_fc3_, f);
    visit_norm("enc.final_norm", enc_final_norm_, f);
    visit_norm("dec.final_norm", dec_final_norm_, f);
    visit_linear("head", head_, f);
    for (std::size_t i = 0; i < encoder_.size(); ++i) {
        visit_block("enc." + std::to_string(i), encoder_[i], f);
    }
    for (std::size_t i = 0; i < decoder_.size(); ++i) {
        visit_block("dec." + std::to_string(i), decoder_[i], f);
    }
}

std::vector<NamedParam> DynamicTransformer::named_params() {
    std::vector<NamedParam> out;
    visit_params([&out](const std::string& name, Param& p) { out.push_back({name, &p}); });
    return out;
}

std::vector<Param*> DynamicTransformer::params() {
    std::vector<Param*> out;
    visit_params([&out](const std::string&, Param& p) { out.push_back(&p); });
    return out;
}

ParamCount DynamicTransformer::param_count() const {
    ParamCount count;
    count.per_enc_block = block_size(encoder_.front());
    count.per_dec_block = block_size(decoder_.front());
    count.block_params = layers() * (count.per_enc_block + count.per_dec_block);
    count.fixed_params = total_params() - count.block_params;
    return count;
}

std::size_t DynamicTransformer::total_params() const {
    std::size_t n = 0;
    const_cast<DynamicTransformer*>(this)->visit_params([&n](const std::string&, Param& p) { n += p.size(); });
    return n;
}

ad::Var DynamicTransformer::forward(const Batch& batch) { return run(batch, layers(), nullptr); }

HiddenStates DynamicTransformer::probe_hidden_states(const Batch& batch, std::size_t n_blocks) {
    if (n_blocks > layers()) {
        throw ContractError("probe_hidden_states: " + std::to_string(n_blocks) + " blocks requested, model has " +
                            std::to_string(layers()));
    }
    HiddenStates states;
    run(batch, n_blocks, &states);
    return states;
}

ad::Var DynamicTransformer::run(const Batch& batch, std::size_t n_blocks, HiddenStates* capture) {
    const PackedLayout layout = validate_batch(batch, config_);
    const std::size_t d = config_.d_model;
    const std::size_t fd = config_.frame_dim;

    std::vector<int> ids;
    ids.reserve(layout.enc_rows);
    Tensor enc_pos({layout.enc_rows, d});
    Tensor dec_input({layout.dec_rows, fd});
    Tensor dec_pos({layout.dec_rows, d});
    std::vector<kernels::AttentionSegment> enc_self;
    std::vector<kernels::AttentionSegment> dec_self;
    std::vector<kernels::AttentionSegment> cross;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto& s = batch[b];
        const std::size_t S = s.tokens.size();
        const std::size_t F = s.frames.dim(0);
        const std::size_t eo = layout.enc_offsets[b];
        const std::size_t dof = layout.dec_offsets[b];
        ids.insert(ids.end(), s.tokens.begin(), s.tokens.end());
        for (std::size_t i = 0; i < S; ++i) {
            std::copy_n(positions_.data() + i * d, d, enc_pos.data() + (eo + i) * d);
        }
        // Shift right: decoder row j sees target frame j-1, row 0 sees zeros.
        for (std::size_t j = 1; j < F; ++j) {
            std::copy_n(s.frames.data() + (j - 1) * fd, fd, dec_input.data() + (dof + j) * fd);
        }
        for (std::size_t j = 0; j < F; ++j) {
            std::copy_n(positions_.data() + j * d, d, dec_pos.data() + (dof + j) * d);
        }
        enc_self.push_back({eo, S, eo, S});
        dec_self.push_back({dof, F, dof, F});
        cross.push_back({dof, F, eo, S});
    }

    const std::size_t heads = config_.heads;
    ad::Var x = ad::embedding(ad::param(embedding_), ids);
    x = ad::add_constant(apply_linear(text_proj_, x), enc_pos);

    ad::Var y = ad::relu(apply_linear(mel_fc1_, ad::constant(std::move(dec_input))));
    y = ad::relu(apply_linear(mel_fc2_, y));
    y = ad::add_constant(apply_linear(mel_fc3_, y), dec_pos);

    for (std::size_t i = 0; i < n_blocks; ++i) {
        auto& blk = encoder_[i];
        auto h = apply_norm(blk.attn_norm, x);
        x = ad::add(x, apply_attention(blk.self_attn, h, h, enc_self, heads, false));
        x = ad::add(x, apply_ffn(blk.ffn, apply_norm(blk.ffn_norm, x)));
        if (capture != nullptr) {
            capture->encoder.push_back(x.value());
        }
    }
    const ad::Var memory = apply_norm(enc_final_norm_, x);

    for (std::size_t i = 0; i < n_blocks; ++i) {
        auto& blk = decoder_[i];
        auto h = apply_norm(blk.self_norm, y);
        y = ad::add(y, apply_attention(blk.self_attn, h, h, dec_self, heads, true));
        y = ad::add(y, apply_attention(blk.cross_attn, apply_norm(blk.cross_norm, y), memory, cross, heads, false));
        y = ad::add(y, apply_ffn(blk.ffn, apply_norm(blk.ffn_norm, y)));
        if (capture != nullptr) {
            capture->decoder.push_back(y.value());
        }
    }
    return apply_linear(head_, apply_norm(dec_final_norm_, y));
}

WeightPayload DynamicTransformer::export_weights(bool with_moments) {
    WeightPayload p;
    p.layers = static_cast<std::uint32_t>(layers());
    const std::size_t n = total_params();
    p.weights.reserve(n);
    if (with_moments) {
        p.first_moments.reserve(n);
        p.second_moments.reserve(n);
    }
    visit_params([&](const std::string& name, Param& param) {
        TensorRecord rec;
        rec.name_hash = fnv1a64(name);
        for (auto dim : param.raw.shape()) {
            rec.dims.push_back(static_cast<std::uint32_t>(dim));
        }
        p.table.push_back(std::move(rec));
        p.weights.insert(p.weights.end(), param.raw.values().begin(), param.raw.values().end());
        if (with_moments) {
            p.first_moments.insert(p.first_moments.end(), param.m.values().begin(), param.m.values().end());
            p.second_moments.insert(p.second_moments.end(), param.v.values().begin(), param.v.values().end());
        }
    });
    return p;
}

void DynamicTransformer::import_weights(const WeightPayload& payload) {
    if (payload.layers != layers()) {
        throw ProtocolError("weights carry " + std::to_string(payload.layers) + " layers, model has " +
                            std::to_string(layers()));
    }
    auto named = named_params();
    if (payload.table.size() != named.size()) {
        throw FormatError("tensor table: expected " + std::to_string(named.size()) + " tensors, found " +
                          std::to_string(payload.table.size()));
    }
    // Validate everything before touching any weight.
    for (std::size_t i = 0; i < named.size(); ++i) {
        const auto& rec = payload.table[i];
        const Param& p = *named[i].param;
        bool dims_match = rec.dims.size() == p.raw.rank();
        for (std::size_t a = 0; dims_match && a < rec.dims.size(); ++a) {
            dims_match = rec.dims[a] == p.raw.dim(a);
        }
        if (rec.name_hash != fnv1a64(named[i].name) || !dims_match) {
            throw FormatError("tensor table entry " + std::to_string(i) + ": expected " + named[i].name + " " +
                              shape_str(p.raw.shape()) + ", found hash " + std::to_string(rec.name_hash) +
                              " with rank " + std::to_string(rec.dims.size()));
        }
    }
    std::size_t offset = 0;
    const bool moments = !payload.weights_only();
    for (auto& np : named) {
        Param& p = *np.param;
        const std::size_t n = p.size();
        std::copy_n(payload.weights.data() + offset, n, p.raw.data());
        if (moments) {
            std::copy_n(payload.first_moments.data() + offset, n, p.m.data());
            std::copy_n(payload.second_moments.data() + offset, n, p.v.data());
        }
        offset += n;
    }
}

Tensor pack_frames(const Batch& batch) {
    if (batch.empty()) {
        throw DataError("pack_frames: empty batch");
    }
    const std::size_t fd = batch.front().frames.cols();
    std::size_t rows = 0;
    for (const auto& s : batch) {
        if (s.frames.rank() != 2 || s.frames.cols() != fd) {
            throw DimensionError("pack_frames: inconsistent frame shape " + shape_str(s.frames.shape()));
        }
        rows += s.frames.dim(0);
    }
    Tensor out({rows, fd});
    std::size_t offset = 0;
    for (const auto& s : batch) {
        std::copy_n(s.frames.data(), s.frames.size(), out.data() + offset);
        offset += s.frames.size();
    }
    return out;
}

std::vector<Tensor> unpack_frames(const Tensor& packed, const Batch& batch) {
    std::vector<Tensor> out;
    std::size_t offset = 0;
    const std::size_t fd = packed.cols();
    for (const auto& s : batch) {
        const std::size_t F = s.frames.dim(0);
        if (offset + F * fd > packed.size()) {
            throw DimensionError("unpack_frames: packed tensor too short for batch");
        }
        Tensor t({F, fd});
        std::copy_n(packed.data() + offset, F * fd, t.data());
        offset += F * fd;
        out.push_back(std::move(t));
    }
    return out;
}

ad::Var loss(const ad::Var& pred, const Tensor& target) { return ad::mse_loss(pred, target); }

double evaluate(DynamicTransformer& model, const std::vector<Sample>& samples, std::size_t batch_size) {
    if (samples.empty()) {
        throw DataError("evaluate: no samples");
    }
    double weighted = 0.0;
    double count = 0.0;
    for (std::size_t start = 0; start < samples.size(); start += batch_size) {
        const std::size_t end = std::min(samples.size(), start + batch_size);
        Batch batch(samples.begin() + static_cast<std::ptrdiff_t>(start), samples.begin() + static_cast<std::ptrdiff_t>(end));
        const Tensor target = pack_frames(batch);
        const double l = loss(model.forward(batch), target).value()[0];
        weighted += l * static_cast<double>(target.size());
        count += static_cast<double>(target.size());
    }
    return weighted / count;
}

Tensor infer(DynamicTransformer& model, const std::vector<int>& tokens, std::size_t n_frames) {
    if (n_frames == 0) {
        throw ContractError("infer: n_frames must be >= 1");
    }
    const std::size_t fd = model.config().frame_dim;
    Tensor generated({n_frames, fd});
    for (std::size_t j = 0; j < n_frames; ++j) {
        // Row j of the teacher is never seen by output j (shift right + causal mask).
        Tensor teacher({j + 1, fd});
        std::copy_n(generated.data(), j * fd, teacher.data());
        Batch batch{Sample{tokens, std::move(teacher)}};
        const ad::Var out = model.forward(batch);
        std::copy_n(out.value().data() + j * fd, fd, generated.data() + j * fd);
    }
    return generated;
}

Batch make_batch(const std::vector<std::vector<int>>& tokens, const Tensor& frames) {
    if (frames.rank() != 3 || frames.dim(0) != tokens.size()) {
        throw DimensionError("make_batch: frames " + shape_str(frames.shape()) + " do not match " +
                             std::to_string(tokens.size()) + " token rows");
    }
    const std::size_t F = frames.dim(1);
    const std::size_t fd = frames.dim(2);
    Batch batch;
    for (std::size_t b = 0; b < tokens.size(); ++b) {
        Tensor f({F, fd});
        std::copy_n(frames.data() + b * F * fd, F * fd, f.data());
        batch.push_back(Sample{tokens[b], std::move(f)});
    }
    return batch;
}

Bytes serialize(DynamicTransformer& model, bool with_moments) { return encode_payload(model.export_weights(with_moments)); }

DynamicTransformer deserialize(std::span<const std::uint8_t> bytes, const ModelConfig& config, std::uint64_t seed) {
    const WeightPayload payload = decode_payload(bytes);
    DynamicTransformer model(config, seed);
    const std::size_t q = config.layers_per_growth();
    if (payload.layers < q || payload.layers > config.target_layers || payload.layers % q != 0) {
        throw FormatError("weight payload: layers expected a multiple of " + std::to_string(q) + " in [" +
                          std::to_string(q) + ", " + std::to_string(config.target_layers) + "], found " +
                          std::to_string(payload.layers));
    }
    if (payload.layers > model.layers()) {
        model.grow(payload.layers - model.layers());
    }
    model.import_weights(payload);
    return model;
}

}  // namespace fdt
