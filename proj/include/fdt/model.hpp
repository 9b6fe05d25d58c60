#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "fdt/autograd.hpp"
#include "fdt/param.hpp"
#include "fdt/payload.hpp"
#include "fdt/sample.hpp"

namespace fdt {

struct ModelConfig {
    std::size_t vocab_size = 32;
    std::size_t frame_dim = 16;
    std::size_t d_model = 32;
    std::size_t heads = 2;
    std::size_t ffn_dim = 64;
    std::size_t target_layers = 6;  // L
    std::size_t growth_parts = 6;   // c
    std::size_t max_seq_len = 64;
    bool literal_division = false;

    // Throws ConfigError naming the offending field.
    void validate() const;
    // q = L / c, also the initial depth.
    std::size_t layers_per_growth() const { return target_layers / growth_parts; }

    bool operator==(const ModelConfig&) const = default;
};

struct Linear {
    Param weight;  // [in x out], equalized with fan_in = in
    Param bias;    // [out]
};

struct Norm {
    Param gamma;
    Param beta;
};

struct AttentionWeights {
    Linear query;
    Linear key;
    Linear value;
    Linear output;
};

struct FeedForward {
    Linear expand;
    Linear contract;
};

struct EncoderBlock {
    Norm attn_norm;
    AttentionWeights self_attn;
    Norm ffn_norm;
    FeedForward ffn;
};

struct DecoderBlock {
    Norm self_norm;
    AttentionWeights self_attn;
    Norm cross_norm;
    AttentionWeights cross_attn;
    Norm ffn_norm;
    FeedForward ffn;
};

struct NamedParam {
    std::string name;
    Param* param;
};

struct ParamCount {
    std::size_t block_params = 0;
    std::size_t fixed_params = 0;
    std::size_t per_enc_block = 0;  // W1
    std::size_t per_dec_block = 0;  // W2
};

struct HiddenStates {
    std::vector<Tensor> encoder;  // output of each evaluated encoder block
    std::vector<Tensor> decoder;  // output of each evaluated decoder block
};

// Growable Pre-LN encoder/decoder mapping token sequences to frame sequences.
//
// Every sublayer computes x + f(LN(x)); both stacks end in a final layer norm.
// Sequences in a batch are packed row-wise without padding, so predictions
// come back as [sum(F) x frame_dim].
class DynamicTransformer {
public:
    DynamicTransformer(ModelConfig config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    std::uint64_t seed() const { return seed_; }
    std::size_t layers() const { return encoder_.size(); }

    // Appends q fresh blocks on top of both stacks. Existing params are untouched.
    void grow(std::size_t q);

    // Fixed params first, then encoder blocks, then decoder blocks.
    std::vector<NamedParam> named_params();
    std::vector<Param*> params();
    ParamCount param_count() const;
    std::size_t total_params() const;

    // Teacher-forced pass: the decoder sees each sample's frames shifted right by one.
    ad::Var forward(const Batch& batch);
    // Same network truncated to the first n_blocks of each stack, recording each block output.
    HiddenStates probe_hidden_states(const Batch& batch, std::size_t n_blocks);

    WeightPayload export_weights(bool with_moments = false);
    // Requires matching depth (ProtocolError) and tensor table (FormatError).
    void import_weights(const WeightPayload& payload);

private:
    ad::Var run(const Batch& batch, std::size_t n_blocks, HiddenStates* capture);
    template <class F>
    void visit_params(F&& f);
    EncoderBlock make_encoder_block(std::size_t index) const;
    DecoderBlock make_decoder_block(std::size_t index) const;

    ModelConfig config_;
    std::uint64_t seed_;
    Tensor positions_;  // sinusoidal [max_seq_len x d_model], not trainable
    Param embedding_;
    Linear text_proj_;
    Linear mel_fc1_;
    Linear mel_fc2_;
    Linear mel_fc3_;
    std::vector<EncoderBlock> encoder_;
    std::vector<DecoderBlock> decoder_;
    Norm enc_final_norm_;
    Norm dec_final_norm_;
    Linear head_;
};

// Concatenated target frames [sum(F) x frame_dim].
Tensor pack_frames(const Batch& batch);
// Splits packed [sum(F) x frame_dim] rows back into per-sample tensors.
std::vector<Tensor> unpack_frames(const Tensor& packed, const Batch& batch);

// Mean squared error over every element.
ad::Var loss(const ad::Var& pred, const Tensor& target);
// Teacher-forced MSE over all frames of `samples`, weighted per element.
double evaluate(DynamicTransformer& model, const std::vector<Sample>& samples, std::size_t batch_size = 32);

// Greedy autoregressive decoding from a zero frame, exactly n_frames long.
Tensor infer(DynamicTransformer& model, const std::vector<int>& tokens, std::size_t n_frames);

// Rectangular helper: tokens [B x S] and frames [B x F x frame_dim].
Batch make_batch(const std::vector<std::vector<int>>& tokens, const Tensor& frames);

Bytes serialize(DynamicTransformer& model, bool with_moments = false);
DynamicTransformer deserialize(std::span<const std::uint8_t> bytes, const ModelConfig& config,
                               std::uint64_t seed = 0);

}  // namespace fdt
