#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cllora/corpus.hpp"
#include "cllora/numerics/matrix.hpp"

namespace cllora {

// Square attention projections a LoRA bypass can attach to.
enum class LoraTarget : std::uint8_t { Query = 0, Key = 1, Value = 2, Output = 3 };

std::string_view to_string(LoraTarget t);
LoraTarget parse_lora_target(std::string_view name);
// "q,v" style lists; result is sorted and de-duplicated.
std::vector<LoraTarget> parse_lora_targets(std::string_view list);
std::string format_lora_targets(std::span<const LoraTarget> targets);

struct ModelConfig {
    std::size_t vocab_size = kVocabSize;
    std::size_t d_model = 64;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t d_ff = 128;
    std::size_t max_seq_len = kDefaultMaxSeqLen;
    std::size_t lora_rank = 2;
    std::vector<LoraTarget> lora_targets{LoraTarget::Query, LoraTarget::Value};
    double lora_init_std = 0.02;

    void validate() const;
    std::size_t d_head() const { return d_model / n_heads; }
    // Hash of every field that determines tensor shapes.
    std::uint64_t fingerprint() const;
};

struct LayerWeights {
    Matrix ln1_gain, ln1_bias;
    Matrix wq, wk, wv, wo;
    Matrix ln2_gain, ln2_bias;
    Matrix w1, b1, w2, b2;

    bool operator==(const LayerWeights&) const = default;
};

// Pre-norm decoder-only transformer. Never modified by training.
struct FrozenBase {
    ModelConfig config;
    Matrix token_embedding;    // vocab x d
    Matrix position_embedding; // max_seq_len x d
    std::vector<LayerWeights> layers;
    Matrix final_gain, final_bias;
    Matrix unembedding; // d x vocab

    std::size_t parameter_count() const;
    bool bitwise_equal(const FrozenBase& other) const;
};

// One rank-r bypass: y = x W + (x A) B with A: d_in x r, B: r x d_out.
struct LoraFactors {
    std::size_t layer = 0;
    LoraTarget target = LoraTarget::Query;
    Matrix a;
    Matrix b;

    bool operator==(const LoraFactors&) const = default;
};

// Factors in canonical order: layer ascending, then target ascending.
struct LoraAdapter {
    std::vector<LoraFactors> factors;

    const LoraFactors* find(std::size_t layer, LoraTarget target) const;
    std::size_t parameter_count() const;
    // Same shapes, all zeros.
    LoraAdapter zeros_like() const;
    bool operator==(const LoraAdapter&) const = default;
};

FrozenBase init_base(const ModelConfig& config, std::uint64_t seed);
// A ~ N(0, lora_init_std^2), B = 0.
LoraAdapter init_adapter(const ModelConfig& config, std::uint64_t seed);

struct InitializedModel {
    FrozenBase base;
    LoraAdapter adapter;
};
InitializedModel init_model(const ModelConfig& config, std::uint64_t seed);

// Logits (T x vocab). `adapter == nullptr` runs the base alone.
Matrix forward(const FrozenBase& base, const LoraAdapter* adapter, std::span<const std::uint32_t> tokens);

struct LossAndGrads {
    double loss = 0.0;        // token-weighted mean cross-entropy
    std::size_t tokens = 0;
    LoraAdapter grads;        // same layout as the adapter
};

// Gradients are produced for adapter factors only.
LossAndGrads loss_and_grads(const FrozenBase& base, const LoraAdapter& adapter,
                            std::span<const TrainingSequence> batch);

// Loss only, no gradients.
double batch_loss(const FrozenBase& base, const LoraAdapter* adapter, std::span<const TrainingSequence> batch);

struct EvalResult {
    double nll_sum = 0.0;
    std::size_t tokens = 0;
    double mean() const { return tokens == 0 ? 0.0 : nll_sum / static_cast<double>(tokens); }
};

// Token-weighted loss over corpus documents. Documents are scored in
// parallel; the sum is reduced in id order.
EvalResult evaluate(const FrozenBase& base, const LoraAdapter* adapter, const Corpus& corpus,
                    std::span<const std::uint32_t> doc_ids);

std::size_t count_trainable(std::size_t layers, std::size_t d_model, std::size_t rank,
                            std::span<const LoraTarget> targets);
std::size_t count_trainable(const ModelConfig& config);

} // namespace cllora
