#pragma once

// Decoder-only transformer at toy scale: pre-norm RMSNorm, rotary positions,
// SiLU-gated MLP, untied unembedding. Two forward paths share the same
// numeric helpers: an autograd path (training, hidden-state capture) and a
// raw-float KV-cache path (incremental decoding).

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "absorber/tensor.hpp"

namespace absorber {

struct ModelConfig {
    std::int64_t num_layers = 4;
    std::int64_t hidden_dim = 128;
    std::int64_t num_heads = 4;
    std::int64_t mlp_dim = 512;
    std::int64_t vocab_size = 258; // 256 bytes + BOS + EOS
    std::int64_t max_positions = 4096;
    double rope_base = 10000.0;

    std::int64_t head_dim() const { return hidden_dim / num_heads; }
    std::int64_t param_count() const;
    void validate() const; // throws ConfigError
    bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
    Tensor<float> wq, wk, wv, wo;       // [d,d]
    Tensor<float> w_gate, w_up;         // [d,mlp]
    Tensor<float> w_down;               // [mlp,d]
    Tensor<float> norm_attn_gain;       // [d]
    Tensor<float> norm_mlp_gain;        // [d]
};

struct ModelWeights {
    ModelConfig config;
    Tensor<float> embedding;       // [vocab,d]
    std::vector<LayerWeights> layers;
    Tensor<float> norm_final_gain; // [d]
    Tensor<float> unembedding;     // [d,vocab]

    ModelWeights clone() const;
    void set_requires_grad(bool on);
    // Canonical (name, tensor) enumeration; checkpoint payload order.
    std::vector<std::pair<std::string, Tensor<float>*>> named_tensors();
    std::vector<std::pair<std::string, const Tensor<float>*>> named_tensors() const;
    bool bitwise_equal(const ModelWeights& other) const;
};

ModelWeights init_model(const ModelConfig& config, std::uint64_t seed);

// ---------------------------------------------------------------------------
// low-rank adapters
// ---------------------------------------------------------------------------

enum class LoraTarget { wq, wk, wv, wo, mlp_gate, mlp_up, mlp_down };

const char* lora_target_name(LoraTarget t);
std::optional<LoraTarget> lora_target_from_name(const std::string& name);
std::vector<LoraTarget> all_lora_targets();

// One adapted projection: delta = (alpha/rank) * b * a, with b zero-init so
// a fresh adapter set leaves the forward untouched.
struct LoraEntry {
    LoraTarget target;
    std::int64_t layer;
    Tensor<float> b; // [in, rank], zero-init
    Tensor<float> a; // [rank, out], gaussian-init
};

struct LoraAdapterSet {
    std::int64_t rank = 0;
    float alpha = 0.0f;
    std::vector<LoraTarget> targets;
    std::vector<LoraEntry> entries;

    float scaling() const { return alpha / float(rank); }
    std::vector<Tensor<float>*> parameters();
    const LoraEntry* find(std::int64_t layer, LoraTarget t) const;
    bool is_zero() const;
};

LoraAdapterSet init_adapters(const ModelConfig& config, std::int64_t rank, float alpha,
                             const std::vector<LoraTarget>& targets, std::uint64_t seed);

// Returns base + (alpha/rank) * b * a folded into every adapted target.
ModelWeights lora_merge(const ModelWeights& weights, const LoraAdapterSet& adapters);
void lora_merge_inplace(ModelWeights& weights, const LoraAdapterSet& adapters);

// ---------------------------------------------------------------------------
// forward passes
// ---------------------------------------------------------------------------

// Per-position stack of residual-stream states: h^0 is the embedding output,
// h^l the output of block l (h^L before the final norm). Detached floats.
struct HiddenStateTrace {
    std::vector<std::int64_t> positions;
    std::vector<std::vector<std::vector<float>>> states; // [pos][layer 0..L][d]

    std::int64_t num_positions() const { return std::int64_t(positions.size()); }
    std::int64_t layers_per_position() const { return states.empty() ? 0 : std::int64_t(states[0].size()); }
    HiddenStateTrace slice_positions(std::int64_t first, std::int64_t count) const;
};

// Autograd products of one full forward.
struct ForwardResult {
    Tensor<float> logits;                    // [T, vocab]
    std::vector<Tensor<float>> layer_states; // L+1 nodes of shape [T,d]; empty unless captured
    std::vector<std::int64_t> positions;

    HiddenStateTrace detach_trace() const;
};

// Causal forward over the whole token span at absolute positions
// start_position ... start_position+T-1.
ForwardResult forward_full(const ModelWeights& weights, const LoraAdapterSet* adapters,
                           const std::vector<std::int32_t>& tokens, std::int64_t start_position,
                           bool capture);

// Batched training forward (positions 0..T-1 in every row): logits [B,T,vocab].
Tensor<float> forward_training_batch(const ModelWeights& weights, const std::vector<std::int32_t>& tokens,
                                     std::int64_t batch, std::int64_t seq_len);

// KV cache for token-by-token decoding; single owner.
struct DecodeCache {
    DecodeCache(const ModelConfig& config, std::int64_t start_position);

    std::int64_t length() const { return len; }
    std::int64_t next_position() const { return start_position + len; }

    ModelConfig config;
    std::int64_t start_position = 0;
    std::int64_t len = 0;
    std::vector<std::vector<float>> k; // per layer, [t*d] packed
    std::vector<std::vector<float>> v;
};

// Appends one position to the cache and returns the logits for it.
std::vector<float> forward_incremental(const ModelWeights& weights, const LoraAdapterSet* adapters,
                                       DecodeCache& cache, std::int32_t token);

// Argmax with lowest-index tie-break.
std::int32_t greedy_next_token(const std::vector<float>& logits);

// ---------------------------------------------------------------------------
// attention width instrumentation
// ---------------------------------------------------------------------------

struct AttentionStats {
    std::int64_t max_width = 0;   // widest single attention span observed
    std::int64_t records = 0;
};

// RAII scope that observes the attention span of every forward run while it
// is alive. Probes nest; inner scopes propagate to outer ones.
class AttentionProbe {
public:
    AttentionProbe();
    ~AttentionProbe();
    AttentionProbe(const AttentionProbe&) = delete;
    AttentionProbe& operator=(const AttentionProbe&) = delete;

    const AttentionStats& stats() const { return stats_; }
    static void record(std::int64_t width);

private:
    AttentionProbe* parent_;
    AttentionStats stats_;
};

} // namespace absorber
