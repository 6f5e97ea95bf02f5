#pragma once

// Context absorption: fine-tune low-rank adapters so the contextless model's
// hidden states on Y match the frozen full-context model's states on the
// same positions. Includes the token-distribution and self-reconstruction
// baselines used by the ablation harness.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "absorber/model.hpp"

namespace absorber {

enum class LossNorm { l1, l2 };
enum class AlignmentTarget { hidden_states, token_distribution, ttt_reconstruction };
enum class PositionMode { absolute_offset, reset };

const char* loss_norm_name(LossNorm v);
const char* alignment_target_name(AlignmentTarget v);
const char* position_mode_name(PositionMode v);
const char* loss_normalize_name(LossNormalize v);

struct AbsorptionConfig {
    std::int64_t n = 32;         // absorbed token count
    std::int64_t m = 64;         // synchronization token count
    std::int64_t max_steps = 200;
    float eta = 5e-4f;           // adapter learning rate
    float epsilon = 0.01f;       // early-stop threshold (strict <)
    LossNormalize norm_mode = LossNormalize::per_element;
    LossNorm loss_norm = LossNorm::l1;
    AlignmentTarget alignment_target = AlignmentTarget::hidden_states;
    PositionMode position_mode = PositionMode::absolute_offset;
    std::int64_t lora_rank = 16;
    float lora_alpha = 32.0f;
    std::vector<LoraTarget> lora_targets = all_lora_targets();
    float adam_beta1 = 0.9f;
    float adam_beta2 = 0.999f;
    float weight_decay = 0.0f;

    void validate() const; // throws ConfigError with a distinct message per field
};

enum class TerminationReason { threshold, max_steps };

struct AbsorptionReport {
    // One entry per executed optimizer step; the sub-threshold evaluation
    // that stops the loop is recorded in final_loss only.
    std::vector<double> loss_trajectory;
    std::int64_t steps = 0;
    TerminationReason terminated_by = TerminationReason::max_steps;
    std::optional<double> final_loss;
    double wall_time_seconds = 0.0;

    std::string to_csv() const; // "step,loss" lines
};

// One forward of f_W(XY) starting at `start_position`; returns the detached
// trace of the last m positions (the synchronization targets).
HiddenStateTrace capture_oracle_trace(const ModelWeights& weights, const std::vector<std::int32_t>& xy_tokens,
                                      std::int64_t n, std::int64_t m, std::int64_t start_position = 0);

// L1/L2 distance between traces under cfg.norm_mode, differentiable w.r.t.
// the student layer nodes ([m,d] each, h^0..h^L).
Tensor<float> sync_loss(const HiddenStateTrace& target, const std::vector<Tensor<float>>& student_layers,
                        const AbsorptionConfig& cfg);
// Convenience overload for detached student traces (not differentiable).
Tensor<float> sync_loss(const HiddenStateTrace& target, const HiddenStateTrace& student,
                        const AbsorptionConfig& cfg);

// Mean KL(oracle || student) over positions; oracle side is detached.
Tensor<float> token_distribution_loss(const std::vector<float>& oracle_logits, Shape oracle_shape,
                                      const Tensor<float>& student_logits);

// Baseline objective: next-token prediction of f_{W*} on X itself.
Tensor<float> ttt_reconstruction_loss(const ModelWeights& weights, const LoraAdapterSet* adapters,
                                      const std::vector<std::int32_t>& x_tokens,
                                      std::int64_t start_position);

// Algorithm: capture the oracle trace once, then up to max_steps AdamW
// updates of the adapters (base weights frozen), stopping early when the
// loss drops below epsilon. `start_position` is the absolute position of
// X[0] (nonzero inside streaming rounds).
std::pair<LoraAdapterSet, AbsorptionReport> absorb_context(const ModelWeights& weights,
                                                           const std::vector<std::int32_t>& x_tokens,
                                                           const std::vector<std::int32_t>& y_tokens,
                                                           const AbsorptionConfig& cfg, std::uint64_t seed,
                                                           std::int64_t start_position = 0);

} // namespace absorber
