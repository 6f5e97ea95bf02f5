#pragma once

// Latency measurement, post-absorption agreement metrics, token F1 and the
// ablation grid runner.

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "absorber/absorption.hpp"
#include "absorber/model.hpp"
#include "absorber/streaming.hpp"

namespace absorber {

struct LatencyRecord {
    CostMode mode = CostMode::standard;
    std::int64_t prefix_len = 0; // N
    std::int64_t gen_count = 0;  // K_gen
    double prefill_seconds = 0.0;   // T_prefill(N), median over trials
    double total_seconds = 0.0;     // T_gen(N+K_gen), median over trials
    double per_token_seconds = 0.0; // L(N) = (T_gen - T_prefill)/K_gen, median
    std::int64_t cost_model = 0;    // attended_positions_per_token(mode, N)

    static std::string csv_header(); // mode,N,K_gen,T_prefill,T_gen,L_N,cost_model
    std::string csv_row() const;
};

// Wall-clock latency of generating gen_count tokens after the given prefix;
// absorber mode drains the prefix through absorption rounds first and keeps
// absorbing inside the generation phase.
LatencyRecord measure_latency(const ModelWeights& weights, CostMode mode, const AbsorptionConfig& cfg,
                              const std::vector<std::int32_t>& prefix, std::int64_t gen_count,
                              std::int64_t trials);

// Greedy rollout of `count` tokens after `tokens` (no EOS stop; evaluation
// wants a fixed-length continuation).
std::vector<std::int32_t> greedy_continuation(const ModelWeights& weights,
                                              const std::vector<std::int32_t>& tokens,
                                              std::int64_t start_position, std::int64_t count);

struct ArmMetrics {
    double top1_agreement = 0.0;      // fraction of holdout positions with matching argmax
    double mean_abs_logit_diff = 0.0; // vs the oracle rows
    double mean_hidden_l1 = 0.0;      // per-element, all layers
};

// Oracle continuation plus contextless arms evaluated position-by-position
// beyond the synchronization window.
struct AgreementReport {
    std::int64_t holdout_len = 0;
    std::vector<std::int32_t> oracle_continuation; // Y' from f_W(XY)
    ArmMetrics pre;  // base weights, no context
    ArmMetrics post; // absorbed weights, no context
};

AgreementReport agreement_eval(const ModelWeights& base_weights, const ModelWeights& absorbed_weights,
                               const std::vector<std::int32_t>& x_tokens,
                               const std::vector<std::int32_t>& y_tokens, std::int64_t holdout_len,
                               PositionMode position_mode = PositionMode::absolute_offset);

// Bag-of-tokens F1: precision/recall over the multiset intersection.
double token_f1(const std::vector<std::int32_t>& predicted, const std::vector<std::int32_t>& reference);

// ---------------------------------------------------------------------------
// ablation grid
// ---------------------------------------------------------------------------

struct AblationAxis {
    std::string name;
    // (value label, config modifier)
    std::vector<std::pair<std::string, std::function<void(AbsorptionConfig&)>>> values;
};

struct AblationCell {
    std::map<std::string, std::string> axes; // axis name -> value label
    std::uint64_t seed = 0;
    double final_sync_loss = 0.0;
    double top1_agreement = 0.0;
    double mean_abs_logit_diff = 0.0;
    double f1 = 0.0;
    bool ok = false;
    std::string error; // populated when the cell failed
};

// Runs absorb_context + agreement_eval for every cell of the cartesian grid,
// once per seed. `stream_tokens` is the contiguous task text; each cell takes
// X = stream[0:n] and Y = stream[n:n+m] under its own n/m. Cell failures are
// recorded in-cell and the grid continues.
std::vector<AblationCell> run_ablation_grid(const ModelWeights& base_weights,
                                            const std::vector<std::int32_t>& stream_tokens,
                                            const AbsorptionConfig& base_cfg,
                                            const std::vector<AblationAxis>& axes,
                                            const std::vector<std::uint64_t>& seeds,
                                            std::int64_t holdout_len);

// Seed-averaged Markdown table. With a column axis the body holds `metric`
// per (row,col); without one, a row per variant and a column per metric.
std::string ablation_markdown(const std::vector<AblationCell>& cells, const std::string& row_axis,
                              const std::string& col_axis, const std::string& metric);

std::string ablation_csv(const std::vector<AblationCell>& cells);

} // namespace absorber
