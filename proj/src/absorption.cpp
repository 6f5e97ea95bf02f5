#include "absorber/absorption.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include "absorber/adamw.hpp"

namespace absorber {

const char* loss_norm_name(LossNorm v) { return v == LossNorm::l1 ? "l1" : "l2"; }

const char* alignment_target_name(AlignmentTarget v) {
    switch (v) {
        case AlignmentTarget::hidden_states: return "hidden_states";
        case AlignmentTarget::token_distribution: return "token_distribution";
        case AlignmentTarget::ttt_reconstruction: return "ttt_reconstruction";
    }
    return "?";
}

const char* position_mode_name(PositionMode v) {
    return v == PositionMode::absolute_offset ? "absolute_offset" : "reset";
}

const char* loss_normalize_name(LossNormalize v) {
    return v == LossNormalize::per_position ? "per_position" : "per_element";
}

void AbsorptionConfig::validate() const {
    if (n < 0) throw ConfigError("absorption config: n must be >= 0");
    if (m < 1) throw ConfigError("absorption config: m must be >= 1");
    if (max_steps < 0) throw ConfigError("absorption config: max_steps must be >= 0");
    if (eta <= 0.0f) throw ConfigError("absorption config: eta must be > 0");
    if (epsilon < 0.0f) throw ConfigError("absorption config: epsilon must be >= 0");
    if (lora_rank < 1) throw ConfigError("absorption config: lora_rank must be >= 1");
    if (lora_targets.empty()) throw ConfigError("absorption config: lora_targets must not be empty");
}

std::string AbsorptionReport::to_csv() const {
    std::ostringstream os;
    os << "step,loss\n";
    for (std::size_t i = 0; i < loss_trajectory.size(); ++i) os << (i + 1) << "," << loss_trajectory[i] << "\n";
    return os.str();
}

HiddenStateTrace capture_oracle_trace(const ModelWeights& weights, const std::vector<std::int32_t>& xy_tokens,
                                      std::int64_t n, std::int64_t m, std::int64_t start_position) {
    if (std::int64_t(xy_tokens.size()) != n + m)
        throw ContractError("capture_oracle_trace: got " + std::to_string(xy_tokens.size()) +
                            " tokens, expected n+m = " + std::to_string(n + m));
    auto r = forward_full(weights, nullptr, xy_tokens, start_position, true);
    return r.detach_trace().slice_positions(n, m);
}

namespace {

// Rows laid out as [h^0_p, h^1_p, ..., h^L_p] per position.
Tensor<float> trace_as_matrix(const HiddenStateTrace& trace) {
    const std::int64_t m = trace.num_positions();
    const std::int64_t layers = trace.layers_per_position();
    const std::int64_t d = layers > 0 ? std::int64_t(trace.states[0][0].size()) : 0;
    std::vector<float> flat;
    flat.reserve(std::size_t(m * layers * d));
    for (const auto& per_pos : trace.states)
        for (const auto& vec : per_pos) flat.insert(flat.end(), vec.begin(), vec.end());
    return Tensor<float>::leaf({m, layers * d}, std::move(flat));
}

} // namespace

Tensor<float> sync_loss(const HiddenStateTrace& target, const std::vector<Tensor<float>>& student_layers,
                        const AbsorptionConfig& cfg) {
    if (student_layers.empty()) throw ContractError("sync_loss: student trace is empty");
    if (std::int64_t(student_layers.size()) != target.layers_per_position())
        throw ContractError("sync_loss: student has " + std::to_string(student_layers.size()) +
                            " layers per position, target has " + std::to_string(target.layers_per_position()));
    const std::int64_t m = student_layers[0].dim(0);
    if (m != target.num_positions())
        throw ContractError("sync_loss: student covers " + std::to_string(m) + " positions, target " +
                            std::to_string(target.num_positions()));

    // The norm runs over the stacked layer vectors of each position;
    // concatenating layers along the feature dim gives row p = [h^0_p .. h^L_p],
    // the same layout trace_as_matrix produces for the target.
    const std::int64_t d = student_layers[0].shape().back();
    Tensor<float> student_cat = concat(student_layers, 1);
    Tensor<float> target_cat = trace_as_matrix(target);
    if (target_cat.shape() != Shape{m, std::int64_t(student_layers.size()) * d})
        throw ContractError("sync_loss: target/student width mismatch");

    return cfg.loss_norm == LossNorm::l1 ? l1_loss(student_cat, target_cat, cfg.norm_mode)
                                         : l2_loss(student_cat, target_cat, cfg.norm_mode);
}

Tensor<float> sync_loss(const HiddenStateTrace& target, const HiddenStateTrace& student,
                        const AbsorptionConfig& cfg) {
    if (student.layers_per_position() != target.layers_per_position())
        throw ContractError("sync_loss: trace layer counts differ");
    if (student.num_positions() != target.num_positions())
        throw ContractError("sync_loss: trace position counts differ");
    const std::int64_t layers = student.layers_per_position();
    const std::int64_t m = student.num_positions();
    const std::int64_t d = std::int64_t(student.states[0][0].size());
    std::vector<Tensor<float>> layer_nodes;
    for (std::int64_t l = 0; l < layers; ++l) {
        std::vector<float> flat;
        flat.reserve(std::size_t(m * d));
        for (std::int64_t p = 0; p < m; ++p) {
            const auto& vec = student.states[std::size_t(p)][std::size_t(l)];
            flat.insert(flat.end(), vec.begin(), vec.end());
        }
        layer_nodes.push_back(Tensor<float>::leaf({m, d}, std::move(flat)));
    }
    return sync_loss(target, layer_nodes, cfg);
}

Tensor<float> token_distribution_loss(const std::vector<float>& oracle_logits, Shape oracle_shape,
                                      const Tensor<float>& student_logits) {
    Tensor<float> oracle = Tensor<float>::leaf(std::move(oracle_shape), oracle_logits);
    if (oracle.shape() != student_logits.shape())
        throw ContractError("token_distribution_loss: oracle shape " + shape_str(oracle.shape()) +
                            " vs student " + shape_str(student_logits.shape()));
    return kl_divergence_lastdim(oracle, student_logits);
}

Tensor<float> ttt_reconstruction_loss(const ModelWeights& weights, const LoraAdapterSet* adapters,
                                      const std::vector<std::int32_t>& x_tokens,
                                      std::int64_t start_position) {
    if (x_tokens.size() < 2)
        throw ContractError("ttt_reconstruction_loss: need at least 2 tokens, got " +
                            std::to_string(x_tokens.size()));
    std::vector<std::int32_t> inputs(x_tokens.begin(), x_tokens.end() - 1);
    std::vector<std::int32_t> targets(x_tokens.begin() + 1, x_tokens.end());
    auto r = forward_full(weights, adapters, inputs, start_position, false);
    return cross_entropy(r.logits, targets);
}

std::pair<LoraAdapterSet, AbsorptionReport> absorb_context(const ModelWeights& weights,
                                                           const std::vector<std::int32_t>& x_tokens,
                                                           const std::vector<std::int32_t>& y_tokens,
                                                           const AbsorptionConfig& cfg, std::uint64_t seed,
                                                           std::int64_t start_position) {
    cfg.validate();
    if (std::int64_t(x_tokens.size()) != cfg.n)
        throw ContractError("absorb_context: |X| = " + std::to_string(x_tokens.size()) + " but n = " +
                            std::to_string(cfg.n));
    if (std::int64_t(y_tokens.size()) != cfg.m)
        throw ContractError("absorb_context: |Y| = " + std::to_string(y_tokens.size()) + " but m = " +
                            std::to_string(cfg.m));
    for (const auto& [name, t] : weights.named_tensors())
        if (t->requires_grad())
            throw ContractError("absorb_context: base weights must be frozen (requires_grad off)");

    const auto t0 = std::chrono::steady_clock::now();

    // oracle products, captured once; never re-derived inside the loop
    HiddenStateTrace oracle_trace;
    std::vector<float> oracle_logits;
    if (cfg.alignment_target == AlignmentTarget::hidden_states ||
        cfg.alignment_target == AlignmentTarget::token_distribution) {
        std::vector<std::int32_t> xy = x_tokens;
        xy.insert(xy.end(), y_tokens.begin(), y_tokens.end());
        auto oracle = forward_full(weights, nullptr, xy, start_position, true);
        oracle_trace = oracle.detach_trace().slice_positions(cfg.n, cfg.m);
        if (cfg.alignment_target == AlignmentTarget::token_distribution) {
            const std::int64_t vocab = weights.config.vocab_size;
            oracle_logits.assign(oracle.logits.value().begin() + cfg.n * vocab, oracle.logits.value().end());
        }
    }
    if (cfg.alignment_target == AlignmentTarget::ttt_reconstruction && cfg.n < 2)
        throw ContractError("absorb_context: ttt_reconstruction needs n >= 2");

    LoraAdapterSet adapters = init_adapters(weights.config, cfg.lora_rank, cfg.lora_alpha,
                                            cfg.lora_targets, seed);
    for (Tensor<float>* p : adapters.parameters()) p->node()->requires_grad = true;
    AdamWConfig oc;
    oc.eta = cfg.eta;
    oc.beta1 = cfg.adam_beta1;
    oc.beta2 = cfg.adam_beta2;
    oc.weight_decay = cfg.weight_decay;
    AdamW optimizer(adapters.parameters(), oc);

    const std::int64_t student_start =
        cfg.position_mode == PositionMode::absolute_offset ? start_position + cfg.n : 0;
    const std::int64_t x_start = cfg.position_mode == PositionMode::absolute_offset ? start_position : 0;

    AbsorptionReport report;
    for (std::int64_t k = 1; k <= cfg.max_steps; ++k) {
        Tensor<float> loss;
        try {
            switch (cfg.alignment_target) {
                case AlignmentTarget::hidden_states: {
                    auto student = forward_full(weights, &adapters, y_tokens, student_start, true);
                    loss = sync_loss(oracle_trace, student.layer_states, cfg);
                    break;
                }
                case AlignmentTarget::token_distribution: {
                    auto student = forward_full(weights, &adapters, y_tokens, student_start, false);
                    loss = token_distribution_loss(oracle_logits, {cfg.m, weights.config.vocab_size},
                                                   student.logits);
                    break;
                }
                case AlignmentTarget::ttt_reconstruction:
                    loss = ttt_reconstruction_loss(weights, &adapters, x_tokens, x_start);
                    break;
            }
        } catch (const NumericError& e) {
            throw OptimizationError("absorption diverged at step " + std::to_string(k) + ": " + e.what());
        }

        const double lv = double(loss.item());
        report.final_loss = lv;
        if (!std::isfinite(lv))
            throw OptimizationError("absorption loss non-finite at step " + std::to_string(k));
        if (lv < double(cfg.epsilon)) {
            report.terminated_by = TerminationReason::threshold;
            const auto t1 = std::chrono::steady_clock::now();
            report.wall_time_seconds = std::chrono::duration<double>(t1 - t0).count();
            for (Tensor<float>* p : adapters.parameters()) {
                p->drop_grad();
                p->node()->requires_grad = false;
            }
            return {std::move(adapters), std::move(report)};
        }

        try {
            optimizer.zero_grad();
            backward(loss);
            optimizer.step();
        } catch (const NumericError& e) {
            throw OptimizationError("absorption diverged at step " + std::to_string(k) + ": " + e.what());
        } catch (const OptimizationError& e) {
            throw OptimizationError("absorption step " + std::to_string(k) + ": " + e.what());
        }
        report.loss_trajectory.push_back(lv);
        report.steps += 1;
    }

    report.terminated_by = TerminationReason::max_steps;
    const auto t1 = std::chrono::steady_clock::now();
    report.wall_time_seconds = std::chrono::duration<double>(t1 - t0).count();
    for (Tensor<float>* p : adapters.parameters()) {
        p->drop_grad();
        p->node()->requires_grad = false;
    }
    return {std::move(adapters), std::move(report)};
}

} // namespace absorber
