#include "absorber/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>
#include <unordered_map>

namespace absorber {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

} // namespace

std::string LatencyRecord::csv_header() { return "mode,N,K_gen,T_prefill,T_gen,L_N,cost_model"; }

std::string LatencyRecord::csv_row() const {
    std::ostringstream os;
    os << cost_mode_name(mode) << "," << prefix_len << "," << gen_count << "," << prefill_seconds << ","
       << total_seconds << "," << per_token_seconds << "," << cost_model;
    return os.str();
}

std::vector<std::int32_t> greedy_continuation(const ModelWeights& weights,
                                              const std::vector<std::int32_t>& tokens,
                                              std::int64_t start_position, std::int64_t count) {
    if (tokens.empty()) throw ContractError("greedy_continuation: empty prefix");
    DecodeCache cache(weights.config, start_position);
    std::vector<float> logits;
    for (std::int32_t t : tokens) logits = forward_incremental(weights, nullptr, cache, t);
    std::vector<std::int32_t> out;
    for (std::int64_t i = 0; i < count; ++i) {
        const std::int32_t next = greedy_next_token(logits);
        out.push_back(next);
        if (i + 1 < count) logits = forward_incremental(weights, nullptr, cache, next);
    }
    return out;
}

LatencyRecord measure_latency(const ModelWeights& weights, CostMode mode, const AbsorptionConfig& cfg,
                              const std::vector<std::int32_t>& prefix, std::int64_t gen_count,
                              std::int64_t trials) {
    if (prefix.empty()) throw ContractError("measure_latency: prefix must have N >= 1 tokens");
    if (gen_count < 1) throw ContractError("measure_latency: gen_count must be >= 1");
    if (trials < 1) throw ContractError("measure_latency: trials must be >= 1");

    std::vector<double> prefill_times, total_times, per_token;
    for (std::int64_t trial = 0; trial < trials; ++trial) {
        if (mode == CostMode::standard) {
            DecodeCache cache(weights.config, 0);
            const auto t0 = Clock::now();
            std::vector<float> logits;
            for (std::int32_t t : prefix) logits = forward_incremental(weights, nullptr, cache, t);
            const double prefill = seconds_since(t0);
            for (std::int64_t i = 0; i < gen_count; ++i)
                logits = forward_incremental(weights, nullptr, cache, greedy_next_token(logits));
            const double total = seconds_since(t0);
            prefill_times.push_back(prefill);
            total_times.push_back(total);
            per_token.push_back((total - prefill) / double(gen_count));
        } else {
            AbsorberStream stream(weights.clone(), cfg, 0);
            const auto t0 = Clock::now();
            stream.consume_prompt(prefix);
            // the remaining window must be primed before generation; keep the
            // cache build inside the prefill phase
            std::int64_t generated = 0;
            const double prefill = seconds_since(t0);
            while (generated < gen_count && !stream.finished()) {
                if (stream.generate_one().has_value()) generated += 1;
            }
            const double total = seconds_since(t0);
            if (generated == 0) throw ContractError("measure_latency: absorber stream produced no tokens");
            prefill_times.push_back(prefill);
            total_times.push_back(total);
            per_token.push_back((total - prefill) / double(generated));
        }
    }

    LatencyRecord r;
    r.mode = mode;
    r.prefix_len = std::int64_t(prefix.size());
    r.gen_count = gen_count;
    r.prefill_seconds = median(prefill_times);
    r.total_seconds = median(total_times);
    r.per_token_seconds = median(per_token);
    r.cost_model = attended_positions_per_token(mode, r.prefix_len, cfg.n, cfg.m);
    return r;
}

namespace {

struct EvalRows {
    std::vector<float> logits;        // [h, vocab] rows predicting each holdout token
    std::vector<float> hidden;        // [h, (L+1)*d]
    std::vector<std::int32_t> argmax; // per row
};

// Rows of logits/hidden states at the positions predicting tokens
// first_pred_row .. first_pred_row+h-1 of a captured forward.
EvalRows eval_rows(const ForwardResult& fwd, std::int64_t first_pred_row, std::int64_t h,
                   std::int64_t vocab) {
    EvalRows out;
    for (std::int64_t i = 0; i < h; ++i) {
        const std::int64_t row = first_pred_row + i;
        const float* lp = fwd.logits.value().data() + row * vocab;
        out.logits.insert(out.logits.end(), lp, lp + vocab);
        std::vector<float> lrow(lp, lp + vocab);
        out.argmax.push_back(greedy_next_token(lrow));
        for (const auto& layer : fwd.layer_states) {
            const std::int64_t d = layer.shape().back();
            const float* hp = layer.value().data() + row * d;
            out.hidden.insert(out.hidden.end(), hp, hp + d);
        }
    }
    return out;
}

ArmMetrics compare_rows(const EvalRows& oracle, const EvalRows& arm) {
    ArmMetrics m;
    std::int64_t hits = 0;
    for (std::size_t i = 0; i < oracle.argmax.size(); ++i)
        hits += oracle.argmax[i] == arm.argmax[i] ? 1 : 0;
    m.top1_agreement = double(hits) / double(oracle.argmax.size());
    double acc = 0;
    for (std::size_t i = 0; i < oracle.logits.size(); ++i)
        acc += std::abs(double(oracle.logits[i]) - double(arm.logits[i]));
    m.mean_abs_logit_diff = acc / double(oracle.logits.size());
    acc = 0;
    for (std::size_t i = 0; i < oracle.hidden.size(); ++i)
        acc += std::abs(double(oracle.hidden[i]) - double(arm.hidden[i]));
    m.mean_hidden_l1 = acc / double(oracle.hidden.size());
    return m;
}

} // namespace

AgreementReport agreement_eval(const ModelWeights& base_weights, const ModelWeights& absorbed_weights,
                               const std::vector<std::int32_t>& x_tokens,
                               const std::vector<std::int32_t>& y_tokens, std::int64_t holdout_len,
                               PositionMode position_mode) {
    if (holdout_len < 1) throw ContractError("agreement_eval: holdout_len must be >= 1");
    if (y_tokens.empty()) throw ContractError("agreement_eval: Y must not be empty");
    const std::int64_t n = std::int64_t(x_tokens.size());
    const std::int64_t m = std::int64_t(y_tokens.size());
    const std::int64_t vocab = base_weights.config.vocab_size;

    // oracle continuation Y' = greedy rollout of f_W(XY)
    std::vector<std::int32_t> xy = x_tokens;
    xy.insert(xy.end(), y_tokens.begin(), y_tokens.end());
    AgreementReport report;
    report.holdout_len = holdout_len;
    report.oracle_continuation = greedy_continuation(base_weights, xy, 0, holdout_len);

    // oracle rows on X Y Y' (positions outside the training window)
    std::vector<std::int32_t> xyy = xy;
    xyy.insert(xyy.end(), report.oracle_continuation.begin(), report.oracle_continuation.end());
    auto oracle_fwd = forward_full(base_weights, nullptr, xyy, 0, true);
    const EvalRows oracle = eval_rows(oracle_fwd, n + m - 1, holdout_len, vocab);

    // contextless arms see Y Y' only
    std::vector<std::int32_t> yy = y_tokens;
    yy.insert(yy.end(), report.oracle_continuation.begin(), report.oracle_continuation.end());
    const std::int64_t student_start = position_mode == PositionMode::absolute_offset ? n : 0;

    auto pre_fwd = forward_full(base_weights, nullptr, yy, student_start, true);
    report.pre = compare_rows(oracle, eval_rows(pre_fwd, m - 1, holdout_len, vocab));
    auto post_fwd = forward_full(absorbed_weights, nullptr, yy, student_start, true);
    report.post = compare_rows(oracle, eval_rows(post_fwd, m - 1, holdout_len, vocab));
    return report;
}

double token_f1(const std::vector<std::int32_t>& predicted, const std::vector<std::int32_t>& reference) {
    if (predicted.empty() || reference.empty()) return 0.0;
    std::unordered_map<std::int32_t, std::int64_t> ref_counts;
    for (std::int32_t t : reference) ref_counts[t] += 1;
    std::int64_t shared = 0;
    for (std::int32_t t : predicted) {
        auto it = ref_counts.find(t);
        if (it != ref_counts.end() && it->second > 0) {
            shared += 1;
            it->second -= 1;
        }
    }
    if (shared == 0) return 0.0;
    const double precision = double(shared) / double(predicted.size());
    const double recall = double(shared) / double(reference.size());
    return 2.0 * precision * recall / (precision + recall);
}

std::vector<AblationCell> run_ablation_grid(const ModelWeights& base_weights,
                                            const std::vector<std::int32_t>& stream_tokens,
                                            const AbsorptionConfig& base_cfg,
                                            const std::vector<AblationAxis>& axes,
                                            const std::vector<std::uint64_t>& seeds,
                                            std::int64_t holdout_len) {
    if (axes.empty()) throw ContractError("run_ablation_grid: grid must have at least one axis");
    for (const auto& axis : axes)
        if (axis.values.empty())
            throw ContractError("run_ablation_grid: axis '" + axis.name + "' has no values");
    if (seeds.empty()) throw ContractError("run_ablation_grid: need at least one seed");

    // cartesian product, last axis fastest
    std::vector<std::size_t> index(axes.size(), 0);
    std::vector<AblationCell> cells;
    bool done = false;
    while (!done) {
        for (std::uint64_t seed : seeds) {
            AblationCell cell;
            cell.seed = seed;
            AbsorptionConfig cfg = base_cfg;
            for (std::size_t a = 0; a < axes.size(); ++a) {
                const auto& [label, apply] = axes[a].values[index[a]];
                cell.axes[axes[a].name] = label;
                apply(cfg);
            }
            try {
                if (std::int64_t(stream_tokens.size()) < cfg.n + cfg.m + 1)
                    throw ContractError("task stream shorter than n+m");
                std::vector<std::int32_t> x(stream_tokens.begin(), stream_tokens.begin() + cfg.n);
                std::vector<std::int32_t> y(stream_tokens.begin() + cfg.n,
                                            stream_tokens.begin() + cfg.n + cfg.m);
                auto [adapters, report] = absorb_context(base_weights, x, y, cfg, seed);
                auto merged = lora_merge(base_weights, adapters);
                auto agreement = agreement_eval(base_weights, merged, x, y, holdout_len,
                                                cfg.position_mode);
                const std::int64_t student_start =
                    cfg.position_mode == PositionMode::absolute_offset ? cfg.n : 0;
                auto student_rollout = greedy_continuation(merged, y, student_start, holdout_len);

                cell.final_sync_loss = report.final_loss.value_or(0.0);
                cell.top1_agreement = agreement.post.top1_agreement;
                cell.mean_abs_logit_diff = agreement.post.mean_abs_logit_diff;
                cell.f1 = token_f1(student_rollout, agreement.oracle_continuation);
                cell.ok = true;
            } catch (const std::exception& e) {
                cell.ok = false;
                cell.error = e.what();
            }
            cells.push_back(std::move(cell));
        }
        done = true;
        for (std::size_t a = axes.size(); a-- > 0;) {
            if (++index[a] < axes[a].values.size()) {
                done = false;
                break;
            }
            index[a] = 0;
        }
    }
    return cells;
}

namespace {

double cell_metric(const AblationCell& c, const std::string& metric) {
    if (metric == "final_sync_loss") return c.final_sync_loss;
    if (metric == "top1_agreement") return c.top1_agreement;
    if (metric == "mean_abs_logit_diff") return c.mean_abs_logit_diff;
    if (metric == "f1") return c.f1;
    throw ContractError("unknown ablation metric: " + metric);
}

std::vector<std::string> ordered_labels(const std::vector<AblationCell>& cells, const std::string& axis) {
    std::vector<std::string> labels;
    for (const auto& c : cells) {
        auto it = c.axes.find(axis);
        if (it == c.axes.end()) continue;
        if (std::find(labels.begin(), labels.end(), it->second) == labels.end())
            labels.push_back(it->second);
    }
    return labels;
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(4);
    os << v;
    return os.str();
}

} // namespace

std::string ablation_markdown(const std::vector<AblationCell>& cells, const std::string& row_axis,
                              const std::string& col_axis, const std::string& metric) {
    std::ostringstream os;
    const auto rows = ordered_labels(cells, row_axis);
    auto mean_for = [&](const std::string& rlabel, const std::string& clabel) {
        double acc = 0;
        std::int64_t k = 0;
        for (const auto& c : cells) {
            if (!c.ok) continue;
            if (c.axes.at(row_axis) != rlabel) continue;
            if (!col_axis.empty() && c.axes.at(col_axis) != clabel) continue;
            acc += cell_metric(c, metric);
            k += 1;
        }
        return k > 0 ? acc / double(k) : std::nan("");
    };

    if (!col_axis.empty()) {
        const auto cols = ordered_labels(cells, col_axis);
        os << "| " << row_axis << " \\ " << col_axis << " |";
        for (const auto& c : cols) os << " " << c << " |";
        os << "\n|---|";
        for (std::size_t i = 0; i < cols.size(); ++i) os << "---|";
        os << "\n";
        for (const auto& r : rows) {
            os << "| " << r << " |";
            for (const auto& c : cols) os << " " << fmt(mean_for(r, c)) << " |";
            os << "\n";
        }
    } else {
        os << "| " << row_axis << " | final_sync_loss | top1_agreement | mean_abs_logit_diff | f1 |\n";
        os << "|---|---|---|---|---|\n";
        for (const auto& r : rows) {
            os << "| " << r << " |";
            for (const char* m : {"final_sync_loss", "top1_agreement", "mean_abs_logit_diff", "f1"}) {
                double acc = 0;
                std::int64_t k = 0;
                for (const auto& c : cells)
                    if (c.ok && c.axes.at(row_axis) == r) {
                        acc += cell_metric(c, m);
                        k += 1;
                    }
                os << " " << fmt(k ? acc / double(k) : std::nan("")) << " |";
            }
            os << "\n";
        }
    }
    return os.str();
}

std::string ablation_csv(const std::vector<AblationCell>& cells) {
    std::ostringstream os;
    // stable column order: union of axis names in first-seen order
    std::vector<std::string> axis_names;
    for (const auto& c : cells)
        for (const auto& [k, v] : c.axes)
            if (std::find(axis_names.begin(), axis_names.end(), k) == axis_names.end())
                axis_names.push_back(k);
    for (const auto& a : axis_names) os << a << ",";
    os << "seed,ok,final_sync_loss,top1_agreement,mean_abs_logit_diff,f1,error\n";
    for (const auto& c : cells) {
        for (const auto& a : axis_names) {
            auto it = c.axes.find(a);
            os << (it == c.axes.end() ? "" : it->second) << ",";
        }
        os << c.seed << "," << (c.ok ? 1 : 0) << "," << c.final_sync_loss << "," << c.top1_agreement
           << "," << c.mean_abs_logit_diff << "," << c.f1 << "," << c.error << "\n";
    }
    return os.str();
}

} // namespace absorber
