#include "absorber/streaming.hpp"

#include <sstream>

#include <json.hpp>

#include "absorber/tokenizer.hpp"

namespace absorber {

const char* stream_event_kind_name(StreamEventKind k) {
    switch (k) {
        case StreamEventKind::generated_token: return "generated_token";
        case StreamEventKind::absorption_round: return "absorption_round";
        case StreamEventKind::eos: return "eos";
        case StreamEventKind::budget_exhausted: return "budget_exhausted";
    }
    return "?";
}

std::string StreamEvent::to_line() const {
    nlohmann::ordered_json j;
    j["kind"] = stream_event_kind_name(kind);
    switch (kind) {
        case StreamEventKind::generated_token: j["token"] = token; break;
        case StreamEventKind::absorption_round:
            j["round"] = round;
            j["loss"] = round_loss;
            j["steps"] = round_steps;
            break;
        case StreamEventKind::eos:
        case StreamEventKind::budget_exhausted:
            if (!detail.empty()) j["detail"] = detail;
            break;
    }
    return j.dump();
}

AbsorberStream::AbsorberStream(ModelWeights weights, const AbsorptionConfig& cfg, std::uint64_t seed)
    : weights_(std::move(weights)), cfg_(cfg), seed_(seed) {
    cfg_.validate();
    weights_.config.validate();
    if (cfg_.n < 1)
        throw ConfigError("absorber stream: n must be >= 1 (nothing to slide otherwise)");
    weights_.set_requires_grad(false);
}

void AbsorberStream::record_probe(const AttentionStats& stats) {
    max_attention_width_ = std::max(max_attention_width_, stats.max_width);
    if (stats.max_width > cfg_.n + cfg_.m)
        throw Error("absorber stream: attention width " + std::to_string(stats.max_width) +
                    " exceeded the n+m bound " + std::to_string(cfg_.n + cfg_.m));
}

void AbsorberStream::terminate(StreamEventKind kind, const std::string& detail) {
    StreamEvent e;
    e.kind = kind;
    e.detail = detail;
    events_.push_back(std::move(e));
    terminal_ = kind;
}

void AbsorberStream::run_round() {
    const std::int64_t n = cfg_.n, m = cfg_.m;
    std::vector<std::int32_t> x(window_.begin(), window_.begin() + n);
    std::vector<std::int32_t> y(window_.begin() + n, window_.begin() + n + m);

    AbsorptionReport report;
    {
        AttentionProbe probe;
        auto [adapters, r] = absorb_context(weights_, x, y, cfg_, seed_ + std::uint64_t(rounds_),
                                            position_offset_);
        lora_merge_inplace(weights_, adapters); // W <- W*
        report = std::move(r);
        record_probe(probe.stats());
    }

    window_.erase(window_.begin(), window_.begin() + n);
    position_offset_ += n;
    rounds_ += 1;
    cache_.reset(); // merged weights invalidate cached keys/values

    StreamEvent e;
    e.kind = StreamEventKind::absorption_round;
    e.round = rounds_;
    e.round_loss = report.final_loss.value_or(0.0);
    e.round_steps = report.steps;
    events_.push_back(std::move(e));
}

void AbsorberStream::consume_prompt(const std::vector<std::int32_t>& prompt) {
    if (finished()) return;
    window_.insert(window_.end(), prompt.begin(), prompt.end());
    prompt_len_ += std::int64_t(prompt.size());
    cache_.reset();
    // long prompts drain through absorption rounds before any generation
    while (std::int64_t(window_.size()) >= cfg_.n + cfg_.m && !finished()) run_round();
}

bool AbsorberStream::ensure_cache() {
    if (cache_.has_value()) return true;
    if (position_offset_ + std::int64_t(window_.size()) > weights_.config.max_positions) return false;
    if (window_.empty())
        throw ContractError("absorber stream: cannot generate from an empty window (no prompt)");
    DecodeCache cache(weights_.config, position_offset_);
    AttentionProbe probe;
    for (std::int32_t t : window_) last_logits_ = forward_incremental(weights_, nullptr, cache, t);
    record_probe(probe.stats());
    cache_ = std::move(cache);
    return true;
}

std::optional<std::int32_t> AbsorberStream::generate_one() {
    if (finished()) return std::nullopt;
    if (!ensure_cache()) {
        terminate(StreamEventKind::budget_exhausted,
                  "position offset reached max_positions " + std::to_string(weights_.config.max_positions));
        return std::nullopt;
    }

    const std::int32_t next = greedy_next_token(last_logits_);
    if (next == ByteTokenizer::kEos) {
        terminate(StreamEventKind::eos, "");
        return std::nullopt;
    }

    window_.push_back(next);
    emitted_.push_back(next);
    StreamEvent e;
    e.kind = StreamEventKind::generated_token;
    e.token = next;
    events_.push_back(std::move(e));

    if (std::int64_t(window_.size()) == cfg_.n + cfg_.m) {
        run_round();
    } else {
        if (cache_->next_position() >= weights_.config.max_positions) {
            terminate(StreamEventKind::budget_exhausted,
                      "position offset reached max_positions " +
                          std::to_string(weights_.config.max_positions));
            return next;
        }
        AttentionProbe probe;
        last_logits_ = forward_incremental(weights_, nullptr, *cache_, next);
        record_probe(probe.stats());
    }
    return next;
}

void AbsorberStream::finish_budget(const std::string& reason) {
    if (!finished()) terminate(StreamEventKind::budget_exhausted, reason);
}

StreamResult AbsorberStream::take_result() {
    StreamResult r;
    r.emitted = std::move(emitted_);
    r.events = std::move(events_);
    r.rounds = rounds_;
    r.total_consumed = prompt_len_ + std::int64_t(r.emitted.size());
    r.max_attention_width = max_attention_width_;
    r.weights = std::move(weights_);
    return r;
}

StreamResult absorber_generate(const ModelWeights& weights, const std::vector<std::int32_t>& input_tokens,
                               const AbsorptionConfig& cfg, std::int64_t max_new_tokens,
                               std::uint64_t seed) {
    if (max_new_tokens < 0) throw ContractError("absorber_generate: max_new_tokens must be >= 0");
    AbsorberStream stream(weights.clone(), cfg, seed);
    stream.consume_prompt(input_tokens);
    std::int64_t generated = 0;
    while (generated < max_new_tokens && !stream.finished()) {
        if (stream.generate_one().has_value()) generated += 1;
    }
    stream.finish_budget("max_new_tokens " + std::to_string(max_new_tokens) + " reached");
    return stream.take_result();
}

const char* cost_mode_name(CostMode m) { return m == CostMode::standard ? "standard" : "absorber"; }

std::optional<CostMode> cost_mode_from_name(const std::string& name) {
    if (name == "standard") return CostMode::standard;
    if (name == "absorber") return CostMode::absorber;
    return std::nullopt;
}

std::int64_t attended_positions_per_token(CostMode mode, std::int64_t N, std::int64_t n, std::int64_t m) {
    if (N < 1) throw ContractError("attended_positions_per_token: N must be >= 1");
    if (mode == CostMode::standard) return N;
    return std::min(N, n + m);
}

} // namespace absorber
