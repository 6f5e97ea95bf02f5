#pragma once

// Continual deduction with a sliding absorption window: generate until the
// window holds n+m tokens, absorb the oldest n into the weights by
// synchronizing on the next m, merge, slide, repeat.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "absorber/absorption.hpp"
#include "absorber/model.hpp"

namespace absorber {

enum class StreamEventKind { generated_token, absorption_round, eos, budget_exhausted };

const char* stream_event_kind_name(StreamEventKind k);

struct StreamEvent {
    StreamEventKind kind;
    std::int32_t token = -1;      // generated_token
    std::int64_t round = -1;      // absorption_round
    double round_loss = 0.0;      // final loss of that round
    std::int64_t round_steps = 0; // optimizer steps of that round
    std::string detail;           // terminal events carry the reason

    std::string to_line() const; // one-line structured text
};

struct StreamResult {
    std::vector<std::int32_t> emitted; // S: model-generated tokens only
    std::vector<StreamEvent> events;
    ModelWeights weights; // after all merges
    std::int64_t rounds = 0;
    std::int64_t total_consumed = 0;          // |I| + |S|
    std::int64_t max_attention_width = 0;     // instrumented over every forward
};

// Incremental driver behind absorber_generate; the latency benchmark uses it
// directly to time the prompt and generation phases separately.
class AbsorberStream {
public:
    // Takes ownership of the weights (rounds merge into them).
    AbsorberStream(ModelWeights weights, const AbsorptionConfig& cfg, std::uint64_t seed);

    // Appends the prompt to the window and runs any absorption rounds it
    // already implies. Call before generation.
    void consume_prompt(const std::vector<std::int32_t>& prompt);

    // Greedily generates one token; runs an absorption round when the window
    // fills. Returns nothing once the stream has terminated.
    std::optional<std::int32_t> generate_one();

    bool finished() const { return terminal_.has_value(); }
    // Marks the generation budget as exhausted (terminal event).
    void finish_budget(const std::string& reason);

    const std::vector<std::int32_t>& emitted() const { return emitted_; }
    const std::vector<std::int32_t>& window() const { return window_; }
    std::int64_t position_offset() const { return position_offset_; }
    std::int64_t rounds() const { return rounds_; }
    const ModelWeights& weights() const { return weights_; }

    StreamResult take_result();

private:
    void run_round();
    bool ensure_cache(); // false when capacity is exhausted
    void record_probe(const AttentionStats& stats);
    void terminate(StreamEventKind kind, const std::string& detail);

    ModelWeights weights_;
    AbsorptionConfig cfg_;
    std::uint64_t seed_;
    std::vector<std::int32_t> window_;
    std::vector<std::int32_t> emitted_;
    std::int64_t position_offset_ = 0;
    std::int64_t rounds_ = 0;
    std::int64_t prompt_len_ = 0;
    std::optional<DecodeCache> cache_;
    std::vector<float> last_logits_;
    std::vector<StreamEvent> events_;
    std::optional<StreamEventKind> terminal_;
    std::int64_t max_attention_width_ = 0;
};

// Algorithm driver: feeds the prompt, generates up to max_new_tokens, and
// guarantees exactly one terminal event (eos or budget_exhausted).
StreamResult absorber_generate(const ModelWeights& weights, const std::vector<std::int32_t>& input_tokens,
                               const AbsorptionConfig& cfg, std::int64_t max_new_tokens,
                               std::uint64_t seed);

enum class CostMode { standard, absorber };

const char* cost_mode_name(CostMode m);
std::optional<CostMode> cost_mode_from_name(const std::string& name);

// Deterministic cost model: positions one decode step attends over after N
// consumed tokens. Standard attends the whole history; the absorber never
// exceeds its window.
std::int64_t attended_positions_per_token(CostMode mode, std::int64_t N, std::int64_t n, std::int64_t m);

} // namespace absorber
