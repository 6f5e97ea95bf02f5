#pragma once

// Toy next-token pretraining: enough to give the byte model in-context
// retrieval behavior on the recall task, nothing more.

#include <cstdint>
#include <string>

#include "absorber/model.hpp"

namespace absorber {

struct PretrainOptions {
    std::int64_t batch = 8;
    std::int64_t window = 96; // tokens per training sample
    float learning_rate = 1e-3f;
    std::int64_t warmup_steps = 100; // linear ramp to learning_rate
    float beta1 = 0.9f;
    float beta2 = 0.95f;
    float weight_decay = 0.0f;
    double holdout_fraction = 0.1; // corpus tail reserved for evaluation
};

// Next-token cross-entropy training with AdamW over windows sampled from the
// head of the corpus. steps == 0 returns the seed-initialized weights
// untouched. Same (config, corpus, steps, seed, options) always produces the
// same weights.
ModelWeights pretrain_toy(const ModelConfig& config, const std::string& corpus, std::int64_t steps,
                          std::uint64_t seed, const PretrainOptions& options = {});

// Mean next-token cross-entropy over deterministic windows from the corpus
// holdout tail.
double held_out_loss(const ModelWeights& weights, const std::string& corpus,
                     const PretrainOptions& options = {});

std::string load_corpus_file(const std::string& path);

} // namespace absorber
