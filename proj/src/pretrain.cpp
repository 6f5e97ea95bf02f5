#include "absorber/pretrain.hpp"

#include <fstream>
#include <random>
#include <sstream>

#include "absorber/adamw.hpp"

namespace absorber {

namespace {

// (inputs, shifted targets) for one window starting at `start`.
void window_tokens(const std::string& corpus, std::int64_t start, std::int64_t window,
                   std::vector<std::int32_t>& inputs, std::vector<std::int32_t>& targets) {
    for (std::int64_t i = 0; i < window; ++i) {
        inputs.push_back(std::int32_t(static_cast<unsigned char>(corpus[std::size_t(start + i)])));
        targets.push_back(std::int32_t(static_cast<unsigned char>(corpus[std::size_t(start + i + 1)])));
    }
}

std::int64_t train_region_end(const std::string& corpus, const PretrainOptions& o) {
    return std::int64_t(double(corpus.size()) * (1.0 - o.holdout_fraction));
}

} // namespace

ModelWeights pretrain_toy(const ModelConfig& config, const std::string& corpus, std::int64_t steps,
                          std::uint64_t seed, const PretrainOptions& options) {
    config.validate();
    if (steps < 0) throw ContractError("pretrain_toy: steps must be >= 0");
    if (std::int64_t(corpus.size()) < 64 * options.window)
        throw DataError("pretrain_toy: corpus has " + std::to_string(corpus.size()) +
                        " bytes, need at least " + std::to_string(64 * options.window));

    ModelWeights weights = init_model(config, seed);
    if (steps == 0) return weights;

    weights.set_requires_grad(true);
    std::vector<Tensor<float>*> params;
    for (auto& [name, t] : weights.named_tensors()) params.push_back(t);
    AdamWConfig oc;
    oc.eta = options.learning_rate;
    oc.beta1 = options.beta1;
    oc.beta2 = options.beta2;
    oc.weight_decay = options.weight_decay;
    AdamW opt(params, oc);

    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
    const std::int64_t window = options.window;
    const std::int64_t last_start = train_region_end(corpus, options) - window - 1;
    if (last_start < 0) throw DataError("pretrain_toy: corpus too small for the training window");
    std::uniform_int_distribution<std::int64_t> pick(0, last_start);

    for (std::int64_t step = 0; step < steps; ++step) {
        if (options.warmup_steps > 0) {
            const float ramp = std::min(1.0f, float(step + 1) / float(options.warmup_steps));
            opt.set_learning_rate(options.learning_rate * ramp);
        }
        std::vector<std::int32_t> inputs, targets;
        inputs.reserve(std::size_t(options.batch * window));
        targets.reserve(std::size_t(options.batch * window));
        for (std::int64_t b = 0; b < options.batch; ++b)
            window_tokens(corpus, pick(rng), window, inputs, targets);

        auto logits = forward_training_batch(weights, inputs, options.batch, window);
        auto loss = cross_entropy(logits, targets);
        opt.zero_grad();
        backward(loss);
        opt.step();
    }
    weights.set_requires_grad(false);
    return weights;
}

double held_out_loss(const ModelWeights& weights, const std::string& corpus,
                     const PretrainOptions& options) {
    const std::int64_t window = options.window;
    const std::int64_t begin = train_region_end(corpus, options);
    const std::int64_t end = std::int64_t(corpus.size());
    if (end - begin < window + 1)
        throw DataError("held_out_loss: holdout region smaller than one window");

    double total = 0.0;
    std::int64_t count = 0;
    for (std::int64_t start = begin; start + window + 1 <= end && count < 16; start += window, ++count) {
        std::vector<std::int32_t> inputs, targets;
        window_tokens(corpus, start, window, inputs, targets);
        auto logits = forward_full(weights, nullptr, inputs, 0, false);
        total += double(cross_entropy(logits.logits, targets).item());
    }
    return total / double(count);
}

std::string load_corpus_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open corpus file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw IoError("failed reading corpus file: " + path);
    return ss.str();
}

} // namespace absorber
