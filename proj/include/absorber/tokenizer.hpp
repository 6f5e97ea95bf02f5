#pragma once

// Byte-level tokenizer and the synthetic key/value recall task used to make
// absorbed context measurably influence future predictions.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace absorber {

// Fixed vocabulary: 256 byte values plus BOS/EOS markers. encode never
// produces the markers; decode drops them.
struct ByteTokenizer {
    static constexpr std::int32_t kBos = 256;
    static constexpr std::int32_t kEos = 257;
    static constexpr std::int64_t kVocabSize = 258;

    static std::vector<std::int32_t> encode(const std::string& text);
    static std::string decode(const std::vector<std::int32_t>& tokens);
};

// Distinct random keys mapped to random values; the context states every
// pair once and the probes replay the pairs in a shuffled order, so probe
// answers are determined by the context alone.
struct RecallTask {
    struct Probe {
        std::string prompt; // "K is"
        std::string answer; // " V. "
    };

    std::vector<std::pair<std::string, std::string>> pairs;
    std::string context_text;
    std::vector<Probe> probes;
    std::string probe_text; // concatenated prompt+answer in probe order
    std::uint64_t seed = 0;

    std::string to_json() const; // keys: pairs, context, probes
};

RecallTask make_recall_task(std::int64_t num_pairs, std::uint64_t seed);

// Concatenated context+probe renderings over many independent tasks;
// pretraining on this teaches in-context key/value retrieval.
std::string build_recall_corpus(std::int64_t num_tasks, std::int64_t max_pairs_per_task, std::uint64_t seed);

} // namespace absorber
