#include "absorber/tokenizer.hpp"

#include <random>
#include <set>

#include <json.hpp>

#include "absorber/errors.hpp"

namespace absorber {

std::vector<std::int32_t> ByteTokenizer::encode(const std::string& text) {
    std::vector<std::int32_t> out;
    out.reserve(text.size());
    for (unsigned char c : text) out.push_back(std::int32_t(c));
    return out;
}

std::string ByteTokenizer::decode(const std::vector<std::int32_t>& tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (std::int32_t t : tokens) {
        if (t == kBos || t == kEos) continue;
        if (t < 0 || t > 255) throw ContractError("decode: token id " + std::to_string(t) + " out of range");
        out.push_back(char(static_cast<unsigned char>(t)));
    }
    return out;
}

namespace {

std::string random_word(std::mt19937_64& rng, std::int64_t len) {
    std::uniform_int_distribution<int> letter(0, 25);
    std::string w;
    for (std::int64_t i = 0; i < len; ++i) w.push_back(char('a' + letter(rng)));
    return w;
}

} // namespace

RecallTask make_recall_task(std::int64_t num_pairs, std::uint64_t seed) {
    if (num_pairs < 1) throw ContractError("make_recall_task: num_pairs must be >= 1");
    std::mt19937_64 rng(seed);
    RecallTask task;
    task.seed = seed;

    std::set<std::string> used;
    while (std::int64_t(task.pairs.size()) < num_pairs) {
        std::string key = random_word(rng, 2);
        if (!used.insert(key).second) continue; // keys must be distinct
        task.pairs.emplace_back(key, random_word(rng, 2));
    }

    for (const auto& [k, v] : task.pairs) task.context_text += k + " is " + v + ". ";

    std::vector<std::size_t> order(task.pairs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i : order) {
        RecallTask::Probe p;
        p.prompt = task.pairs[i].first + " is";
        p.answer = " " + task.pairs[i].second + ". ";
        task.probe_text += p.prompt + p.answer;
        task.probes.push_back(std::move(p));
    }
    return task;
}

std::string RecallTask::to_json() const {
    nlohmann::ordered_json j;
    j["pairs"] = nlohmann::ordered_json::array();
    for (const auto& [k, v] : pairs) j["pairs"].push_back({{"key", k}, {"value", v}});
    j["context"] = context_text;
    j["probes"] = nlohmann::ordered_json::array();
    for (const auto& p : probes) j["probes"].push_back({{"prompt", p.prompt}, {"answer", p.answer}});
    return j.dump(2);
}

std::string build_recall_corpus(std::int64_t num_tasks, std::int64_t max_pairs_per_task,
                                std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    // varied task sizes keep whole context+probe spans inside one training
    // window often enough for in-context retrieval to be learnable
    std::uniform_int_distribution<std::int64_t> pairs(3, std::max<std::int64_t>(3, max_pairs_per_task));
    std::string corpus;
    for (std::int64_t i = 0; i < num_tasks; ++i) {
        RecallTask t = make_recall_task(pairs(rng), rng());
        corpus += t.context_text + t.probe_text;
    }
    return corpus;
}

} // namespace absorber
