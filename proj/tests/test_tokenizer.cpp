#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>
#include <set>

#include "absorber/pretrain.hpp"
#include "absorber/tokenizer.hpp"

using namespace absorber;

TEST_CASE("encode basics") {
    CHECK(ByteTokenizer::encode("").empty());
    CHECK(ByteTokenizer::encode("A") == std::vector<std::int32_t>{65});
    auto t = ByteTokenizer::encode("hi");
    CHECK(t == std::vector<std::int32_t>{104, 105});
}

TEST_CASE("round trip over random byte strings") {
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<int> byte(0, 255), len(0, 64);
    for (int rep = 0; rep < 200; ++rep) {
        std::string s;
        const int n = len(rng);
        for (int i = 0; i < n; ++i) s.push_back(char(byte(rng)));
        auto toks = ByteTokenizer::encode(s);
        for (auto t : toks) {
            CHECK(t >= 0);
            CHECK(t <= 255); // BOS/EOS never produced
        }
        CHECK(ByteTokenizer::decode(toks) == s);
    }
}

TEST_CASE("decode skips BOS/EOS markers") {
    std::vector<std::int32_t> toks{ByteTokenizer::kBos, 104, 105, ByteTokenizer::kEos};
    CHECK(ByteTokenizer::decode(toks) == "hi");
}

TEST_CASE("recall task: single pair, determinism, rendering") {
    auto t = make_recall_task(1, 5);
    CHECK(t.pairs.size() == 1);
    const auto& [k, v] = t.pairs[0];
    CHECK(t.context_text == k + " is " + v + ". ");
    CHECK(t.probes.size() == 1);
    CHECK(t.probes[0].prompt == k + " is");

    auto t2 = make_recall_task(1, 5);
    CHECK(t2.context_text == t.context_text);
    CHECK(t2.probe_text == t.probe_text);
    auto t3 = make_recall_task(1, 6);
    CHECK(t3.context_text != t.context_text);
}

TEST_CASE("recall task keys pairwise distinct: 50 pairs over 100 seeds") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        auto t = make_recall_task(50, seed);
        std::set<std::string> keys;
        for (const auto& [k, v] : t.pairs) keys.insert(k);
        CHECK(keys.size() == 50);
    }
}

TEST_CASE("probe answers are determined by the context") {
    auto t = make_recall_task(12, 77);
    std::set<std::string> statements;
    for (const auto& [k, v] : t.pairs) statements.insert(k + " is " + v + ". ");
    for (const auto& p : t.probes) {
        // prompt+answer must replay exactly one context statement
        CHECK(statements.count(p.prompt + p.answer.substr(0, p.answer.size()) ) +
              statements.count(p.prompt + p.answer) > 0);
    }
    CHECK(t.to_json().find("\"pairs\"") != std::string::npos);
    CHECK(t.to_json().find("\"context\"") != std::string::npos);
    CHECK(t.to_json().find("\"probes\"") != std::string::npos);
}

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.num_layers = 2;
    c.hidden_dim = 32;
    c.num_heads = 2;
    c.mlp_dim = 64;
    c.vocab_size = 258;
    c.max_positions = 256;
    return c;
}

PretrainOptions small_options() {
    PretrainOptions o;
    o.batch = 4;
    o.window = 48;
    o.learning_rate = 2e-3f;
    return o;
}

} // namespace

TEST_CASE("pretrain_toy: zero steps returns init weights unchanged") {
    auto c = small_config();
    auto corpus = build_recall_corpus(40, 8, 3);
    auto w = pretrain_toy(c, corpus, 0, 9, small_options());
    CHECK(w.bitwise_equal(init_model(c, 9)));
}

TEST_CASE("pretrain_toy rejects a too-small corpus") {
    auto c = small_config();
    std::string tiny(100, 'x');
    CHECK_THROWS_AS(pretrain_toy(c, tiny, 10, 1, small_options()), DataError);
}

TEST_CASE("pretrain_toy is deterministic and reduces held-out loss") {
    auto c = small_config();
    auto opts = small_options();
    auto corpus = build_recall_corpus(60, 8, 11);
    REQUIRE(std::int64_t(corpus.size()) >= 64 * opts.window);

    auto w0 = pretrain_toy(c, corpus, 0, 21, opts);
    auto w1 = pretrain_toy(c, corpus, 60, 21, opts);
    auto w2 = pretrain_toy(c, corpus, 60, 21, opts);
    CHECK(w1.bitwise_equal(w2));
    CHECK_FALSE(w1.bitwise_equal(w0));

    const double init_loss = held_out_loss(w0, corpus, opts);
    const double trained_loss = held_out_loss(w1, corpus, opts);
    CHECK(trained_loss < init_loss);
}
