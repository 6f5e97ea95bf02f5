#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <random>

#include "absorber/bench.hpp"
#include "absorber/tokenizer.hpp"

using namespace absorber;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.num_layers = 2;
    c.hidden_dim = 16;
    c.num_heads = 2;
    c.mlp_dim = 32;
    c.vocab_size = 258;
    c.max_positions = 1024;
    return c;
}

AbsorptionConfig quick_cfg(std::int64_t n, std::int64_t m) {
    AbsorptionConfig cfg;
    cfg.n = n;
    cfg.m = m;
    cfg.max_steps = 3;
    cfg.epsilon = 0.0f;
    cfg.lora_rank = 2;
    cfg.lora_alpha = 4.0f;
    cfg.lora_targets = {LoraTarget::wv, LoraTarget::wo};
    return cfg;
}

std::vector<std::int32_t> random_bytes(std::mt19937_64& rng, std::int64_t len) {
    std::uniform_int_distribution<std::int32_t> d(97, 122);
    std::vector<std::int32_t> v(static_cast<std::size_t>(len));
    for (auto& x : v) x = d(rng);
    return v;
}

// independent multiset-overlap oracle
double f1_oracle(std::vector<std::int32_t> a, std::vector<std::int32_t> b) {
    if (a.empty() || b.empty()) return 0.0;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::vector<std::int32_t> shared;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(shared));
    if (shared.empty()) return 0.0;
    const double p = double(shared.size()) / double(a.size());
    const double r = double(shared.size()) / double(b.size());
    return 2 * p * r / (p + r);
}

} // namespace

TEST_CASE("token_f1 basic and worked cases") {
    std::vector<std::int32_t> s{1, 2, 3};
    CHECK(token_f1(s, s) == 1.0);
    CHECK(token_f1({1, 2}, {3, 4}) == 0.0);
    CHECK(token_f1({}, {1}) == 0.0);
    CHECK(token_f1({1}, {}) == 0.0);

    // pred=[a,b,b], ref=[b,c]: shared=1, P=1/3, R=1/2, F1=0.4
    CHECK(token_f1({10, 20, 20}, {20, 30}) == doctest::Approx(0.4));
}

TEST_CASE("token_f1 is symmetric and matches the multiset oracle") {
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<std::int32_t> tok(0, 9);
    std::uniform_int_distribution<int> len(0, 12);
    for (int rep = 0; rep < 100; ++rep) {
        std::vector<std::int32_t> a(static_cast<std::size_t>(len(rng))), b(static_cast<std::size_t>(len(rng)));
        for (auto& x : a) x = tok(rng);
        for (auto& x : b) x = tok(rng);
        const double f = token_f1(a, b);
        CHECK(f == doctest::Approx(f1_oracle(a, b)).epsilon(1e-12));
        CHECK(f == doctest::Approx(token_f1(b, a)).epsilon(1e-12)); // P and R swap
        CHECK(f >= 0.0);
        CHECK(f <= 1.0);
    }
}

TEST_CASE("agreement of a model with itself on empty context is exactly 1") {
    auto c = tiny_config();
    auto w = init_model(c, 5);
    std::mt19937_64 rng(7);
    auto y = random_bytes(rng, 10);
    auto rep = agreement_eval(w, w, {}, y, 6);
    CHECK(rep.pre.top1_agreement == 1.0);
    CHECK(rep.pre.mean_abs_logit_diff == 0.0);
    CHECK(rep.pre.mean_hidden_l1 == 0.0);
    CHECK(rep.post.top1_agreement == 1.0);
    CHECK(std::int64_t(rep.oracle_continuation.size()) == 6);
}

TEST_CASE("informative context moves the contextless logits") {
    auto c = tiny_config();
    auto w = init_model(c, 11);
    auto task = make_recall_task(6, 13);
    auto x = ByteTokenizer::encode(task.context_text);
    auto y = ByteTokenizer::encode(task.probe_text.substr(0, 16));
    auto rep = agreement_eval(w, w, x, y, 8);
    CHECK(rep.pre.mean_abs_logit_diff > 0.0);
    CHECK(rep.pre.mean_hidden_l1 > 0.0);
    CHECK(rep.pre.top1_agreement >= 0.0);
    CHECK(rep.pre.top1_agreement <= 1.0);
}

TEST_CASE("greedy_continuation matches repeated full forwards") {
    auto c = tiny_config();
    auto w = init_model(c, 17);
    std::mt19937_64 rng(19);
    auto prefix = random_bytes(rng, 6);
    auto fast = greedy_continuation(w, prefix, 0, 5);
    std::vector<std::int32_t> toks = prefix, want;
    for (int i = 0; i < 5; ++i) {
        auto r = forward_full(w, nullptr, toks, 0, false);
        std::vector<float> last(r.logits.value().end() - c.vocab_size, r.logits.value().end());
        const std::int32_t next = greedy_next_token(last);
        want.push_back(next);
        toks.push_back(next);
    }
    CHECK(fast == want);
}

TEST_CASE("measure_latency records sane fields and the cost model") {
    auto c = tiny_config();
    auto w = init_model(c, 23);
    std::mt19937_64 rng(29);
    auto prefix = random_bytes(rng, 16);

    auto std_rec = measure_latency(w, CostMode::standard, quick_cfg(4, 8), prefix, 4, 1);
    CHECK(std_rec.prefix_len == 16);
    CHECK(std_rec.cost_model == 16);
    CHECK(std_rec.prefill_seconds > 0.0);
    CHECK(std_rec.total_seconds >= std_rec.prefill_seconds);
    CHECK(std_rec.per_token_seconds >= 0.0);

    auto abs_rec = measure_latency(w, CostMode::absorber, quick_cfg(4, 8), prefix, 4, 1);
    CHECK(abs_rec.cost_model == 12); // min(N, n+m)
    CHECK(abs_rec.per_token_seconds >= 0.0);

    CHECK(LatencyRecord::csv_header() == "mode,N,K_gen,T_prefill,T_gen,L_N,cost_model");
    CHECK(std_rec.csv_row().find("standard,16,4,") == 0);
}

TEST_CASE("ablation: 1x1 grid is deterministic under a fixed seed") {
    auto c = tiny_config();
    auto w = init_model(c, 31);
    auto stream = ByteTokenizer::encode(build_recall_corpus(2, 6, 37)).size() > 64
                      ? ByteTokenizer::encode(build_recall_corpus(2, 6, 37))
                      : std::vector<std::int32_t>{};
    REQUIRE(stream.size() > 64);

    std::vector<AblationAxis> axes{{"alignment",
                                    {{"hidden_states", [](AbsorptionConfig& cfg) {
                                          cfg.alignment_target = AlignmentTarget::hidden_states;
                                      }}}}};
    auto run = [&] { return run_ablation_grid(w, stream, quick_cfg(8, 12), axes, {42}, 6); };
    auto c1 = run();
    auto c2 = run();
    REQUIRE(c1.size() == 1);
    REQUIRE(c1[0].ok);
    CHECK(c1[0].final_sync_loss == c2[0].final_sync_loss);
    CHECK(c1[0].top1_agreement == c2[0].top1_agreement);
    CHECK(c1[0].mean_abs_logit_diff == c2[0].mean_abs_logit_diff);
    CHECK(c1[0].f1 == c2[0].f1);
}

TEST_CASE("ablation grids render alignment and norm tables; failures stay in-cell") {
    auto c = tiny_config();
    auto w = init_model(c, 41);
    auto stream = ByteTokenizer::encode(build_recall_corpus(2, 6, 43));
    REQUIRE(stream.size() > 64);

    std::vector<AblationAxis> alignment{{"alignment",
                                         {{"token_distribution",
                                           [](AbsorptionConfig& g) {
                                               g.alignment_target = AlignmentTarget::token_distribution;
                                           }},
                                          {"hidden_states", [](AbsorptionConfig& g) {
                                               g.alignment_target = AlignmentTarget::hidden_states;
                                           }}}}};
    auto cells = run_ablation_grid(w, stream, quick_cfg(8, 12), alignment, {1, 2}, 6);
    CHECK(cells.size() == 4); // 2 variants x 2 seeds
    for (const auto& cell : cells) CHECK(cell.ok);
    auto md = ablation_markdown(cells, "alignment", "", "top1_agreement");
    CHECK(md.find("token_distribution") != std::string::npos);
    CHECK(md.find("hidden_states") != std::string::npos);

    std::vector<AblationAxis> norms{{"loss_norm",
                                     {{"l1", [](AbsorptionConfig& g) { g.loss_norm = LossNorm::l1; }},
                                      {"l2", [](AbsorptionConfig& g) { g.loss_norm = LossNorm::l2; }}}}};
    auto norm_cells = run_ablation_grid(w, stream, quick_cfg(8, 12), norms, {1}, 6);
    CHECK(norm_cells.size() == 2);
    auto csv = ablation_csv(norm_cells);
    CHECK(csv.find("loss_norm,seed,ok") == 0);

    // a cell whose n+m exceeds the task stream fails but the grid continues
    std::vector<AblationAxis> nm{{"n",
                                  {{"8", [](AbsorptionConfig& g) { g.n = 8; }},
                                   {"4096", [](AbsorptionConfig& g) { g.n = 4096; }}}},
                                 {"m", {{"12", [](AbsorptionConfig& g) { g.m = 12; }}}}};
    auto nm_cells = run_ablation_grid(w, stream, quick_cfg(8, 12), nm, {1}, 6);
    REQUIRE(nm_cells.size() == 2);
    CHECK(nm_cells[0].ok);
    CHECK_FALSE(nm_cells[1].ok);
    CHECK(nm_cells[1].error.find("shorter") != std::string::npos);
    auto table = ablation_markdown(nm_cells, "n", "m", "top1_agreement");
    CHECK(table.find("| n \\ m |") != std::string::npos);
}
