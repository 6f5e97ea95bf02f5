#include "absorber/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "absorber/bench.hpp"
#include "absorber/checkpoint.hpp"
#include "absorber/gradcheck.hpp"
#include "absorber/pretrain.hpp"
#include "absorber/run_config.hpp"
#include "absorber/streaming.hpp"
#include "absorber/tokenizer.hpp"

namespace absorber {

namespace {

struct Common {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out_dir;
    std::string model_path;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config_path, "run config JSON");
    sub->add_option("--seed", c.seed, "seed override");
    sub->add_option("--out", c.out_dir, "output directory override");
    sub->add_option("--model", c.model_path, "checkpoint path");
}

RunConfig resolve_config(const Common& c) {
    RunConfig cfg = c.config_path.empty() ? RunConfig{} : RunConfig::from_file(c.config_path);
    if (c.seed) cfg.seed = *c.seed;
    if (c.out_dir) cfg.out_dir = *c.out_dir;
    cfg.validate();
    return cfg;
}

ModelWeights load_or_init(const Common& c, const RunConfig& cfg) {
    if (!c.model_path.empty()) {
        auto [weights, prov] = load_checkpoint(c.model_path);
        return std::move(weights);
    }
    return init_model(cfg.model, cfg.seed);
}

void write_file(const std::string& dir, const std::string& name, const std::string& content) {
    std::filesystem::create_directories(dir);
    const std::string path = dir + "/" + name;
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out << content;
    if (!out) throw IoError("failed writing " + path);
    std::cout << "wrote " << path << "\n";
}

// context+probes long enough for the window plus holdout
std::vector<std::int32_t> task_stream(std::int64_t min_bytes, std::uint64_t seed) {
    const std::int64_t pairs = std::max<std::int64_t>(2, min_bytes / 20 + 2);
    auto task = make_recall_task(pairs, seed);
    auto stream = ByteTokenizer::encode(task.context_text + task.probe_text);
    if (std::int64_t(stream.size()) < min_bytes)
        throw ContractError("task stream shorter than requested");
    return stream;
}

std::vector<std::int64_t> parse_int_list(const std::string& csv, const char* what) {
    std::vector<std::int64_t> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            out.push_back(std::stoll(item));
        } catch (const std::exception&) {
            throw ConfigError(std::string("invalid ") + what + " list entry: '" + item + "'");
        }
    }
    if (out.empty()) throw ConfigError(std::string(what) + " list is empty");
    return out;
}

int cmd_train_toy(const Common& c, std::int64_t steps_flag, const std::string& corpus_flag) {
    RunConfig cfg = resolve_config(c);
    const std::int64_t steps = steps_flag >= 0 ? steps_flag : cfg.pretrain_steps;

    std::string corpus;
    const std::string corpus_path = !corpus_flag.empty() ? corpus_flag : cfg.corpus_path;
    if (!corpus_path.empty()) corpus = load_corpus_file(corpus_path);
    // recall-task text keeps the context metrics meaningful even for a
    // user-supplied corpus
    corpus += build_recall_corpus(600, 8, cfg.seed + 1);

    auto init = init_model(cfg.model, cfg.seed);
    const double before = held_out_loss(init, corpus, cfg.pretrain);
    auto weights = pretrain_toy(cfg.model, corpus, steps, cfg.seed, cfg.pretrain);
    const double after = held_out_loss(weights, corpus, cfg.pretrain);
    std::cout << "pretrain steps=" << steps << " held_out_loss_init=" << before
              << " held_out_loss_trained=" << after << "\n";

    std::filesystem::create_directories(cfg.out_dir);
    const std::string path = cfg.out_dir + "/model.ckpt";
    save_checkpoint(weights, {cfg.seed, steps}, path);
    std::cout << "wrote " << path << "\n";
    return 0;
}

int cmd_absorb(const Common& c, std::uint64_t task_seed_flag, bool have_task_seed) {
    RunConfig cfg = resolve_config(c);
    auto weights = load_or_init(c, cfg);
    const auto& a = cfg.absorption;

    const std::uint64_t task_seed = have_task_seed ? task_seed_flag : cfg.seed + 1;
    auto stream = task_stream(a.n + a.m, task_seed);
    std::vector<std::int32_t> x(stream.begin(), stream.begin() + a.n);
    std::vector<std::int32_t> y(stream.begin() + a.n, stream.begin() + a.n + a.m);

    auto [adapters, report] = absorb_context(weights, x, y, a, cfg.seed);
    std::cout << "absorb n=" << a.n << " m=" << a.m << " steps=" << report.steps << " terminated_by="
              << (report.terminated_by == TerminationReason::threshold ? "threshold" : "max_steps")
              << " initial_loss="
              << (report.loss_trajectory.empty()
                      ? (report.final_loss ? *report.final_loss : 0.0)
                      : report.loss_trajectory.front())
              << " final_loss=" << (report.final_loss ? *report.final_loss : 0.0)
              << " wall_time_s=" << report.wall_time_seconds << "\n";
    write_file(cfg.out_dir, "absorb_trajectory.csv", report.to_csv());
    return 0;
}

int cmd_stream(const Common& c, const std::string& prompt_path, const std::string& prompt_text,
               std::int64_t max_new) {
    RunConfig cfg = resolve_config(c);
    auto weights = load_or_init(c, cfg);

    std::string prompt = prompt_text;
    if (!prompt_path.empty()) prompt = load_corpus_file(prompt_path);
    if (prompt.empty()) throw ConfigError("stream: provide --prompt <file> or --prompt-text <text>");

    auto result = absorber_generate(weights, ByteTokenizer::encode(prompt), cfg.absorption, max_new,
                                    cfg.seed);
    std::cout << ByteTokenizer::decode(result.emitted) << "\n";
    std::cout << "generated=" << result.emitted.size() << " rounds=" << result.rounds
              << " max_attention_width=" << result.max_attention_width << " (bound "
              << cfg.absorption.n + cfg.absorption.m << ")\n";

    std::string lines;
    for (const auto& e : result.events) lines += e.to_line() + "\n";
    write_file(cfg.out_dir, "stream_events.jsonl", lines);
    return 0;
}

int cmd_bench_latency(const Common& c, const std::string& modes_csv, const std::string& n_csv,
                      std::int64_t k_gen, std::int64_t trials) {
    RunConfig cfg = resolve_config(c);
    auto weights = load_or_init(c, cfg);

    std::vector<CostMode> modes;
    {
        std::stringstream ss(modes_csv);
        std::string item;
        while (std::getline(ss, item, ',')) {
            auto m = cost_mode_from_name(item);
            if (!m) throw ConfigError("unknown mode '" + item + "' (standard|absorber)");
            modes.push_back(*m);
        }
    }
    auto lengths = parse_int_list(n_csv, "N");

    std::int64_t max_n = 0;
    for (auto n : lengths) max_n = std::max(max_n, n);
    auto prefix_full = task_stream(max_n, cfg.seed + 2);

    std::ostringstream csv;
    csv << LatencyRecord::csv_header() << "\n";
    for (CostMode mode : modes) {
        for (auto n : lengths) {
            std::vector<std::int32_t> prefix(prefix_full.begin(), prefix_full.begin() + n);
            auto rec = measure_latency(weights, mode, cfg.absorption, prefix, k_gen, trials);
            csv << rec.csv_row() << "\n";
            std::cout << rec.csv_row() << "\n";
        }
    }
    write_file(cfg.out_dir, "latency.csv", csv.str());
    return 0;
}

int cmd_ablate(const Common& c, const std::string& preset, std::int64_t num_seeds,
               std::int64_t holdout, const std::string& n_csv, const std::string& m_csv) {
    RunConfig cfg = resolve_config(c);
    auto weights = load_or_init(c, cfg);

    std::vector<AblationAxis> axes;
    std::string row_axis, col_axis;
    std::int64_t max_n = cfg.absorption.n, max_m = cfg.absorption.m;
    if (preset == "alignment") {
        row_axis = "alignment";
        axes.push_back(
            {"alignment",
             {{"token_distribution",
               [](AbsorptionConfig& g) { g.alignment_target = AlignmentTarget::token_distribution; }},
              {"hidden_states",
               [](AbsorptionConfig& g) { g.alignment_target = AlignmentTarget::hidden_states; }}}});
    } else if (preset == "loss_norm") {
        row_axis = "loss_norm";
        axes.push_back({"loss_norm",
                        {{"l1", [](AbsorptionConfig& g) { g.loss_norm = LossNorm::l1; }},
                         {"l2", [](AbsorptionConfig& g) { g.loss_norm = LossNorm::l2; }}}});
    } else if (preset == "window") {
        row_axis = "n";
        col_axis = "m";
        AblationAxis n_axis{"n", {}};
        for (auto nv : parse_int_list(n_csv, "n-values")) {
            max_n = std::max(max_n, nv);
            n_axis.values.emplace_back(std::to_string(nv),
                                       [nv](AbsorptionConfig& g) { g.n = nv; });
        }
        AblationAxis m_axis{"m", {}};
        for (auto mv : parse_int_list(m_csv, "m-values")) {
            max_m = std::max(max_m, mv);
            m_axis.values.emplace_back(std::to_string(mv),
                                       [mv](AbsorptionConfig& g) { g.m = mv; });
        }
        axes.push_back(std::move(n_axis));
        axes.push_back(std::move(m_axis));
    } else {
        throw ConfigError("unknown ablation preset '" + preset + "' (alignment|loss_norm|window)");
    }

    std::vector<std::uint64_t> seeds;
    for (std::int64_t s = 0; s < num_seeds; ++s) seeds.push_back(cfg.seed + std::uint64_t(s));
    auto stream = task_stream(max_n + max_m + holdout, cfg.seed + 3);

    auto cells = run_ablation_grid(weights, stream, cfg.absorption, axes, seeds, holdout);
    const std::string metric = "top1_agreement";
    auto table = ablation_markdown(cells, row_axis, col_axis, metric);
    std::cout << table;
    write_file(cfg.out_dir, "ablation_" + preset + ".md", table);
    write_file(cfg.out_dir, "ablation_" + preset + ".csv", ablation_csv(cells));
    return 0;
}

int cmd_gradcheck(const Common& c, int cases) {
    RunConfig cfg = resolve_config(c);
    auto results = run_gradient_suite(cfg.seed == 0 ? 1234 : cfg.seed, cases);
    for (const auto& r : results)
        std::cout << (r.pass ? "[PASS] " : "[FAIL] ") << r.op << " cases=" << r.cases
                  << " max_rel_err=" << r.max_rel_err << "\n";
    if (!all_passed(results)) {
        std::cerr << "error: gradient checks failed\n";
        return 1;
    }
    return 0;
}

int cmd_inspect(const Common& c) {
    if (c.model_path.empty()) throw ConfigError("inspect: --model <path> is required");
    std::cout << inspect_checkpoint(c.model_path) << "\n";
    return 0;
}

} // namespace

int cli_dispatch(int argc, const char* const* argv) {
    CLI::App app{"context absorption experiments"};
    app.require_subcommand(1);

    Common common[7];

    auto* train = app.add_subcommand("train-toy", "pretrain a toy model and write a checkpoint");
    add_common(train, common[0]);
    std::int64_t train_steps = -1;
    std::string train_corpus;
    train->add_option("--steps", train_steps, "training steps (overrides config)");
    train->add_option("--corpus", train_corpus, "corpus file (mixed with generated recall text)");

    auto* absorb = app.add_subcommand("absorb", "run one context-absorption fit and print the report");
    add_common(absorb, common[1]);
    std::uint64_t task_seed = 0;
    auto* task_seed_opt = absorb->add_option("--task-seed", task_seed, "recall-task seed");

    auto* stream = app.add_subcommand("stream", "sliding-window deduction over a prompt");
    add_common(stream, common[2]);
    std::string prompt_path, prompt_text;
    std::int64_t max_new = 128;
    stream->add_option("--prompt", prompt_path, "prompt file");
    stream->add_option("--prompt-text", prompt_text, "inline prompt text");
    stream->add_option("--max-new", max_new, "generation budget");

    auto* bench = app.add_subcommand("bench-latency", "amortized per-token latency sweep");
    add_common(bench, common[3]);
    std::string modes_csv = "standard,absorber", n_csv = "256,512,1024,2048";
    std::int64_t k_gen = 128, trials = 5;
    bench->add_option("--modes", modes_csv, "comma list: standard,absorber");
    bench->add_option("--N", n_csv, "comma list of prefix lengths");
    bench->add_option("--k-gen", k_gen, "tokens generated per measurement");
    bench->add_option("--trials", trials, "trials per cell (median)");

    auto* ablate = app.add_subcommand("ablate", "ablation grid runner");
    add_common(ablate, common[4]);
    std::string preset = "alignment", ablate_n = "16,32", ablate_m = "32,64";
    std::int64_t num_seeds = 5, holdout = 32;
    ablate->add_option("--preset", preset, "alignment|loss_norm|window");
    ablate->add_option("--seeds", num_seeds, "number of seeds per cell");
    ablate->add_option("--holdout", holdout, "held-out continuation length");
    ablate->add_option("--n-values", ablate_n, "window preset: comma list of n");
    ablate->add_option("--m-values", ablate_m, "window preset: comma list of m");

    auto* grad = app.add_subcommand("gradcheck", "finite-difference sweep over every autograd op");
    add_common(grad, common[5]);
    int cases = 100;
    grad->add_option("--cases", cases, "random cases per op");

    auto* inspect = app.add_subcommand("inspect", "dump a checkpoint header");
    add_common(inspect, common[6]);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n" << app.help();
        return 2;
    }

    try {
        if (train->parsed()) return cmd_train_toy(common[0], train_steps, train_corpus);
        if (absorb->parsed()) return cmd_absorb(common[1], task_seed, task_seed_opt->count() > 0);
        if (stream->parsed()) return cmd_stream(common[2], prompt_path, prompt_text, max_new);
        if (bench->parsed()) return cmd_bench_latency(common[3], modes_csv, n_csv, k_gen, trials);
        if (ablate->parsed())
            return cmd_ablate(common[4], preset, num_seeds, holdout, ablate_n, ablate_m);
        if (grad->parsed()) return cmd_gradcheck(common[5], cases);
        if (inspect->parsed()) return cmd_inspect(common[6]);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    std::cerr << "error: no subcommand\n" << app.help();
    return 2;
}

} // namespace absorber
