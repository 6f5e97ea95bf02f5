#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <random>

#include <json.hpp>

#include "absorber/checkpoint.hpp"
#include "absorber/run_config.hpp"

using namespace absorber;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.num_layers = 2;
    c.hidden_dim = 16;
    c.num_heads = 2;
    c.mlp_dim = 32;
    c.vocab_size = 64;
    c.max_positions = 128;
    return c;
}

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) : path("/tmp/absorber_test_" + name) {}
    ~TempFile() { std::remove(path.c_str()); }
};

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return s;
}

void spit(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), std::streamsize(bytes.size()));
}

} // namespace

TEST_CASE("checkpoint round trip is bitwise exact") {
    auto c = tiny_config();
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        auto w = init_model(c, seed);
        TempFile f("roundtrip_" + std::to_string(seed) + ".ckpt");
        save_checkpoint(w, {seed, 123}, f.path);
        auto [loaded, prov] = load_checkpoint(f.path);
        CHECK(loaded.bitwise_equal(w));
        CHECK(prov.seed == seed);
        CHECK(prov.steps == 123);
    }
}

TEST_CASE("truncated checkpoints fail with a corruption diagnostic") {
    auto w = init_model(tiny_config(), 5);
    TempFile f("truncated.ckpt");
    save_checkpoint(w, {5, 0}, f.path);
    auto bytes = slurp(f.path);
    spit(f.path, bytes.substr(0, bytes.size() - 200));
    CHECK_THROWS_WITH_AS(load_checkpoint(f.path), doctest::Contains("truncated"), CorruptionError);

    spit(f.path, bytes.substr(0, 10)); // shorter than the fixed prelude
    CHECK_THROWS_AS(load_checkpoint(f.path), FormatError);

    spit(f.path, bytes + "xx"); // trailing garbage
    CHECK_THROWS_AS(load_checkpoint(f.path), CorruptionError);
}

TEST_CASE("bad magic and unknown version are rejected") {
    auto w = init_model(tiny_config(), 6);
    TempFile f("magic.ckpt");
    save_checkpoint(w, {6, 0}, f.path);
    auto bytes = slurp(f.path);

    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    spit(f.path, bad_magic);
    CHECK_THROWS_WITH_AS(load_checkpoint(f.path), doctest::Contains("magic"), FormatError);

    auto bad_version = bytes;
    bad_version[4] = 9;
    spit(f.path, bad_version);
    CHECK_THROWS_WITH_AS(load_checkpoint(f.path), doctest::Contains("version"), FormatError);
}

TEST_CASE("header tensor table matches the model's shape arithmetic") {
    auto c = tiny_config();
    auto w = init_model(c, 7);
    TempFile f("header.ckpt");
    save_checkpoint(w, {7, 42}, f.path);
    auto header = nlohmann::ordered_json::parse(inspect_checkpoint(f.path));
    CHECK(header.at("tensors").size() == w.named_tensors().size());
    // offsets contiguous, lengths sum to param_count * 4
    std::uint64_t total = 0;
    for (const auto& [name, entry] : header.at("tensors").items()) {
        CHECK(entry.at("offset").get<std::uint64_t>() == total);
        total += entry.at("length").get<std::uint64_t>();
    }
    CHECK(total == std::uint64_t(c.param_count()) * sizeof(float));
    CHECK(header.at("provenance").at("steps").get<int>() == 42);
}

TEST_CASE("run config parses a complete document and round-trips") {
    RunConfig base;
    base.seed = 9;
    base.corpus_path = "corpus.txt";
    base.absorption.n = 16;
    base.absorption.loss_norm = LossNorm::l2;
    base.absorption.alignment_target = AlignmentTarget::token_distribution;
    auto text = base.to_json();
    auto parsed = RunConfig::from_json_text(text);
    CHECK(parsed.seed == 9);
    CHECK(parsed.corpus_path == "corpus.txt");
    CHECK(parsed.absorption.n == 16);
    CHECK(parsed.absorption.loss_norm == LossNorm::l2);
    CHECK(parsed.absorption.alignment_target == AlignmentTarget::token_distribution);
    CHECK(parsed.model.hidden_dim == base.model.hidden_dim);
}

TEST_CASE("run config rejects unknown keys with the key name") {
    CHECK_THROWS_WITH_AS(RunConfig::from_json_text(R"({"sneaky": 1})"), doctest::Contains("sneaky"),
                         ConfigError);
    CHECK_THROWS_WITH_AS(RunConfig::from_json_text(R"({"model": {"depth": 2}})"),
                         doctest::Contains("depth"), ConfigError);
    CHECK_THROWS_WITH_AS(RunConfig::from_json_text(R"({"absorption": {"lr": 0.1}})"),
                         doctest::Contains("lr"), ConfigError);
}

TEST_CASE("run config validation has distinct messages per field") {
    CHECK_THROWS_WITH_AS(RunConfig::from_json_text(R"({"absorption": {"n": -1}})"),
                         doctest::Contains("n must be"), ConfigError);
    CHECK_THROWS_WITH_AS(RunConfig::from_json_text(R"({"absorption": {"m": 0}})"),
                         doctest::Contains("m must be"), ConfigError);
    CHECK_THROWS_WITH_AS(RunConfig::from_json_text(R"({"absorption": {"eta": -0.5}})"),
                         doctest::Contains("eta"), ConfigError);
    CHECK_THROWS_WITH_AS(RunConfig::from_json_text(R"({"absorption": {"loss_norm": "huber"}})"),
                         doctest::Contains("huber"), ConfigError);
    CHECK_THROWS_WITH_AS(RunConfig::from_json_text(R"({"model": {"hidden_dim": 10, "num_heads": 4}})"),
                         doctest::Contains("divisible"), ConfigError);
    CHECK_THROWS_WITH_AS(RunConfig::from_json_text("{nope"), doctest::Contains("invalid JSON"),
                         ConfigError);
}

TEST_CASE("save propagates IO failures with path context") {
    auto w = init_model(tiny_config(), 8);
    CHECK_THROWS_WITH_AS(save_checkpoint(w, {8, 0}, "/nonexistent_dir/x.ckpt"),
                         doctest::Contains("/nonexistent_dir/x.ckpt"), IoError);
    CHECK_THROWS_WITH_AS(load_checkpoint("/nonexistent_dir/x.ckpt"), doctest::Contains("cannot open"),
                         IoError);
}
