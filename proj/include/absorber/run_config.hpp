#pragma once

// JSON run configuration shared by every CLI subcommand. Strict: unknown keys
// are rejected, every field validated before any compute.

#include <cstdint>
#include <string>

#include "absorber/absorption.hpp"
#include "absorber/model.hpp"
#include "absorber/pretrain.hpp"

namespace absorber {

struct RunConfig {
    ModelConfig model;
    AbsorptionConfig absorption;
    PretrainOptions pretrain;
    std::int64_t pretrain_steps = 1000;
    std::string corpus_path;
    std::uint64_t seed = 0;
    std::string out_dir = ".";

    void validate() const;

    static RunConfig from_json_text(const std::string& text);
    static RunConfig from_file(const std::string& path);
    std::string to_json() const;
};

} // namespace absorber
