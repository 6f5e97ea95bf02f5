#pragma once

// Self-describing checkpoint container. Layout:
//   magic "ABSB" | version u32 LE | header length u64 LE | header JSON | payload
// The header maps tensor names to {dtype, shape, offset, length} (offsets are
// payload-relative, contiguous, in header order) and embeds the model config
// and run provenance. Payload is packed little-endian f32.

#include <cstdint>
#include <string>
#include <utility>

#include "absorber/model.hpp"

namespace absorber {

struct CheckpointProvenance {
    std::uint64_t seed = 0;
    std::int64_t steps = 0;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Atomic: writes a temp file in the target directory, then renames.
void save_checkpoint(const ModelWeights& weights, const CheckpointProvenance& provenance,
                     const std::string& path);

std::pair<ModelWeights, CheckpointProvenance> load_checkpoint(const std::string& path);

// Pretty-printed header (config, provenance, tensor table).
std::string inspect_checkpoint(const std::string& path);

} // namespace absorber
