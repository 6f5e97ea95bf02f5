#include "absorber/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace absorber {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

using ordered_json = nlohmann::ordered_json;

constexpr char kMagic[4] = {'A', 'B', 'S', 'B'};

ordered_json config_to_json(const ModelConfig& c) {
    ordered_json j;
    j["num_layers"] = c.num_layers;
    j["hidden_dim"] = c.hidden_dim;
    j["num_heads"] = c.num_heads;
    j["mlp_dim"] = c.mlp_dim;
    j["vocab_size"] = c.vocab_size;
    j["max_positions"] = c.max_positions;
    j["rope_base"] = c.rope_base;
    return j;
}

ModelConfig config_from_json(const ordered_json& j) {
    ModelConfig c;
    c.num_layers = j.at("num_layers").get<std::int64_t>();
    c.hidden_dim = j.at("hidden_dim").get<std::int64_t>();
    c.num_heads = j.at("num_heads").get<std::int64_t>();
    c.mlp_dim = j.at("mlp_dim").get<std::int64_t>();
    c.vocab_size = j.at("vocab_size").get<std::int64_t>();
    c.max_positions = j.at("max_positions").get<std::int64_t>();
    c.rope_base = j.at("rope_base").get<double>();
    return c;
}

void append_u32(std::string& out, std::uint32_t v) {
    char buf[4];
    std::memcpy(buf, &v, 4);
    out.append(buf, 4);
}

void append_u64(std::string& out, std::uint64_t v) {
    char buf[8];
    std::memcpy(buf, &v, 8);
    out.append(buf, 8);
}

} // namespace

void save_checkpoint(const ModelWeights& weights, const CheckpointProvenance& provenance,
                     const std::string& path) {
    weights.config.validate();
    auto tensors = weights.named_tensors();

    ordered_json header;
    header["config"] = config_to_json(weights.config);
    header["provenance"] = {{"seed", provenance.seed}, {"steps", provenance.steps}};
    ordered_json table = ordered_json::object();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        const std::uint64_t bytes = std::uint64_t(t->numel()) * sizeof(float);
        ordered_json entry;
        entry["dtype"] = "f32";
        entry["shape"] = t->shape();
        entry["offset"] = offset;
        entry["length"] = bytes;
        table[name] = std::move(entry);
        offset += bytes;
    }
    header["tensors"] = std::move(table);
    const std::string header_text = header.dump();

    std::string blob;
    blob.reserve(16 + header_text.size() + offset);
    blob.append(kMagic, 4);
    append_u32(blob, kCheckpointVersion);
    append_u64(blob, std::uint64_t(header_text.size()));
    blob += header_text;
    for (const auto& [name, t] : tensors)
        blob.append(reinterpret_cast<const char*>(t->value().data()), t->value().size() * sizeof(float));

    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open checkpoint for writing: " + tmp);
        out.write(blob.data(), std::streamsize(blob.size()));
        if (!out) throw IoError("failed writing checkpoint: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw IoError("failed renaming " + tmp + " to " + path);
}

namespace {

struct RawFile {
    std::string bytes;
};

RawFile read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    RawFile f;
    in.seekg(0, std::ios::end);
    f.bytes.resize(std::size_t(in.tellg()));
    in.seekg(0);
    in.read(f.bytes.data(), std::streamsize(f.bytes.size()));
    if (!in) throw IoError("failed reading checkpoint: " + path);
    return f;
}

ordered_json parse_header(const std::string& bytes, const std::string& path, std::size_t& payload_begin) {
    if (bytes.size() < 16) throw FormatError(path + ": too short to be a checkpoint");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw FormatError(path + ": bad magic, not an absorber checkpoint");
    std::uint32_t version = 0;
    std::memcpy(&version, bytes.data() + 4, 4);
    if (version != kCheckpointVersion)
        throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
    std::uint64_t header_len = 0;
    std::memcpy(&header_len, bytes.data() + 8, 8);
    if (16 + header_len > bytes.size())
        throw CorruptionError(path + ": header length exceeds file size");
    payload_begin = std::size_t(16 + header_len);
    try {
        return ordered_json::parse(bytes.substr(16, std::size_t(header_len)));
    } catch (const nlohmann::json::exception& e) {
        throw CorruptionError(path + ": unreadable header: " + e.what());
    }
}

} // namespace

std::pair<ModelWeights, CheckpointProvenance> load_checkpoint(const std::string& path) {
    RawFile f = read_file(path);
    std::size_t payload_begin = 0;
    ordered_json header = parse_header(f.bytes, path, payload_begin);

    ModelConfig config;
    CheckpointProvenance provenance;
    try {
        config = config_from_json(header.at("config"));
        provenance.seed = header.at("provenance").at("seed").get<std::uint64_t>();
        provenance.steps = header.at("provenance").at("steps").get<std::int64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw CorruptionError(path + ": malformed header: " + e.what());
    }
    config.validate();

    const auto& table = header.at("tensors");
    ModelWeights weights = init_model(config, 0); // shapes only; payload overwrites all values
    std::uint64_t expected_offset = 0;
    for (auto& [name, t] : weights.named_tensors()) {
        if (!table.contains(name)) throw CorruptionError(path + ": header missing tensor " + name);
        const auto& entry = table.at(name);
        if (entry.at("dtype").get<std::string>() != "f32")
            throw FormatError(path + ": tensor " + name + " has unsupported dtype");
        const Shape shape = entry.at("shape").get<Shape>();
        if (shape != t->shape())
            throw CorruptionError(path + ": tensor " + name + " has shape " + shape_str(shape) +
                                  ", expected " + shape_str(t->shape()));
        const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
        const std::uint64_t length = entry.at("length").get<std::uint64_t>();
        if (offset != expected_offset)
            throw CorruptionError(path + ": tensor " + name + " offsets are not contiguous");
        if (length != std::uint64_t(t->numel()) * sizeof(float))
            throw CorruptionError(path + ": tensor " + name + " has inconsistent byte length");
        if (payload_begin + offset + length > f.bytes.size())
            throw CorruptionError(path + ": payload truncated at tensor " + name);
        std::memcpy(t->mutable_value().data(), f.bytes.data() + payload_begin + offset, length);
        expected_offset += length;
    }
    if (table.size() != std::size_t(weights.named_tensors().size()))
        throw CorruptionError(path + ": header lists unexpected extra tensors");
    if (payload_begin + expected_offset != f.bytes.size())
        throw CorruptionError(path + ": trailing bytes after payload");
    return {std::move(weights), provenance};
}

std::string inspect_checkpoint(const std::string& path) {
    RawFile f = read_file(path);
    std::size_t payload_begin = 0;
    ordered_json header = parse_header(f.bytes, path, payload_begin);
    return header.dump(2);
}

} // namespace absorber
