#include "absorber/run_config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace absorber {

namespace {

using ordered_json = nlohmann::ordered_json;

void reject_unknown_keys(const ordered_json& j, const std::set<std::string>& known,
                         const std::string& where) {
    for (const auto& [key, value] : j.items()) {
        if (!known.count(key))
            throw ConfigError("config: unknown key '" + key + "' in " + where);
    }
}

template <class T>
void read_field(const ordered_json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

LossNormalize parse_norm_mode(const std::string& s) {
    if (s == "per_position") return LossNormalize::per_position;
    if (s == "per_element") return LossNormalize::per_element;
    throw ConfigError("config: norm_mode must be per_position or per_element, got '" + s + "'");
}

LossNorm parse_loss_norm(const std::string& s) {
    if (s == "l1") return LossNorm::l1;
    if (s == "l2") return LossNorm::l2;
    throw ConfigError("config: loss_norm must be l1 or l2, got '" + s + "'");
}

AlignmentTarget parse_alignment(const std::string& s) {
    if (s == "hidden_states") return AlignmentTarget::hidden_states;
    if (s == "token_distribution") return AlignmentTarget::token_distribution;
    if (s == "ttt_reconstruction") return AlignmentTarget::ttt_reconstruction;
    throw ConfigError("config: alignment_target must be hidden_states, token_distribution or "
                      "ttt_reconstruction, got '" +
                      s + "'");
}

PositionMode parse_position_mode(const std::string& s) {
    if (s == "absolute_offset") return PositionMode::absolute_offset;
    if (s == "reset") return PositionMode::reset;
    throw ConfigError("config: position_mode must be absolute_offset or reset, got '" + s + "'");
}

ModelConfig parse_model(const ordered_json& j) {
    reject_unknown_keys(j, {"num_layers", "hidden_dim", "num_heads", "mlp_dim", "vocab_size",
                            "max_positions", "rope_base"},
                        "model");
    ModelConfig c;
    read_field(j, "num_layers", c.num_layers);
    read_field(j, "hidden_dim", c.hidden_dim);
    read_field(j, "num_heads", c.num_heads);
    read_field(j, "mlp_dim", c.mlp_dim);
    read_field(j, "vocab_size", c.vocab_size);
    read_field(j, "max_positions", c.max_positions);
    read_field(j, "rope_base", c.rope_base);
    return c;
}

AbsorptionConfig parse_absorption(const ordered_json& j) {
    reject_unknown_keys(j,
                        {"n", "m", "max_steps", "eta", "epsilon", "norm_mode", "loss_norm",
                         "alignment_target", "position_mode", "lora_rank", "lora_alpha", "lora_targets",
                         "adam_beta1", "adam_beta2", "weight_decay"},
                        "absorption");
    AbsorptionConfig a;
    read_field(j, "n", a.n);
    read_field(j, "m", a.m);
    read_field(j, "max_steps", a.max_steps);
    read_field(j, "eta", a.eta);
    read_field(j, "epsilon", a.epsilon);
    if (j.contains("norm_mode")) a.norm_mode = parse_norm_mode(j.at("norm_mode").get<std::string>());
    if (j.contains("loss_norm")) a.loss_norm = parse_loss_norm(j.at("loss_norm").get<std::string>());
    if (j.contains("alignment_target"))
        a.alignment_target = parse_alignment(j.at("alignment_target").get<std::string>());
    if (j.contains("position_mode"))
        a.position_mode = parse_position_mode(j.at("position_mode").get<std::string>());
    read_field(j, "lora_rank", a.lora_rank);
    read_field(j, "lora_alpha", a.lora_alpha);
    if (j.contains("lora_targets")) {
        a.lora_targets.clear();
        for (const auto& name : j.at("lora_targets")) {
            auto t = lora_target_from_name(name.get<std::string>());
            if (!t)
                throw ConfigError("config: unknown lora target '" + name.get<std::string>() + "'");
            a.lora_targets.push_back(*t);
        }
    }
    read_field(j, "adam_beta1", a.adam_beta1);
    read_field(j, "adam_beta2", a.adam_beta2);
    read_field(j, "weight_decay", a.weight_decay);
    return a;
}

PretrainOptions parse_pretrain(const ordered_json& j) {
    reject_unknown_keys(j,
                        {"batch", "window", "learning_rate", "warmup_steps", "beta1", "beta2",
                         "weight_decay", "holdout_fraction"},
                        "pretrain");
    PretrainOptions p;
    read_field(j, "batch", p.batch);
    read_field(j, "window", p.window);
    read_field(j, "learning_rate", p.learning_rate);
    read_field(j, "warmup_steps", p.warmup_steps);
    read_field(j, "beta1", p.beta1);
    read_field(j, "beta2", p.beta2);
    read_field(j, "weight_decay", p.weight_decay);
    read_field(j, "holdout_fraction", p.holdout_fraction);
    return p;
}

} // namespace

void RunConfig::validate() const {
    model.validate();
    absorption.validate();
    if (pretrain_steps < 0) throw ConfigError("config: pretrain_steps must be >= 0");
    if (pretrain.batch < 1) throw ConfigError("config: pretrain.batch must be >= 1");
    if (pretrain.window < 2) throw ConfigError("config: pretrain.window must be >= 2");
    if (pretrain.learning_rate <= 0.0f)
        throw ConfigError("config: pretrain.learning_rate must be > 0");
    if (pretrain.holdout_fraction <= 0.0 || pretrain.holdout_fraction >= 1.0)
        throw ConfigError("config: pretrain.holdout_fraction must be in (0,1)");
}

RunConfig RunConfig::from_json_text(const std::string& text) {
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    reject_unknown_keys(j, {"model", "absorption", "pretrain", "pretrain_steps", "corpus_path", "seed",
                            "out_dir"},
                        "top level");
    RunConfig c;
    if (j.contains("model")) c.model = parse_model(j.at("model"));
    if (j.contains("absorption")) c.absorption = parse_absorption(j.at("absorption"));
    if (j.contains("pretrain")) c.pretrain = parse_pretrain(j.at("pretrain"));
    read_field(j, "pretrain_steps", c.pretrain_steps);
    read_field(j, "corpus_path", c.corpus_path);
    read_field(j, "seed", c.seed);
    read_field(j, "out_dir", c.out_dir);
    c.validate();
    return c;
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return from_json_text(ss.str());
}

std::string RunConfig::to_json() const {
    ordered_json j;
    j["model"] = {{"num_layers", model.num_layers},   {"hidden_dim", model.hidden_dim},
                  {"num_heads", model.num_heads},     {"mlp_dim", model.mlp_dim},
                  {"vocab_size", model.vocab_size},   {"max_positions", model.max_positions},
                  {"rope_base", model.rope_base}};
    ordered_json a;
    a["n"] = absorption.n;
    a["m"] = absorption.m;
    a["max_steps"] = absorption.max_steps;
    a["eta"] = absorption.eta;
    a["epsilon"] = absorption.epsilon;
    a["norm_mode"] = loss_normalize_name(absorption.norm_mode);
    a["loss_norm"] = loss_norm_name(absorption.loss_norm);
    a["alignment_target"] = alignment_target_name(absorption.alignment_target);
    a["position_mode"] = position_mode_name(absorption.position_mode);
    a["lora_rank"] = absorption.lora_rank;
    a["lora_alpha"] = absorption.lora_alpha;
    a["lora_targets"] = ordered_json::array();
    for (auto t : absorption.lora_targets) a["lora_targets"].push_back(lora_target_name(t));
    a["adam_beta1"] = absorption.adam_beta1;
    a["adam_beta2"] = absorption.adam_beta2;
    a["weight_decay"] = absorption.weight_decay;
    j["absorption"] = std::move(a);
    j["pretrain"] = {{"batch", pretrain.batch},
                     {"window", pretrain.window},
                     {"learning_rate", pretrain.learning_rate},
                     {"warmup_steps", pretrain.warmup_steps},
                     {"beta1", pretrain.beta1},
                     {"beta2", pretrain.beta2},
                     {"weight_decay", pretrain.weight_decay},
                     {"holdout_fraction", pretrain.holdout_fraction}};
    j["pretrain_steps"] = pretrain_steps;
    j["corpus_path"] = corpus_path;
    j["seed"] = seed;
    j["out_dir"] = out_dir;
    return j.dump(2);
}

} // namespace absorber
