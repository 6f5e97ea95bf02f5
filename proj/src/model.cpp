#include "absorber/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>

namespace absorber {

// ---------------------------------------------------------------------------
// config / weights
// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
    if (num_layers < 1 || hidden_dim < 1 || num_heads < 1 || mlp_dim < 1 || vocab_size < 1 ||
        max_positions < 1)
        throw ConfigError("model config: all extents must be >= 1");
    if (hidden_dim % num_heads != 0)
        throw ConfigError("model config: hidden_dim " + std::to_string(hidden_dim) +
                          " not divisible by num_heads " + std::to_string(num_heads));
    if (head_dim() % 2 != 0)
        throw ConfigError("model config: head_dim must be even for rotary positions");
    if (rope_base <= 1.0) throw ConfigError("model config: rope_base must exceed 1");
}

std::int64_t ModelConfig::param_count() const {
    const std::int64_t d = hidden_dim;
    return vocab_size * d                                      // embedding
           + num_layers * (4 * d * d + 3 * d * mlp_dim + 2 * d) // blocks
           + d                                                  // final gain
           + d * vocab_size;                                    // unembedding
}

namespace {

Tensor<float> gaussian(std::mt19937_64& rng, Shape shape, float stddev) {
    std::normal_distribution<float> dist(0.0f, stddev);
    std::vector<float> v(static_cast<std::size_t>(numel_of(shape)));
    for (auto& x : v) x = dist(rng);
    return Tensor<float>::leaf(std::move(shape), std::move(v));
}

} // namespace

ModelWeights init_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    const std::int64_t d = config.hidden_dim, mlp = config.mlp_dim, vocab = config.vocab_size;
    const float base_std = 0.02f;
    // residual-output projections scaled down with depth
    const float resid_std = base_std / std::sqrt(float(2 * config.num_layers));

    ModelWeights w;
    w.config = config;
    w.embedding = gaussian(rng, {vocab, d}, base_std);
    for (std::int64_t l = 0; l < config.num_layers; ++l) {
        LayerWeights lw;
        lw.wq = gaussian(rng, {d, d}, base_std);
        lw.wk = gaussian(rng, {d, d}, base_std);
        lw.wv = gaussian(rng, {d, d}, base_std);
        lw.wo = gaussian(rng, {d, d}, resid_std);
        lw.w_gate = gaussian(rng, {d, mlp}, base_std);
        lw.w_up = gaussian(rng, {d, mlp}, base_std);
        lw.w_down = gaussian(rng, {mlp, d}, resid_std);
        lw.norm_attn_gain = Tensor<float>::full({d}, 1.0f);
        lw.norm_mlp_gain = Tensor<float>::full({d}, 1.0f);
        w.layers.push_back(std::move(lw));
    }
    w.norm_final_gain = Tensor<float>::full({d}, 1.0f);
    w.unembedding = gaussian(rng, {d, vocab}, base_std);
    return w;
}

std::vector<std::pair<std::string, Tensor<float>*>> ModelWeights::named_tensors() {
    std::vector<std::pair<std::string, Tensor<float>*>> out;
    out.emplace_back("embedding", &embedding);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        out.emplace_back(p + "wq", &layers[l].wq);
        out.emplace_back(p + "wk", &layers[l].wk);
        out.emplace_back(p + "wv", &layers[l].wv);
        out.emplace_back(p + "wo", &layers[l].wo);
        out.emplace_back(p + "w_gate", &layers[l].w_gate);
        out.emplace_back(p + "w_up", &layers[l].w_up);
        out.emplace_back(p + "w_down", &layers[l].w_down);
        out.emplace_back(p + "norm_attn_gain", &layers[l].norm_attn_gain);
        out.emplace_back(p + "norm_mlp_gain", &layers[l].norm_mlp_gain);
    }
    out.emplace_back("norm_final_gain", &norm_final_gain);
    out.emplace_back("unembedding", &unembedding);
    return out;
}

std::vector<std::pair<std::string, const Tensor<float>*>> ModelWeights::named_tensors() const {
    auto mut = const_cast<ModelWeights*>(this)->named_tensors();
    std::vector<std::pair<std::string, const Tensor<float>*>> out;
    out.reserve(mut.size());
    for (auto& [n, t] : mut) out.emplace_back(n, t);
    return out;
}

ModelWeights ModelWeights::clone() const {
    ModelWeights copy;
    copy.config = config;
    copy.embedding = Tensor<float>::leaf(embedding.shape(), embedding.value());
    for (const auto& l : layers) {
        LayerWeights lw;
        lw.wq = Tensor<float>::leaf(l.wq.shape(), l.wq.value());
        lw.wk = Tensor<float>::leaf(l.wk.shape(), l.wk.value());
        lw.wv = Tensor<float>::leaf(l.wv.shape(), l.wv.value());
        lw.wo = Tensor<float>::leaf(l.wo.shape(), l.wo.value());
        lw.w_gate = Tensor<float>::leaf(l.w_gate.shape(), l.w_gate.value());
        lw.w_up = Tensor<float>::leaf(l.w_up.shape(), l.w_up.value());
        lw.w_down = Tensor<float>::leaf(l.w_down.shape(), l.w_down.value());
        lw.norm_attn_gain = Tensor<float>::leaf(l.norm_attn_gain.shape(), l.norm_attn_gain.value());
        lw.norm_mlp_gain = Tensor<float>::leaf(l.norm_mlp_gain.shape(), l.norm_mlp_gain.value());
        copy.layers.push_back(std::move(lw));
    }
    copy.norm_final_gain = Tensor<float>::leaf(norm_final_gain.shape(), norm_final_gain.value());
    copy.unembedding = Tensor<float>::leaf(unembedding.shape(), unembedding.value());
    return copy;
}

void ModelWeights::set_requires_grad(bool on) {
    for (auto& [name, t] : named_tensors()) t->node()->requires_grad = on;
}

bool ModelWeights::bitwise_equal(const ModelWeights& other) const {
    if (!(config == other.config)) return false;
    auto a = named_tensors();
    auto b = other.named_tensors();
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto& av = a[i].second->value();
        const auto& bv = b[i].second->value();
        if (av.size() != bv.size()) return false;
        if (std::memcmp(av.data(), bv.data(), av.size() * sizeof(float)) != 0) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// adapters
// ---------------------------------------------------------------------------

const char* lora_target_name(LoraTarget t) {
    switch (t) {
        case LoraTarget::wq: return "wq";
        case LoraTarget::wk: return "wk";
        case LoraTarget::wv: return "wv";
        case LoraTarget::wo: return "wo";
        case LoraTarget::mlp_gate: return "mlp_gate";
        case LoraTarget::mlp_up: return "mlp_up";
        case LoraTarget::mlp_down: return "mlp_down";
    }
    return "?";
}

std::optional<LoraTarget> lora_target_from_name(const std::string& name) {
    for (LoraTarget t : all_lora_targets())
        if (name == lora_target_name(t)) return t;
    return std::nullopt;
}

std::vector<LoraTarget> all_lora_targets() {
    return {LoraTarget::wq, LoraTarget::wk, LoraTarget::wv, LoraTarget::wo,
            LoraTarget::mlp_gate, LoraTarget::mlp_up, LoraTarget::mlp_down};
}

namespace {

std::pair<std::int64_t, std::int64_t> target_dims(const ModelConfig& c, LoraTarget t) {
    const std::int64_t d = c.hidden_dim, mlp = c.mlp_dim;
    switch (t) {
        case LoraTarget::wq:
        case LoraTarget::wk:
        case LoraTarget::wv:
        case LoraTarget::wo: return {d, d};
        case LoraTarget::mlp_gate:
        case LoraTarget::mlp_up: return {d, mlp};
        case LoraTarget::mlp_down: return {mlp, d};
    }
    return {d, d};
}

} // namespace

LoraAdapterSet init_adapters(const ModelConfig& config, std::int64_t rank, float alpha,
                             const std::vector<LoraTarget>& targets, std::uint64_t seed) {
    if (rank < 1) throw ConfigError("lora: rank must be >= 1");
    if (targets.empty()) throw ConfigError("lora: target set must not be empty");
    std::mt19937_64 rng(seed);
    LoraAdapterSet set;
    set.rank = rank;
    set.alpha = alpha;
    set.targets = targets;
    const float a_std = 1.0f / std::sqrt(float(rank));
    for (std::int64_t l = 0; l < config.num_layers; ++l) {
        for (LoraTarget t : targets) {
            auto [in, out] = target_dims(config, t);
            LoraEntry e;
            e.target = t;
            e.layer = l;
            e.b = Tensor<float>::zeros({in, rank});
            e.a = gaussian(rng, {rank, out}, a_std);
            set.entries.push_back(std::move(e));
        }
    }
    return set;
}

std::vector<Tensor<float>*> LoraAdapterSet::parameters() {
    std::vector<Tensor<float>*> out;
    for (auto& e : entries) {
        out.push_back(&e.b);
        out.push_back(&e.a);
    }
    return out;
}

const LoraEntry* LoraAdapterSet::find(std::int64_t layer, LoraTarget t) const {
    for (const auto& e : entries)
        if (e.layer == layer && e.target == t) return &e;
    return nullptr;
}

bool LoraAdapterSet::is_zero() const {
    for (const auto& e : entries)
        for (float v : e.b.value())
            if (v != 0.0f) return false;
    return true;
}

void lora_merge_inplace(ModelWeights& weights, const LoraAdapterSet& adapters) {
    const float s = adapters.scaling();
    for (const auto& e : adapters.entries) {
        if (e.layer < 0 || e.layer >= std::int64_t(weights.layers.size()))
            throw ConfigError("lora_merge: adapter layer out of range");
        LayerWeights& lw = weights.layers[std::size_t(e.layer)];
        Tensor<float>* dst = nullptr;
        switch (e.target) {
            case LoraTarget::wq: dst = &lw.wq; break;
            case LoraTarget::wk: dst = &lw.wk; break;
            case LoraTarget::wv: dst = &lw.wv; break;
            case LoraTarget::wo: dst = &lw.wo; break;
            case LoraTarget::mlp_gate: dst = &lw.w_gate; break;
            case LoraTarget::mlp_up: dst = &lw.w_up; break;
            case LoraTarget::mlp_down: dst = &lw.w_down; break;
        }
        const std::int64_t in = e.b.dim(0), r = e.b.dim(1), out = e.a.dim(1);
        if (dst->dim(0) != in || dst->dim(1) != out)
            throw ConfigError("lora_merge: adapter shape does not match target " +
                              std::string(lora_target_name(e.target)));
        // delta = s * b * a
        std::vector<float> delta(static_cast<std::size_t>(in * out), 0.0f);
        detail::gemm_nn(e.b.value().data(), e.a.value().data(), delta.data(), in, r, out);
        auto& w = dst->mutable_value();
        for (std::size_t i = 0; i < w.size(); ++i) w[i] += s * delta[i];
    }
}

ModelWeights lora_merge(const ModelWeights& weights, const LoraAdapterSet& adapters) {
    ModelWeights merged = weights.clone();
    lora_merge_inplace(merged, adapters);
    return merged;
}

// ---------------------------------------------------------------------------
// attention probe
// ---------------------------------------------------------------------------

namespace {
thread_local AttentionProbe* g_probe = nullptr;
}

AttentionProbe::AttentionProbe() : parent_(g_probe) { g_probe = this; }
AttentionProbe::~AttentionProbe() { g_probe = parent_; }

void AttentionProbe::record(std::int64_t width) {
    for (AttentionProbe* p = g_probe; p != nullptr; p = p->parent_) {
        p->stats_.max_width = std::max(p->stats_.max_width, width);
        p->stats_.records += 1;
    }
}

// ---------------------------------------------------------------------------
// autograd forward
// ---------------------------------------------------------------------------

namespace {

using FT = Tensor<float>;

// y = x W (+ scaled low-rank delta)
FT project(const FT& x, const FT& w, const LoraEntry* e, float scaling) {
    FT y = matmul(x, w);
    if (e != nullptr) y = add(y, scale(matmul(matmul(x, e->b), e->a), scaling));
    return y;
}

FT causal_mask(std::int64_t t) {
    std::vector<float> m(static_cast<std::size_t>(t * t), 0.0f);
    for (std::int64_t i = 0; i < t; ++i)
        for (std::int64_t j = i + 1; j < t; ++j) m[std::size_t(i * t + j)] = -1e9f;
    return FT::leaf({t, t}, std::move(m));
}

struct BatchedForward {
    FT logits;                    // [B,T,vocab]
    std::vector<FT> layer_states; // L+1 nodes [B,T,d] when captured
};

BatchedForward forward_batched(const ModelWeights& weights, const LoraAdapterSet* adapters,
                               const std::vector<std::int32_t>& tokens, std::int64_t batch,
                               std::int64_t seq_len, std::int64_t start_position, bool capture) {
    const ModelConfig& cfg = weights.config;
    const std::int64_t d = cfg.hidden_dim, H = cfg.num_heads, hd = cfg.head_dim();
    const float inv_scale = 1.0f / std::sqrt(float(hd));
    const float lora_scaling = adapters ? adapters->scaling() : 0.0f;

    BatchedForward out;
    FT x = embedding_lookup(weights.embedding, tokens, {batch, seq_len});
    if (capture) out.layer_states.push_back(x);

    FT mask = causal_mask(seq_len);
    for (std::int64_t l = 0; l < cfg.num_layers; ++l) {
        const LayerWeights& lw = weights.layers[std::size_t(l)];
        auto entry = [&](LoraTarget t) { return adapters ? adapters->find(l, t) : nullptr; };

        // attention
        FT xa = rms_norm(x, lw.norm_attn_gain);
        FT q = project(xa, lw.wq, entry(LoraTarget::wq), lora_scaling);
        FT k = project(xa, lw.wk, entry(LoraTarget::wk), lora_scaling);
        FT v = project(xa, lw.wv, entry(LoraTarget::wv), lora_scaling);
        FT qh = rope(transpose(reshape(q, {batch, seq_len, H, hd}), 1, 2), start_position, cfg.rope_base);
        FT kh = rope(transpose(reshape(k, {batch, seq_len, H, hd}), 1, 2), start_position, cfg.rope_base);
        FT vh = transpose(reshape(v, {batch, seq_len, H, hd}), 1, 2);
        FT scores = add(scale(matmul(qh, transpose(kh, 2, 3)), inv_scale), mask);
        AttentionProbe::record(seq_len);
        FT probs = softmax_lastdim(scores);
        FT attn = reshape(transpose(matmul(probs, vh), 1, 2), {batch, seq_len, d});
        x = add(x, project(attn, lw.wo, entry(LoraTarget::wo), lora_scaling));

        // gated MLP
        FT xm = rms_norm(x, lw.norm_mlp_gain);
        FT g = project(xm, lw.w_gate, entry(LoraTarget::mlp_gate), lora_scaling);
        FT u = project(xm, lw.w_up, entry(LoraTarget::mlp_up), lora_scaling);
        FT h = mul(silu(g), u);
        x = add(x, project(h, lw.w_down, entry(LoraTarget::mlp_down), lora_scaling));

        if (capture) out.layer_states.push_back(x);
    }

    FT xf = rms_norm(x, weights.norm_final_gain);
    out.logits = matmul(xf, weights.unembedding);
    return out;
}

} // namespace

HiddenStateTrace HiddenStateTrace::slice_positions(std::int64_t first, std::int64_t count) const {
    if (first < 0 || count < 0 || first + count > num_positions())
        throw ContractError("trace slice out of range");
    HiddenStateTrace out;
    out.positions.assign(positions.begin() + first, positions.begin() + first + count);
    out.states.assign(states.begin() + first, states.begin() + first + count);
    return out;
}

HiddenStateTrace ForwardResult::detach_trace() const {
    HiddenStateTrace trace;
    trace.positions = positions;
    const std::int64_t t = std::int64_t(positions.size());
    trace.states.resize(std::size_t(t));
    for (std::int64_t p = 0; p < t; ++p) trace.states[std::size_t(p)].reserve(layer_states.size());
    for (const auto& layer : layer_states) {
        const std::int64_t d = layer.shape().back();
        for (std::int64_t p = 0; p < t; ++p) {
            const float* row = layer.value().data() + p * d;
            trace.states[std::size_t(p)].emplace_back(row, row + d);
        }
    }
    return trace;
}

ForwardResult forward_full(const ModelWeights& weights, const LoraAdapterSet* adapters,
                           const std::vector<std::int32_t>& tokens, std::int64_t start_position,
                           bool capture) {
    weights.config.validate();
    if (tokens.empty()) throw ContractError("forward_full: need at least one token");
    const std::int64_t t = std::int64_t(tokens.size());
    if (start_position < 0 || start_position + t > weights.config.max_positions)
        throw CapacityError("forward_full: positions " + std::to_string(start_position) + ".." +
                            std::to_string(start_position + t - 1) + " exceed max_positions " +
                            std::to_string(weights.config.max_positions));

    BatchedForward bf = forward_batched(weights, adapters, tokens, 1, t, start_position, capture);
    ForwardResult r;
    r.logits = reshape(bf.logits, {t, weights.config.vocab_size});
    for (auto& layer : bf.layer_states)
        r.layer_states.push_back(reshape(layer, {t, weights.config.hidden_dim}));
    r.positions.resize(std::size_t(t));
    for (std::int64_t i = 0; i < t; ++i) r.positions[std::size_t(i)] = start_position + i;
    return r;
}

Tensor<float> forward_training_batch(const ModelWeights& weights, const std::vector<std::int32_t>& tokens,
                                     std::int64_t batch, std::int64_t seq_len) {
    if (std::int64_t(tokens.size()) != batch * seq_len)
        throw ContractError("forward_training_batch: token count does not match batch*seq_len");
    if (seq_len > weights.config.max_positions)
        throw CapacityError("forward_training_batch: seq_len exceeds max_positions");
    return forward_batched(weights, nullptr, tokens, batch, seq_len, 0, false).logits;
}

// ---------------------------------------------------------------------------
// KV-cache incremental path (raw float)
// ---------------------------------------------------------------------------

DecodeCache::DecodeCache(const ModelConfig& cfg, std::int64_t start)
    : config(cfg), start_position(start) {
    config.validate();
    if (start < 0) throw ContractError("decode cache: negative start position");
    k.resize(std::size_t(cfg.num_layers));
    v.resize(std::size_t(cfg.num_layers));
}

namespace {

// y += x W for row-major W [in,out]; same accumulation order as gemm_nn.
void gemv(const float* x, const float* w, float* y, std::int64_t in, std::int64_t out) {
    for (std::int64_t k = 0; k < in; ++k) {
        const float xv = x[k];
        const float* wrow = w + k * out;
        for (std::int64_t j = 0; j < out; ++j) y[j] += xv * wrow[j];
    }
}

void project_row(const float* x, const Tensor<float>& w, const LoraEntry* e, float scaling,
                 float* y, std::int64_t in, std::int64_t out) {
    std::fill(y, y + out, 0.0f);
    gemv(x, w.value().data(), y, in, out);
    if (e != nullptr) {
        const std::int64_t r = e->b.dim(1);
        std::vector<float> tmp(static_cast<std::size_t>(r), 0.0f);
        gemv(x, e->b.value().data(), tmp.data(), in, r);
        std::vector<float> delta(static_cast<std::size_t>(out), 0.0f);
        gemv(tmp.data(), e->a.value().data(), delta.data(), r, out);
        for (std::int64_t j = 0; j < out; ++j) y[j] += scaling * delta[j];
    }
}

void rmsnorm_row(const float* x, const float* gain, float* y, std::int64_t d) {
    const float inv = 1.0f / detail::rms_of_row(x, d, 1e-6f);
    for (std::int64_t i = 0; i < d; ++i) y[i] = x[i] * inv * gain[i];
}

void rope_row(float* x, std::int64_t pos, std::int64_t heads, std::int64_t hd, double base) {
    std::vector<float> cos_tab, sin_tab;
    detail::rope_table(pos, 1, hd, base, cos_tab, sin_tab);
    for (std::int64_t h = 0; h < heads; ++h) {
        float* vec = x + h * hd;
        for (std::int64_t i = 0; i < hd / 2; ++i) {
            const float x0 = vec[2 * i], x1 = vec[2 * i + 1];
            vec[2 * i] = x0 * cos_tab[std::size_t(i)] - x1 * sin_tab[std::size_t(i)];
            vec[2 * i + 1] = x0 * sin_tab[std::size_t(i)] + x1 * cos_tab[std::size_t(i)];
        }
    }
}

} // namespace

std::vector<float> forward_incremental(const ModelWeights& weights, const LoraAdapterSet* adapters,
                                       DecodeCache& cache, std::int32_t token) {
    const ModelConfig& cfg = weights.config;
    if (!(cache.config == cfg))
        throw ContractError("forward_incremental: cache was built for a different model config");
    if (cache.next_position() >= cfg.max_positions)
        throw CapacityError("forward_incremental: position " + std::to_string(cache.next_position()) +
                            " exceeds max_positions " + std::to_string(cfg.max_positions));
    if (token < 0 || token >= cfg.vocab_size)
        throw ContractError("forward_incremental: token id out of range");

    const std::int64_t d = cfg.hidden_dim, H = cfg.num_heads, hd = cfg.head_dim(), mlp = cfg.mlp_dim;
    const std::int64_t pos = cache.next_position();
    const float inv_scale = 1.0f / std::sqrt(float(hd));
    const float lora_scaling = adapters ? adapters->scaling() : 0.0f;

    std::vector<float> x(static_cast<std::size_t>(d));
    std::copy_n(weights.embedding.value().data() + std::int64_t(token) * d, d, x.data());

    std::vector<float> xa(static_cast<std::size_t>(d)), q(static_cast<std::size_t>(d)),
        k(static_cast<std::size_t>(d)), v(static_cast<std::size_t>(d)),
        attn(static_cast<std::size_t>(d)), proj(static_cast<std::size_t>(d));
    std::vector<float> gate(static_cast<std::size_t>(mlp)), up(static_cast<std::size_t>(mlp)),
        act(static_cast<std::size_t>(mlp));

    const std::int64_t width = cache.len + 1; // positions attended incl. this one
    for (std::int64_t l = 0; l < cfg.num_layers; ++l) {
        const LayerWeights& lw = weights.layers[std::size_t(l)];
        auto entry = [&](LoraTarget t) { return adapters ? adapters->find(l, t) : nullptr; };

        rmsnorm_row(x.data(), lw.norm_attn_gain.value().data(), xa.data(), d);
        project_row(xa.data(), lw.wq, entry(LoraTarget::wq), lora_scaling, q.data(), d, d);
        project_row(xa.data(), lw.wk, entry(LoraTarget::wk), lora_scaling, k.data(), d, d);
        project_row(xa.data(), lw.wv, entry(LoraTarget::wv), lora_scaling, v.data(), d, d);
        rope_row(q.data(), pos, H, hd, cfg.rope_base);
        rope_row(k.data(), pos, H, hd, cfg.rope_base);

        auto& kc = cache.k[std::size_t(l)];
        auto& vc = cache.v[std::size_t(l)];
        kc.insert(kc.end(), k.begin(), k.end());
        vc.insert(vc.end(), v.begin(), v.end());

        AttentionProbe::record(width);
        std::vector<float> scores(static_cast<std::size_t>(width));
        std::vector<float> probs(static_cast<std::size_t>(width));
        for (std::int64_t h = 0; h < H; ++h) {
            const float* qh = q.data() + h * hd;
            for (std::int64_t t = 0; t < width; ++t) {
                const float* kh = kc.data() + t * d + h * hd;
                float acc = 0.0f;
                for (std::int64_t j = 0; j < hd; ++j) acc += qh[j] * kh[j];
                scores[std::size_t(t)] = acc * inv_scale;
            }
            detail::softmax_row(scores.data(), probs.data(), width);
            float* oh = attn.data() + h * hd;
            std::fill(oh, oh + hd, 0.0f);
            for (std::int64_t t = 0; t < width; ++t) {
                const float p = probs[std::size_t(t)];
                const float* vh = vc.data() + t * d + h * hd;
                for (std::int64_t j = 0; j < hd; ++j) oh[j] += p * vh[j];
            }
        }
        project_row(attn.data(), lw.wo, entry(LoraTarget::wo), lora_scaling, proj.data(), d, d);
        for (std::int64_t i = 0; i < d; ++i) x[std::size_t(i)] += proj[std::size_t(i)];

        rmsnorm_row(x.data(), lw.norm_mlp_gain.value().data(), xa.data(), d);
        project_row(xa.data(), lw.w_gate, entry(LoraTarget::mlp_gate), lora_scaling, gate.data(), d, mlp);
        project_row(xa.data(), lw.w_up, entry(LoraTarget::mlp_up), lora_scaling, up.data(), d, mlp);
        for (std::int64_t i = 0; i < mlp; ++i) {
            const float g = gate[std::size_t(i)];
            act[std::size_t(i)] = g * detail::sigmoid(g) * up[std::size_t(i)];
        }
        project_row(act.data(), lw.w_down, entry(LoraTarget::mlp_down), lora_scaling, proj.data(), mlp, d);
        for (std::int64_t i = 0; i < d; ++i) x[std::size_t(i)] += proj[std::size_t(i)];
    }

    rmsnorm_row(x.data(), weights.norm_final_gain.value().data(), xa.data(), d);
    std::vector<float> logits(static_cast<std::size_t>(cfg.vocab_size), 0.0f);
    gemv(xa.data(), weights.unembedding.value().data(), logits.data(), d, cfg.vocab_size);

    cache.len += 1;
    return logits;
}

std::int32_t greedy_next_token(const std::vector<float>& logits) {
    if (logits.empty()) throw ContractError("greedy_next_token: empty logits");
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i)
        if (logits[i] > logits[best]) best = i;
    return std::int32_t(best);
}

} // namespace absorber
