#pragma once

// AdamW with bias correction and decoupled weight decay.

#include <cstdint>
#include <vector>

#include "absorber/errors.hpp"
#include "absorber/tensor.hpp"

namespace absorber {

template <class T>
struct AdamState {
    std::vector<T> m;
    std::vector<T> v;
};

// One update of a single parameter vector. step_index starts at 1.
template <class T>
void adamw_step(std::vector<T>& param, const std::vector<T>& grad, AdamState<T>& state, T eta, T beta1,
                T beta2, T weight_decay, std::int64_t step_index, T eps = T(1e-8)) {
    if (param.size() != grad.size())
        throw ContractError("adamw_step: grad size does not match param size");
    if (state.m.size() != param.size()) state.m.assign(param.size(), T(0));
    if (state.v.size() != param.size()) state.v.assign(param.size(), T(0));
    const T bc1 = T(1) - std::pow(beta1, T(step_index));
    const T bc2 = T(1) - std::pow(beta2, T(step_index));
    for (std::size_t i = 0; i < param.size(); ++i) {
        const T g = grad[i];
        state.m[i] = beta1 * state.m[i] + (T(1) - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (T(1) - beta2) * g * g;
        const T mhat = state.m[i] / bc1;
        const T vhat = state.v[i] / bc2;
        param[i] -= eta * (mhat / (std::sqrt(vhat) + eps) + weight_decay * param[i]);
    }
}

struct AdamWConfig {
    float eta = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float weight_decay = 0.0f;
    float eps = 1e-8f;
};

// Drives adamw_step over a set of float tensor leaves.
class AdamW {
public:
    AdamW(std::vector<Tensor<float>*> params, const AdamWConfig& config);

    // Applies one update from the accumulated grads; a missing grad counts as
    // zero. Throws OptimizationError on non-finite gradients.
    void step();
    void zero_grad();
    void set_learning_rate(float eta);
    std::int64_t step_count() const { return t_; }

private:
    std::vector<Tensor<float>*> params_;
    std::vector<AdamState<float>> states_;
    AdamWConfig config_;
    std::int64_t t_ = 0;
};

} // namespace absorber
