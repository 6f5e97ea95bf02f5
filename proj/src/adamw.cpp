#include "absorber/adamw.hpp"

#include <cmath>
#include <string>

namespace absorber {

AdamW::AdamW(std::vector<Tensor<float>*> params, const AdamWConfig& config)
    : params_(std::move(params)), states_(params_.size()), config_(config) {
    if (config_.eta <= 0.0f) throw ConfigError("adamw: learning rate must be positive");
}

void AdamW::step() {
    t_ += 1;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor<float>* p = params_[i];
        if (!p->has_grad()) continue;
        for (float g : p->grad())
            if (!std::isfinite(g))
                throw OptimizationError("adamw: non-finite gradient at step " + std::to_string(t_));
        adamw_step<float>(p->mutable_value(), p->grad(), states_[i], config_.eta, config_.beta1,
                          config_.beta2, config_.weight_decay, t_, config_.eps);
    }
}

void AdamW::set_learning_rate(float eta) {
    if (eta <= 0.0f) throw ConfigError("adamw: learning rate must be positive");
    config_.eta = eta;
}

void AdamW::zero_grad() {
    for (Tensor<float>* p : params_) p->drop_grad();
}

} // namespace absorber
