#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "neuromoco/common.hpp"
#include "neuromoco/params.hpp"

namespace neuromoco::optim {

// Optimizer state is aligned with the parameter walk order: slot i belongs to
// params.items()[i]. Non-trainable entries (normalization buffers) keep empty
// slots and are never touched.

template <class S>
struct SgdState {
    std::vector<std::vector<S>> velocity;
};

namespace detail {

template <class S>
void check_step_preconditions(ParamSet<S>& params) {
    bool any = false;
    for (auto& [name, t] : params) {
        if (!t.requires_grad()) continue;
        any = true;
        if (t.grad().size() != t.values().size())
            throw ValidationError("optimizer: gradients missing for '" + name + "'");
    }
    if (!any) throw ValidationError("optimizer: parameter set has no trainable entries");
}

} // namespace detail

// v <- momentum*v + (grad + wd*param); param <- param - lr*v
template <class S>
void sgd_step(ParamSet<S>& params, SgdState<S>& state, double lr, double momentum = 0.9,
              double weight_decay = 1e-4) {
    detail::check_step_preconditions(params);
    if (state.velocity.empty()) state.velocity.resize(params.size());
    if (state.velocity.size() != params.size())
        throw ValidationError("sgd_step: state does not match the parameter set");

    const S mu = static_cast<S>(momentum), wd = static_cast<S>(weight_decay), eta = static_cast<S>(lr);
    for (size_t i = 0; i < params.size(); ++i) {
        auto& t = params.items()[i].second;
        if (!t.requires_grad()) continue;
        auto& p = t.values();
        const auto& g = t.grad();
        auto& v = state.velocity[i];
        if (v.empty()) v.assign(p.size(), S(0));
        for (size_t j = 0; j < p.size(); ++j) {
            v[j] = mu * v[j] + (g[j] + wd * p[j]);
            p[j] -= eta * v[j];
        }
    }
}

template <class S>
struct AdamWState {
    int64_t t = 0;
    std::vector<std::vector<S>> m, v;
};

// Decoupled weight decay: param <- param*(1 - lr*wd) - lr*mhat/(sqrt(vhat)+eps)
template <class S>
void adamw_step(ParamSet<S>& params, AdamWState<S>& state, double lr, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.06) {
    detail::check_step_preconditions(params);
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
    }
    if (state.m.size() != params.size() || state.v.size() != params.size())
        throw ValidationError("adamw_step: state does not match the parameter set");

    state.t += 1;
    const S b1 = static_cast<S>(beta1), b2 = static_cast<S>(beta2);
    const S corr1 = S(1) - static_cast<S>(std::pow(beta1, static_cast<double>(state.t)));
    const S corr2 = S(1) - static_cast<S>(std::pow(beta2, static_cast<double>(state.t)));
    const S eta = static_cast<S>(lr), e = static_cast<S>(eps);
    const S decay = S(1) - static_cast<S>(lr) * static_cast<S>(weight_decay);

    for (size_t i = 0; i < params.size(); ++i) {
        auto& t = params.items()[i].second;
        if (!t.requires_grad()) continue;
        auto& p = t.values();
        const auto& g = t.grad();
        auto& m = state.m[i];
        auto& v = state.v[i];
        if (m.empty()) {
            m.assign(p.size(), S(0));
            v.assign(p.size(), S(0));
        }
        for (size_t j = 0; j < p.size(); ++j) {
            m[j] = b1 * m[j] + (S(1) - b1) * g[j];
            v[j] = b2 * v[j] + (S(1) - b2) * g[j] * g[j];
            const S mhat = m[j] / corr1;
            const S vhat = v[j] / corr2;
            p[j] = p[j] * decay - eta * mhat / (std::sqrt(vhat) + e);
        }
    }
}

inline double lr_multistep(int64_t epoch, double base_lr, std::vector<int64_t> milestones,
                           double gamma) {
    if (!(gamma > 0.0)) throw ConfigError("lr_multistep: gamma must be positive");
    std::sort(milestones.begin(), milestones.end());
    double lr = base_lr;
    for (int64_t m : milestones)
        if (epoch >= m) lr *= gamma;
    return lr;
}

// Linear ramp over the first `warmup` epochs (reaching base_lr at the last
// ramp epoch), then cosine decay to zero at `total`.
inline double lr_warmup_cosine(int64_t epoch, double base_lr, int64_t warmup, int64_t total) {
    if (total < 1) throw ConfigError("lr_warmup_cosine: total epochs must be positive");
    if (warmup < 0 || warmup > total)
        throw ConfigError("lr_warmup_cosine: warmup must lie in [0, total]");
    if (epoch < warmup) return base_lr * static_cast<double>(epoch + 1) / static_cast<double>(warmup);
    if (total == warmup) return base_lr;
    const double phase = static_cast<double>(epoch - warmup) / static_cast<double>(total - warmup);
    return base_lr * 0.5 * (1.0 + std::cos(phase * 3.14159265358979323846));
}

} // namespace neuromoco::optim
