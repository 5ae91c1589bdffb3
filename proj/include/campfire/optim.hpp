#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

#include "campfire/error.hpp"
#include "campfire/model.hpp"

namespace campfire {

struct OptimConfig {
    double lr_peak = 5e-4;
    double lr_warmup_start = 1e-5;
    double eta_min = 1e-6;
    double weight_decay = 5e-3;
    int warmup_epochs = 20;
    int total_epochs = 50;
    int batch_size = 64;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double grad_clip = 0.0;  // global norm; 0 disables
    std::uint64_t seed = 0;

    /// Workstation preset: 10 short epochs with clipping.
    static OptimConfig desk() {
        OptimConfig c;
        c.lr_peak = 1e-3;
        c.warmup_epochs = 1;
        c.total_epochs = 10;
        c.batch_size = 16;
        c.grad_clip = 1.0;
        return c;
    }

    void validate() const {
        if (!(lr_warmup_start <= lr_peak) || !(eta_min <= lr_peak) || lr_warmup_start < 0 || eta_min < 0)
            fail(ErrorCode::InvalidConfig, "learning rates must satisfy 0 <= start, eta_min <= peak");
        if (warmup_epochs < 0 || total_epochs < 0 || warmup_epochs > total_epochs)
            fail(ErrorCode::InvalidConfig, "warmup_epochs must lie in [0, total_epochs]");
        if (batch_size <= 0) fail(ErrorCode::InvalidConfig, "batch_size must be positive");
        if (weight_decay < 0 || grad_clip < 0) fail(ErrorCode::InvalidConfig, "weight_decay and grad_clip must be >= 0");
        if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && eps > 0))
            fail(ErrorCode::InvalidConfig, "bad Adam moment parameters");
    }

    bool operator==(const OptimConfig&) const = default;
};

/// Linear warmup from lr_warmup_start to lr_peak over the warmup steps, then
/// cosine decay reaching eta_min at the last step of the last epoch.
inline double lr_at(std::int64_t step, std::int64_t steps_per_epoch, const OptimConfig& cfg) {
    if (step < 0) fail(ErrorCode::InvalidConfig, "step must be non-negative");
    const std::int64_t warm = static_cast<std::int64_t>(cfg.warmup_epochs) * steps_per_epoch;
    const std::int64_t last = static_cast<std::int64_t>(cfg.total_epochs) * steps_per_epoch - 1;
    if (step < warm) return cfg.lr_warmup_start + (cfg.lr_peak - cfg.lr_warmup_start) * static_cast<double>(step) / warm;
    if (last <= warm) return step <= warm ? cfg.lr_peak : cfg.eta_min;
    if (step >= last) return cfg.eta_min;
    const double t = static_cast<double>(step - warm) / static_cast<double>(last - warm);
    return cfg.eta_min + 0.5 * (cfg.lr_peak - cfg.eta_min) * (1.0 + std::cos(std::numbers::pi * t));
}

template <class S>
double global_norm(const MaeParams<S>& g) {
    double sq = 0.0;
    for (const auto& r : g.refs()) sq += r.value->template cast<double>().squaredNorm();
    return std::sqrt(sq);
}

/// Rescales `g` in place so its global norm is at most `max_norm`; returns
/// the norm before clipping.
template <class S>
double clip_global_norm(MaeParams<S>& g, double max_norm) {
    const double n = global_norm(g);
    if (max_norm > 0 && n > max_norm) {
        const S scale = static_cast<S>(max_norm / (n + 1e-6));
        for (const auto& r : g.refs()) *r.value *= scale;
    }
    return n;
}

/// Adam with decoupled weight decay. Decay skips tensors the parameter
/// visitor marks as non-decaying (biases, norms, mask token).
template <class S>
class AdamW {
public:
    MaeParams<S> m, v;
    std::int64_t t = 0;

    AdamW() = default;
    explicit AdamW(const MaeParams<S>& like) : m(like.zeros_like()), v(like.zeros_like()) {}

    void step(MaeParams<S>& params, const MaeParams<S>& grads, double lr, const OptimConfig& cfg) {
        ++t;
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
        const S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
        const S step_size = static_cast<S>(lr / bc1);
        const S inv_sqrt_bc2 = static_cast<S>(1.0 / std::sqrt(bc2));
        const S eps = static_cast<S>(cfg.eps);
        const auto p = params.refs(), g = grads.refs(), mr = m.refs(), vr = v.refs();
        for (std::size_t k = 0; k < p.size(); ++k) {
            auto& w = *p[k].value;
            const auto& gk = *g[k].value;
            auto& mk = *mr[k].value;
            auto& vk = *vr[k].value;
            if (p[k].decay && cfg.weight_decay > 0) w *= static_cast<S>(1.0 - lr * cfg.weight_decay);
            mk = b1 * mk + (S(1) - b1) * gk;
            vk = b2 * vk + (S(1) - b2) * gk.cwiseProduct(gk);
            w.array() -= step_size * mk.array() / (vk.array().sqrt() * inv_sqrt_bc2 + eps);
        }
    }
};

}  // namespace campfire
