#pragma once

#include <cmath>
#include <vector>

#include "emnet/tensor.hpp"

namespace emnet {

// Linear warmup to `peak` over warmup_ratio * total_steps, then linear
// decay to zero; continuous at the junction.
struct LrSchedule {
    double peak = 3e-3;
    double warmup_ratio = 0.25;
    std::size_t total_steps = 1;
};

inline double lr_at(std::size_t step, const LrSchedule& s) {
    if (s.total_steps == 0 || s.warmup_ratio <= 0.0 || s.warmup_ratio >= 1.0 || s.peak < 0.0)
        throw ConfigError("lr schedule: need total_steps >= 1, 0 < warmup_ratio < 1, peak >= 0");
    if (step > s.total_steps)
        throw ContractError("lr_at: step " + std::to_string(step) + " beyond total " +
                            std::to_string(s.total_steps));
    const double total = static_cast<double>(s.total_steps);
    const double warm = s.warmup_ratio * total;
    const double t = static_cast<double>(step);
    if (t <= warm) return s.peak * (t / warm);
    return s.peak * ((total - t) / (total - warm));
}

// Decoupled-weight-decay Adam. Decay is applied directly to the parameters
// before the bias-corrected moment update, independent of the gradients.
template <class T>
class AdamW {
public:
    struct Hyper {
        T beta1 = T(0.9);
        T beta2 = T(0.999);
        T eps = T(1e-8);
        T weight_decay = T(0);
    };

    AdamW(std::vector<Tensor<T>> params, Hyper hyper = {}) : hyper_(hyper) {
        slots_.reserve(params.size());
        for (auto& p : params)
            slots_.push_back({p, std::vector<T>(p.size(), T(0)), std::vector<T>(p.size(), T(0))});
    }

    std::size_t step_count() const { return step_; }
    const Hyper& hyper() const { return hyper_; }

    void step(T lr) {
        ++step_;
        const T bc1 = T(1) - std::pow(hyper_.beta1, static_cast<T>(step_));
        const T bc2 = T(1) - std::pow(hyper_.beta2, static_cast<T>(step_));
        for (auto& slot : slots_) {
            auto grad = slot.param.grad();
            auto data = slot.param.data();
            if (grad.size() != data.size())
                throw ShapeError("adamw: gradient/parameter size mismatch");
            T* m = slot.m.data();
            T* v = slot.v.data();
            for (std::size_t i = 0; i < data.size(); ++i) {
                if (hyper_.weight_decay != T(0)) data[i] -= lr * hyper_.weight_decay * data[i];
                const T g = grad[i];
                m[i] = hyper_.beta1 * m[i] + (T(1) - hyper_.beta1) * g;
                v[i] = hyper_.beta2 * v[i] + (T(1) - hyper_.beta2) * g * g;
                const T m_hat = m[i] / bc1;
                const T v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (std::sqrt(v_hat) + hyper_.eps);
            }
        }
    }

    void zero_grad() {
        for (auto& slot : slots_) slot.param.zero_grad();
    }

private:
    struct Slot {
        Tensor<T> param;
        std::vector<T> m, v;
    };
    Hyper hyper_;
    std::vector<Slot> slots_;
    std::size_t step_ = 0;
};

// Scales all gradients so their global L2 norm does not exceed max_norm.
// Returns the pre-clip norm.
template <class T>
T clip_global_norm(std::vector<Tensor<T>>& params, T max_norm) {
    double sq = 0.0;
    for (auto& p : params) {
        auto g = p.grad();
        for (const T v : g) sq += static_cast<double>(v) * static_cast<double>(v);
    }
    const T norm = static_cast<T>(std::sqrt(sq));
    if (norm > max_norm && norm > T(0)) {
        const T factor = max_norm / norm;
        for (auto& p : params) {
            auto g = p.grad();
            for (auto& v : g) v *= factor;
        }
    }
    return norm;
}

}  // namespace emnet
