#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"

namespace swift {

/// AdamW with decoupled weight decay and bias correction, for one parameter tensor.
class AdamW {
public:
    struct Params {
        double beta1 = 0.9;
        double beta2 = 0.999;
        double epsilon = 1e-8;
    };

    AdamW() = default;
    explicit AdamW(std::size_t size) : AdamW(size, Params{}) {}
    AdamW(std::size_t size, Params params) : params_(params) { reset(size); }

    void reset(std::size_t size) {
        moment1_.assign(size, 0.0);
        moment2_.assign(size, 0.0);
        step_ = 0;
    }

    /// p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)
    void step(std::span<double> param, std::span<const double> grad, double lr, double weight_decay) {
        if (param.size() != grad.size()) {
            throw ShapeError("adamw parameter/gradient size mismatch");
        }
        if (moment1_.size() != param.size()) {
            reset(param.size());
        }
        for (double g : grad) {
            if (!std::isfinite(g)) {
                throw NumericError("non-finite gradient at optimizer step " + std::to_string(step_ + 1));
            }
        }
        ++step_;
        const double bc1 = 1.0 - std::pow(params_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(params_.beta2, static_cast<double>(step_));
        for (std::size_t i = 0; i < param.size(); ++i) {
            const double g = grad[i];
            moment1_[i] = params_.beta1 * moment1_[i] + (1.0 - params_.beta1) * g;
            moment2_[i] = params_.beta2 * moment2_[i] + (1.0 - params_.beta2) * g * g;
            const double m_hat = moment1_[i] / bc1;
            const double v_hat = moment2_[i] / bc2;
            param[i] *= 1.0 - lr * weight_decay;
            param[i] -= lr * m_hat / (std::sqrt(v_hat) + params_.epsilon);
        }
    }

    std::size_t step_count() const noexcept { return step_; }
    const Params& params() const noexcept { return params_; }

private:
    Params params_;
    std::vector<double> moment1_;
    std::vector<double> moment2_;
    std::size_t step_ = 0;
};

/// 0.5 * base * (1 + cos(pi * step / total)); returns base when total is zero.
inline double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr) {
    if (total_steps == 0) {
        return base_lr;
    }
    if (step > total_steps) {
        throw ConfigError("cosine_lr step beyond schedule length");
    }
    const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
    return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

} // namespace swift
