#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "mudok/tensor.hpp"

namespace mudok {

// Adaptive moment estimation with bias correction, constant learning rate, no
// weight decay. Elements that never receive gradient keep zero moments and are
// therefore left bit-identical to their initialization.
template <class T>
class AdamOptimizer {
public:
    explicit AdamOptimizer(std::vector<TensorPtr<T>> params, T lr, T beta1 = T(0.9),
                           T beta2 = T(0.999), T eps = T(1e-8))
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (const auto& p : params_) {
            m_.emplace_back(p->numel(), T(0));
            v_.emplace_back(p->numel(), T(0));
        }
    }

    void step() {
        ++t_;
        const T bc1 = T(1) - std::pow(beta1_, static_cast<T>(t_));
        const T bc2 = T(1) - std::pow(beta2_, static_cast<T>(t_));
        for (std::size_t pi = 0; pi < params_.size(); ++pi) {
            auto& p = *params_[pi];
            p.ensure_grad();
            for (std::size_t i = 0; i < p.numel(); ++i) {
                const T g = p.grad[i];
                m_[pi][i] = beta1_ * m_[pi][i] + (T(1) - beta1_) * g;
                v_[pi][i] = beta2_ * v_[pi][i] + (T(1) - beta2_) * g * g;
                const T mhat = m_[pi][i] / bc1;
                const T vhat = v_[pi][i] / bc2;
                p.data[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    void zero_grad() {
        for (const auto& p : params_) p->zero_grad();
    }

    const std::vector<TensorPtr<T>>& params() const { return params_; }
    T learning_rate() const { return lr_; }

private:
    std::vector<TensorPtr<T>> params_;
    T lr_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;
    std::vector<std::vector<T>> m_, v_;
};

}  // namespace mudok
