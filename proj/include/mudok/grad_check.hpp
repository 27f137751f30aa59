#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "mudok/tensor.hpp"

namespace mudok {

// Central-difference gradient verification. `forward` must rebuild the graph
// and return the scalar loss; any stochastic state (dropout streams) has to be
// replayed identically on every call. Returns the max over all coordinates of
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
template <class T>
T grad_check(const std::function<TensorPtr<T>()>& forward, const std::vector<TensorPtr<T>>& params,
             T epsilon) {
    for (const auto& p : params) {
        p->zero_grad();
        p->ensure_grad();
        p->zero_grad();
    }
    auto loss = forward();
    backward(loss);

    std::vector<std::vector<T>> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) {
        p->ensure_grad();
        analytic.push_back(p->grad);
    }

    T max_rel = T(0);
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        for (std::size_t i = 0; i < p->numel(); ++i) {
            const T saved = p->data[i];
            p->data[i] = saved + epsilon;
            const T up = forward()->data[0];
            p->data[i] = saved - epsilon;
            const T down = forward()->data[0];
            p->data[i] = saved;
            const T numeric = (up - down) / (T(2) * epsilon);
            const T a = analytic[pi][i];
            const T denom = std::max({std::abs(a), std::abs(numeric), T(1e-8)});
            max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
        }
    }
    for (const auto& p : params) p->zero_grad();
    return max_rel;
}

}  // namespace mudok
