#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "hitt/random.hpp"
#include "hitt/tensor.hpp"

namespace testutil {

inline hitt::Tensor rand_tensor(std::vector<int> shape, hitt::Rng& rng,
                                float lo = -1.0f, float hi = 1.0f,
                                bool requires_grad = true) {
    return hitt::Tensor::random_uniform(std::move(shape), rng, lo, hi,
                                        requires_grad);
}

// Central finite differences of loss_fn with respect to every element of
// `leaf`. loss_fn must replay the forward pass from the leaf's current
// values (no tape needed).
inline std::vector<float> finite_diff(hitt::Tensor& leaf,
                                      const std::function<float()>& loss_fn,
                                      float eps = 1e-3f) {
    std::vector<float> out(leaf.numel());
    float* v = leaf.data();
    for (std::size_t i = 0; i < leaf.numel(); ++i) {
        const float keep = v[i];
        v[i] = keep + eps;
        const float fp = loss_fn();
        v[i] = keep - eps;
        const float fm = loss_fn();
        v[i] = keep;
        out[i] = (fp - fm) / (2.0f * eps);
    }
    return out;
}

// Max absolute difference normalized by the largest gradient magnitude seen
// (floored so that two near-zero vectors compare as equal).
inline double grad_error(const std::vector<float>& a,
                         const std::vector<float>& b) {
    double scale = 1e-4, diff = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        scale = std::max({scale, std::fabs(static_cast<double>(a[i])),
                          std::fabs(static_cast<double>(b[i]))});
        diff = std::max(diff, std::fabs(static_cast<double>(a[i]) - b[i]));
    }
    return diff / scale;
}

// Convenience: analytic gradient of `leaf` for the scalar produced by
// graph_fn, then the finite-difference comparison in one call.
inline double check_grad(hitt::Tensor& leaf,
                         const std::function<hitt::Tensor()>& graph_fn,
                         float eps = 1e-3f) {
    // A previous check on another leaf may have back-propagated into this
    // one; gradients accumulate, so start from a clean slate.
    leaf.zero_grad();
    {
        hitt::GradientTape tape;
        hitt::Tensor loss = graph_fn();
        tape.backward(loss);
    }
    std::vector<float> analytic = leaf.grad_values();
    if (analytic.empty()) analytic.assign(leaf.numel(), 0.0f);
    const auto fd = finite_diff(
        leaf, [&] { return graph_fn().values()[0]; }, eps);
    leaf.zero_grad();
    return grad_error(analytic, fd);
}

}  // namespace testutil
