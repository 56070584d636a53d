#pragma once

// Central finite-difference check of reverse-mode gradients.

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dcl/autodiff.hpp"

namespace dcl::ad {

template <class T>
using LossFn = std::function<Tensor<T>(std::span<const Tensor<T>>)>;

struct GradCheckResult {
    double max_rel_error = 0.0;  // worst over all parameters
    std::size_t worst_param = 0;
    std::size_t evaluations = 0;
};

/// Error metric is ||analytic - numeric||_inf / max(||analytic||_inf, ||numeric||_inf, 1e-12)
/// per parameter tensor. `loss` is evaluated once under a tape and then
/// 2 * (total elements) times without one.
template <class T>
GradCheckResult gradient_check(const LossFn<T>& loss, std::vector<Tensor<T>>& params, T step);

double relative_error(std::span<const double> analytic, std::span<const double> numeric);

} // namespace dcl::ad
