#pragma once

#include <functional>

#include "ls4/autodiff.hpp"

namespace ls4::ad {

using ScalarFn = std::function<Var(Tape&, Var)>;

/// Max over coordinates of |analytic - central difference| / max(1, |central difference|).
/// Throws std::runtime_error if f is not finite at a perturbed point.
double grad_check(const ScalarFn& f, const Tensor& x, double h = 1e-5);

/// Same check against a caller-supplied analytic gradient.
double grad_check_against(const std::function<double(const Tensor&)>& f, const Tensor& x, const Tensor& analytic,
                          double h = 1e-5);

}  // namespace ls4::ad
