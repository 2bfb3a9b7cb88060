#pragma once

#include <functional>
#include <vector>

#include "se2/tensor.hpp"

namespace se2 {

/// Central-difference gradient check (64-bit only).
///
/// `loss`          pure forward pass returning the scalar objective; re-reads
///                 the parameter tensors on every call.
/// `backward_fill` zeroes the grads, runs forward+backward and leaves the
///                 analytic gradients in the params' grad tensors.
/// `params`        every tensor the objective depends on.
///
/// Returns max over all parameter entries of
///   |analytic - numeric| / max(1, |numeric|).
double grad_check(const std::function<double()>& loss,
                  const std::function<void()>& backward_fill,
                  const std::vector<GradPairD*>& params, double eps = 1e-5);

}  // namespace se2
