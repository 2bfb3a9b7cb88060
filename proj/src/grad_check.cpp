#include "se2/grad_check.hpp"

#include <cmath>

namespace se2 {

double grad_check(const std::function<double()>& loss,
                  const std::function<void()>& backward_fill,
                  const std::vector<GradPairD*>& params, double eps) {
  backward_fill();
  // Snapshot analytic grads: the numeric sweep below reruns the forward only.
  std::vector<TensorD> analytic;
  analytic.reserve(params.size());
  for (const GradPairD* p : params) analytic.push_back(p->grad);

  double max_rel = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    TensorD& v = params[pi]->value;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double orig = v[i];
      v[i] = orig + eps;
      const double up = loss();
      v[i] = orig - eps;
      const double down = loss();
      v[i] = orig;
      if (!std::isfinite(up) || !std::isfinite(down))
        throw DiagnosticError("grad_check: non-finite loss during numeric sweep");
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[pi][i];
      const double rel = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
      if (rel > max_rel) max_rel = rel;
    }
  }
  return max_rel;
}

}  // namespace se2
