#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "srki/autograd.hpp"

namespace srki {

// Builds a scalar loss on the given tape. Must register the parameters under
// test with tape.parameter() and be deterministic.
using LossBuilder = std::function<Var(GradTape&)>;

struct GradCheckReport {
  double max_relative_error = 0.0;
  double max_abs_gradient = 0.0;
  std::size_t checked = 0;
};

// Compares tape gradients with central finite differences for every element of
// `params`. The per-element error is |analytic - numeric| divided by
// max(|analytic|, |numeric|, 1e-3 * largest |analytic|), so elements whose
// gradient is negligible relative to the rest are judged on an absolute scale.
inline GradCheckReport grad_check_report(const LossBuilder& build, std::span<Tensor* const> params,
                                         double epsilon) {
  if (!(epsilon >= 1e-6 && epsilon <= 1e-3)) {
    throw ConfigError("grad_check: epsilon must lie in [1e-6, 1e-3]");
  }
  auto eval = [&]() {
    GradTape t;
    const double v = t.value(build(t)).data()[0];
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss");
    return v;
  };

  GradTape tape;
  const Var loss = build(tape);
  if (!std::isfinite(tape.value(loss).data()[0])) {
    throw NumericError("grad_check: non-finite loss");
  }
  tape.backward(loss);
  auto grads = tape.parameter_grads();

  std::vector<Tensor> analytic;
  for (Tensor* p : params) {
    auto it = std::find_if(grads.begin(), grads.end(), [p](const ParamGrad& g) { return g.param == p; });
    analytic.push_back(it == grads.end() ? Tensor(p->shape()) : it->grad);
  }

  GradCheckReport report;
  for (const Tensor& g : analytic) {
    for (double v : g.data()) report.max_abs_gradient = std::max(report.max_abs_gradient, std::abs(v));
  }
  const double floor = 1e-3 * report.max_abs_gradient;

  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double saved = p.data()[i];
      p.data()[i] = saved + epsilon;
      const double up = eval();
      p.data()[i] = saved - epsilon;
      const double down = eval();
      p.data()[i] = saved;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double a = analytic[k].data()[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      const double err = denom == 0.0 ? 0.0 : std::abs(a - numeric) / denom;
      report.max_relative_error = std::max(report.max_relative_error, err);
      ++report.checked;
    }
  }
  return report;
}

inline double grad_check(const LossBuilder& build, std::span<Tensor* const> params, double epsilon) {
  return grad_check_report(build, params, epsilon).max_relative_error;
}

}  // namespace srki
