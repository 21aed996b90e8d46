#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>

#include "avg/numerics/parameters.hpp"

namespace avg::numerics {

struct GradCheckReport {
  std::map<std::string, double> max_relative_error;
  double worst = 0.0;
  bool pass = false;
};

/// Loss evaluator for gradient checks: returns the loss at params and, when
/// grads is non-null, fills the analytic gradient.
using LossFn = std::function<double(const ParameterSet<double>& params, Gradients<double>* grads)>;

/// Compares analytic gradients with central differences, entry by entry:
/// err = |g_a - g_n| / max(|g_a| + |g_n|, floor); passes iff max err < tol.
/// A floor near the round-off level of the differences keeps entries that are
/// themselves tiny from being judged on noise alone.
inline GradCheckReport finite_difference_check(const LossFn& f, ParameterSet<double> params, double eps, double tol,
                                               double floor = 1e-12) {
  Gradients<double> analytic;
  f(params, &analytic);
  GradCheckReport report;
  for (auto& [name, p] : params) {
    const auto it = analytic.find(name);
    double worst = 0.0;
    for (Index i = 0; i < p.size(); ++i) {
      double& x = p.data()[i];
      const double saved = x;
      x = saved + eps;
      const double up = f(params, nullptr);
      x = saved - eps;
      const double down = f(params, nullptr);
      x = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double ga = it == analytic.end() ? 0.0 : it->second.data()[i];
      worst = std::max(worst, std::abs(ga - numeric) / std::max(std::abs(ga) + std::abs(numeric), floor));
    }
    report.max_relative_error[name] = worst;
    report.worst = std::max(report.worst, worst);
  }
  report.pass = report.worst < tol;
  return report;
}

}  // namespace avg::numerics
