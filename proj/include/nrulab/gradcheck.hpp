#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>

#include "nrulab/autodiff.hpp"

namespace nrulab {

using ParamMap = std::map<std::string, Tensor>;

struct GradReport {
  std::map<std::string, double> max_rel_error;  // per parameter
  double max_error = 0.0;
  std::string worst_param;
  double tolerance = 0.0;
  bool passed = false;
};

/// |a - f| / max(|a|, |f|, floor).
inline double relative_error(double analytic, double numeric, double floor = 1e-8) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Builds a scalar loss on `tape` from leaves bound to the given parameters.
using LossBuilder = std::function<ad::Var(ad::Tape&, const std::map<std::string, ad::Var>&)>;

namespace detail {

inline double evaluate_loss(const LossBuilder& build, const ParamMap& params) {
  ad::Tape tape;
  std::map<std::string, ad::Var> vars;
  for (const auto& [name, value] : params) vars.emplace(name, tape.leaf(value, name));
  const double loss = build(tape, vars).value().item();
  if (std::isnan(loss)) throw EvaluationError("finite_diff_check: loss evaluated to NaN");
  return loss;
}

}  // namespace detail

/// Analytic gradients of `build` at `params`.
inline ParamMap analytic_gradients(const LossBuilder& build, const ParamMap& params) {
  ad::Tape tape;
  std::map<std::string, ad::Var> vars;
  for (const auto& [name, value] : params) vars.emplace(name, tape.leaf(value, name));
  ad::Var loss = build(tape, vars);
  return ad::backward(tape, loss);
}

/// Compares reverse-mode gradients with central differences
/// (f(theta + h) - f(theta - h)) / 2h, coordinate by coordinate.
inline GradReport finite_diff_check(const LossBuilder& build, const ParamMap& params, double h = 1e-5,
                                    double tol = 1e-5) {
  const ParamMap analytic = analytic_gradients(build, params);
  GradReport report;
  report.tolerance = tol;
  ParamMap probe = params;
  for (auto& [name, tensor] : probe) {
    double worst = 0.0;
    const Tensor& grad = analytic.at(name);
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const double saved = tensor[i];
      tensor[i] = saved + h;
      const double up = detail::evaluate_loss(build, probe);
      tensor[i] = saved - h;
      const double down = detail::evaluate_loss(build, probe);
      tensor[i] = saved;
      worst = std::max(worst, relative_error(grad[i], (up - down) / (2.0 * h)));
    }
    report.max_rel_error[name] = worst;
    if (worst >= report.max_error) {
      report.max_error = worst;
      report.worst_param = name;
    }
  }
  report.passed = report.max_error < tol;
  return report;
}

}  // namespace nrulab
