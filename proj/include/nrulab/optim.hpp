#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "nrulab/error.hpp"
#include "nrulab/gradcheck.hpp"

namespace nrulab {

/// sqrt of the sum of squares over every entry of every tensor.
inline double global_norm(const ParamMap& grads) {
  double s = 0.0;
  for (const auto& [name, g] : grads) s += g.squared_norm();
  return std::sqrt(s);
}

/// Rescales all gradients jointly so their global norm is at most max_norm.
inline ParamMap clip_by_norm(ParamMap grads, double max_norm = 1.0) {
  if (!(max_norm > 0.0)) throw ConfigError("clip_by_norm: max_norm must be > 0");
  for (const auto& [name, g] : grads) {
    if (!g.all_finite()) throw DivergenceError("clip_by_norm: non-finite gradient in '" + name + "'");
  }
  const double norm = global_norm(grads);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& [name, g] : grads)
      for (double& v : g.values()) v *= scale;
  }
  return grads;
}

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  ParamMap m;
  ParamMap v;
  std::int64_t t = 0;
};

/// One bias-corrected Adam update. Parameters are left untouched if any
/// updated value would be non-finite.
inline void adam_step(ParamMap& params, const ParamMap& grads, AdamState& state, const AdamConfig& cfg = {}) {
  const std::int64_t t = state.t + 1;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  ParamMap next_params, next_m, next_v;
  for (const auto& [name, theta] : params) {
    auto git = grads.find(name);
    if (git == grads.end()) throw ContractError("adam_step: no gradient for '" + name + "'");
    const Tensor& g = git->second;
    if (g.shape() != theta.shape()) {
      throw DimensionError("adam_step: gradient for '" + name + "' has shape " + shape_str(g.shape()) + ", parameter " +
                           shape_str(theta.shape()));
    }
    auto mit = state.m.find(name);
    Tensor m = mit == state.m.end() ? Tensor::zeros(theta.shape()) : mit->second;
    auto vit = state.v.find(name);
    Tensor v = vit == state.v.end() ? Tensor::zeros(theta.shape()) : vit->second;
    Tensor out = theta;
    for (std::size_t i = 0; i < out.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      out[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
    if (!out.all_finite()) throw DivergenceError("adam_step: non-finite update for '" + name + "'");
    next_params.emplace(name, std::move(out));
    next_m.emplace(name, std::move(m));
    next_v.emplace(name, std::move(v));
  }
  params = std::move(next_params);
  state.m = std::move(next_m);
  state.v = std::move(next_v);
  state.t = t;
}

}  // namespace nrulab
