#pragma once

#include <Eigen/QR>

#include <cmath>
#include <random>
#include <utility>

#include "nrulab/autodiff.hpp"
#include "nrulab/error.hpp"
#include "nrulab/tensor.hpp"

namespace nrulab {

using Rng = std::mt19937_64;

/// Uniform Xavier/Glorot: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
inline Tensor init_xavier(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-a, a);
  Tensor w({fan_in, fan_out});
  for (double& v : w.values()) v = dist(rng);
  return w;
}

inline Tensor init_identity(std::size_t n) {
  if (n == 0) throw ConfigError("init_identity: n must be >= 1");
  Tensor w({n, n});
  for (std::size_t i = 0; i < n; ++i) w.at(i, i) = 1.0;
  return w;
}

/// Q factor of a standard-normal matrix, columns sign-flipped so that diag(R) > 0.
inline Tensor init_orthogonal(std::size_t n, Rng& rng) {
  if (n == 0) throw ConfigError("init_orthogonal: n must be >= 1");
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd a(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (Eigen::Index r = 0; r < a.rows(); ++r)
    for (Eigen::Index c = 0; c < a.cols(); ++c) a(r, c) = normal(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index c = 0; c < q.cols(); ++c) {
    if (r(c, c) < 0.0) q.col(c) *= -1.0;
  }
  Tensor w({n, n});
  ad::as_matrix(w) = q;
  return w;
}

struct ChronoBias {
  Tensor forget;
  Tensor input;
};

/// Forget bias ln(u), u ~ U[1, t_max - 1]; input bias is its negation.
inline ChronoBias init_chrono(int t_max, std::size_t size, Rng& rng) {
  if (t_max < 3) throw ConfigError("init_chrono: t_max must be >= 3, got " + std::to_string(t_max));
  if (size == 0) throw ConfigError("init_chrono: size must be >= 1");
  std::uniform_real_distribution<double> dist(1.0, static_cast<double>(t_max - 1));
  ChronoBias out{Tensor({size}), Tensor({size})};
  for (std::size_t i = 0; i < size; ++i) {
    out.forget[i] = std::log(dist(rng));
    out.input[i] = -out.forget[i];
  }
  return out;
}

}  // namespace nrulab
