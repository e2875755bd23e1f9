#pragma once

#include <cmath>

#include <Eigen/Cholesky>
#include <Eigen/SVD>

#include "dyad/geometry.hpp"
#include "dyad/metrics.hpp"

namespace dyad::testing {

/// Rotation from axis and angle by Rodrigues' formula, independent of the
/// library's own rotation builders.
inline geom::Mat3 rodrigues(geom::Vec3 axis, double angle) {
  axis.normalize();
  geom::Mat3 k;
  k << 0, -axis.z(), axis.y(), axis.z(), 0, -axis.x(), -axis.y(), axis.x(), 0;
  return geom::Mat3::Identity() + std::sin(angle) * k + (1 - std::cos(angle)) * k * k;
}

/// Frechet distance by a different factorization: with S_a = L_a L_a^T and
/// S_b = L_b L_b^T, tr sqrt(S_a S_b) is the nuclear norm of L_b^T L_a.
inline double frechet_oracle(const metrics::GaussianStats& a, const metrics::GaussianStats& b) {
  const Eigen::MatrixXd la = a.covariance.llt().matrixL();
  const Eigen::MatrixXd lb = b.covariance.llt().matrixL();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(lb.transpose() * la);
  return (a.mean - b.mean).squaredNorm() + a.covariance.trace() + b.covariance.trace() -
         2.0 * svd.singularValues().sum();
}

inline metrics::GaussianStats random_stats(std::size_t d, RngStream& rng) {
  Eigen::MatrixXd m(d, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  metrics::GaussianStats g;
  g.mean = Eigen::VectorXd(d);
  for (std::size_t i = 0; i < d; ++i) g.mean[i] = rng.normal();
  g.covariance = m * m.transpose() + 0.1 * Eigen::MatrixXd::Identity(d, d);
  g.count = 100;
  return g;
}

}  // namespace dyad::testing
