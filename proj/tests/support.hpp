#pragma once

#include <cstdint>

#include <Eigen/Dense>

#include "ameef/ckf.hpp"
#include "ameef/noise.hpp"

namespace ameef::testing {

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = detail::standard_normal(rng);
  return m;
}

inline Vector random_vector(Eigen::Index n, Rng& rng) { return random_matrix(n, 1, rng); }

/// Well-conditioned random symmetric positive-definite matrix.
inline Matrix random_spd(Eigen::Index n, Rng& rng, double floor = 0.5) {
  const Matrix a = random_matrix(n, n, rng);
  return a * a.transpose() / static_cast<double>(n) + floor * Matrix::Identity(n, n);
}

inline double rel_err(const Matrix& a, const Matrix& b) {
  const double scale = std::max(b.norm(), 1e-300);
  return (a - b).norm() / scale;
}

/// Textbook Kalman update for the linear model y = H x + r.
inline StateEstimate kalman_update(const StateEstimate& pred, const Matrix& h, const Matrix& r, const Vector& y) {
  const Matrix s = h * pred.cov * h.transpose() + r;
  const Matrix k = pred.cov * h.transpose() * s.inverse();
  StateEstimate out;
  out.mean = pred.mean + k * (y - h * pred.mean);
  const Matrix i_kh = Matrix::Identity(pred.dim(), pred.dim()) - k * h;
  out.cov = i_kh * pred.cov * i_kh.transpose() + k * r * k.transpose();
  return out;
}

}  // namespace ameef::testing
