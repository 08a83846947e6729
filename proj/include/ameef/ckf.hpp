#pragma once

// Cubature Kalman filtering under the MEEF criterion: prediction, statistical linearization,
// the whitened regression model, the fixed-point measurement update and its information form.

#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>

#include <Eigen/Dense>

#include "ameef/errors.hpp"
#include "ameef/kernel_weights.hpp"

namespace ameef {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

struct StateEstimate {
  Vector mean;
  Matrix cov;

  Eigen::Index dim() const { return mean.size(); }

  /// Symmetric within 1e-10 relative and Cholesky-factorizable.
  bool valid() const {
    if (cov.rows() != mean.size() || cov.cols() != mean.size()) return false;
    if (!mean.allFinite() || !cov.allFinite()) return false;
    const double scale = std::max(cov.cwiseAbs().maxCoeff(), std::numeric_limits<double>::min());
    if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale) return false;
    return Eigen::LLT<Matrix>(cov).info() == Eigen::Success;
  }
};

using VectorMap = std::function<Vector(const Vector&)>;

/// State-transition and measurement maps of one sensor plus their noise covariances.
struct SystemModel {
  VectorMap f;
  VectorMap h;
  Matrix q_cov;
  Matrix r_cov;
  /// Add the cubature linearization residual P_yy - R - S P S^T to R.
  bool inflate_r_with_residual = false;
};

/// Affine convenience model x -> F x, x -> H x.
inline SystemModel linear_model(const Matrix& f_mat, const Matrix& h_mat, const Matrix& q, const Matrix& r) {
  SystemModel m;
  m.f = [f_mat](const Vector& x) -> Vector { return f_mat * x; };
  m.h = [h_mat](const Vector& x) -> Vector { return h_mat * x; };
  m.q_cov = q;
  m.r_cov = r;
  return m;
}

struct CholeskyFactor {
  Matrix lower;
  double jitter = 0.0;  ///< eps such that lower * lower^T = p + eps * I
};

/// Lower Cholesky factor of a symmetric matrix, adding the smallest diagonal jitter from the
/// ladder {1e-12, 1e-10, ..., 1e-4} * trace(p)/n when p is not numerically positive definite.
inline CholeskyFactor robust_cholesky(const Matrix& p) {
  if (p.rows() != p.cols() || p.rows() == 0) throw ParameterError("robust_cholesky: matrix must be square");
  if (!p.allFinite()) throw SingularMatrixError("robust_cholesky: non-finite entries", std::numeric_limits<double>::infinity());
  const Matrix sym = 0.5 * (p + p.transpose());
  const auto n = static_cast<double>(p.rows());

  auto attempt = [](const Matrix& a) -> std::optional<Matrix> {
    Eigen::LLT<Matrix> llt(a);
    if (llt.info() != Eigen::Success) return std::nullopt;
    Matrix l = llt.matrixL();
    if (!l.allFinite() || (l.diagonal().array() <= 0.0).any()) return std::nullopt;
    return l;
  };

  if (auto l = attempt(sym)) return {*l, 0.0};

  double base = sym.trace() / n;
  if (!(base > 0.0)) base = std::max(sym.cwiseAbs().maxCoeff(), 1.0);
  for (int k = 12; k >= 4; k -= 2) {
    const double eps = std::pow(10.0, -k) * base;
    Matrix shifted = sym;
    shifted.diagonal().array() += eps;
    if (auto l = attempt(shifted)) return {*l, eps};
  }

  Eigen::SelfAdjointEigenSolver<Matrix> eig(sym, Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  const double cond = lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();
  throw SingularMatrixError("robust_cholesky: not positive definite after maximum jitter (min eigenvalue " +
                                std::to_string(lo) + ", max " + std::to_string(hi) + ")",
                            cond);
}

/// Columns are the 2n cubature points mean +/- sqrt(n) * (columns of chol(cov)).
inline Matrix cubature_points(const StateEstimate& est) {
  const Eigen::Index n = est.dim();
  const Matrix l = robust_cholesky(est.cov).lower;
  const double scale = std::sqrt(static_cast<double>(n));
  Matrix pts(n, 2 * n);
  for (Eigen::Index i = 0; i < n; ++i) {
    pts.col(i) = est.mean + scale * l.col(i);
    pts.col(n + i) = est.mean - scale * l.col(i);
  }
  return pts;
}

namespace detail {

inline Matrix propagate(const Matrix& points, const VectorMap& fn, const char* what) {
  Vector first = fn(points.col(0));
  Matrix out(first.size(), points.cols());
  out.col(0) = first;
  for (Eigen::Index i = 1; i < points.cols(); ++i) {
    Vector v = fn(points.col(i));
    if (v.size() != first.size()) throw ModelError(std::string(what) + ": inconsistent output dimension");
    out.col(i) = v;
  }
  if (!out.allFinite()) throw ModelError(std::string(what) + ": non-finite output");
  return out;
}

inline Matrix symmetrized(const Matrix& m) { return 0.5 * (m + m.transpose()); }

/// Solves L z = b for lower-triangular L (applies L^-1).
inline Matrix lower_solve(const Matrix& l, const Matrix& b) {
  return l.triangularView<Eigen::Lower>().solve(b);
}

}  // namespace detail

/// Time update through the cubature rule.
inline StateEstimate predict(const StateEstimate& est, const SystemModel& model) {
  const Matrix pts = cubature_points(est);
  const Matrix prop = detail::propagate(pts, model.f, "predict");
  const double w = 1.0 / static_cast<double>(pts.cols());
  StateEstimate out;
  out.mean = prop.rowwise().mean();
  const Matrix centered = prop.colwise() - out.mean;
  out.cov = detail::symmetrized(w * centered * centered.transpose() + model.q_cov);
  return out;
}

struct MeasurementMoments {
  Vector y_pred;
  Matrix p_xy;  ///< n x m
  Matrix p_yy;  ///< m x m, includes R
};

inline MeasurementMoments measurement_moments(const StateEstimate& pred, const SystemModel& model) {
  const Matrix pts = cubature_points(pred);
  const Matrix meas = detail::propagate(pts, model.h, "measurement_moments");
  const double w = 1.0 / static_cast<double>(pts.cols());
  MeasurementMoments mm;
  mm.y_pred = meas.rowwise().mean();
  const Matrix dx = pts.colwise() - pred.mean;
  const Matrix dy = meas.colwise() - mm.y_pred;
  mm.p_xy = w * dx * dy.transpose();
  mm.p_yy = detail::symmetrized(w * dy * dy.transpose() + model.r_cov);
  return mm;
}

/// S = P_xy^T P_xx^-1, the affine map matching the cubature cross-moments.
inline Matrix statistical_linearization(const Matrix& p_xx, const Matrix& p_xy) {
  Eigen::LLT<Matrix> llt(detail::symmetrized(p_xx));
  if (llt.info() != Eigen::Success) {
    throw SingularMatrixError("statistical_linearization: predicted covariance is not positive definite",
                              std::numeric_limits<double>::infinity());
  }
  return llt.solve(p_xy).transpose();
}

/// Whitened linear regression d = W x + e built from the prior and one measurement vector.
struct RegressionModel {
  Vector d;        ///< N = n + m
  Matrix w;        ///< N x n
  Matrix xi_p;     ///< chol(P(t|t-1))
  Matrix xi_r;     ///< chol(R_effective)
  Matrix s_mat;    ///< m x n
  Matrix r_eff;    ///< R_effective
  Vector y_pred;
  Vector innovation;  ///< y - y_pred
  Vector p_yy_diag;

  Eigen::Index n() const { return s_mat.cols(); }
  Eigen::Index m() const { return s_mat.rows(); }

  /// y - y_pred + S x_pred: the measurement expressed against the linearized model.
  Vector pseudo_measurement(const Vector& x_pred) const { return innovation + s_mat * x_pred; }
};

inline RegressionModel build_regression(const StateEstimate& pred, const Vector& y, const MeasurementMoments& mm,
                                        const SystemModel& model) {
  if (!y.allFinite() || !pred.mean.allFinite()) throw ParameterError("build_regression: non-finite input");
  if (y.size() != mm.y_pred.size()) throw ParameterError("build_regression: measurement dimension mismatch");
  RegressionModel reg;
  reg.s_mat = statistical_linearization(pred.cov, mm.p_xy);
  reg.r_eff = model.r_cov;
  if (model.inflate_r_with_residual) {
    reg.r_eff = detail::symmetrized(mm.p_yy - reg.s_mat * pred.cov * reg.s_mat.transpose());
  }
  reg.xi_p = robust_cholesky(pred.cov).lower;
  reg.xi_r = robust_cholesky(reg.r_eff).lower;
  reg.y_pred = mm.y_pred;
  reg.innovation = y - mm.y_pred;
  reg.p_yy_diag = mm.p_yy.diagonal();

  const Eigen::Index n = pred.dim();
  const Eigen::Index m = y.size();
  reg.d.resize(n + m);
  reg.d.head(n) = detail::lower_solve(reg.xi_p, pred.mean);
  reg.d.tail(m) = detail::lower_solve(reg.xi_r, reg.pseudo_measurement(pred.mean));
  reg.w.resize(n + m, n);
  reg.w.topRows(n) = detail::lower_solve(reg.xi_p, Matrix::Identity(n, n));
  reg.w.bottomRows(m) = detail::lower_solve(reg.xi_r, reg.s_mat);
  return reg;
}

/// The weighted prior/measurement blocks entering the gain:
/// p_hat = Xp^-T Pxx Xp^-1, p_xy_hat = Xr^-T Pxy Xp^-1 (m x n), p_yx_hat = Xp^-T Pyx Xr^-1 (n x m),
/// r_hat = Xr^-T Pyy Xr^-1, where Pi = [[Pxx, Pyx], [Pxy, Pyy]].
struct WeightedBlocks {
  Matrix p_hat;
  Matrix p_xy_hat;
  Matrix p_yx_hat;
  Matrix r_hat;
};

inline WeightedBlocks weighted_blocks(const RegressionModel& reg, const Matrix& pi) {
  const Eigen::Index n = reg.n();
  const Eigen::Index m = reg.m();
  if (pi.rows() != n + m || pi.cols() != n + m) throw ParameterError("weighted_blocks: Pi has the wrong size");
  const Matrix xp_inv = detail::lower_solve(reg.xi_p, Matrix::Identity(n, n));
  const Matrix xr_inv = detail::lower_solve(reg.xi_r, Matrix::Identity(m, m));
  WeightedBlocks b;
  b.p_hat = xp_inv.transpose() * pi.topLeftCorner(n, n) * xp_inv;
  b.p_yx_hat = xp_inv.transpose() * pi.topRightCorner(n, m) * xr_inv;
  b.p_xy_hat = xr_inv.transpose() * pi.bottomLeftCorner(m, n) * xp_inv;
  b.r_hat = xr_inv.transpose() * pi.bottomRightCorner(m, m) * xr_inv;
  return b;
}

/// Gain of the weighted normal equations:
/// K = [P^ + S^T Pxy^ + Pyx^ S + S^T R^ S]^-1 [Pyx^ + S^T R^].
inline Matrix gain_normal_form(const RegressionModel& reg, const Matrix& pi) {
  const WeightedBlocks b = weighted_blocks(reg, pi);
  const Matrix& s = reg.s_mat;
  const Matrix lhs = b.p_hat + s.transpose() * b.p_xy_hat + b.p_yx_hat * s + s.transpose() * b.r_hat * s;
  const Matrix rhs = b.p_yx_hat + s.transpose() * b.r_hat;
  Eigen::FullPivLU<Matrix> lu(lhs);
  if (!lu.isInvertible()) {
    throw SingularMatrixError("gain_normal_form: weighted normal matrix is singular", std::numeric_limits<double>::infinity());
  }
  return lu.solve(rhs);
}

/// Same gain through the matrix inversion lemma:
/// K = Pt^-1 St [S Pt^-1 St + R^-1]^-1 with Pt = P^ + S^T Pxy^, St = Pyx^ R^-1 + S^T.
inline Matrix gain_iml(const RegressionModel& reg, const Matrix& pi) {
  const WeightedBlocks b = weighted_blocks(reg, pi);
  const Matrix& s = reg.s_mat;
  Eigen::FullPivLU<Matrix> r_lu(b.r_hat);
  if (!r_lu.isInvertible()) {
    throw SingularMatrixError("gain_iml: weighted measurement block is singular", std::numeric_limits<double>::infinity());
  }
  const Matrix r_inv = r_lu.inverse();
  const Matrix p_tilde = b.p_hat + s.transpose() * b.p_xy_hat;
  const Matrix s_tilde = b.p_yx_hat * r_inv + s.transpose();
  Eigen::FullPivLU<Matrix> p_lu(p_tilde);
  if (!p_lu.isInvertible()) {
    throw SingularMatrixError("gain_iml: reduced prior block is singular", std::numeric_limits<double>::infinity());
  }
  const Matrix pt_inv_st = p_lu.solve(s_tilde);
  const Matrix inner = s * pt_inv_st + r_inv;
  // K = X inner^-1, computed as (inner^-T X^T)^T; inner is not symmetric when Pxy != 0.
  Eigen::FullPivLU<Matrix> inner_lu(inner.transpose());
  if (!inner_lu.isInvertible()) {
    throw SingularMatrixError("gain_iml: innovation block is singular", std::numeric_limits<double>::infinity());
  }
  return inner_lu.solve(pt_inv_st.transpose()).transpose();
}

/// Joseph-form covariance (I - K S) P (I - K S)^T + K R K^T.
inline Matrix joseph_update(const Matrix& p_pred, const Matrix& gain, const Matrix& s_mat, const Matrix& r) {
  const Eigen::Index n = p_pred.rows();
  const Matrix a = Matrix::Identity(n, n) - gain * s_mat;
  return detail::symmetrized(a * p_pred * a.transpose() + gain * r * gain.transpose());
}

/// Kernel widths in force for one update.
struct ResolvedWidths {
  double sigma1 = 0.0;
  double sigma2 = 0.0;
  double scale = 1.0;  ///< sigma / sigma_max applied to both widths
};

/// Applies the adaptive rule per measurement channel and keeps the narrowest kernel.
/// `r_tilde` holds running estimates of the true noise variances (entries <= 0 mean unknown).
inline ResolvedWidths resolve_widths(const RegressionModel& reg, const KernelParams& params,
                                     const std::optional<Vector>& r_tilde = std::nullopt) {
  ResolvedWidths rw{params.sigma1, params.sigma2, 1.0};
  if (!params.robust || !params.adaptive) return rw;
  double sigma = params.sigma_max;
  for (Eigen::Index i = 0; i < reg.m(); ++i) {
    std::optional<double> ceiling;
    const double r_i = reg.r_eff(i, i);
    if (params.bandwidth_bound && r_tilde && (*r_tilde)[i] > 0.0) {
      // The window sees the whole innovation; its predicted-state share p - r is removed so
      // only the measurement-noise part is compared against the nominal r.
      const double noise_part = (*r_tilde)[i] - (reg.p_yy_diag[i] - r_i);
      const double innov_sq = reg.innovation[i] * reg.innovation[i] / r_i;
      if (noise_part > 0.0) ceiling = sigma_max_bound(noise_part, reg.p_yy_diag[i], r_i, innov_sq);
    }
    sigma = std::min(sigma, adaptive_bandwidth(reg.p_yy_diag[i], reg.innovation[i], params, ceiling));
  }
  rw.scale = sigma / params.sigma_max;
  rw.sigma1 = rw.scale * params.sigma1;
  rw.sigma2 = rw.scale * params.sigma2;
  return rw;
}

inline KernelParams with_widths(KernelParams params, const ResolvedWidths& rw) {
  params.sigma1 = rw.sigma1;
  params.sigma2 = rw.sigma2;
  return params;
}

struct FixedPointResult {
  StateEstimate posterior;
  Matrix gain;
  int iterations = 0;
  bool converged = false;
  bool degenerate = false;  ///< weighted normal matrix singular; posterior is the prior
  Matrix pi;                ///< weighting used for the final iterate (identity for plain CKF)
  ResolvedWidths widths;
};

/// MEEF measurement update: fixed-point iteration on x = (W^T Pi W)^-1 W^T Pi d, then the
/// gain form of the converged solution and a Joseph covariance update.
inline FixedPointResult fixed_point_update(const RegressionModel& reg, const StateEstimate& pred,
                                           const KernelParams& params,
                                           const std::optional<Vector>& r_tilde = std::nullopt) {
  params.validate();
  const Eigen::Index n = reg.n();
  const Eigen::Index big_n = reg.d.size();
  FixedPointResult out;
  out.widths = resolve_widths(reg, params, r_tilde);

  auto finish = [&](const Matrix& pi) {
    out.pi = pi;
    out.gain = gain_normal_form(reg, pi);
    out.posterior.mean = pred.mean + out.gain * reg.innovation;
    out.posterior.cov = joseph_update(pred.cov, out.gain, reg.s_mat, reg.r_eff);
  };

  if (!params.robust) {
    out.iterations = 1;
    out.converged = true;
    finish(Matrix::Identity(big_n, big_n));
    return out;
  }

  const KernelParams active = with_widths(params, out.widths);
  Vector x = pred.mean;
  Matrix pi;
  for (int k = 1; k <= params.fp_max_iter; ++k) {
    const Vector e = reg.d - reg.w * x;
    pi = weight_matrices(e, active).pi;
    const Matrix normal = reg.w.transpose() * pi * reg.w;
    Eigen::LDLT<Matrix> ldlt(normal);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
        (ldlt.vectorD().array().abs() <= 1e-14 * normal.diagonal().cwiseAbs().maxCoeff()).any()) {
      out.degenerate = true;
      out.iterations = k;
      out.posterior = pred;
      out.gain = Matrix::Zero(n, reg.m());
      out.pi = pi;
      return out;
    }
    const Vector next = ldlt.solve(reg.w.transpose() * pi * reg.d);
    out.iterations = k;
    const double base = x.norm();
    const double change = (next - x).norm();
    x = next;
    if (!x.allFinite()) break;
    if (change <= params.fp_tol * (base > 0.0 ? base : 1.0)) {
      out.converged = true;
      break;
    }
  }
  if (!x.allFinite()) {
    out.degenerate = true;
    out.posterior = pred;
    out.gain = Matrix::Zero(n, reg.m());
    out.pi = pi;
    return out;
  }
  try {
    finish(pi);
  } catch (const SingularMatrixError&) {
    out.degenerate = true;
    out.posterior = pred;
    out.gain = Matrix::Zero(n, reg.m());
  }
  return out;
}

/// ||W^T Theta(x) (d - W x)|| / ||W^T Theta(x) d||: how far x is from satisfying the MEEF
/// stationarity condition, with Theta evaluated at the errors of x.
inline double stationarity_residual(const RegressionModel& reg, const Vector& x, const KernelParams& resolved) {
  const Vector e = reg.d - reg.w * x;
  const Matrix theta = weight_matrices(e, resolved).theta;
  const Vector grad = reg.w.transpose() * theta * e;
  const double scale = (reg.w.transpose() * theta * reg.d).norm();
  return grad.norm() / (scale > 0.0 ? scale : 1.0);
}

/// Measurement information matrix Lambda = Xr^-T Pi_yy Xr^-1 / mean(diag Pi_xx).
///
/// Dividing by the prior-block weight keeps the prior at unit weight, so the information-form
/// update P^-1 + S^T Lambda S keeps the same prior/measurement balance as the fixed point.
/// For identity weighting this is R^-1.
inline Matrix measurement_information(const RegressionModel& reg, const Matrix& pi) {
  const Eigen::Index n = reg.n();
  const Eigen::Index m = reg.m();
  const Matrix xr_inv = detail::lower_solve(reg.xi_r, Matrix::Identity(m, m));
  const double prior_weight = pi.topLeftCorner(n, n).diagonal().mean();
  if (!(prior_weight > 0.0)) {
    throw SingularMatrixError("measurement_information: prior block carries no weight", std::numeric_limits<double>::infinity());
  }
  return detail::symmetrized(xr_inv.transpose() * pi.bottomRightCorner(m, m) * xr_inv / prior_weight);
}

/// Information-form posterior: P = (P^-1 + S^T L S)^-1, x = P (P^-1 x_pred + S^T L y) with
/// L the measurement information matrix and y the pseudo-measurement.
inline StateEstimate info_form_update(const StateEstimate& pred, const Matrix& s_mat, const Matrix& meas_info,
                                      const Vector& y) {
  const Eigen::Index n = pred.dim();
  Eigen::LLT<Matrix> prior(detail::symmetrized(pred.cov));
  if (prior.info() != Eigen::Success) {
    throw SingularMatrixError("info_form_update: prior covariance is not positive definite", std::numeric_limits<double>::infinity());
  }
  const Matrix prior_info = prior.solve(Matrix::Identity(n, n));
  const Matrix info = detail::symmetrized(prior_info + s_mat.transpose() * meas_info * s_mat);
  Eigen::LLT<Matrix> post(info);
  if (post.info() != Eigen::Success) {
    throw SingularMatrixError("info_form_update: posterior information is not positive definite", std::numeric_limits<double>::infinity());
  }
  StateEstimate out;
  out.cov = detail::symmetrized(post.solve(Matrix::Identity(n, n)));
  out.mean = post.solve(prior_info * pred.mean + s_mat.transpose() * meas_info * y);
  return out;
}

/// Per-sensor additive statistics D = S^T L y and V = S^T L S.
struct LocalStatistics {
  Vector d;
  Matrix v;
};

inline LocalStatistics local_statistics(const Matrix& s_mat, const Matrix& meas_info, const Vector& y) {
  if (!s_mat.allFinite() || !meas_info.allFinite() || !y.allFinite()) {
    throw ParameterError("local_statistics: non-finite input");
  }
  LocalStatistics ls;
  ls.d = s_mat.transpose() * meas_info * y;
  ls.v = detail::symmetrized(s_mat.transpose() * meas_info * s_mat);
  return ls;
}

/// Posterior from summed statistics: P = (P^-1 + V)^-1, x = P (P^-1 x_pred + D).
inline StateEstimate fuse_statistics(const StateEstimate& pred, const Vector& d_sum, const Matrix& v_sum) {
  const Eigen::Index n = pred.dim();
  Eigen::LLT<Matrix> prior(detail::symmetrized(pred.cov));
  if (prior.info() != Eigen::Success) {
    throw SingularMatrixError("fuse_statistics: prior covariance is not positive definite", std::numeric_limits<double>::infinity());
  }
  const Matrix prior_info = prior.solve(Matrix::Identity(n, n));
  Eigen::LLT<Matrix> post(detail::symmetrized(prior_info + v_sum));
  if (post.info() != Eigen::Success) {
    throw SingularMatrixError("fuse_statistics: fused information is not positive definite", std::numeric_limits<double>::infinity());
  }
  StateEstimate out;
  out.cov = detail::symmetrized(post.solve(Matrix::Identity(n, n)));
  out.mean = post.solve(prior_info * pred.mean + d_sum);
  return out;
}

}  // namespace ameef
