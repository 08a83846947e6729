#pragma once

// Cauchy-kernel MEEF weighting: kernel, costs, fixed-point weight matrices and the
// innovation-driven bandwidth rule.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <optional>
#include <string>

#include <Eigen/Dense>

#include "ameef/errors.hpp"

namespace ameef {

/// How the fixed-point normal equations are weighted.
enum class PiForm {
  theta,  ///< Pi := Theta, the weighting that solves the stationarity condition
  eq39,   ///< eta1*Omega + eta2*(Phi^T Phi + Psi^T Psi), kept for literature comparison
};

struct KernelParams {
  /// false: identity weighting (plain CKF). true: MEEF weighting.
  bool robust = true;
  double eta = 0.5;     ///< 1 -> pure correntropy, 0 -> pure error entropy
  double sigma1 = 4.0;  ///< fiducial-point kernel width at full bandwidth
  double sigma2 = 4.0;  ///< pairwise kernel width at full bandwidth
  double sigma_min = 0.04;
  double sigma_max = 4.0;
  bool adaptive = false;
  double fp_tol = 1e-10;
  int fp_max_iter = 20;
  PiForm pi_form = PiForm::theta;
  /// Window length for the running estimate of the true measurement-noise variance.
  std::size_t r_tilde_window = 20;
  /// Cap the adaptive width by sigma_max_bound once the noise window is full.
  bool bandwidth_bound = false;

  void validate() const {
    if (!(eta >= 0.0 && eta <= 1.0)) throw ParameterError("eta must lie in [0, 1]");
    if (!(sigma1 > 0.0) || !(sigma2 > 0.0)) throw ParameterError("kernel widths must be positive");
    if (!(sigma_min > 0.0) || !(sigma_max > 0.0)) throw ParameterError("bandwidth limits must be positive");
    if (sigma_min > sigma_max) throw ParameterError("sigma_min exceeds sigma_max");
    if (!(fp_tol > 0.0)) throw ParameterError("fixed-point tolerance must be positive");
    if (fp_max_iter < 1) throw ParameterError("fixed-point iteration cap must be >= 1");
  }
};

/// C_sigma(e) = 1 / (1 + e^2 / sigma).
inline double cauchy_kernel(double e, double sigma) {
  if (!(sigma > 0.0)) throw ParameterError("Cauchy kernel width must be positive");
  return 1.0 / (1.0 + e * e / sigma);
}

/// eta * sum_j C_s1(e_j) + (1 - eta) * sum_i sum_j C_s2(e_j - e_i)
inline double meef_cost(const Eigen::VectorXd& errors, const KernelParams& params) {
  if (errors.size() == 0) throw ParameterError("meef_cost needs at least one error");
  const Eigen::Index n = errors.size();
  double fiducial = 0.0;
  double pairwise = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    fiducial += cauchy_kernel(errors[j], params.sigma1);
    for (Eigen::Index i = 0; i < n; ++i) pairwise += cauchy_kernel(errors[j] - errors[i], params.sigma2);
  }
  return params.eta * fiducial + (1.0 - params.eta) * pairwise;
}

/// Robust loss whose exact gradient with respect to the error vector is Theta * e.
///
/// Each kernel term contributes the log-Cauchy potential rho(e) = (sigma / 2) ln(1 + e^2 / sigma),
/// for which rho'(e) = e * C_sigma(e). Minimizing this loss over x (with e = d - W x) therefore
/// leads to exactly W^T Theta (d - W x) = 0, the condition the fixed-point iteration solves.
inline double meef_loss(const Eigen::VectorXd& errors, const KernelParams& params) {
  if (errors.size() == 0) throw ParameterError("meef_loss needs at least one error");
  params.validate();
  const double eta1 = params.eta / (params.sigma1 * params.sigma1);
  const double eta2 = (1.0 - params.eta) / (params.sigma2 * params.sigma2);
  auto rho = [](double e, double s) { return 0.5 * s * std::log1p(e * e / s); };
  double fiducial = 0.0;
  double pairwise = 0.0;
  const Eigen::Index n = errors.size();
  for (Eigen::Index j = 0; j < n; ++j) {
    fiducial += rho(errors[j], params.sigma1);
    for (Eigen::Index i = 0; i < j; ++i) pairwise += rho(errors[j] - errors[i], params.sigma2);
  }
  return eta1 * fiducial + eta2 * pairwise;
}

struct WeightMatrices {
  Eigen::VectorXd omega;  ///< diagonal of Omega
  Eigen::VectorXd phi;    ///< diagonal of Phi (row sums of Psi)
  Eigen::MatrixXd psi;
  Eigen::MatrixXd theta;
  Eigen::MatrixXd pi;
  double eta1 = 0.0;
  double eta2 = 0.0;
};

/// Builds Omega, Phi, Psi, Theta and the fixed-point weighting Pi for the given errors.
/// Widths are taken as-is from params; any adaptive rescaling is resolved by the caller.
inline WeightMatrices weight_matrices(const Eigen::VectorXd& errors, const KernelParams& params) {
  if (errors.size() == 0) throw ParameterError("weight_matrices needs at least one error");
  params.validate();
  const Eigen::Index n = errors.size();
  WeightMatrices w;
  w.eta1 = params.eta / (params.sigma1 * params.sigma1);
  w.eta2 = (1.0 - params.eta) / (params.sigma2 * params.sigma2);
  w.omega.resize(n);
  w.psi.resize(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    w.omega[i] = cauchy_kernel(errors[i], params.sigma1);
    for (Eigen::Index j = 0; j < n; ++j) w.psi(i, j) = cauchy_kernel(errors[j] - errors[i], params.sigma2);
  }
  w.phi = w.psi.rowwise().sum();

  Eigen::MatrixXd laplacian = -w.psi;
  laplacian.diagonal() += w.phi;
  w.theta = w.eta2 * laplacian;
  w.theta.diagonal() += w.eta1 * w.omega;

  if (params.pi_form == PiForm::theta) {
    w.pi = w.theta;
  } else {
    w.pi = w.eta2 * (Eigen::MatrixXd(w.phi.asDiagonal()) * w.phi.asDiagonal() + w.psi.transpose() * w.psi);
    w.pi.diagonal() += w.eta1 * w.omega;
  }
  return w;
}

/// sigma = phi * sigma_max with phi = 1 - exp(-p / innovation^2), clamped to [sigma_min, sigma_max].
/// `ceiling` overrides params.sigma_max as the upper limit.
inline double adaptive_bandwidth(double p_yy_diag, double innovation, const KernelParams& params,
                                 std::optional<double> ceiling = std::nullopt) {
  if (!std::isfinite(p_yy_diag) || !std::isfinite(innovation)) {
    throw ParameterError("adaptive_bandwidth: non-finite input");
  }
  if (!(p_yy_diag > 0.0)) throw ParameterError("adaptive_bandwidth: predicted variance must be positive");
  const double top = std::clamp(ceiling.value_or(params.sigma_max), params.sigma_min, params.sigma_max);
  if (innovation == 0.0) return top;
  const double phi = -std::expm1(-p_yy_diag / (innovation * innovation));
  return std::clamp(phi * top, params.sigma_min, top);
}

/// Upper bound on the kernel width below which the MEEF filter beats the MMSE filter, or
/// nullopt when the bound is vacuous (denominator <= 0).
inline std::optional<double> sigma_max_bound(double r_tilde, double p, double r, double innovation_norm_sq) {
  if (!(r > 0.0)) throw ParameterError("sigma_max_bound: nominal variance must be positive");
  const double q = (r_tilde - (p - r)) / (2.0 * r) - 1.0;
  if (!(q > 0.0)) return std::nullopt;
  return innovation_norm_sq / q;
}

/// Sliding-window sample variance of one innovation channel; stands in for the unknown
/// true measurement-noise variance.
class InnovationWindow {
 public:
  explicit InnovationWindow(std::size_t length = 20) : length_(length) {}

  void push(double innovation) {
    samples_.push_back(innovation);
    if (samples_.size() > length_) samples_.pop_front();
  }

  bool full() const { return length_ > 1 && samples_.size() == length_; }

  /// Unbiased sample variance; nullopt until the window is full.
  std::optional<double> variance() const {
    if (!full()) return std::nullopt;
    double mean = 0.0;
    for (double v : samples_) mean += v;
    mean /= static_cast<double>(samples_.size());
    double acc = 0.0;
    for (double v : samples_) acc += (v - mean) * (v - mean);
    return acc / static_cast<double>(samples_.size() - 1);
  }

 private:
  std::size_t length_;
  std::deque<double> samples_;
};

}  // namespace ameef
