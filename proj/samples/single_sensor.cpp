// Tracks a constant-velocity target with one sensor whose noise contains outliers, comparing
// the plain CKF update with the adaptive MEEF update.

#include <cmath>
#include <cstdio>

#include "ameef/ckf.hpp"
#include "ameef/noise.hpp"

int main() {
  using namespace ameef;
  const double dt = 0.3;
  Matrix f = Matrix::Identity(4, 4);
  f(0, 2) = dt;
  f(1, 3) = dt;
  Matrix h(2, 4);
  h << 1, 0, 0, 0, 0, 1, 0, 0;
  const Matrix q = Eigen::Vector4d(0.01, 0.01, 1.0, 1.0).asDiagonal();
  const SystemModel model = linear_model(f, h, q, 1e-2 * Matrix::Identity(2, 2));
  const NoiseSpec noise = NoiseSpec::mixture({{0.9, 0.0, 1e-2}, {0.1, 0.0, 25.0}});

  KernelParams plain;
  plain.robust = false;
  KernelParams robust;
  robust.adaptive = true;

  Rng rng = make_stream(42, 0);
  Vector x(4);
  x << 0, 0, 5, 5;
  StateEstimate a{Vector::Ones(4), Eigen::Vector4d(900, 900, 4, 4).asDiagonal()};
  StateEstimate b = a;
  double err_a = 0.0, err_b = 0.0;
  const int steps = 300;
  for (int t = 0; t < steps; ++t) {
    x = f * x + robust_cholesky(q).lower * sample(NoiseSpec::gaussian(0.0, 1.0), rng, 4);
    const Vector y = h * x + sample(noise, rng, 2);
    for (auto [est, params] : {std::pair{&a, &plain}, std::pair{&b, &robust}}) {
      const StateEstimate pred = predict(*est, model);
      const RegressionModel reg = build_regression(pred, y, measurement_moments(pred, model), model);
      *est = fixed_point_update(reg, pred, *params).posterior;
    }
    err_a += (a.mean.head(2) - x.head(2)).squaredNorm();
    err_b += (b.mean.head(2) - x.head(2)).squaredNorm();
  }
  std::printf("position RMSE  CKF %.4f   adaptive MEEF %.4f\n", std::sqrt(err_a / steps), std::sqrt(err_b / steps));
  return 0;
}
