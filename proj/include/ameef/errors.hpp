#pragma once

#include <stdexcept>
#include <string>

namespace ameef {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid argument or configuration value (non-positive width, bad mixture weights, ...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// A factorization or inversion failed even after regularization.
class SingularMatrixError : public Error {
 public:
  SingularMatrixError(const std::string& what, double condition_estimate)
      : Error(what), condition_estimate_(condition_estimate) {}

  double condition_estimate() const noexcept { return condition_estimate_; }

 private:
  double condition_estimate_;
};

/// A user model (f or h) produced a non-finite value.
class ModelError : public Error {
 public:
  using Error::Error;
};

/// Graph structure cannot support leader-follower average consensus.
class TopologyError : public Error {
 public:
  using Error::Error;
};

/// Consensus step size violates the convergence bound.
class StepSizeError : public Error {
 public:
  using Error::Error;
};

/// Push-Sum state left its admissible region (non-positive weight after being informed).
class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// Unknown preset, variant or other name lookup.
class LookupError : public Error {
 public:
  using Error::Error;
};

/// Scenario file or CLI input that cannot be interpreted. Carries the offending location.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace ameef
