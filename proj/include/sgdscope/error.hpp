#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace sgdscope {

/// Base error for everything the library throws. `module()` names the
/// component that raised it so the CLI can print `error: <module>: <what>`.
class Error : public std::runtime_error {
 public:
  Error(std::string module, const std::string& what)
      : std::runtime_error(what), module_(std::move(module)) {}

  const std::string& module() const noexcept { return module_; }

 private:
  std::string module_;
};

/// Raised when a symmetric matrix that must be positive (semi)definite is not.
/// Carries the offending eigenvalue.
class NotPositiveDefiniteError : public Error {
 public:
  NotPositiveDefiniteError(const std::string& what, double eigenvalue)
      : Error("linalg", what), eigenvalue_(eigenvalue) {}

  double eigenvalue() const noexcept { return eigenvalue_; }

 private:
  double eigenvalue_;
};

/// Raised by the integrators when the iterate becomes non-finite or leaves
/// the divergence ball.
class DivergenceError : public Error {
 public:
  explicit DivergenceError(std::int64_t step)
      : Error("engine", "divergence at step " + std::to_string(step)), step_(step) {}

  std::int64_t step() const noexcept { return step_; }

 private:
  std::int64_t step_;
};

}  // namespace sgdscope
