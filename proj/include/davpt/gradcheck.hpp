#pragma once

#include <functional>
#include <span>
#include <vector>

#include "davpt/autodiff.hpp"

namespace davpt {

/// Builds a scalar on `tape` from leaves standing in for the parameters.
using TapedScalarFn = std::function<Var(Tape& tape, std::span<const Var> params)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t param = 0;   ///< index of the worst parameter tensor
  std::size_t index = 0;   ///< flat index of the worst entry within it
  double autodiff = 0.0;
  double numeric = 0.0;
  std::size_t entries = 0;
  double scale = 0.0;  ///< largest |autodiff| entry over all parameters
};

/// Relative errors are |numeric - autodiff| / max(|autodiff|, |numeric|, floor)
/// with floor = max(kGradCheckFloor, kGradCheckScaleFloor * scale). Entries far
/// below the gradient's overall magnitude (structural zeros such as the key
/// bias, saturated exponentials) are compared against that scale instead of
/// their own size, where central-difference rounding would dominate.
inline constexpr double kGradCheckFloor = 1e-8;
inline constexpr double kGradCheckScaleFloor = 1e-3;

/// Compares autodiff gradients of f against central differences
/// (f(x + eps e) - f(x - eps e)) / 2 eps for every entry of every parameter.
GradCheckResult finite_diff_check(const TapedScalarFn& f, const std::vector<Tensor>& params, double eps = 1e-5);

/// Evaluates f once without gradients.
double evaluate_scalar(const TapedScalarFn& f, const std::vector<Tensor>& params);

}  // namespace davpt
