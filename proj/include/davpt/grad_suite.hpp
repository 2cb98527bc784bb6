#pragma once

#include <string>
#include <vector>

#include "davpt/gradcheck.hpp"

namespace davpt {

struct GradCheckEntry {
  std::string module;
  std::string name;
  GradCheckResult result;
  double tolerance = 0.0;
  bool passed = false;
};

inline constexpr double kGradCheckTolerance = 1e-5;

/// Module names accepted by run_grad_checks besides "all".
std::vector<std::string> grad_check_modules();

/// Central-difference checks (eps = 1e-5) of every taped operation, the
/// attention kernel, the transformer backbone, the metric losses and the full
/// training objective. Throws ConfigError for an unknown module name.
std::vector<GradCheckEntry> run_grad_checks(const std::string& module);

}  // namespace davpt
