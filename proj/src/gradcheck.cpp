#include "davpt/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "davpt/error.hpp"

namespace davpt {

double evaluate_scalar(const TapedScalarFn& f, const std::vector<Tensor>& params) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const Tensor& p : params) vars.push_back(tape.constant(p));
  const Tensor& out = tape.value(f(tape, vars));
  if (out.numel() != 1) throw ContractError("gradient check function must return a scalar");
  if (!std::isfinite(out[0])) throw NumericError("gradient check function evaluated to a non-finite value");
  return out[0];
}

GradCheckResult finite_diff_check(const TapedScalarFn& f, const std::vector<Tensor>& params, double eps) {
  if (!(eps > 0.0 && eps <= 1e-2)) throw ContractError("finite difference step must lie in (0, 1e-2]");

  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& p : params) vars.push_back(tape.input(p, true));
    Var loss = f(tape, vars);
    if (!std::isfinite(tape.value(loss)[0])) {
      throw NumericError("gradient check function evaluated to a non-finite value");
    }
    tape.backward(loss);
    for (Var v : vars) {
      auto g = tape.grad(v);
      std::vector<double> dense(tape.value(v).numel(), 0.0);
      std::copy(g.begin(), g.end(), dense.begin());
      analytic.push_back(std::move(dense));
    }
  }

  GradCheckResult result;
  for (const auto& g : analytic)
    for (double v : g) result.scale = std::max(result.scale, std::abs(v));
  const double floor = std::max(kGradCheckFloor, kGradCheckScaleFloor * result.scale);
  std::vector<Tensor> work = params;
  for (std::size_t p = 0; p < work.size(); ++p) {
    for (std::size_t i = 0; i < work[p].numel(); ++i) {
      const double saved = work[p][i];
      work[p][i] = saved + eps;
      const double up = evaluate_scalar(f, work);
      work[p][i] = saved - eps;
      const double down = evaluate_scalar(f, work);
      work[p][i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double ad = analytic[p][i];
      const double err = std::abs(numeric - ad) / std::max({std::abs(ad), std::abs(numeric), floor});
      ++result.entries;
      if (err > result.max_rel_error || result.entries == 1) {
        result.max_rel_error = err;
        result.param = p;
        result.index = i;
        result.autodiff = ad;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace davpt
