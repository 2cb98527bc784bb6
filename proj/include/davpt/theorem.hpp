#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "davpt/tensor.hpp"

namespace davpt {

/// One perturbation scale. `exact` comes from recomputing the full softmax.
struct TheoremRow {
  double eps = 0.0;
  double exact = 0.0;     ///< a_i(p + eps u) - a_i(p)
  double approx = 0.0;    ///< a_i (1 - a_i) ds_i
  double cross = 0.0;     ///< a_i * sum_{j != i} a_j ds_j, the neglected term
  double abs_error = 0.0; ///< |exact - approx|
  double rel_error = 0.0; ///< abs_error / |exact| (0 when exact is 0)
  double residual = 0.0;  ///< |exact - approx + cross|, what remains once the cross term is restored
};

struct TheoremRegime {
  bool available = true;
  std::string note;
  std::vector<TheoremRow> rows;
  /// Successive abs_error ratios and their orders log(ratio)/log(eps_k/eps_k+1).
  std::vector<double> error_ratios, error_orders;
  std::vector<double> residual_ratios, residual_orders;
};

struct AttentionResponseReport {
  std::size_t target = 0;
  double attention = 0.0;  ///< a_i before perturbation
  TheoremRegime orthogonal;  ///< u projected orthogonal to every x_j, j != i; cross term zero
  TheoremRegime general;     ///< raw u
};

/// Checks the first-order attention response da_i ~ a_i (1 - a_i) ds_i with
/// scores s_j = p . x_j / sqrt(d). In the orthogonal regime u is projected off
/// span{x_j : j != i} and rescaled so u . x_i / sqrt(d) = 1, making ds_i = eps.
/// Scales must be non-negative and strictly decreasing. When the projection
/// leaves nothing along x_i the orthogonal regime is flagged unavailable.
AttentionResponseReport verify_attention_response(const Tensor& keys, std::span<const double> prompt, std::span<const double> direction,
                               std::span<const double> scales, std::size_t target);

/// Least-attended key under `prompt`; keeps a_i (1 - a_i)(1 - 2 a_i) away from zero.
std::size_t least_attended(const Tensor& keys, std::span<const double> prompt);

struct TheoremDraw {
  Tensor keys;
  std::vector<double> prompt, direction;
};

/// Standard-normal keys (n x d), prompt and direction.
TheoremDraw random_theorem_draw(std::size_t tokens, std::size_t dim, std::uint64_t seed);

inline constexpr double kRatioLow = 3.5, kRatioHigh = 4.5;
inline constexpr double kOrderLow = 1.8, kOrderHigh = 2.2;

/// Orthogonal regime available and every error ratio in [3.5, 4.5].
bool orthogonal_ratios_ok(const AttentionResponseReport& r);
/// Every general-regime residual order in [1.8, 2.2].
bool residual_orders_ok(const AttentionResponseReport& r);

std::string format_theorem_report(const AttentionResponseReport& r);

}  // namespace davpt
