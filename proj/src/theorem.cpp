#include "davpt/theorem.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "davpt/error.hpp"
#include "davpt/rng.hpp"

namespace davpt {

namespace {

double dotp(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

std::vector<double> scores(const Tensor& keys, std::span<const double> p) {
  const double inv = 1.0 / std::sqrt(static_cast<double>(keys.cols()));
  std::vector<double> s(keys.rows());
  for (std::size_t j = 0; j < s.size(); ++j) s[j] = dotp(keys.row(j), p) * inv;
  return s;
}

std::vector<double> softmax(std::vector<double> s) {
  double m = s[0];
  for (double v : s) m = std::max(m, v);
  double z = 0.0;
  for (double& v : s) {
    v = std::exp(v - m);
    z += v;
  }
  for (double& v : s) v /= z;
  return s;
}

void fill_ratios(TheoremRegime& r) {
  for (std::size_t k = 0; k + 1 < r.rows.size(); ++k) {
    const TheoremRow& a = r.rows[k];
    const TheoremRow& b = r.rows[k + 1];
    if (!(b.eps > 0.0)) continue;
    const double step = std::log(a.eps / b.eps);
    const double er = a.abs_error / b.abs_error;
    const double rr = a.residual / b.residual;
    r.error_ratios.push_back(er);
    r.error_orders.push_back(std::log(er) / step);
    r.residual_ratios.push_back(rr);
    r.residual_orders.push_back(std::log(rr) / step);
  }
}

TheoremRegime run_regime(const Tensor& keys, std::span<const double> p, std::span<const double> u,
                         std::span<const double> scales, std::size_t i) {
  TheoremRegime out;
  const std::vector<double> a = softmax(scores(keys, p));
  const std::vector<double> ds = scores(keys, u);  // score change per unit eps
  const std::size_t d = p.size();
  for (double eps : scales) {
    std::vector<double> shifted(d);
    for (std::size_t k = 0; k < d; ++k) shifted[k] = p[k] + eps * u[k];
    const std::vector<double> a2 = softmax(scores(keys, shifted));
    TheoremRow row;
    row.eps = eps;
    row.exact = a2[i] - a[i];
    row.approx = a[i] * (1.0 - a[i]) * eps * ds[i];
    double others = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j)
      if (j != i) others += a[j] * eps * ds[j];
    row.cross = a[i] * others;
    row.abs_error = std::abs(row.exact - row.approx);
    row.rel_error = row.exact != 0.0 ? row.abs_error / std::abs(row.exact) : 0.0;
    row.residual = std::abs(row.exact - row.approx + row.cross);
    out.rows.push_back(row);
  }
  fill_ratios(out);
  return out;
}

}  // namespace

std::size_t least_attended(const Tensor& keys, std::span<const double> prompt) {
  const std::vector<double> a = softmax(scores(keys, prompt));
  std::size_t best = 0;
  for (std::size_t j = 1; j < a.size(); ++j)
    if (a[j] < a[best]) best = j;
  return best;
}

AttentionResponseReport verify_attention_response(const Tensor& keys, std::span<const double> prompt, std::span<const double> direction,
                               std::span<const double> scales, std::size_t target) {
  const std::size_t n = keys.rows(), d = keys.cols();
  if (keys.rank() != 2 || n == 0) throw ContractError("verify_attention_response: keys must be a nonempty n x d matrix");
  if (prompt.size() != d || direction.size() != d) {
    throw ContractError("verify_attention_response: prompt and direction must have length " + std::to_string(d));
  }
  if (target >= n) throw ContractError("verify_attention_response: target token out of range");
  if (scales.empty()) throw ContractError("verify_attention_response: no scales given");
  for (std::size_t k = 0; k < scales.size(); ++k) {
    if (!(scales[k] >= 0.0) || !std::isfinite(scales[k])) throw ContractError("verify_attention_response: scales must be >= 0");
    if (k > 0 && !(scales[k] < scales[k - 1])) throw ContractError("verify_attention_response: scales must strictly decrease");
  }

  AttentionResponseReport report;
  report.target = target;
  report.attention = softmax(scores(keys, prompt))[target];
  report.general = run_regime(keys, prompt, direction, scales, target);

  // Gram-Schmidt basis of span{x_j : j != target}, then strip it from u.
  std::vector<std::vector<double>> basis;
  for (std::size_t j = 0; j < n; ++j) {
    if (j == target) continue;
    std::vector<double> v(keys.row(j).begin(), keys.row(j).end());
    const double norm0 = std::sqrt(dotp(v, v));
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& b : basis) {
        const double c = dotp(v, b);
        for (std::size_t k = 0; k < d; ++k) v[k] -= c * b[k];
      }
    const double norm = std::sqrt(dotp(v, v));
    if (norm <= 1e-10 * std::max(norm0, 1.0)) continue;
    for (double& x : v) x /= norm;
    basis.push_back(std::move(v));
  }
  std::vector<double> u(direction.begin(), direction.end());
  for (int pass = 0; pass < 2; ++pass)
    for (const auto& b : basis) {
      const double c = dotp(u, b);
      for (std::size_t k = 0; k < d; ++k) u[k] -= c * b[k];
    }
  const double along = dotp(u, keys.row(target)) / std::sqrt(static_cast<double>(d));
  const double scale_ref = std::sqrt(dotp(direction, direction) * dotp(keys.row(target), keys.row(target)) /
                                     static_cast<double>(d));
  if (basis.size() >= d || !(std::abs(along) > 1e-8 * scale_ref)) {
    report.orthogonal.available = false;
    report.orthogonal.note = "the other keys span the space along the target; no orthogonal direction exists";
    return report;
  }
  for (double& x : u) x /= along;
  report.orthogonal = run_regime(keys, prompt, u, scales, target);
  return report;
}

TheoremDraw random_theorem_draw(std::size_t tokens, std::size_t dim, std::uint64_t seed) {
  if (tokens == 0 || dim == 0) throw ConfigError("theorem draw needs at least one token and one dimension");
  Rng rng(Rng::derive(seed, 0x7E0));
  TheoremDraw draw;
  draw.keys = Tensor({tokens, dim});
  for (double& v : draw.keys.values()) v = rng.normal();
  draw.prompt.resize(dim);
  draw.direction.resize(dim);
  for (double& v : draw.prompt) v = rng.normal();
  for (double& v : draw.direction) v = rng.normal();
  return draw;
}

bool orthogonal_ratios_ok(const AttentionResponseReport& r) {
  if (!r.orthogonal.available || r.orthogonal.error_ratios.empty()) return false;
  for (double x : r.orthogonal.error_ratios)
    if (!(x >= kRatioLow && x <= kRatioHigh)) return false;
  return true;
}

bool residual_orders_ok(const AttentionResponseReport& r) {
  if (r.general.residual_orders.empty()) return false;
  for (double x : r.general.residual_orders)
    if (!(x >= kOrderLow && x <= kOrderHigh)) return false;
  return true;
}

std::string format_theorem_report(const AttentionResponseReport& r) {
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "target token %zu, a_i = %.6f\n", r.target, r.attention);
  os << buf;
  auto regime = [&](const char* name, const TheoremRegime& g) {
    os << "regime " << name;
    if (!g.available) {
      os << ": unavailable (" << g.note << ")\n";
      return;
    }
    os << "\n  eps          exact_da        approx          cross_term      abs_error       rel_error  residual\n";
    for (const TheoremRow& row : g.rows) {
      std::snprintf(buf, sizeof buf, "  %-11.4e  %+.8e  %+.8e  %+.8e  %.6e  %.3e  %.6e\n", row.eps, row.exact,
                    row.approx, row.cross, row.abs_error, row.rel_error, row.residual);
      os << buf;
    }
    for (std::size_t k = 0; k < g.error_ratios.size(); ++k) {
      std::snprintf(buf, sizeof buf, "  halving %zu: error ratio %.4f (order %.4f), residual ratio %.4f (order %.4f)\n",
                    k + 1, g.error_ratios[k], g.error_orders[k], g.residual_ratios[k], g.residual_orders[k]);
      os << buf;
    }
  };
  regime("(a) orthogonal", r.orthogonal);
  regime("(b) general", r.general);
  return os.str();
}

}  // namespace davpt
