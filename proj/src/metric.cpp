#include "davpt/metric.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "davpt/error.hpp"

namespace davpt {

std::string to_string(CompareSpace s) { return s == CompareSpace::RawPrompt ? "raw_prompt" : "query_projected"; }

CompareSpace parse_compare_space(const std::string& name) {
  if (name == "query_projected") return CompareSpace::QueryProjected;
  if (name == "raw_prompt") return CompareSpace::RawPrompt;
  throw ConfigError("unknown compare space '" + name + "' (expected query_projected or raw_prompt)");
}

void MetricConfig::validate() const {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("tau must be positive");
  if (!(beta >= 0.0) || !(lambda >= 0.0) || !std::isfinite(beta) || !std::isfinite(lambda)) {
    throw ConfigError("beta and lambda must be finite and non-negative");
  }
  if (!std::isfinite(delta)) throw ConfigError("delta must be finite");
}

std::vector<std::size_t> MetricConfig::resolved_layers(std::size_t num_layers) const {
  if (guided_layers.empty()) return {num_layers - 1};
  for (std::size_t l : guided_layers)
    if (l >= num_layers) {
      throw ConfigError("guided layer " + std::to_string(l) + " out of range for " + std::to_string(num_layers) +
                        " layers");
    }
  return guided_layers;
}

void apply_metric_preset(MetricConfig& cfg, const std::string& name) {
  if (name == "paper") {
    cfg.delta = 32.0;
    cfg.tau = 10.0;
  } else if (name == "proxy_anchor_classic") {
    cfg.delta = 0.1;
    cfg.tau = 1.0 / 32.0;
  } else {
    throw ConfigError("unknown metric preset '" + name + "'");
  }
}

double lse0_plus(std::span<const double> xs) {
  double m = 0.0;
  for (double x : xs) m = std::max(m, x);
  double s = std::exp(-m);
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

Var proxy_anchor_loss(Var prompts, Var tokens, std::span<const std::size_t> labels, double delta, double tau) {
  Tape& tape = *prompts.tape;
  const Tensor& pv = tape.value(prompts);
  const Tensor& xv = tape.value(tokens);
  if (pv.cols() != xv.cols()) {
    throw ContractError("proxy_anchor_loss: prompt width " + std::to_string(pv.cols()) + " vs token width " +
                        std::to_string(xv.cols()));
  }
  if (labels.size() != xv.rows()) {
    throw ContractError("proxy_anchor_loss: " + std::to_string(labels.size()) + " labels for " +
                        std::to_string(xv.rows()) + " tokens");
  }
  if (!(tau > 0.0)) throw ContractError("proxy_anchor_loss: tau must be positive");
  const std::size_t m = pv.rows(), n = xv.rows();
  std::vector<unsigned char> pos(m * n), neg(m * n);
  std::vector<double> pos_weight(m, 0.0);
  std::size_t positives = 0;
  for (std::size_t k = 0; k < m; ++k) {
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) {
      if (labels[i] >= m) {
        throw ContractError("proxy_anchor_loss: token label " + std::to_string(labels[i]) + " outside [0, " +
                            std::to_string(m) + ")");
      }
      const bool same = labels[i] == k;
      pos[k * n + i] = same;
      neg[k * n + i] = !same;
      any = any || same;
    }
    if (any) {
      pos_weight[k] = 1.0;
      ++positives;
    }
  }
  if (positives > 0)
    for (double& w : pos_weight) w /= static_cast<double>(positives);

  Var sim = matmul_nt(l2_normalize_rows(prompts), l2_normalize_rows(tokens));
  Var pos_terms = masked_lse0_plus_rows(add_scalar(scale(sim, -1.0 / tau), delta / tau), std::move(pos));
  Var neg_terms = masked_lse0_plus_rows(add_scalar(scale(sim, 1.0 / tau), delta / tau), std::move(neg));
  return add(weighted_sum(pos_terms, std::move(pos_weight)),
             weighted_sum(neg_terms, std::vector<double>(m, 1.0 / static_cast<double>(m))));
}

Var cls_prompt_loss(Var prompts, Var cls_tokens, std::span<const std::size_t> prompt_labels, double delta,
                    double tau) {
  return proxy_anchor_loss(prompts, cls_tokens, prompt_labels, delta, tau);
}

namespace {

std::vector<double> normalized_rows(const Tensor& t) {
  std::vector<double> out(t.values().begin(), t.values().end());
  const std::size_t c = t.cols();
  for (std::size_t r = 0; r < t.rows(); ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < c; ++j) ss += out[r * c + j] * out[r * c + j];
    const double norm = std::sqrt(ss);
    if (norm < kNormEpsilon) continue;
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] /= norm;
  }
  return out;
}

double log_sum_exp(std::span<const double> xs) {
  const double m = *std::max_element(xs.begin(), xs.end());
  double s = 0.0;
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace

double nca_loss(const Tensor& points, std::span<const std::size_t> labels, double tau, bool similarity_sign) {
  const std::size_t n = points.rows(), c = points.cols();
  if (n < 2) throw ContractError("nca_loss needs at least two points");
  if (labels.size() != n) throw ContractError("nca_loss: label count does not match point count");
  if (!(tau > 0.0)) throw ContractError("nca_loss: tau must be positive");
  const std::vector<double> x = normalized_rows(points);
  const double sign = similarity_sign ? 1.0 : -1.0;
  double loss = 0.0;
  std::vector<double> num, den;
  for (std::size_t i = 0; i < n; ++i) {
    num.clear();
    den.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double d = 0.0;
      for (std::size_t k = 0; k < c; ++k) d += x[i * c + k] * x[j * c + k];
      const double e = sign * d / tau;
      den.push_back(e);
      if (labels[j] == labels[i]) num.push_back(e);
    }
    if (num.empty()) throw ContractError("nca_loss: point " + std::to_string(i) + " has no same-class neighbor");
    loss -= log_sum_exp(num) - log_sum_exp(den);
  }
  return loss;
}

double margin_satisfaction(const Tensor& prompts, const Tensor& tokens, std::span<const std::size_t> labels,
                           double delta) {
  if (prompts.numel() == 0 || tokens.numel() == 0) return 1.0;
  const std::size_t m = prompts.rows(), n = tokens.rows(), c = prompts.cols();
  if (tokens.cols() != c) throw ContractError("margin_satisfaction: prompt and token widths differ");
  if (labels.size() != n) throw ContractError("margin_satisfaction: label count does not match token count");
  const std::vector<double> p = normalized_rows(prompts);
  const std::vector<double> x = normalized_rows(tokens);
  std::uint64_t satisfied = 0, total = 0;
  std::vector<double> pos_sims, neg_sims;
  for (std::size_t k = 0; k < m; ++k) {
    pos_sims.clear();
    neg_sims.clear();
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) s += p[k * c + j] * x[i * c + j];
      (labels[i] == k ? pos_sims : neg_sims).push_back(s);
    }
    if (pos_sims.empty() || neg_sims.empty()) continue;
    total += static_cast<std::uint64_t>(pos_sims.size()) * neg_sims.size();
    // s_j + delta is monotone in s_j, so the satisfied negatives form a prefix.
    std::sort(neg_sims.begin(), neg_sims.end());
    for (double si : pos_sims) {
      const double lhs = si - delta;
      auto it = std::partition_point(neg_sims.begin(), neg_sims.end(), [&](double sj) { return lhs >= sj + delta; });
      satisfied += static_cast<std::uint64_t>(it - neg_sims.begin());
    }
  }
  if (total == 0) return 1.0;
  return static_cast<double>(satisfied) / static_cast<double>(total);
}

Var total_loss(Var ce, Var l_xp, Var l_pc, double beta, double lambda) {
  return add(add(ce, scale(l_xp, beta)), scale(l_pc, lambda));
}

GuidanceInputs select_guidance_inputs(const ForwardResult& forward, std::size_t layer, const MetricConfig& cfg,
                                      std::span<const std::size_t> sample_prompt_labels,
                                      std::size_t guided_prompts) {
  const LayerTrace* tr = forward.trace(layer);
  if (tr == nullptr) throw ContractError("guided layer " + std::to_string(layer) + " was not traced");
  if (sample_prompt_labels.size() != forward.batch) {
    throw ContractError("select_guidance_inputs: one prompt label per sample required");
  }
  if (guided_prompts == 0 || tr->prompt_count < guided_prompts) {
    throw ContractError("layer " + std::to_string(layer) + " carries " + std::to_string(tr->prompt_count) +
                        " prompts, " + std::to_string(guided_prompts) + " guided prompts requested");
  }
  Tape& tape = *tr->tokens.tape;
  GuidanceInputs out;
  Var bank = cfg.compare_space == CompareSpace::QueryProjected ? tr->query_prompts : tr->prompts;
  out.prompts = guided_prompts == tr->prompt_count ? bank : slice_rows(bank, 0, guided_prompts);

  const std::size_t n = tape.value(tr->tokens).rows() / forward.batch;
  if (cfg.saliency_top_k == 0 || cfg.saliency_top_k >= n) {
    out.tokens = tr->tokens;
    out.labels.reserve(forward.batch * n);
    for (std::size_t s = 0; s < forward.batch; ++s) out.labels.insert(out.labels.end(), n, sample_prompt_labels[s]);
    return out;
  }

  // Rank visual tokens by head-averaged attention from the CLS row.
  const std::size_t seq = tr->seq_len, m = tr->prompt_count;
  const std::size_t heads = tr->attention.size() / (forward.batch * seq * seq);
  std::vector<RowRef> rows;
  std::vector<double> mass(n);
  std::vector<std::size_t> order(n);
  for (std::size_t s = 0; s < forward.batch; ++s) {
    std::fill(mass.begin(), mass.end(), 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
      const double* cls_row = tr->attention.data() + ((s * heads + h) * seq) * seq;
      for (std::size_t i = 0; i < n; ++i) mass[i] += cls_row[1 + m + i];
    }
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return mass[a] > mass[b]; });
    for (std::size_t r = 0; r < cfg.saliency_top_k; ++r) {
      rows.push_back({tr->tokens, s * n + order[r]});
      out.labels.push_back(sample_prompt_labels[s]);
    }
  }
  out.tokens = gather_rows(rows);
  return out;
}

}  // namespace davpt
