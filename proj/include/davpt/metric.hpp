#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "davpt/autodiff.hpp"
#include "davpt/vit.hpp"

namespace davpt {

enum class CompareSpace { QueryProjected, RawPrompt };

std::string to_string(CompareSpace s);
CompareSpace parse_compare_space(const std::string& name);

struct MetricConfig {
  double delta = 32.0;  ///< margin
  double tau = 10.0;    ///< temperature
  double beta = 0.5;    ///< weight of the token/prompt term
  double lambda = 0.5;  ///< weight of the prompt/CLS term
  /// Layers whose prompts and tokens are guided; empty means the final layer.
  std::vector<std::size_t> guided_layers;
  CompareSpace compare_space = CompareSpace::QueryProjected;
  /// Keep only the k visual tokens per sample with the most CLS attention; 0 keeps all.
  std::size_t saliency_top_k = 0;

  void validate() const;
  std::vector<std::size_t> resolved_layers(std::size_t num_layers) const;
};

/// Named margin/temperature presets: "paper" (delta 32, tau 10) and
/// "proxy_anchor_classic" (delta 0.1, tau 1/32).
void apply_metric_preset(MetricConfig& cfg, const std::string& name);

/// log(1 + sum exp(x_i)), shifted by max(0, max x_i) for stability.
double lse0_plus(std::span<const double> xs);

/// Proxy-Anchor loss with prompts as anchors. `labels[i]` is the prompt id
/// of token i. Prompts and tokens are l2-normalized internally.
///
///   (1/|P+|) sum_{p in P+} LSE0+_{x in X_p+}( -(cos(p,x) - delta) / tau )
/// + (1/|P|)  sum_{p in P}  LSE0+_{x in X_p-}(  (cos(p,x) + delta) / tau )
///
/// P+ holds the prompts with at least one positive token.
Var proxy_anchor_loss(Var prompts, Var tokens, std::span<const std::size_t> labels, double delta, double tau);

/// Same loss with the batch's CLS rows as the labeled token set.
Var cls_prompt_loss(Var prompts, Var cls_tokens, std::span<const std::size_t> prompt_labels, double delta,
                    double tau);

/// Neighborhood component analysis objective over cosine similarity D:
///   -sum_i log( sum_{j in N_i} exp(-D_ij/tau) / sum_{k != i} exp(-D_ik/tau) )
/// `similarity_sign` flips the exponent to exp(+D/tau).
double nca_loss(const Tensor& points, std::span<const std::size_t> labels, double tau,
                bool similarity_sign = false);

/// Fraction of triples (p_k, x_i, x_j) with label(x_i) = k != label(x_j)
/// satisfying cos(p_k, x_i) - delta >= cos(p_k, x_j) + delta. 1 when no
/// triple exists.
double margin_satisfaction(const Tensor& prompts, const Tensor& tokens, std::span<const std::size_t> labels,
                           double delta);

/// ce + beta * l_xp + lambda * l_pc.
Var total_loss(Var ce, Var l_xp, Var l_pc, double beta, double lambda);

struct GuidanceInputs {
  Var prompts;                      ///< guided prompts in the comparison space
  Var tokens;                       ///< selected visual-token rows
  std::vector<std::size_t> labels;  ///< prompt id of each token row
};

/// Picks the comparison vectors at `layer`: the first `guided_prompts`
/// prompts (query-projected or raw) and the post-attention visual tokens,
/// each labeled with its sample's prompt id.
GuidanceInputs select_guidance_inputs(const ForwardResult& forward, std::size_t layer, const MetricConfig& cfg,
                                      std::span<const std::size_t> sample_prompt_labels,
                                      std::size_t guided_prompts);

}  // namespace davpt
