#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "davpt/data.hpp"
#include "davpt/tensor.hpp"
#include "davpt/vit.hpp"

namespace davpt {

/// Running per-class sums of final-layer CLS tokens.
class ClassRepresentations {
 public:
  ClassRepresentations(std::size_t num_classes, std::size_t dim);

  void add(std::size_t cls, std::span<const double> cls_token);
  std::size_t num_classes() const noexcept { return counts_.size(); }
  std::size_t dim() const noexcept { return dim_; }
  std::span<const std::size_t> counts() const noexcept { return counts_; }
  const Tensor& sums() const noexcept { return sums_; }

  /// C x D class means. Throws ContractError naming the first empty class
  /// unless `fallback` (C x D) supplies rows for empty classes.
  Tensor means(const Tensor* fallback = nullptr) const;

 private:
  std::size_t dim_;
  Tensor sums_;
  std::vector<std::size_t> counts_;
};

/// One frozen forward pass over `indices` of `data`, accumulating CLS means.
ClassRepresentations collect_class_representations(const ModelParams& model, const Dataset& data,
                                                   std::span<const std::size_t> indices);

struct KMeansInit {
  enum class Kind { PlusPlus, Warm };
  Kind kind = Kind::PlusPlus;
  std::uint64_t seed = 0;
  Tensor centroids;

  static KMeansInit plus_plus(std::uint64_t seed) { return {Kind::PlusPlus, seed, {}}; }
  static KMeansInit warm(Tensor centroids) { return {Kind::Warm, 0, std::move(centroids)}; }
};

struct KMeansResult {
  std::vector<std::size_t> assignments;
  Tensor centroids;
  std::size_t iterations = 0;
  /// Squared-Euclidean objective after each iteration's centroid update.
  std::vector<double> objective;
};

inline constexpr std::size_t kKMeansMaxIterations = 100;

/// Lloyd's algorithm until the assignment or the centroids stop changing, or
/// 100 iterations. Ties go to the lowest centroid index; an empty cluster
/// takes the point farthest from its centroid. Throws ConfigError if k is 0
/// or exceeds the number of points, NumericError if the objective increases.
KMeansResult kmeans(const Tensor& points, std::size_t k, const KMeansInit& init);

struct PromptAssignment {
  std::vector<std::size_t> class_to_prompt;
  Tensor centroids;            ///< guided x D
  std::size_t num_guided = 0;
  std::size_t num_padding = 0;
  std::size_t iterations = 0;  ///< k-means iterations of the last update

  std::size_t total_prompts() const noexcept { return num_guided + num_padding; }
};

struct PromptPadding {
  std::size_t guided = 0;
  std::size_t padding = 0;
};

/// Few classes (C < 5): one guided prompt per class plus unguided extras up
/// to the requested count. Otherwise min(requested, C) guided, no padding.
PromptPadding pad_prompts(std::size_t num_classes, std::size_t requested);

/// Cold-start mapping: k-means++ with `seed` on class representations S.
PromptAssignment build_mapping(const Tensor& class_means, const PromptPadding& layout, std::uint64_t seed);

/// Warm-started refresh from the previous centroids; with no previous
/// mapping this falls back to build_mapping.
PromptAssignment update_mapping(const Tensor& class_means, const PromptAssignment* previous,
                                const PromptPadding& layout, std::uint64_t seed);

/// Text dump: "class_id<TAB>prompt_id" per class, then
/// "# padding <P>" and "# centroids <M> <D>" followed by M rows.
std::string format_mapping(const PromptAssignment& mapping);
PromptAssignment parse_mapping(const std::string& text);
void save_mapping(const PromptAssignment& mapping, const std::string& path);
PromptAssignment load_mapping(const std::string& path);

}  // namespace davpt
