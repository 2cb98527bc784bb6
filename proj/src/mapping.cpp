#include "davpt/mapping.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "davpt/checkpoint.hpp"
#include "davpt/error.hpp"
#include "davpt/rng.hpp"

namespace davpt {

ClassRepresentations::ClassRepresentations(std::size_t num_classes, std::size_t dim)
    : dim_(dim), sums_({num_classes, dim}), counts_(num_classes, 0) {}

void ClassRepresentations::add(std::size_t cls, std::span<const double> cls_token) {
  if (cls >= counts_.size()) throw ContractError("class " + std::to_string(cls) + " out of range");
  if (cls_token.size() != dim_) throw DimensionError("class token width does not match representations");
  auto row = sums_.row(cls);
  for (std::size_t j = 0; j < dim_; ++j) row[j] += cls_token[j];
  ++counts_[cls];
}

Tensor ClassRepresentations::means(const Tensor* fallback) const {
  Tensor out({counts_.size(), dim_});
  for (std::size_t c = 0; c < counts_.size(); ++c) {
    if (counts_[c] == 0) {
      if (fallback == nullptr) throw ContractError("class " + std::to_string(c) + " has no samples");
      std::copy_n(fallback->row(c).begin(), dim_, out.row(c).begin());
      continue;
    }
    for (std::size_t j = 0; j < dim_; ++j) out.at(c, j) = sums_.at(c, j) / static_cast<double>(counts_[c]);
  }
  return out;
}

ClassRepresentations collect_class_representations(const ModelParams& model, const Dataset& data,
                                                   std::span<const std::size_t> indices) {
  ClassRepresentations reps(model.config.num_classes, model.config.embed_dim);
  constexpr std::size_t chunk = 64;
  for (std::size_t start = 0; start < indices.size(); start += chunk) {
    const auto part = indices.subspan(start, std::min(chunk, indices.size() - start));
    Tape tape;
    BoundModel bound = bind_frozen(tape, model);
    const auto imgs = data.images(part);
    ForwardResult fr = forward_model(tape, bound, imgs, {});
    const Tensor& cls = tape.value(fr.cls);
    for (std::size_t s = 0; s < part.size(); ++s) reps.add(data.labels[part[s]], cls.row(s));
  }
  // Validate that every class was seen.
  reps.means();
  return reps;
}

namespace {

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    const double e = a[j] - b[j];
    s += e * e;
  }
  return s;
}

// Greedy k-means++: each step samples 2 + floor(ln k) candidates by D^2 and
// keeps the one that lowers the potential most.
Tensor plus_plus_seeds(const Tensor& points, std::size_t k, std::uint64_t seed) {
  const std::size_t n = points.rows(), d = points.cols();
  Rng rng(Rng::derive(seed, 0xC1A5));
  const std::size_t trials = 2 + static_cast<std::size_t>(std::log(static_cast<double>(k)));
  std::vector<std::size_t> chosen{static_cast<std::size_t>(rng.below(n))};
  std::vector<double> nearest(n);
  for (std::size_t i = 0; i < n; ++i) nearest[i] = sq_dist(points.row(i), points.row(chosen[0]));
  std::vector<double> with(n), best_with(n);
  while (chosen.size() < k) {
    double total = 0.0;
    for (double v : nearest) total += v;
    if (!(total > 0.0)) {
      // Every point coincides with a seed; take unused indices in order.
      for (std::size_t i = 0; i < n && chosen.size() < k; ++i)
        if (std::find(chosen.begin(), chosen.end(), i) == chosen.end()) chosen.push_back(i);
      break;
    }
    std::size_t best = n;
    double best_potential = std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < trials; ++t) {
      const double r = rng.uniform() * total;
      double acc = 0.0;
      std::size_t pick = n;
      for (std::size_t i = 0; i < n; ++i) {
        acc += nearest[i];
        if (nearest[i] > 0.0 && r < acc) {
          pick = i;
          break;
        }
      }
      if (pick == n) {
        for (std::size_t i = n; i-- > 0;)
          if (nearest[i] > 0.0) {
            pick = i;
            break;
          }
      }
      double potential = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        with[i] = std::min(nearest[i], sq_dist(points.row(i), points.row(pick)));
        potential += with[i];
      }
      if (potential < best_potential) {
        best_potential = potential;
        best = pick;
        best_with.swap(with);
      }
    }
    chosen.push_back(best);
    nearest.swap(best_with);
  }
  Tensor c({k, d});
  for (std::size_t j = 0; j < k; ++j) std::copy_n(points.row(chosen[j]).begin(), d, c.row(j).begin());
  return c;
}

}  // namespace

KMeansResult kmeans(const Tensor& points, std::size_t k, const KMeansInit& init) {
  const std::size_t n = points.rows(), d = points.cols();
  if (k == 0) throw ConfigError("k-means needs at least one cluster");
  if (n == 0) throw ConfigError("k-means needs at least one point");
  if (k > n) {
    throw ConfigError("k-means with " + std::to_string(k) + " clusters over " + std::to_string(n) +
                      " points; pad the prompt set instead");
  }
  KMeansResult res;
  if (init.kind == KMeansInit::Kind::Warm) {
    if (init.centroids.rows() != k || init.centroids.cols() != d) {
      throw DimensionError("warm-start centroids " + shape_string(init.centroids.shape()) + " for k=" +
                           std::to_string(k) + ", D=" + std::to_string(d));
    }
    res.centroids = init.centroids;
  } else {
    res.centroids = plus_plus_seeds(points, k, init.seed);
  }

  std::vector<std::size_t> assign(n), previous;
  std::vector<std::size_t> members(k);
  for (std::size_t it = 1; it <= kKMeansMaxIterations; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = sq_dist(points.row(i), res.centroids.row(0));
      for (std::size_t j = 1; j < k; ++j) {
        const double dj = sq_dist(points.row(i), res.centroids.row(j));
        if (dj < best_d) {
          best_d = dj;
          best = j;
        }
      }
      assign[i] = best;
    }
    std::fill(members.begin(), members.end(), 0);
    for (std::size_t a : assign) ++members[a];
    for (std::size_t e = 0; e < k; ++e) {
      if (members[e] != 0) continue;
      std::size_t far = n;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (members[assign[i]] < 2) continue;
        const double di = sq_dist(points.row(i), res.centroids.row(assign[i]));
        if (di > far_d) {
          far_d = di;
          far = i;
        }
      }
      --members[assign[far]];
      assign[far] = e;
      members[e] = 1;
    }

    Tensor next({k, d});
    for (std::size_t i = 0; i < n; ++i) {
      auto row = next.row(assign[i]);
      auto p = points.row(i);
      for (std::size_t j = 0; j < d; ++j) row[j] += p[j];
    }
    for (std::size_t j = 0; j < k; ++j)
      for (double& v : next.row(j)) v /= static_cast<double>(members[j]);

    double objective = 0.0;
    for (std::size_t i = 0; i < n; ++i) objective += sq_dist(points.row(i), next.row(assign[i]));
    if (!res.objective.empty() && objective > res.objective.back() * (1.0 + 1e-12) + 1e-300) {
      throw NumericError("k-means objective increased at iteration " + std::to_string(it));
    }
    res.objective.push_back(objective);
    res.iterations = it;

    const bool same_assign = assign == previous;
    const bool same_centroids = next.data() == res.centroids.data();
    res.centroids = std::move(next);
    previous = assign;
    if (same_assign || same_centroids) break;
  }
  res.assignments = std::move(assign);
  return res;
}

PromptPadding pad_prompts(std::size_t num_classes, std::size_t requested) {
  if (requested == 0) throw ConfigError("at least one prompt per layer must be requested");
  if (num_classes < 5) return {num_classes, requested > num_classes ? requested - num_classes : 0};
  return {std::min(requested, num_classes), 0};
}

PromptAssignment build_mapping(const Tensor& class_means, const PromptPadding& layout, std::uint64_t seed) {
  return update_mapping(class_means, nullptr, layout, seed);
}

PromptAssignment update_mapping(const Tensor& class_means, const PromptAssignment* previous,
                                const PromptPadding& layout, std::uint64_t seed) {
  const KMeansInit init = previous != nullptr ? KMeansInit::warm(previous->centroids) : KMeansInit::plus_plus(seed);
  KMeansResult km = kmeans(class_means, layout.guided, init);
  PromptAssignment out;
  out.class_to_prompt = std::move(km.assignments);
  out.centroids = std::move(km.centroids);
  out.num_guided = layout.guided;
  out.num_padding = layout.padding;
  out.iterations = km.iterations;
  return out;
}

std::string format_mapping(const PromptAssignment& mapping) {
  std::ostringstream os;
  for (std::size_t c = 0; c < mapping.class_to_prompt.size(); ++c) os << c << '\t' << mapping.class_to_prompt[c] << '\n';
  os << "# padding " << mapping.num_padding << '\n';
  os << "# centroids " << mapping.centroids.rows() << ' ' << mapping.centroids.cols() << '\n';
  char buf[32];
  for (std::size_t r = 0; r < mapping.centroids.rows(); ++r) {
    for (std::size_t j = 0; j < mapping.centroids.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", mapping.centroids.at(r, j));
      os << (j ? " " : "") << buf;
    }
    os << '\n';
  }
  return os.str();
}

PromptAssignment parse_mapping(const std::string& text) {
  PromptAssignment out;
  std::istringstream in(text);
  std::string line;
  std::size_t rows = 0, cols = 0;
  auto bad = [](const std::string& why) { return FormatError(FormatIssue::BadHeader, "malformed mapping file: " + why); };
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.rfind("# padding ", 0) == 0) {
      std::istringstream pad(line.substr(10));
      if (!(pad >> out.num_padding)) throw bad("padding line");
    } else if (line.rfind("# centroids ", 0) == 0) {
      std::istringstream hdr(line.substr(12));
      if (!(hdr >> rows >> cols) || rows == 0 || cols == 0) throw bad("centroid header");
      std::vector<double> values;
      for (std::size_t r = 0; r < rows; ++r) {
        if (!std::getline(in, line)) throw bad("missing centroid rows");
        std::istringstream row(line);
        double v;
        std::size_t got = 0;
        while (row >> v) {
          values.push_back(v);
          ++got;
        }
        if (got != cols) throw bad("centroid row width");
      }
      out.centroids = Tensor({rows, cols}, std::move(values));
    } else if (line[0] == '#') {
      continue;
    } else {
      std::istringstream row(line);
      std::size_t cls, prompt;
      if (!(row >> cls >> prompt) || cls != out.class_to_prompt.size()) throw bad("class line '" + line + "'");
      out.class_to_prompt.push_back(prompt);
    }
  }
  out.num_guided = rows;
  for (std::size_t p : out.class_to_prompt)
    if (p >= out.num_guided) throw bad("prompt id " + std::to_string(p) + " without a centroid");
  return out;
}

void save_mapping(const PromptAssignment& mapping, const std::string& path) {
  const std::string text = format_mapping(mapping);
  write_file(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

PromptAssignment load_mapping(const std::string& path) {
  const auto bytes = read_file(path);
  return parse_mapping(std::string(bytes.begin(), bytes.end()));
}

}  // namespace davpt
