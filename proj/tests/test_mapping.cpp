#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <numeric>

#include "davpt/error.hpp"
#include "davpt/mapping.hpp"
#include "davpt/rng.hpp"

using namespace davpt;

namespace {

struct Clustered {
  Tensor points;
  std::vector<std::size_t> truth;
};

// k groups of `per` points; group centers on a grid with spacing `spacing`,
// points spread with RMS radius 1 around their center.
Clustered clustered(std::size_t k, std::size_t per, std::size_t dim, double spacing, std::uint64_t seed) {
  Rng rng(seed);
  Clustered c{Tensor({k * per, dim}), {}};
  const double coord_std = 1.0 / std::sqrt(static_cast<double>(dim));
  for (std::size_t g = 0; g < k; ++g)
    for (std::size_t i = 0; i < per; ++i) {
      const std::size_t r = g * per + i;
      c.points.at(r, 0) = spacing * static_cast<double>(g % 3);
      c.points.at(r, 1) = spacing * static_cast<double>(g / 3);
      for (std::size_t j = 0; j < dim; ++j) c.points.at(r, j) += coord_std * rng.normal();
      c.truth.push_back(g);
    }
  return c;
}

bool same_partition(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  std::map<std::size_t, std::size_t> ab, ba;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (ab.count(a[i]) && ab[a[i]] != b[i]) return false;
    if (ba.count(b[i]) && ba[b[i]] != a[i]) return false;
    ab[a[i]] = b[i];
    ba[b[i]] = a[i];
  }
  return true;
}

double objective(const Tensor& pts, const std::vector<std::size_t>& assign, std::size_t k) {
  double total = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<double> mean(pts.cols(), 0.0);
    std::size_t n = 0;
    for (std::size_t i = 0; i < pts.rows(); ++i)
      if (assign[i] == c) {
        ++n;
        for (std::size_t j = 0; j < pts.cols(); ++j) mean[j] += pts.at(i, j);
      }
    if (n == 0) continue;
    for (std::size_t i = 0; i < pts.rows(); ++i)
      if (assign[i] == c)
        for (std::size_t j = 0; j < pts.cols(); ++j) {
          const double e = pts.at(i, j) - mean[j] / static_cast<double>(n);
          total += e * e;
        }
  }
  return total;
}

ViTConfig tiny_model() {
  ViTConfig c;
  c.image_size = 4;
  c.patch_size = 2;
  c.channels = 1;
  c.embed_dim = 8;
  c.num_layers = 2;
  c.num_heads = 2;
  c.num_classes = 2;
  c.prompts_per_layer = 2;
  return c;
}

}  // namespace

TEST(KMeans, RecoversWellSeparatedPartitions) {
  struct Setup {
    std::size_t k, per, dim;
  };
  for (const Setup s : {Setup{2, 6, 2}, Setup{3, 5, 4}, Setup{5, 4, 16}, Setup{8, 5, 64}}) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const Clustered c = clustered(s.k, s.per, s.dim, 10.0, 100 + seed);
      const KMeansResult r = kmeans(c.points, s.k, KMeansInit::plus_plus(seed));
      EXPECT_TRUE(same_partition(r.assignments, c.truth)) << "k=" << s.k << " seed=" << seed;
      for (std::size_t i = 1; i < r.objective.size(); ++i) EXPECT_LE(r.objective[i], r.objective[i - 1]);
    }
  }
}

TEST(KMeans, ObjectiveNeverIncreasesOnRandomData) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 3 + rng.below(30), k = 1 + rng.below(n), d = 1 + rng.below(5);
    Tensor pts({n, d});
    for (double& v : pts.values()) v = rng.normal();
    const KMeansResult r = kmeans(pts, k, KMeansInit::plus_plus(trial));
    for (std::size_t i = 1; i < r.objective.size(); ++i) EXPECT_LE(r.objective[i], r.objective[i - 1]);
    EXPECT_NEAR(r.objective.back(), objective(pts, r.assignments, k), 1e-9);
    std::vector<std::size_t> members(k, 0);
    for (std::size_t a : r.assignments) ++members[a];
    for (std::size_t m : members) EXPECT_GT(m, 0u);
  }
}

TEST(KMeans, Deterministic) {
  const Clustered c = clustered(4, 5, 3, 3.0, 7);
  const KMeansResult a = kmeans(c.points, 4, KMeansInit::plus_plus(9));
  const KMeansResult b = kmeans(c.points, 4, KMeansInit::plus_plus(9));
  EXPECT_EQ(a.assignments, b.assignments);
  EXPECT_EQ(a.centroids.data(), b.centroids.data());
  EXPECT_EQ(a.objective, b.objective);
}

TEST(KMeans, OnePointPerCluster) {
  Tensor pts = Tensor::matrix(3, 2, {0, 0, 1, 5, -3, 2});
  const KMeansResult r = kmeans(pts, 3, KMeansInit::plus_plus(0));
  EXPECT_EQ(r.objective.back(), 0.0);
  EXPECT_TRUE(same_partition(r.assignments, {0, 1, 2}));
}

TEST(KMeans, TwoPartitionMatchesBruteForce) {
  Tensor pts = Tensor::matrix(4, 2, {0, 0, 0.1, 0, 10, 10, 10.1, 10});
  double best = 1e300;
  std::vector<std::size_t> best_assign;
  for (unsigned mask = 1; mask < 15; ++mask) {
    std::vector<std::size_t> a(4);
    for (int i = 0; i < 4; ++i) a[i] = (mask >> i) & 1u;
    const double o = objective(pts, a, 2);
    if (o < best) {
      best = o;
      best_assign = a;
    }
  }
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const KMeansResult r = kmeans(pts, 2, KMeansInit::plus_plus(seed));
    EXPECT_TRUE(same_partition(r.assignments, best_assign));
    EXPECT_NEAR(r.objective.back(), best, 1e-12);
  }
  EXPECT_TRUE(same_partition(best_assign, {0, 0, 1, 1}));
}

TEST(KMeans, WarmStartAtOptimumTakesOneIteration) {
  Tensor pts = Tensor::matrix(4, 2, {0, 0, 0.1, 0, 10, 10, 10.1, 10});
  const KMeansResult r = kmeans(pts, 2, KMeansInit::warm(Tensor::matrix(2, 2, {0.05, 0, 10.05, 10})));
  EXPECT_EQ(r.iterations, 1u);
  EXPECT_EQ(r.assignments, (std::vector<std::size_t>{0, 0, 1, 1}));
}

TEST(KMeans, TiesGoToLowestIndex) {
  Tensor pts = Tensor::matrix(3, 1, {1, -5, 7});
  const KMeansResult r = kmeans(pts, 2, KMeansInit::warm(Tensor::matrix(2, 1, {0, 2})));
  EXPECT_EQ(r.assignments, (std::vector<std::size_t>{0, 0, 1}));
}

TEST(KMeans, EmptyClusterSeizesFarthestPoint) {
  Tensor pts = Tensor::matrix(4, 1, {0, 1, 10, 11});
  const KMeansResult r = kmeans(pts, 2, KMeansInit::warm(Tensor::matrix(2, 1, {0, 100})));
  EXPECT_EQ(r.assignments, (std::vector<std::size_t>{0, 0, 1, 1}));
  EXPECT_NEAR(r.centroids[0], 0.5, 1e-15);
  EXPECT_NEAR(r.centroids[1], 10.5, 1e-15);
}

TEST(KMeans, Errors) {
  Tensor pts = Tensor::matrix(2, 1, {0, 1});
  EXPECT_THROW(kmeans(pts, 3, KMeansInit::plus_plus(0)), ConfigError);
  EXPECT_THROW(kmeans(pts, 0, KMeansInit::plus_plus(0)), ConfigError);
  EXPECT_THROW(kmeans(pts, 2, KMeansInit::warm(Tensor::matrix(1, 1, {0}))), DimensionError);
}

TEST(Mapping, PadPromptsTable) {
  auto eq = [](PromptPadding p, std::size_t g, std::size_t pad) { return p.guided == g && p.padding == pad; };
  EXPECT_TRUE(eq(pad_prompts(2, 8), 2, 6));
  EXPECT_TRUE(eq(pad_prompts(100, 20), 20, 0));
  EXPECT_TRUE(eq(pad_prompts(3, 3), 3, 0));
  EXPECT_TRUE(eq(pad_prompts(4, 2), 4, 0));
  EXPECT_TRUE(eq(pad_prompts(8, 8), 8, 0));
  EXPECT_TRUE(eq(pad_prompts(8, 20), 8, 0));
  for (std::size_t c = 1; c < 5; ++c)
    for (std::size_t m = 1; m < 30; ++m) {
      const PromptPadding p = pad_prompts(c, m);
      EXPECT_GE(p.guided + p.padding, m);
    }
  EXPECT_THROW(pad_prompts(3, 0), ConfigError);
}

TEST(Mapping, UpdateIsIdempotentOnUnchangedMeans) {
  const Clustered c = clustered(3, 4, 5, 6.0, 3);
  const PromptPadding layout = pad_prompts(12, 3);
  const PromptAssignment first = build_mapping(c.points, layout, 0);
  const PromptAssignment again = update_mapping(c.points, &first, layout, 0);
  EXPECT_EQ(again.class_to_prompt, first.class_to_prompt);
  EXPECT_EQ(again.centroids.data(), first.centroids.data());
  EXPECT_EQ(again.iterations, 1u);
  const PromptAssignment cold = update_mapping(c.points, nullptr, layout, 0);
  EXPECT_EQ(cold.class_to_prompt, first.class_to_prompt);
}

TEST(Mapping, WarmStartIsNoSlowerThanColdOnDriftingMeans) {
  std::vector<std::size_t> warm, cold;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Clustered c = clustered(5, 4, 8, 4.0, 200 + seed);
    const PromptPadding layout = pad_prompts(20, 5);
    const PromptAssignment prev = build_mapping(c.points, layout, seed);
    Tensor drifted = c.points;
    Rng rng(300 + seed);
    for (double& v : drifted.values()) v += 0.3 * rng.normal();
    warm.push_back(update_mapping(drifted, &prev, layout, seed).iterations);
    cold.push_back(build_mapping(drifted, layout, seed + 1000).iterations);
  }
  std::sort(warm.begin(), warm.end());
  std::sort(cold.begin(), cold.end());
  EXPECT_LE(warm[10], cold[10]);
}

TEST(Mapping, FormatParseRoundTrip) {
  const Clustered c = clustered(3, 3, 4, 5.0, 4);
  PromptAssignment m = build_mapping(c.points, pad_prompts(9, 3), 2);
  m.num_padding = 2;
  const std::string text = format_mapping(m);
  const PromptAssignment back = parse_mapping("# manifest abc\n" + text);
  EXPECT_EQ(back.class_to_prompt, m.class_to_prompt);
  EXPECT_EQ(back.centroids.data(), m.centroids.data());
  EXPECT_EQ(back.num_guided, 3u);
  EXPECT_EQ(back.num_padding, 2u);
  EXPECT_EQ(format_mapping(back), text);
  EXPECT_EQ(text.substr(0, 2), "0\t");
}

TEST(Mapping, ParseRejectsMalformedText) {
  EXPECT_THROW(parse_mapping("0\t5\n# padding 0\n# centroids 1 1\n0\n"), FormatError);
  EXPECT_THROW(parse_mapping("1\t0\n# centroids 1 1\n0\n"), FormatError);
  EXPECT_THROW(parse_mapping("0\t0\n# centroids 2 2\n0 0\n"), FormatError);
  EXPECT_THROW(parse_mapping("0\t0\n# centroids 1 2\n0\n"), FormatError);
  EXPECT_THROW(parse_mapping("zero zero\n"), FormatError);
}

TEST(ClassRepresentations, MatchScalarAccumulation) {
  SynthSpec s;
  s.num_classes = 2;
  s.samples_per_class = 5;
  s.image_size = 4;
  s.channels = 1;
  const Dataset ds = generate(s);
  const ModelParams m = init_model(tiny_model(), 3);
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), 0);
  const Tensor got = collect_class_representations(m, ds, idx).means();
  Tensor expect({2, 8});
  std::vector<double> counts(2, 0.0);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    Tape t;
    BoundModel bm = bind_frozen(t, m);
    std::span<const std::uint8_t> one[] = {ds.image(i)};
    ForwardResult fr = forward_model(t, bm, one, {});
    for (std::size_t j = 0; j < 8; ++j) expect.at(ds.labels[i], j) += t.value(fr.cls)[j];
    counts[ds.labels[i]] += 1.0;
  }
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(got.at(c, j), expect.at(c, j) / counts[c], 1e-12);
  EXPECT_EQ(collect_class_representations(m, ds, idx).means().data(), got.data());
}

TEST(ClassRepresentations, MissingClassIsNamed) {
  SynthSpec s;
  s.num_classes = 2;
  s.samples_per_class = 3;
  s.image_size = 4;
  s.channels = 1;
  const Dataset ds = generate(s);
  const ModelParams m = init_model(tiny_model(), 3);
  const std::vector<std::size_t> only_class0{0, 2, 4};
  try {
    collect_class_representations(m, ds, only_class0);
    FAIL();
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("class 1"), std::string::npos);
  }
}

TEST(ClassRepresentations, IdenticalImagesGiveTheirClsVector) {
  SynthSpec s;
  s.num_classes = 2;
  s.samples_per_class = 3;
  s.image_size = 4;
  s.channels = 1;
  s.noise_std = 0.0;
  const Dataset ds = generate(s);
  const ModelParams m = init_model(tiny_model(), 5);
  const std::vector<std::size_t> idx{0, 2, 4, 1};
  const Tensor means = collect_class_representations(m, ds, idx).means();
  Tape t;
  BoundModel bm = bind_frozen(t, m);
  std::span<const std::uint8_t> one[] = {ds.image(0)};
  ForwardResult fr = forward_model(t, bm, one, {});
  for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(means.at(0, j), t.value(fr.cls)[j], 1e-14);
}
