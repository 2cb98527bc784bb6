#include <gtest/gtest.h>

#include <cmath>

#include "davpt/error.hpp"
#include "davpt/theorem.hpp"

using namespace davpt;

TEST(Theorem, TwoEqualKeysMatchLogistic) {
  const Tensor keys = Tensor::matrix(2, 2, {1, 0, 0, 1});
  const std::vector<double> p{0.0, 0.0}, u{1.0, 1.0};
  const std::vector<double> scales{0.01, 0.0};
  const AttentionResponseReport r = verify_attention_response(keys, p, u, scales, 0);
  EXPECT_EQ(r.attention, 0.5);
  ASSERT_TRUE(r.orthogonal.available);
  const TheoremRow& row = r.orthogonal.rows[0];
  const double sigma = 1.0 / (1.0 + std::exp(-0.01));
  EXPECT_NEAR(row.exact, sigma - 0.5, 1e-15);
  EXPECT_NEAR(row.approx, 0.0025, 1e-15);
  EXPECT_NEAR(row.cross, 0.0, 1e-18);
  EXPECT_NEAR(row.abs_error, 1e-6 / 48.0, 1e-12);
  const TheoremRow& zero = r.orthogonal.rows[1];
  EXPECT_EQ(zero.exact, 0.0);
  EXPECT_EQ(zero.approx, 0.0);
}

TEST(Theorem, GeneralRegimeCrossTermByHand) {
  // Raw direction u = (1, 1): both scores move by eps / sqrt(2).
  const Tensor keys = Tensor::matrix(2, 2, {1, 0, 0, 1});
  const std::vector<double> p{0.0, 0.0}, u{1.0, 1.0};
  const std::vector<double> scales{0.01};
  const AttentionResponseReport r = verify_attention_response(keys, p, u, scales, 0);
  const TheoremRow& row = r.general.rows[0];
  const double ds = 0.01 / std::sqrt(2.0);
  EXPECT_NEAR(row.approx, 0.25 * ds, 1e-15);
  EXPECT_NEAR(row.cross, 0.25 * ds, 1e-15);
  EXPECT_NEAR(row.exact, 0.0, 1e-16);  // equal shifts leave softmax unchanged
  EXPECT_NEAR(row.residual, 0.0, 1e-16);
}

TEST(Theorem, RandomDrawsConverge) {
  const std::vector<double> scales{1e-2, 5e-3, 2.5e-3, 1.25e-3};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const TheoremDraw d = random_theorem_draw(4, 8, seed);
    const AttentionResponseReport r = verify_attention_response(d.keys, d.prompt, d.direction, scales, least_attended(d.keys, d.prompt));
    EXPECT_TRUE(orthogonal_ratios_ok(r)) << "seed " << seed;
    EXPECT_TRUE(residual_orders_ok(r)) << "seed " << seed;
    for (const TheoremRow& row : r.orthogonal.rows) EXPECT_LT(std::abs(row.cross), 1e-14);
    EXPECT_EQ(r.orthogonal.error_ratios.size(), 3u);
  }
}

TEST(Theorem, ExactComesFromSoftmaxRecomputation) {
  const TheoremDraw d = random_theorem_draw(5, 6, 3);
  const std::vector<double> scales{0.3};
  const std::size_t i = 2;
  const AttentionResponseReport r = verify_attention_response(d.keys, d.prompt, d.direction, scales, i);
  auto attn = [&](const std::vector<double>& p) {
    std::vector<double> s(5);
    double z = 0.0;
    for (std::size_t j = 0; j < 5; ++j) {
      double v = 0.0;
      for (std::size_t k = 0; k < 6; ++k) v += p[k] * d.keys.at(j, k);
      s[j] = std::exp(v / std::sqrt(6.0));
      z += s[j];
    }
    return s[i] / z;
  };
  std::vector<double> moved = d.prompt;
  for (std::size_t k = 0; k < 6; ++k) moved[k] += 0.3 * d.direction[k];
  EXPECT_NEAR(r.general.rows[0].exact, attn(moved) - attn(d.prompt), 1e-14);
  EXPECT_NEAR(r.attention, attn(d.prompt), 1e-15);
}

TEST(Theorem, OrthogonalRegimeUnavailableWhenOthersSpan) {
  const Tensor keys = Tensor::matrix(3, 2, {1, 1, 1, 0, 0, 1});
  const std::vector<double> p{0.1, 0.2}, u{1.0, -1.0}, scales{0.01, 0.005};
  const AttentionResponseReport r = verify_attention_response(keys, p, u, scales, 0);
  EXPECT_FALSE(r.orthogonal.available);
  EXPECT_FALSE(r.orthogonal.note.empty());
  EXPECT_FALSE(orthogonal_ratios_ok(r));
  EXPECT_EQ(r.general.rows.size(), 2u);
  EXPECT_NE(format_theorem_report(r).find("unavailable"), std::string::npos);
}

TEST(Theorem, InvalidScales) {
  const TheoremDraw d = random_theorem_draw(3, 4, 0);
  const std::vector<double> up{0.001, 0.01}, neg{0.01, -0.01}, same{0.01, 0.01};
  EXPECT_THROW(verify_attention_response(d.keys, d.prompt, d.direction, up, 0), ContractError);
  EXPECT_THROW(verify_attention_response(d.keys, d.prompt, d.direction, neg, 0), ContractError);
  EXPECT_THROW(verify_attention_response(d.keys, d.prompt, d.direction, same, 0), ContractError);
}

TEST(Theorem, LeastAttendedKey) {
  const Tensor keys = Tensor::matrix(3, 1, {1, -2, 0.5});
  const std::vector<double> p{1.0};
  EXPECT_EQ(least_attended(keys, p), 1u);
}
