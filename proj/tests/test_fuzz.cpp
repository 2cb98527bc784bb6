#include <gtest/gtest.h>

#include "davpt/data.hpp"
#include "davpt/vit.hpp"
#include "fuzz_support.hpp"

using namespace davpt;

TEST(Fuzz, OracleAcceptsPristineFiles) {
  SynthSpec s;
  s.num_classes = 3;
  s.samples_per_class = 2;
  s.image_size = 4;
  s.channels = 1;
  EXPECT_TRUE(fuzz::dataset_valid(encode_dataset(generate(s))));
  ViTConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.channels = 1;
  c.embed_dim = 8;
  c.num_layers = 1;
  c.num_heads = 2;
  c.num_classes = 3;
  c.prompts_per_layer = 2;
  EXPECT_TRUE(fuzz::checkpoint_valid(encode_checkpoint(init_model(c, 0))));
}

TEST(Fuzz, MalformedDatasetHeaders) {
  SynthSpec s;
  s.num_classes = 3;
  s.samples_per_class = 3;
  s.image_size = 4;
  s.channels = 2;
  const auto r = fuzz::fuzz_datasets(generate(s), 1000, 1);
  EXPECT_EQ(r.cases, 1000u);
  EXPECT_EQ(r.crashes, 0u) << r.first_problem;
  EXPECT_EQ(r.mismatches, 0u) << r.first_problem;
  EXPECT_GT(r.valid_cases, 0u);
  EXPECT_EQ(r.accepted, r.valid_cases);
}

TEST(Fuzz, MalformedCheckpointHeaders) {
  ViTConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.channels = 1;
  c.embed_dim = 8;
  c.num_layers = 2;
  c.num_heads = 2;
  c.num_classes = 3;
  c.prompts_per_layer = 2;
  const auto r = fuzz::fuzz_checkpoints(init_model(c, 0), 1000, 2);
  EXPECT_EQ(r.cases, 1000u);
  EXPECT_EQ(r.crashes, 0u) << r.first_problem;
  EXPECT_EQ(r.mismatches, 0u) << r.first_problem;
  EXPECT_GT(r.valid_cases, 0u);
  EXPECT_EQ(r.accepted, r.valid_cases);
}
