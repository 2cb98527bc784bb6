#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "davpt/checkpoint.hpp"
#include "davpt/error.hpp"
#include "davpt/trainer.hpp"

using namespace davpt;

namespace {

Dataset tiny_data(std::size_t classes = 3, std::size_t per_class = 10) {
  SynthSpec s;
  s.num_classes = classes;
  s.samples_per_class = per_class;
  s.image_size = 8;
  s.channels = 1;
  return generate(s);
}

TrainConfig tiny_config(std::size_t classes = 3) {
  TrainConfig c;
  c.model.image_size = 8;
  c.model.patch_size = 4;
  c.model.channels = 1;
  c.model.embed_dim = 8;
  c.model.num_layers = 2;
  c.model.num_heads = 2;
  c.model.num_classes = classes;
  c.model.prompts_per_layer = 3;
  c.metric.delta = 0.1;
  c.metric.tau = 1.0 / 32.0;
  c.total_epochs = 3;
  c.warmup_epochs = 1;
  c.batch_size = 8;
  c.base_lr = 0.01;
  return c;
}

}  // namespace

TEST(Schedule, WorkedExamples) {
  const Schedule s{0.05, 30, 130};
  EXPECT_EQ(lr_at(0, s), 0.0);
  EXPECT_NEAR(lr_at(15, s), 0.025, 1e-17);
  EXPECT_EQ(lr_at(30, s), 0.05);
  EXPECT_NEAR(lr_at(130, s), 1e-8, 1e-20);
  EXPECT_NEAR(lr_at(80, s), 1e-8 + (0.05 - 1e-8) / 2.0, 1e-15);
  EXPECT_THROW(lr_at(131, s), ContractError);
}

TEST(Schedule, ContinuousAtJunctionAndMonotoneDecay) {
  const Schedule s{0.1, 50, 400};
  const double left = lr_at(50, s);
  const double right_limit = 1e-8 + (0.1 - 1e-8) * 0.5 * (1.0 + std::cos(std::numbers::pi * 0.0));
  EXPECT_EQ(left, 0.1);
  EXPECT_NEAR(right_limit, 0.1, 1e-17);
  EXPECT_NEAR(lr_at(51, s), 0.1, 1e-4);
  for (std::size_t k = 51; k <= 400; ++k) EXPECT_LE(lr_at(k, s), lr_at(k - 1, s));
  for (std::size_t k = 1; k <= 50; ++k) EXPECT_GT(lr_at(k, s), lr_at(k - 1, s));
  const Schedule nowarm{0.1, 0, 10};
  EXPECT_EQ(lr_at(0, nowarm), 0.1);
}

TEST(AdamW, WorkedExamples) {
  Tensor p({3}, std::vector<double>{1.0, -2.0, 0.5});
  p.set_requires_grad(true);
  std::vector<OptimTarget> targets{{"p", &p, 0.0}};
  OptimState st;
  p.accumulate_grad(std::vector<double>{0.0, 0.0, 0.0});
  adamw_step(targets, st, 0.1);
  EXPECT_EQ(p.data(), (std::vector<double>{1.0, -2.0, 0.5}));

  Tensor q({2}, std::vector<double>{1.0, 3.0});
  q.set_requires_grad(true);
  std::vector<OptimTarget> tq{{"q", &q, 0.0}};
  OptimState sq;
  q.accumulate_grad(std::vector<double>{1.0, 1.0});
  adamw_step(tq, sq, 0.01);
  // m_hat = v_hat = 1: update lr * 1 / (1 + eps).
  EXPECT_NEAR(q[0], 1.0 - 0.01 / (1.0 + 1e-8), 1e-15);
  EXPECT_NEAR(q[1], 3.0 - 0.01 / (1.0 + 1e-8), 1e-15);

  Tensor r({2}, std::vector<double>{2.0, -4.0});
  r.set_requires_grad(true);
  std::vector<OptimTarget> tr{{"r", &r, 0.1}};
  OptimState sr;
  r.accumulate_grad(std::vector<double>{0.0, 0.0});
  adamw_step(tr, sr, 0.5);
  EXPECT_NEAR(r[0], 2.0 * (1 - 0.05), 1e-15);
  EXPECT_NEAR(r[1], -4.0 * (1 - 0.05), 1e-15);
}

TEST(AdamW, NonFiniteGradientLeavesEverythingUntouched) {
  Tensor a({2}, 1.0), b({2}, 2.0);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  std::vector<OptimTarget> t{{"alpha", &a, 0.0}, {"beta_tensor", &b, 0.0}};
  OptimState st;
  a.accumulate_grad(std::vector<double>{0.1, 0.2});
  b.accumulate_grad(std::vector<double>{0.3, std::nan("")});
  try {
    adamw_step(t, st, 0.1);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("beta_tensor"), std::string::npos);
  }
  EXPECT_EQ(a.data(), (std::vector<double>{1.0, 1.0}));
  EXPECT_EQ(st.t, 0u);
  EXPECT_TRUE(st.moments.empty());
}

TEST(AdamW, FrozenTargetIsRejected) {
  Tensor a({2}, 1.0);
  std::vector<OptimTarget> t{{"a", &a, 0.0}};
  OptimState st;
  EXPECT_THROW(adamw_step(t, st, 0.1), ContractError);
}

TEST(Clip, ScalesToMaxNorm) {
  Tensor a({2}), b({1});
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  a.accumulate_grad(std::vector<double>{3.0, 0.0});
  b.accumulate_grad(std::vector<double>{4.0});
  std::vector<OptimTarget> t{{"a", &a, 0.0}, {"b", &b, 0.0}};
  EXPECT_NEAR(clip_grad_norm(t, 1.0), 5.0, 1e-15);
  EXPECT_NEAR(a.grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(b.grad()[0], 0.8, 1e-15);
  EXPECT_NEAR(clip_grad_norm(t, 10.0), 1.0, 1e-15);
  EXPECT_NEAR(a.grad()[0], 0.6, 1e-15);
}

TEST(OptimTargets, DecayOnlyHeadWeightByDefault) {
  TrainConfig cfg = tiny_config();
  cfg.policy = Policy::DaVptPlus;
  ModelParams m = init_model(cfg.model, 0, cfg.policy);
  for (const OptimTarget& t : optim_targets(m, cfg)) {
    if (t.name == "head_weight")
      EXPECT_EQ(t.weight_decay, cfg.weight_decay);
    else
      EXPECT_EQ(t.weight_decay, 0.0) << t.name;
  }
  cfg.decay_prompts = true;
  for (const OptimTarget& t : optim_targets(m, cfg))
    if (t.name.find("prompts") != std::string::npos) EXPECT_EQ(t.weight_decay, cfg.weight_decay);
}

TEST(Evaluate, MatchesCountingOracle) {
  const Dataset ds = tiny_data();
  TrainConfig cfg = tiny_config();
  ModelParams m = build_model(cfg, ds);
  for (double& v : m.head_weight.values()) v *= 50.0;
  const auto pred = predict(m, ds, {});
  std::size_t hit = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    Tape t;
    BoundModel bm = bind_frozen(t, m);
    std::span<const std::uint8_t> one[] = {ds.image(i)};
    const Tensor& z = t.value(forward_model(t, bm, one, {}).logits);
    std::size_t best = 0;
    for (std::size_t c = 1; c < z.cols(); ++c)
      if (z[c] > z[best]) best = c;
    EXPECT_EQ(pred[i], best);
    hit += best == ds.labels[i];
  }
  EXPECT_EQ(evaluate(m, ds), static_cast<double>(hit) / static_cast<double>(ds.size()));
  const std::vector<std::size_t> some{1, 4, 7};
  std::size_t hs = 0;
  for (std::size_t i : some) hs += pred[i] == ds.labels[i];
  EXPECT_EQ(evaluate(m, ds, some), static_cast<double>(hs) / 3.0);
}

TEST(Evaluate, ZeroHeadPredictsClassZero) {
  const Dataset ds = tiny_data(4, 5);
  TrainConfig cfg = tiny_config(4);
  ModelParams m = build_model(cfg, ds);
  for (double& v : m.head_weight.values()) v = 0.0;
  for (double& v : m.head_bias.values()) v = 0.0;
  EXPECT_EQ(evaluate(m, ds), 0.25);
}

TEST(Evaluate, MemorizedSingleSample) {
  Dataset one = tiny_data();
  one.labels.resize(1);
  one.pixels.resize(one.image_bytes());
  TrainConfig cfg = tiny_config();
  ModelParams m = build_model(cfg, tiny_data());
  for (double& v : m.head_weight.values()) v = 0.0;
  for (double& v : m.head_bias.values()) v = 0.0;
  m.head_bias[one.labels[0]] = 1.0;
  EXPECT_EQ(evaluate(m, one), 1.0);
}

TEST(Fit, ZeroWeightsMatchCrossEntropyOnlyRun) {
  const Dataset ds = tiny_data();
  TrainConfig a = tiny_config();
  a.metric.beta = a.metric.lambda = 0.0;
  TrainConfig b = a;
  b.metric_terms = false;
  ModelParams ma = build_model(a, ds), mb = build_model(b, ds);
  const TrainReport ra = fit(ma, ds, a), rb = fit(mb, ds, b);
  ASSERT_EQ(ra.steps.size(), rb.steps.size());
  for (std::size_t k = 0; k < ra.steps.size(); ++k) {
    EXPECT_EQ(ra.steps[k].ce, rb.steps[k].ce);
    EXPECT_EQ(ra.steps[k].total, rb.steps[k].total);
    EXPECT_EQ(ra.steps[k].total, ra.steps[k].ce);
    EXPECT_TRUE(std::isnan(rb.steps[k].l_xp));
  }
  EXPECT_EQ(encode_checkpoint(ma), encode_checkpoint(mb));
}

TEST(Fit, DeterministicAcrossRuns) {
  const Dataset ds = tiny_data();
  TrainConfig cfg = tiny_config();
  ModelParams a = build_model(cfg, ds), b = build_model(cfg, ds);
  const TrainReport ra = fit(a, ds, cfg), rb = fit(b, ds, cfg);
  EXPECT_EQ(format_report(ra), format_report(rb));
  EXPECT_EQ(encode_checkpoint(a), encode_checkpoint(b));
  EXPECT_EQ(format_mapping(ra.mapping), format_mapping(rb.mapping));
}

TEST(Fit, TotalIsAdditiveAtEveryStep) {
  const Dataset ds = tiny_data();
  TrainConfig cfg = tiny_config();
  cfg.metric.beta = 0.7;
  cfg.metric.lambda = 0.3;
  cfg.metric.guided_layers = {0, 1};
  ModelParams m = build_model(cfg, ds);
  const TrainReport r = fit(m, ds, cfg);
  ASSERT_FALSE(r.steps.empty());
  for (const StepRecord& s : r.steps) EXPECT_NEAR(s.total, s.ce + 0.7 * s.l_xp + 0.3 * s.l_pc, 1e-12);
  for (const StepRecord& s : r.steps) EXPECT_EQ(s.lr, lr_at(s.step, make_schedule(cfg, (24 + 7) / 8)));
}

TEST(Fit, FrozenParametersNeverChange) {
  const Dataset ds = tiny_data();
  for (Policy p : {Policy::Linear, Policy::VptDeep, Policy::DaVpt, Policy::DaVptPlus}) {
    TrainConfig cfg = tiny_config();
    cfg.policy = p;
    if (p == Policy::Linear) cfg.metric.beta = cfg.metric.lambda = 0.0;
    ModelParams m = build_model(cfg, ds);
    const ModelParams init = m;
    fit(m, ds, cfg);
    auto now = m.parameters();
    auto before = const_cast<ModelParams&>(init).parameters();
    bool trained_changed = false;
    for (std::size_t i = 0; i < now.size(); ++i) {
      if (!now[i].tensor->requires_grad())
        EXPECT_EQ(now[i].tensor->data(), before[i].tensor->data()) << to_string(p) << " " << now[i].name;
      else
        trained_changed = trained_changed || now[i].tensor->data() != before[i].tensor->data();
    }
    EXPECT_TRUE(trained_changed) << to_string(p);
  }
}

TEST(Fit, HugeLearningRateDivergesAndKeepsFiniteParameters) {
  const Dataset ds = tiny_data();
  TrainConfig cfg = tiny_config();
  cfg.base_lr = 1e300;
  cfg.warmup_epochs = 0;
  cfg.clip_norm = 0.0;
  ModelParams m = build_model(cfg, ds);
  const TrainReport r = fit(m, ds, cfg);
  EXPECT_TRUE(r.diverged);
  EXPECT_FALSE(r.divergence.empty());
  for (const Tensor* t : std::as_const(m).parameters()) EXPECT_TRUE(t->all_finite());
}

TEST(Fit, ReportShapeAndHeader) {
  const Dataset ds = tiny_data();
  TrainConfig cfg = tiny_config();
  cfg.eval_every = 2;
  ModelParams m = build_model(cfg, ds);
  const TrainReport r = fit(m, ds, cfg);
  ASSERT_EQ(r.epochs.size(), 3u);
  EXPECT_FALSE(std::isnan(r.epochs[0].acc));
  EXPECT_FALSE(std::isnan(r.epochs[1].acc));  // epoch 2 is a multiple of eval_every
  EXPECT_FALSE(std::isnan(r.epochs[2].margin_sat));
  const std::string csv = format_report(r, "deadbeef");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "# manifest deadbeef");
  EXPECT_NE(csv.find(std::string(kReportHeader) + "\n1,"), std::string::npos);
  EXPECT_EQ(r.mapping.class_to_prompt.size(), 3u);
}

TEST(Fit, FewClassesGetPaddedPrompts) {
  const Dataset ds = tiny_data(2, 12);
  TrainConfig cfg = tiny_config(2);
  cfg.model.prompts_per_layer = 1;
  ModelParams m = build_model(cfg, ds);
  EXPECT_EQ(m.config.prompts_per_layer, 2u);
  const TrainReport r = fit(m, ds, cfg);
  EXPECT_EQ(r.mapping.num_guided, 2u);
}

TEST(Fit, InvalidConfigurations) {
  const Dataset ds = tiny_data();
  TrainConfig cfg = tiny_config();
  cfg.warmup_epochs = 5;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.policy = Policy::Linear;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.metric_terms = false;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = tiny_config(4);
  EXPECT_THROW(build_model(cfg, ds), ConfigError);
  cfg = tiny_config();
  cfg.model.image_size = 16;
  EXPECT_THROW(build_model(cfg, ds), ConfigError);
}
