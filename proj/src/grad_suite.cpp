#include "davpt/grad_suite.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <tuple>

#include "davpt/error.hpp"
#include "davpt/metric.hpp"
#include "davpt/rng.hpp"
#include "davpt/vit.hpp"

namespace davpt {

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

/// Contracts an arbitrary output with fixed random weights so every entry of
/// the output influences the checked scalar.
Var reduce(Var out, std::uint64_t seed) {
  Tape& tape = *out.tape;
  const Tensor& v = tape.value(out);
  if (v.numel() == 1) return out;
  Rng rng(seed);
  Tensor w(v.shape());
  for (double& x : w.values()) x = rng.uniform(-1.0, 1.0);
  return sum(mul(out, tape.constant(std::move(w))));
}

struct Case {
  std::string name;
  TapedScalarFn fn;
  std::vector<Tensor> params;
};

std::vector<Case> op_cases() {
  Rng rng(101);
  std::vector<Case> c;
  auto unary = [&](std::string name, auto op, Tensor x) {
    c.push_back({std::move(name), [op](Tape&, std::span<const Var> p) { return reduce(op(p[0]), 1); }, {std::move(x)}});
  };
  auto binary = [&](std::string name, auto op, Tensor a, Tensor b) {
    c.push_back({std::move(name), [op](Tape&, std::span<const Var> p) { return reduce(op(p[0], p[1]), 2); },
                 {std::move(a), std::move(b)}});
  };
  binary("matmul", [](Var a, Var b) { return matmul(a, b); }, random_tensor({3, 4}, rng), random_tensor({4, 5}, rng));
  binary("matmul_nt", [](Var a, Var b) { return matmul_nt(a, b); }, random_tensor({3, 4}, rng),
         random_tensor({5, 4}, rng));
  binary("add", [](Var a, Var b) { return add(a, b); }, random_tensor({3, 4}, rng), random_tensor({3, 4}, rng));
  binary("sub", [](Var a, Var b) { return sub(a, b); }, random_tensor({3, 4}, rng), random_tensor({3, 4}, rng));
  binary("mul", [](Var a, Var b) { return mul(a, b); }, random_tensor({3, 4}, rng), random_tensor({3, 4}, rng));
  binary("add_row", [](Var a, Var b) { return add_row(a, b); }, random_tensor({3, 4}, rng), random_tensor({4}, rng));
  binary("dot", [](Var a, Var b) { return dot(a, b); }, random_tensor({6}, rng), random_tensor({6}, rng));
  unary("scale", [](Var a) { return scale(a, -1.7); }, random_tensor({3, 4}, rng));
  unary("add_scalar", [](Var a) { return add_scalar(a, 0.3); }, random_tensor({3, 4}, rng));
  unary("exp", [](Var a) { return exp(a); }, random_tensor({3, 4}, rng));
  unary("log", [](Var a) { return log(a); }, random_tensor({3, 4}, rng, 0.5, 2.0));
  unary("gelu", [](Var a) { return gelu(a); }, random_tensor({3, 4}, rng, -3.0, 3.0));
  unary("sum", [](Var a) { return sum(a); }, random_tensor({3, 4}, rng));
  unary("mean", [](Var a) { return mean(a); }, random_tensor({3, 4}, rng));
  unary("weighted_sum", [](Var a) { return weighted_sum(a, {0.5, -1.0, 2.0}); }, random_tensor({3, 1}, rng));
  unary("softmax_rows", [](Var a) { return softmax_rows(a); }, random_tensor({3, 5}, rng, -2.0, 2.0));
  unary("l2_normalize_rows", [](Var a) { return l2_normalize_rows(a); }, random_tensor({4, 5}, rng));
  unary("slice_rows", [](Var a) { return slice_rows(a, 1, 3); }, random_tensor({4, 3}, rng));
  unary("gather_rows", [](Var a) {
          const RowRef refs[] = {{a, 2}, {a, 0}, {a, 2}, {a, 1}};
          return gather_rows(refs);
        },
        random_tensor({3, 4}, rng));
  unary("cross_entropy", [](Var a) {
          const std::size_t labels[] = {0, 3, 2};
          return cross_entropy(a, labels);
        },
        random_tensor({3, 4}, rng, -2.0, 2.0));
  unary("masked_lse0_plus_rows", [](Var a) {
          return masked_lse0_plus_rows(a, {1, 0, 1, 1, 0, 0, 0, 0, 1, 1, 1, 1});
        },
        random_tensor({3, 4}, rng, -2.0, 2.0));
  c.push_back({"layer_norm",
               [](Tape&, std::span<const Var> p) { return reduce(layer_norm(p[0], p[1], p[2]), 3); },
               {random_tensor({3, 6}, rng, -2.0, 2.0), random_tensor({6}, rng, 0.5, 1.5), random_tensor({6}, rng)}});
  return c;
}

std::vector<Case> attention_cases() {
  Rng rng(202);
  std::vector<Case> c;
  // batch 2, sequence 5, width 8, two heads
  c.push_back({"attention",
               [](Tape&, std::span<const Var> p) { return reduce(attention(p[0], p[1], p[2], 2, 2), 4); },
               {random_tensor({10, 8}, rng), random_tensor({10, 8}, rng), random_tensor({10, 8}, rng)}});
  c.push_back({"attention_single_head",
               [](Tape&, std::span<const Var> p) { return reduce(attention(p[0], p[1], p[2], 1, 1), 5); },
               {random_tensor({4, 6}, rng), random_tensor({4, 6}, rng), random_tensor({4, 6}, rng)}});
  return c;
}

ViTConfig tiny_config() {
  ViTConfig vc;
  vc.image_size = 8;
  vc.patch_size = 4;
  vc.channels = 1;
  vc.embed_dim = 8;
  vc.num_layers = 2;
  vc.num_heads = 2;
  vc.mlp_ratio = 2.0;
  vc.num_classes = 3;
  vc.prompts_per_layer = 3;
  return vc;
}

/// Tiny model with non-trivial biases, gains and prompts so no gradient path
/// is degenerate.
ModelParams tiny_model() {
  ModelParams m = init_model(tiny_config(), 7, Policy::DaVptPlus);
  Rng rng(303);
  for (NamedParam& p : m.parameters()) {
    if (p.role == ParamRole::Norm || p.role == ParamRole::Bias || p.role == ParamRole::KeyBias ||
        p.role == ParamRole::ValueBias || p.role == ParamRole::HeadBias) {
      for (double& v : p.tensor->values()) v += rng.uniform(-0.2, 0.2);
    }
    if (p.role == ParamRole::Prompt || p.role == ParamRole::HeadWeight) {
      for (double& v : p.tensor->values()) v = rng.uniform(-1.0, 1.0);
    }
  }
  return m;
}

std::vector<std::vector<std::uint8_t>> tiny_images(std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<std::uint8_t>> out(count, std::vector<std::uint8_t>(tiny_config().image_bytes()));
  for (auto& img : out)
    for (auto& px : img) px = static_cast<std::uint8_t>(rng.below(256));
  return out;
}

/// Binds `model` with the tensors listed in `which` (by parameter name)
/// replaced by the given leaves; everything else is a constant.
BoundModel bind_with_leaves(Tape& tape, const ModelParams& model, const std::vector<std::string>& which,
                            std::span<const Var> leaves) {
  BoundModel b = bind_frozen(tape, model);
  ModelParams& mm = const_cast<ModelParams&>(model);
  std::vector<Var*> slots = {&b.patch_weight, &b.patch_bias, &b.cls_token, &b.pos_embed};
  for (BoundBlock& bb : b.blocks) {
    for (Var* v : {&bb.ln1_gain, &bb.ln1_bias, &bb.wq, &bb.bq, &bb.wk, &bb.bk, &bb.wv, &bb.bv, &bb.wo, &bb.bo,
                   &bb.ln2_gain, &bb.ln2_bias, &bb.fc1_weight, &bb.fc1_bias, &bb.fc2_weight, &bb.fc2_bias})
      slots.push_back(v);
    if (model.config.prompts_per_layer > 0) slots.push_back(&bb.prompts);
  }
  slots.push_back(&b.head_weight);
  slots.push_back(&b.head_bias);
  const std::vector<NamedParam> named = mm.parameters();
  for (std::size_t k = 0; k < which.size(); ++k) {
    const auto it = std::find_if(named.begin(), named.end(), [&](const NamedParam& p) { return p.name == which[k]; });
    if (it == named.end()) throw ContractError("no parameter named " + which[k]);
    *slots[static_cast<std::size_t>(it - named.begin())] = leaves[k];
  }
  return b;
}

std::vector<Tensor> values_of(const ModelParams& model, const std::vector<std::string>& which) {
  std::vector<Tensor> ordered;
  for (const std::string& w : which)
    for (const NamedParam& p : const_cast<ModelParams&>(model).parameters())
      if (p.name == w) ordered.push_back(*p.tensor);
  return ordered;
}

std::vector<std::string> all_names(const ModelParams& model) {
  std::vector<std::string> out;
  for (const NamedParam& p : const_cast<ModelParams&>(model).parameters()) out.push_back(p.name);
  return out;
}

std::vector<Case> backbone_cases() {
  auto model = std::make_shared<ModelParams>(tiny_model());
  auto images = std::make_shared<std::vector<std::vector<std::uint8_t>>>(tiny_images(2, 404));
  auto views = [images] {
    std::vector<std::span<const std::uint8_t>> v;
    for (const auto& img : *images) v.emplace_back(img);
    return v;
  };
  std::vector<Case> c;

  std::vector<std::string> block0;
  for (const std::string& n : all_names(*model))
    if (n.rfind("block0.", 0) == 0) block0.push_back(n);
  c.push_back({"transformer_block",
               [model, block0](Tape& tape, std::span<const Var> p) {
                 BoundModel b = bind_with_leaves(tape, *model, block0, p.subspan(1));
                 return reduce(forward_block(tape, b, 0, p[0], 2, false).out, 6);
               },
               [&] {
                 Rng rng(505);
                 std::vector<Tensor> ps{random_tensor({2 * (model->config.num_patches() + 1), 8}, rng)};
                 for (Tensor& t : values_of(*model, block0)) ps.push_back(std::move(t));
                 return ps;
               }()});

  const std::vector<std::string> everything = all_names(*model);
  c.push_back({"vit_forward_logits",
               [model, everything, views](Tape& tape, std::span<const Var> p) {
                 BoundModel b = bind_with_leaves(tape, *model, everything, p);
                 const auto v = views();
                 return reduce(forward_model(tape, b, v, {}).logits, 7);
               },
               values_of(*model, everything)});
  return c;
}

MetricConfig small_metric() {
  MetricConfig mc;
  mc.delta = 0.1;
  mc.tau = 0.5;
  return mc;
}

std::vector<Case> loss_cases() {
  Rng rng(606);
  std::vector<Case> c;
  const std::vector<std::size_t> labels = {0, 2, 2, 1, 0, 3, 3, 2};
  for (const auto& [name, delta, tau] : {std::tuple<const char*, double, double>{"proxy_anchor_loss", 0.1, 0.5},
                                         {"proxy_anchor_loss_classic", 0.1, 1.0 / 32.0},
                                         {"proxy_anchor_loss_paper_defaults", 32.0, 10.0}}) {
    c.push_back({name,
                 [labels, delta, tau](Tape&, std::span<const Var> p) {
                   return proxy_anchor_loss(p[0], p[1], labels, delta, tau);
                 },
                 {random_tensor({5, 6}, rng), random_tensor({8, 6}, rng)}});
  }
  const std::vector<std::size_t> cls_labels = {1, 0, 1};
  c.push_back({"cls_prompt_loss",
               [cls_labels](Tape&, std::span<const Var> p) { return cls_prompt_loss(p[0], p[1], cls_labels, 0.1, 0.5); },
               {random_tensor({2, 6}, rng), random_tensor({3, 6}, rng)}});
  c.push_back({"total_loss",
               [](Tape&, std::span<const Var> p) { return total_loss(sum(p[0]), sum(p[1]), sum(p[2]), 0.5, 0.25); },
               {random_tensor({1}, rng), random_tensor({1}, rng), random_tensor({1}, rng)}});
  return c;
}

std::vector<Case> objective_cases() {
  auto model = std::make_shared<ModelParams>(tiny_model());
  auto images = std::make_shared<std::vector<std::vector<std::uint8_t>>>(tiny_images(3, 707));
  std::vector<std::string> trainable;
  for (const NamedParam& p : model->parameters())
    if (p.tensor->requires_grad()) trainable.push_back(p.name);
  std::vector<Case> c;
  for (const auto& [name, space, layers] :
       {std::tuple<const char*, CompareSpace, std::vector<std::size_t>>{"objective_final_layer",
                                                                        CompareSpace::QueryProjected, {1}},
        {"objective_two_layers_raw_prompts", CompareSpace::RawPrompt, {0, 1}}}) {
    MetricConfig mc = small_metric();
    mc.compare_space = space;
    mc.guided_layers = layers;
    c.push_back({name,
                 [model, images, trainable, mc](Tape& tape, std::span<const Var> p) {
                   BoundModel b = bind_with_leaves(tape, *model, trainable, p);
                   std::vector<std::span<const std::uint8_t>> v;
                   for (const auto& img : *images) v.emplace_back(img);
                   const std::vector<std::size_t> labels = {0, 2, 1};
                   const std::vector<std::size_t> prompt_labels = {0, 1, 1};
                   ForwardResult fr = forward_model(tape, b, v, mc.guided_layers);
                   Var ce = cross_entropy(fr.logits, labels);
                   Var l_xp, l_pc;
                   for (std::size_t li = 0; li < mc.guided_layers.size(); ++li) {
                     GuidanceInputs in = select_guidance_inputs(fr, mc.guided_layers[li], mc, prompt_labels, 2);
                     Var xp = proxy_anchor_loss(in.prompts, in.tokens, in.labels, mc.delta, mc.tau);
                     Var pc = cls_prompt_loss(in.prompts, fr.cls, prompt_labels, mc.delta, mc.tau);
                     l_xp = li == 0 ? xp : add(l_xp, xp);
                     l_pc = li == 0 ? pc : add(l_pc, pc);
                   }
                   return total_loss(ce, l_xp, l_pc, 0.5, 0.5);
                 },
                 values_of(*model, trainable)});
  }
  return c;
}

}  // namespace

std::vector<std::string> grad_check_modules() { return {"ops", "attention", "backbone", "losses", "objective"}; }

std::vector<GradCheckEntry> run_grad_checks(const std::string& module) {
  const auto mods = grad_check_modules();
  if (module != "all" && std::find(mods.begin(), mods.end(), module) == mods.end()) {
    std::string list = "all";
    for (const std::string& m : mods) list += ", " + m;
    throw ConfigError("unknown grad-check module '" + module + "' (expected one of: " + list + ")");
  }
  std::vector<GradCheckEntry> out;
  for (const std::string& m : mods) {
    if (module != "all" && module != m) continue;
    std::vector<Case> cases;
    if (m == "ops") cases = op_cases();
    if (m == "attention") cases = attention_cases();
    if (m == "backbone") cases = backbone_cases();
    if (m == "losses") cases = loss_cases();
    if (m == "objective") cases = objective_cases();
    for (Case& cs : cases) {
      GradCheckEntry e;
      e.module = m;
      e.name = cs.name;
      e.tolerance = kGradCheckTolerance;
      e.result = finite_diff_check(cs.fn, cs.params, 1e-5);
      e.passed = e.result.max_rel_error < e.tolerance;
      out.push_back(std::move(e));
    }
  }
  return out;
}

}  // namespace davpt
