#include "davpt/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <sstream>

#include "davpt/error.hpp"

namespace davpt {

void TrainConfig::validate() const {
  model.validate();
  metric.validate();
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (total_epochs < 1) throw ConfigError("total_epochs must be at least 1");
  if (warmup_epochs > total_epochs) throw ConfigError("warmup_epochs exceeds total_epochs");
  if (!(base_lr > 0.0) || !std::isfinite(base_lr)) throw ConfigError("base_lr must be positive");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw ConfigError("weight_decay must be non-negative");
  if (!(clip_norm >= 0.0)) throw ConfigError("clip_norm must be non-negative (0 disables clipping)");
  if (eval_every < 1) throw ConfigError("eval_every must be at least 1");
  const bool guided = metric.beta > 0.0 || metric.lambda > 0.0;
  if (guided && policy == Policy::Linear) throw ConfigError("metric guidance needs trainable prompts; policy is linear");
  if (guided && model.prompts_per_layer == 0) throw ConfigError("metric guidance needs at least one prompt per layer");
  if (guided && !metric_terms) throw ConfigError("beta or lambda is nonzero but metric terms are disabled");
  metric.resolved_layers(model.num_layers);
}

Schedule make_schedule(const TrainConfig& cfg, std::size_t steps_per_epoch) {
  return {cfg.base_lr, cfg.warmup_epochs * steps_per_epoch, cfg.total_epochs * steps_per_epoch};
}

double lr_at(std::size_t step, const Schedule& s) {
  if (step > s.total_steps) {
    throw ContractError("lr_at: step " + std::to_string(step) + " beyond schedule of " +
                        std::to_string(s.total_steps) + " steps");
  }
  if (step <= s.warmup_steps) {
    if (s.warmup_steps == 0) return s.base_lr;
    return s.base_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  }
  const double span = static_cast<double>(s.total_steps - s.warmup_steps);
  const double progress = static_cast<double>(step - s.warmup_steps) / span;
  return kFinalLearningRate + (s.base_lr - kFinalLearningRate) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void adamw_step(std::span<const OptimTarget> targets, OptimState& state, double lr) {
  for (const OptimTarget& t : targets) {
    if (!t.param->requires_grad()) throw ContractError("optimizer target " + t.name + " is frozen");
    if (!t.param->has_grad()) throw ContractError("optimizer target " + t.name + " has no gradient");
    for (double g : t.param->grad())
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in " + t.name);
  }
  if (state.moments.empty()) {
    for (const OptimTarget& t : targets) state.moments.push_back({Tensor(t.param->shape()), Tensor(t.param->shape())});
  }
  if (state.moments.size() != targets.size()) throw ContractError("optimizer state does not match its targets");
  ++state.t;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < targets.size(); ++k) {
    auto theta = targets[k].param->values();
    auto g = targets[k].param->grad();
    auto m = state.moments[k].m.values();
    auto v = state.moments[k].v.values();
    const double wd = targets[k].weight_decay;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double mh = m[i] / bc1, vh = v[i] / bc2;
      theta[i] = theta[i] - lr * mh / (std::sqrt(vh) + state.eps) - lr * wd * theta[i];
    }
  }
}

std::vector<OptimTarget> optim_targets(ModelParams& model, const TrainConfig& cfg) {
  std::vector<OptimTarget> out;
  for (NamedParam& p : model.parameters()) {
    if (!p.tensor->requires_grad()) continue;
    bool decay = true;
    if (p.role == ParamRole::Prompt) decay = cfg.decay_prompts;
    if (p.role == ParamRole::Bias || p.role == ParamRole::KeyBias || p.role == ParamRole::ValueBias ||
        p.role == ParamRole::HeadBias || p.role == ParamRole::Norm) {
      decay = cfg.decay_biases;
    }
    out.push_back({p.name, p.tensor, decay ? cfg.weight_decay : 0.0});
  }
  return out;
}

double clip_grad_norm(std::span<const OptimTarget> targets, double max_norm) {
  double ss = 0.0;
  for (const OptimTarget& t : targets)
    for (double g : t.param->grad()) ss += g * g;
  const double norm = std::sqrt(ss);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (const OptimTarget& t : targets)
      for (double& g : t.param->grad()) g *= f;
  }
  return norm;
}

ModelParams build_model(const TrainConfig& cfg, const Dataset& data) {
  ViTConfig vc = cfg.model;
  if (data.num_classes != vc.num_classes) {
    throw ConfigError("dataset has " + std::to_string(data.num_classes) + " classes, model expects " +
                      std::to_string(vc.num_classes));
  }
  if (data.height != vc.image_size || data.width != vc.image_size || data.channels != vc.channels) {
    throw ConfigError("dataset images are " + std::to_string(data.height) + "x" + std::to_string(data.width) + "x" +
                      std::to_string(data.channels) + ", model expects " + std::to_string(vc.image_size) + "x" +
                      std::to_string(vc.image_size) + "x" + std::to_string(vc.channels));
  }
  if (cfg.policy != Policy::Linear && vc.prompts_per_layer > 0) {
    const PromptPadding pad = pad_prompts(vc.num_classes, vc.prompts_per_layer);
    vc.prompts_per_layer = std::max(vc.prompts_per_layer, pad.guided + pad.padding);
  }
  ModelParams m = init_model(vc, cfg.backbone_seed, cfg.policy);
  init_head(m, cfg.seed);
  init_prompts_trunc_normal(m, cfg.seed);
  if (vc.prompt_init == PromptInit::DataMean && vc.prompts_per_layer > 0) {
    const Split split = split_dataset(data.size(), cfg.seed);
    const auto imgs = data.images(split.train);
    init_prompts_data_mean(m, imgs);
  }
  return m;
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> predict(const ModelParams& model, const Dataset& data, std::span<const std::size_t> indices) {
  std::vector<std::size_t> all;
  if (indices.empty()) {
    all.resize(data.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    indices = all;
  }
  std::vector<std::size_t> out;
  out.reserve(indices.size());
  constexpr std::size_t chunk = 64;
  for (std::size_t start = 0; start < indices.size(); start += chunk) {
    const auto part = indices.subspan(start, std::min(chunk, indices.size() - start));
    Tape tape;
    BoundModel bound = bind_frozen(tape, model);
    const auto imgs = data.images(part);
    const Tensor& logits = tape.value(forward_model(tape, bound, imgs, {}).logits);
    for (std::size_t r = 0; r < logits.rows(); ++r) {
      const auto row = logits.row(r);
      out.push_back(static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  }
  return out;
}

double evaluate(const ModelParams& model, const Dataset& data, std::span<const std::size_t> indices) {
  const std::vector<std::size_t> pred = predict(model, data, indices);
  if (pred.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t k = 0; k < pred.size(); ++k) {
    const std::size_t idx = indices.empty() ? k : indices[k];
    hit += pred[k] == data.labels[idx];
  }
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

double evaluate_margin(const ModelParams& model, const Dataset& data, std::span<const std::size_t> indices,
                       const PromptAssignment& mapping, const MetricConfig& metric, std::size_t layer) {
  if (indices.empty() || mapping.num_guided == 0) return std::numeric_limits<double>::quiet_NaN();
  Tensor prompts;
  std::vector<double> tokens;
  std::vector<std::size_t> labels;
  constexpr std::size_t chunk = 64;
  const std::size_t layers[] = {layer};
  std::size_t width = 0;
  for (std::size_t start = 0; start < indices.size(); start += chunk) {
    const auto part = indices.subspan(start, std::min(chunk, indices.size() - start));
    Tape tape;
    BoundModel bound = bind_frozen(tape, model);
    const auto imgs = data.images(part);
    ForwardResult fr = forward_model(tape, bound, imgs, layers);
    std::vector<std::size_t> sample_labels;
    for (std::size_t i : part) sample_labels.push_back(mapping.class_to_prompt.at(data.labels[i]));
    GuidanceInputs in = select_guidance_inputs(fr, layer, metric, sample_labels, mapping.num_guided);
    if (start == 0) prompts = tape.value(in.prompts);
    const Tensor& t = tape.value(in.tokens);
    width = t.cols();
    tokens.insert(tokens.end(), t.values().begin(), t.values().end());
    labels.insert(labels.end(), in.labels.begin(), in.labels.end());
  }
  const std::size_t rows = tokens.size() / width;
  const Tensor all({rows, width}, std::move(tokens));
  return margin_satisfaction(prompts, all, labels, metric.delta);
}

// ---------------------------------------------------------------------------

namespace {

struct StepLosses {
  double ce = 0.0, l_xp = 0.0, l_pc = 0.0, total = 0.0;
};

std::vector<Tensor> snapshot(std::span<const OptimTarget> targets) {
  std::vector<Tensor> out;
  for (const OptimTarget& t : targets) out.push_back(*t.param);
  return out;
}

void restore(std::span<const OptimTarget> targets, const std::vector<Tensor>& saved) {
  for (std::size_t k = 0; k < targets.size(); ++k) {
    auto src = saved[k].values();
    std::copy(src.begin(), src.end(), targets[k].param->values().begin());
    targets[k].param->clear_grad();
  }
}

}  // namespace

TrainReport fit(ModelParams& model, const Dataset& data, const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  if (data.size() == 0) throw ConfigError("training dataset is empty");
  const ViTConfig& vc = model.config;
  if (data.num_classes != vc.num_classes) {
    throw ConfigError("dataset has " + std::to_string(data.num_classes) + " classes, model expects " +
                      std::to_string(vc.num_classes));
  }
  for (std::uint16_t l : data.labels)
    if (l >= vc.num_classes) throw ConfigError("label " + std::to_string(l) + " outside the model's classes");

  const Split split = split_dataset(data.size(), cfg.seed);
  if (split.train.empty()) throw ConfigError("dataset too small: the training split is empty");
  const std::vector<std::size_t> guided_layers = cfg.metric.resolved_layers(vc.num_layers);
  const bool use_prompts = vc.prompts_per_layer > 0;
  const bool metric_on = cfg.metric_terms && use_prompts;
  const double beta = cfg.metric.beta, lambda = cfg.metric.lambda;

  TrainReport report;
  PromptPadding layout{};
  Tensor prev_means;
  if (use_prompts) {
    layout = pad_prompts(vc.num_classes, vc.prompts_per_layer);
    if (layout.guided + layout.padding > vc.prompts_per_layer) {
      throw ConfigError(std::to_string(vc.num_classes) + " classes need " +
                        std::to_string(layout.guided + layout.padding) + " prompts per layer, model has " +
                        std::to_string(vc.prompts_per_layer));
    }
    // Pre-pass: class representations S from the initial model.
    prev_means = collect_class_representations(model, data, split.train).means();
    report.mapping = build_mapping(prev_means, layout, cfg.seed);
  }

  std::vector<OptimTarget> targets = optim_targets(model, cfg);
  if (targets.empty()) throw ConfigError("policy leaves no trainable parameters");
  OptimState opt;
  const std::size_t steps_per_epoch = (split.train.size() + cfg.batch_size - 1) / cfg.batch_size;
  const Schedule sched = make_schedule(cfg, steps_per_epoch);
  const std::vector<std::size_t> traced = metric_on ? guided_layers : std::vector<std::size_t>{};
  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::size_t global_step = 0;

  for (std::size_t epoch = 1; epoch <= cfg.total_epochs; ++epoch) {
    ClassRepresentations reps(vc.num_classes, vc.embed_dim);
    StepLosses sums;
    std::size_t nb = 0;
    double last_lr = 0.0;
    for (const std::vector<std::size_t>& order : batches(split.train.size(), cfg.batch_size, cfg.seed, epoch)) {
      std::vector<std::size_t> idx(order.size());
      std::vector<std::size_t> labels(order.size());
      for (std::size_t k = 0; k < order.size(); ++k) {
        idx[k] = split.train[order[k]];
        labels[k] = data.labels[idx[k]];
      }
      const auto imgs = data.images(idx);

      Tape tape;
      BoundModel bound = bind(tape, model);
      ForwardResult fr = forward_model(tape, bound, imgs, traced);
      Var ce = cross_entropy(fr.logits, labels);
      Var loss = ce;
      StepLosses step;
      if (metric_on) {
        std::vector<std::size_t> prompt_labels(labels.size());
        for (std::size_t k = 0; k < labels.size(); ++k) prompt_labels[k] = report.mapping.class_to_prompt[labels[k]];
        Var l_xp, l_pc;
        for (std::size_t li = 0; li < guided_layers.size(); ++li) {
          GuidanceInputs in =
              select_guidance_inputs(fr, guided_layers[li], cfg.metric, prompt_labels, layout.guided);
          Var xp = proxy_anchor_loss(in.prompts, in.tokens, in.labels, cfg.metric.delta, cfg.metric.tau);
          Var pc = cls_prompt_loss(in.prompts, fr.cls, prompt_labels, cfg.metric.delta, cfg.metric.tau);
          l_xp = li == 0 ? xp : add(l_xp, xp);
          l_pc = li == 0 ? pc : add(l_pc, pc);
        }
        if (guided_layers.size() > 1) {
          const double inv = 1.0 / static_cast<double>(guided_layers.size());
          l_xp = scale(l_xp, inv);
          l_pc = scale(l_pc, inv);
        }
        loss = total_loss(ce, l_xp, l_pc, beta, lambda);
        step.l_xp = tape.value(l_xp)[0];
        step.l_pc = tape.value(l_pc)[0];
      } else {
        step.l_xp = nan;
        step.l_pc = nan;
      }
      step.ce = tape.value(ce)[0];
      step.total = tape.value(loss)[0];

      if (!std::isfinite(step.total)) {
        report.diverged = true;
        report.divergence = "non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                            std::to_string(global_step + 1);
        break;
      }
      const Tensor& cls = tape.value(fr.cls);
      for (std::size_t k = 0; k < labels.size(); ++k) reps.add(labels[k], cls.row(k));

      model.clear_grads();
      tape.backward(loss);
      for (const OptimTarget& t : targets)
        if (!t.param->has_grad()) t.param->accumulate_grad(std::vector<double>(t.param->numel(), 0.0));
      const std::vector<Tensor> saved = snapshot(targets);
      const double norm = clip_grad_norm(targets, cfg.clip_norm);
      const double lr = lr_at(global_step + 1, sched);
      try {
        adamw_step(targets, opt, lr);
      } catch (const NumericError& e) {
        report.diverged = true;
        report.divergence = std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", step " +
                            std::to_string(global_step + 1);
        restore(targets, saved);
        break;
      }
      bool finite = true;
      for (const OptimTarget& t : targets) finite = finite && t.param->all_finite();
      if (!finite) {
        report.diverged = true;
        report.divergence = "non-finite parameters after step " + std::to_string(global_step + 1);
        restore(targets, saved);
        break;
      }
      model.clear_grads();
      ++global_step;
      last_lr = lr;
      report.steps.push_back({epoch, global_step, lr, step.ce, step.l_xp, step.l_pc, step.total, norm});
      sums.ce += step.ce;
      sums.l_xp += step.l_xp;
      sums.l_pc += step.l_pc;
      sums.total += step.total;
      ++nb;
    }
    if (report.diverged) break;

    if (use_prompts) {
      Tensor means = reps.means(&prev_means);
      report.mapping = update_mapping(means, &report.mapping, layout, cfg.seed);
      prev_means = std::move(means);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.step = global_step;
    rec.lr = last_lr;
    const double inv = 1.0 / static_cast<double>(nb);
    rec.ce = sums.ce * inv;
    rec.l_xp = sums.l_xp * inv;
    rec.l_pc = sums.l_pc * inv;
    rec.total = sums.total * inv;
    rec.margin_sat = nan;
    rec.acc = nan;
    const bool eval_now = epoch == 1 || epoch == cfg.total_epochs || epoch % cfg.eval_every == 0;
    if (eval_now && !split.val.empty()) {
      rec.acc = evaluate(model, data, split.val);
      if (use_prompts) {
        rec.margin_sat = evaluate_margin(model, data, split.val, report.mapping, cfg.metric, guided_layers.back());
      }
    }
    report.epochs.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
  }
  model.clear_grads();
  report.test_accuracy = split.test.empty() ? nan : evaluate(model, data, split.test);
  return report;
}

std::string format_report(const TrainReport& report, const std::string& manifest_hash) {
  std::ostringstream os;
  if (!manifest_hash.empty()) os << "# manifest " << manifest_hash << '\n';
  os << kReportHeader << '\n';
  char buf[64];
  auto num = [&](double v) {
    if (std::isnan(v)) return std::string("nan");
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  for (const EpochRecord& e : report.epochs) {
    os << e.epoch << ',' << e.step << ',' << num(e.lr) << ',' << num(e.ce) << ',' << num(e.l_xp) << ','
       << num(e.l_pc) << ',' << num(e.total) << ',' << num(e.margin_sat) << ',' << num(e.acc) << '\n';
  }
  return os.str();
}

}  // namespace davpt
