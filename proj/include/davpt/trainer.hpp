#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "davpt/data.hpp"
#include "davpt/mapping.hpp"
#include "davpt/metric.hpp"
#include "davpt/vit.hpp"

namespace davpt {

struct TrainConfig {
  ViTConfig model;
  std::uint64_t backbone_seed = 0;  ///< frozen "pretrained" weights; the run seed covers everything else
  Policy policy = Policy::DaVpt;
  MetricConfig metric;
  double base_lr = 0.05;
  double weight_decay = 1e-4;
  bool decay_prompts = false;
  bool decay_biases = false;
  std::size_t warmup_epochs = 3;
  std::size_t total_epochs = 30;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  std::size_t eval_every = 1;
  double clip_norm = 10.0;  ///< global gradient-norm clip; 0 disables
  /// Build the metric terms on the tape. With beta = lambda = 0 turning this
  /// off leaves a pure cross-entropy step.
  bool metric_terms = true;

  /// Throws ConfigError on inconsistent settings.
  void validate() const;
};

/// Learning-rate schedule in optimizer steps.
struct Schedule {
  double base_lr = 0.0;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 0;
};

inline constexpr double kFinalLearningRate = 1e-8;

Schedule make_schedule(const TrainConfig& cfg, std::size_t steps_per_epoch);

/// Linear 0 -> base_lr over [0, warmup], cosine base_lr -> 1e-8 over
/// [warmup, total]. The k-th optimizer update (1-based) uses lr_at(k).
double lr_at(std::size_t step, const Schedule& schedule);

struct OptimTarget {
  std::string name;
  Tensor* param = nullptr;
  double weight_decay = 0.0;
};

struct AdamMoments {
  Tensor m, v;
};

struct OptimState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t t = 0;
  std::vector<AdamMoments> moments;  ///< one per target, allocated on first step
};

/// One AdamW update with decoupled weight decay. Every gradient is checked
/// before anything is modified; a non-finite entry throws NumericError naming
/// the tensor and leaves parameters and state untouched.
void adamw_step(std::span<const OptimTarget> targets, OptimState& state, double lr);

/// Trainable tensors of `model` with their decay coefficients.
std::vector<OptimTarget> optim_targets(ModelParams& model, const TrainConfig& cfg);

/// Scales gradients so their global L2 norm is at most max_norm; returns the
/// norm before clipping.
double clip_grad_norm(std::span<const OptimTarget> targets, double max_norm);

struct StepRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double lr = 0.0;
  double ce = 0.0;
  double l_xp = 0.0;
  double l_pc = 0.0;
  double total = 0.0;
  double grad_norm = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;  ///< optimizer steps taken so far
  double lr = 0.0;       ///< learning rate of the epoch's last update
  double ce = 0.0;       ///< batch means over the epoch
  double l_xp = 0.0;
  double l_pc = 0.0;
  double total = 0.0;
  double margin_sat = 0.0;  ///< validation split, last guided layer; NaN when not evaluated
  double acc = 0.0;         ///< validation accuracy; NaN when not evaluated
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::vector<StepRecord> steps;
  PromptAssignment mapping;
  double test_accuracy = 0.0;
  bool diverged = false;
  std::string divergence;
};

/// Fresh model for a run: backbone from backbone_seed, head and prompts from
/// the run seed (data_mean prompts use the training split). Grows the prompt
/// count when few classes need padding.
ModelParams build_model(const TrainConfig& cfg, const Dataset& data);

struct TrainHooks {
  std::function<void(const EpochRecord&)> on_epoch;
};

/// The training loop: class-representation pre-pass and initial mapping,
/// then per batch CE + beta * L_xp + lambda * L_pc, backward, clip, AdamW;
/// per epoch a warm-started mapping refresh and validation. On a non-finite
/// loss or gradient the model is left at the last good parameters and the
/// report is marked diverged.
TrainReport fit(ModelParams& model, const Dataset& data, const TrainConfig& cfg, const TrainHooks& hooks = {});

/// Top-1 accuracy over `indices` (all samples if empty); argmax ties go to
/// the lowest class.
double evaluate(const ModelParams& model, const Dataset& data, std::span<const std::size_t> indices = {});

/// Argmax predictions, ties to the lowest class.
std::vector<std::size_t> predict(const ModelParams& model, const Dataset& data, std::span<const std::size_t> indices);

/// margin_satisfaction of the given layer over `indices`, using the current
/// mapping to assign token labels.
double evaluate_margin(const ModelParams& model, const Dataset& data, std::span<const std::size_t> indices,
                       const PromptAssignment& mapping, const MetricConfig& metric, std::size_t layer);

inline constexpr const char* kReportHeader = "epoch,step,lr,ce,l_xp,l_pc,total,margin_sat,acc";

/// CSV with the fixed header; an optional leading "# manifest <hash>" line.
std::string format_report(const TrainReport& report, const std::string& manifest_hash = "");

}  // namespace davpt
