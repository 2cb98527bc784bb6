#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "davpt/autodiff.hpp"
#include "davpt/tensor.hpp"

namespace davpt {

enum class PromptInit : std::uint32_t { TruncNormal = 0, DataMean = 1 };

/// Which parameters a fine-tuning regime updates.
enum class Policy : std::uint32_t {
  Linear = 0,     ///< classification head only
  VptDeep = 1,    ///< head + prompt banks
  DaVpt = 2,      ///< same trainable set as VptDeep; metric guidance is a loss choice
  DaVptPlus = 3,  ///< DaVpt + key/value projection biases of every block
};

std::string to_string(Policy p);
Policy parse_policy(const std::string& name);
std::string to_string(PromptInit p);
PromptInit parse_prompt_init(const std::string& name);

struct ViTConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t channels = 3;
  std::size_t embed_dim = 64;
  std::size_t num_layers = 4;
  std::size_t num_heads = 4;
  double mlp_ratio = 2.0;
  std::size_t num_classes = 8;
  std::size_t prompts_per_layer = 8;
  PromptInit prompt_init = PromptInit::TruncNormal;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  std::size_t head_dim() const { return embed_dim / num_heads; }
  std::size_t hidden_dim() const;
  std::size_t image_bytes() const { return image_size * image_size * channels; }

  /// Throws ConfigError on inconsistent geometry.
  void validate() const;
};

enum class ParamRole {
  Embedding,
  Norm,
  Weight,
  Bias,
  KeyBias,
  ValueBias,
  Prompt,
  HeadWeight,
  HeadBias,
};

struct BlockParams {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // D x D (input x output) and D
  Tensor ln2_gain, ln2_bias;
  Tensor fc1_weight, fc1_bias;  // D x H, H
  Tensor fc2_weight, fc2_bias;  // H x D, D
  Tensor prompts;               // M x D
};

struct NamedParam {
  std::string name;
  Tensor* tensor;
  ParamRole role;
};

struct ModelParams {
  ViTConfig config;
  Policy policy = Policy::VptDeep;
  Tensor patch_weight;  // D x patch_dim
  Tensor patch_bias;    // D
  Tensor cls_token;     // D
  Tensor pos_embed;     // (N + 1) x D
  std::vector<BlockParams> blocks;
  Tensor head_weight;  // C x D
  Tensor head_bias;    // C

  /// Every tensor in checkpoint order.
  std::vector<NamedParam> parameters();
  std::vector<const Tensor*> parameters() const;
  void clear_grads();
};

/// Random "pretrained" backbone: projections ~ N(0, 1/fan_in), zero biases,
/// unit norm gains, small positional/CLS embeddings, trunc-normal prompts and
/// head. Trainability follows `policy`.
ModelParams init_model(const ViTConfig& config, std::uint64_t seed, Policy policy = Policy::VptDeep);

void set_trainability(ModelParams& params, Policy policy);
std::size_t trainable_count(const ModelParams& params);

/// Reinitializes the classification head (trunc-normal weights, zero bias).
void init_head(ModelParams& params, std::uint64_t seed);
/// Reinitializes every prompt bank from N(0, 0.02^2) truncated at two sigma.
void init_prompts_trunc_normal(ModelParams& params, std::uint64_t seed);
/// Sets every prompt of layer l to the mean post-attention visual-token row
/// at layer l, from one promptless frozen forward pass over `images`.
void init_prompts_data_mean(ModelParams& params, std::span<const std::span<const std::uint8_t>> images);

// ---------------------------------------------------------------------------
// Forward pass

struct ForwardOptions {
  /// Insert each layer's prompt bank; false runs the plain (promptless) ViT.
  bool insert_prompts = true;
};

struct LayerTrace {
  std::size_t layer = 0;
  std::size_t seq_len = 0;         ///< 1 + M + N (or 1 + N without prompts)
  std::size_t prompt_count = 0;    ///< M inserted at this layer
  std::vector<double> attention;   ///< batch x heads x seq x seq, post-softmax
  Var tokens;                      ///< (batch*N) x D attention-module output rows of visual tokens
  Var query_prompts;               ///< M x D, P W_Q + b_Q (valid when prompt_count > 0)
  Var prompts;                     ///< M x D raw prompt bank (valid when prompt_count > 0)
};

struct ForwardResult {
  std::size_t batch = 0;
  Var cls;     ///< batch x D, final-layer CLS rows
  Var logits;  ///< batch x C
  std::vector<LayerTrace> traces;

  const LayerTrace* trace(std::size_t layer) const;
};

/// Parameters bound to one tape.
struct BoundBlock {
  Var ln1_gain, ln1_bias, wq, bq, wk, bk, wv, bv, wo, bo, ln2_gain, ln2_bias, fc1_weight, fc1_bias, fc2_weight,
      fc2_bias, prompts;
};

struct BoundModel {
  const ModelParams* params = nullptr;
  Var patch_weight, patch_bias, cls_token, pos_embed;
  std::vector<BoundBlock> blocks;
  Var head_weight, head_bias;
};

BoundModel bind(Tape& tape, ModelParams& params);
/// Binds every parameter as a constant.
BoundModel bind_frozen(Tape& tape, const ModelParams& params);

/// Embeds a batch: rows [x_cls, x_1 .. x_N] per image with positional
/// embeddings added; shape (batch*(N+1)) x D.
Var embed(Tape& tape, const BoundModel& model, std::span<const std::span<const std::uint8_t>> images);

/// Single-image embedding, (N+1) x D.
Tensor patchify(const ModelParams& params, std::span<const std::uint8_t> image);

struct BlockOutput {
  Var out;  ///< (batch*(N+1)) x D; prompt rows dropped
  LayerTrace trace;
};

/// One pre-norm transformer block. Input rows per sample are [x_cls, x_1..x_N];
/// the layer's prompts are inserted after x_cls, attend and are attended to,
/// and their output rows are discarded.
BlockOutput forward_block(Tape& tape, const BoundModel& model, std::size_t layer, Var input, std::size_t batch,
                          bool capture_trace, const ForwardOptions& options = {});

ForwardResult forward_model(Tape& tape, const BoundModel& model, std::span<const std::span<const std::uint8_t>> images,
                            std::span<const std::size_t> traced_layers, const ForwardOptions& options = {});

}  // namespace davpt
