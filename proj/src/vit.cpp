#include "davpt/vit.hpp"

#include <algorithm>
#include <cmath>

#include "davpt/error.hpp"
#include "davpt/rng.hpp"

namespace davpt {

std::string to_string(Policy p) {
  switch (p) {
    case Policy::Linear:
      return "linear";
    case Policy::VptDeep:
      return "vpt_deep";
    case Policy::DaVpt:
      return "da_vpt";
    case Policy::DaVptPlus:
      return "da_vpt_plus";
  }
  return "unknown";
}

Policy parse_policy(const std::string& name) {
  if (name == "linear") return Policy::Linear;
  if (name == "vpt_deep") return Policy::VptDeep;
  if (name == "da_vpt") return Policy::DaVpt;
  if (name == "da_vpt_plus") return Policy::DaVptPlus;
  throw ConfigError("unknown policy '" + name + "' (expected linear, vpt_deep, da_vpt, da_vpt_plus)");
}

std::string to_string(PromptInit p) { return p == PromptInit::DataMean ? "data_mean" : "trunc_normal"; }

PromptInit parse_prompt_init(const std::string& name) {
  if (name == "trunc_normal") return PromptInit::TruncNormal;
  if (name == "data_mean") return PromptInit::DataMean;
  throw ConfigError("unknown prompt init '" + name + "' (expected trunc_normal or data_mean)");
}

std::size_t ViTConfig::hidden_dim() const {
  return static_cast<std::size_t>(std::llround(mlp_ratio * static_cast<double>(embed_dim)));
}

void ViTConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("invalid model config: " + m); };
  if (image_size == 0 || patch_size == 0 || channels == 0) fail("image, patch and channel sizes must be positive");
  if (image_size % patch_size != 0) fail("image_size must be divisible by patch_size");
  if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0) fail("embed_dim must be divisible by num_heads");
  if (num_layers < 1) fail("num_layers must be at least 1");
  if (!(mlp_ratio > 0.0) || !std::isfinite(mlp_ratio) || hidden_dim() == 0) fail("mlp_ratio must be positive");
  if (num_classes < 1) fail("num_classes must be at least 1");
}

// ---------------------------------------------------------------------------

std::vector<NamedParam> ModelParams::parameters() {
  std::vector<NamedParam> out;
  out.push_back({"patch_weight", &patch_weight, ParamRole::Embedding});
  out.push_back({"patch_bias", &patch_bias, ParamRole::Embedding});
  out.push_back({"cls_token", &cls_token, ParamRole::Embedding});
  out.push_back({"pos_embed", &pos_embed, ParamRole::Embedding});
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    BlockParams& b = blocks[l];
    const std::string p = "block" + std::to_string(l) + ".";
    out.push_back({p + "ln1_gain", &b.ln1_gain, ParamRole::Norm});
    out.push_back({p + "ln1_bias", &b.ln1_bias, ParamRole::Norm});
    out.push_back({p + "wq", &b.wq, ParamRole::Weight});
    out.push_back({p + "bq", &b.bq, ParamRole::Bias});
    out.push_back({p + "wk", &b.wk, ParamRole::Weight});
    out.push_back({p + "bk", &b.bk, ParamRole::KeyBias});
    out.push_back({p + "wv", &b.wv, ParamRole::Weight});
    out.push_back({p + "bv", &b.bv, ParamRole::ValueBias});
    out.push_back({p + "wo", &b.wo, ParamRole::Weight});
    out.push_back({p + "bo", &b.bo, ParamRole::Bias});
    out.push_back({p + "ln2_gain", &b.ln2_gain, ParamRole::Norm});
    out.push_back({p + "ln2_bias", &b.ln2_bias, ParamRole::Norm});
    out.push_back({p + "fc1_weight", &b.fc1_weight, ParamRole::Weight});
    out.push_back({p + "fc1_bias", &b.fc1_bias, ParamRole::Bias});
    out.push_back({p + "fc2_weight", &b.fc2_weight, ParamRole::Weight});
    out.push_back({p + "fc2_bias", &b.fc2_bias, ParamRole::Bias});
    if (b.prompts.numel() > 0) out.push_back({p + "prompts", &b.prompts, ParamRole::Prompt});
  }
  out.push_back({"head_weight", &head_weight, ParamRole::HeadWeight});
  out.push_back({"head_bias", &head_bias, ParamRole::HeadBias});
  return out;
}

std::vector<const Tensor*> ModelParams::parameters() const {
  std::vector<const Tensor*> out;
  for (const NamedParam& p : const_cast<ModelParams*>(this)->parameters()) out.push_back(p.tensor);
  return out;
}

void ModelParams::clear_grads() {
  for (NamedParam& p : parameters()) p.tensor->clear_grad();
}

namespace {

Tensor gaussian(Shape shape, double std, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = std * rng.normal();
  return t;
}

Tensor trunc_normal(Shape shape, double std, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.trunc_normal(std);
  return t;
}

// M == 0 is represented by an empty tensor; Tensor rejects zero extents.
Tensor prompt_bank(std::size_t m, std::size_t d, Rng& rng) {
  if (m == 0) return Tensor();
  return trunc_normal({m, d}, 0.02, rng);
}

}  // namespace

ModelParams init_model(const ViTConfig& config, std::uint64_t seed, Policy policy) {
  config.validate();
  const std::size_t d = config.embed_dim, h = config.hidden_dim();
  ModelParams m;
  m.config = config;
  Rng backbone(Rng::derive(seed, 1));
  m.patch_weight = gaussian({d, config.patch_dim()}, 1.0 / std::sqrt(static_cast<double>(config.patch_dim())), backbone);
  m.patch_bias = Tensor({d});
  m.cls_token = gaussian({d}, 0.02, backbone);
  m.pos_embed = gaussian({config.num_patches() + 1, d}, 0.02, backbone);
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  const double sh = 1.0 / std::sqrt(static_cast<double>(h));
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    BlockParams b;
    b.ln1_gain = Tensor({d}, 1.0);
    b.ln1_bias = Tensor({d});
    b.wq = gaussian({d, d}, sd, backbone);
    b.bq = Tensor({d});
    b.wk = gaussian({d, d}, sd, backbone);
    b.bk = Tensor({d});
    b.wv = gaussian({d, d}, sd, backbone);
    b.bv = Tensor({d});
    b.wo = gaussian({d, d}, sd, backbone);
    b.bo = Tensor({d});
    b.ln2_gain = Tensor({d}, 1.0);
    b.ln2_bias = Tensor({d});
    b.fc1_weight = gaussian({d, h}, sd, backbone);
    b.fc1_bias = Tensor({h});
    b.fc2_weight = gaussian({h, d}, sh, backbone);
    b.fc2_bias = Tensor({d});
    m.blocks.push_back(std::move(b));
  }
  init_head(m, seed);
  init_prompts_trunc_normal(m, seed);
  set_trainability(m, policy);
  return m;
}

void init_head(ModelParams& params, std::uint64_t seed) {
  Rng rng(Rng::derive(seed, 2));
  const bool trainable = params.head_weight.requires_grad();
  params.head_weight = trunc_normal({params.config.num_classes, params.config.embed_dim}, 0.02, rng);
  params.head_bias = Tensor({params.config.num_classes});
  params.head_weight.set_requires_grad(trainable);
  params.head_bias.set_requires_grad(trainable);
}

void init_prompts_trunc_normal(ModelParams& params, std::uint64_t seed) {
  Rng rng(Rng::derive(seed, 3));
  for (BlockParams& b : params.blocks) {
    const bool trainable = b.prompts.requires_grad();
    b.prompts = prompt_bank(params.config.prompts_per_layer, params.config.embed_dim, rng);
    b.prompts.set_requires_grad(trainable);
  }
}

void set_trainability(ModelParams& params, Policy policy) {
  params.policy = policy;
  for (NamedParam& p : params.parameters()) {
    bool on = false;
    switch (p.role) {
      case ParamRole::HeadWeight:
      case ParamRole::HeadBias:
        on = true;
        break;
      case ParamRole::Prompt:
        on = policy != Policy::Linear;
        break;
      case ParamRole::KeyBias:
      case ParamRole::ValueBias:
        on = policy == Policy::DaVptPlus;
        break;
      default:
        break;
    }
    p.tensor->set_requires_grad(on);
  }
}

std::size_t trainable_count(const ModelParams& params) {
  std::size_t n = 0;
  for (const Tensor* t : params.parameters())
    if (t->requires_grad()) n += t->numel();
  return n;
}

// ---------------------------------------------------------------------------

const LayerTrace* ForwardResult::trace(std::size_t layer) const {
  for (const LayerTrace& t : traces)
    if (t.layer == layer) return &t;
  return nullptr;
}

namespace {

template <typename BindFn>
BoundModel bind_with(const ModelParams& params, BindFn&& bind_one) {
  BoundModel m;
  m.params = &params;
  m.patch_weight = bind_one(params.patch_weight);
  m.patch_bias = bind_one(params.patch_bias);
  m.cls_token = bind_one(params.cls_token);
  m.pos_embed = bind_one(params.pos_embed);
  for (const BlockParams& b : params.blocks) {
    BoundBlock bb;
    bb.ln1_gain = bind_one(b.ln1_gain);
    bb.ln1_bias = bind_one(b.ln1_bias);
    bb.wq = bind_one(b.wq);
    bb.bq = bind_one(b.bq);
    bb.wk = bind_one(b.wk);
    bb.bk = bind_one(b.bk);
    bb.wv = bind_one(b.wv);
    bb.bv = bind_one(b.bv);
    bb.wo = bind_one(b.wo);
    bb.bo = bind_one(b.bo);
    bb.ln2_gain = bind_one(b.ln2_gain);
    bb.ln2_bias = bind_one(b.ln2_bias);
    bb.fc1_weight = bind_one(b.fc1_weight);
    bb.fc1_bias = bind_one(b.fc1_bias);
    bb.fc2_weight = bind_one(b.fc2_weight);
    bb.fc2_bias = bind_one(b.fc2_bias);
    if (b.prompts.numel() > 0) bb.prompts = bind_one(b.prompts);
    m.blocks.push_back(bb);
  }
  m.head_weight = bind_one(params.head_weight);
  m.head_bias = bind_one(params.head_bias);
  return m;
}

}  // namespace

BoundModel bind(Tape& tape, ModelParams& params) {
  return bind_with(params, [&](const Tensor& t) { return tape.parameter(const_cast<Tensor&>(t)); });
}

BoundModel bind_frozen(Tape& tape, const ModelParams& params) {
  return bind_with(params, [&](const Tensor& t) {
    Tensor copy = t;
    copy.set_requires_grad(false);
    copy.clear_grad();
    return tape.constant(std::move(copy));
  });
}

Var embed(Tape& tape, const BoundModel& model, std::span<const std::span<const std::uint8_t>> images) {
  const ViTConfig& cfg = model.params->config;
  if (images.empty()) throw ContractError("forward requires a nonempty batch");
  const std::size_t b = images.size(), n = cfg.num_patches(), p = cfg.patch_dim(), g = cfg.grid();
  const std::size_t ps = cfg.patch_size, ch = cfg.channels, w = cfg.image_size;
  Tensor patches({b * n, p});
  for (std::size_t s = 0; s < b; ++s) {
    if (images[s].size() != cfg.image_bytes()) {
      throw ConfigError("image " + std::to_string(s) + " has " + std::to_string(images[s].size()) +
                        " bytes, model expects " + std::to_string(cfg.image_bytes()));
    }
    for (std::size_t gy = 0; gy < g; ++gy)
      for (std::size_t gx = 0; gx < g; ++gx) {
        double* dst = patches.values().data() + (s * n + gy * g + gx) * p;
        std::size_t k = 0;
        for (std::size_t y = 0; y < ps; ++y)
          for (std::size_t x = 0; x < ps; ++x)
            for (std::size_t c = 0; c < ch; ++c)
              dst[k++] = images[s][((gy * ps + y) * w + (gx * ps + x)) * ch + c] / 255.0;
      }
  }
  Var emb = add_row(matmul_nt(tape.constant(std::move(patches)), model.patch_weight), model.patch_bias);
  std::vector<RowRef> rows;
  std::vector<RowRef> pos;
  rows.reserve(b * (n + 1));
  pos.reserve(b * (n + 1));
  for (std::size_t s = 0; s < b; ++s) {
    rows.push_back({model.cls_token, 0});
    for (std::size_t i = 0; i < n; ++i) rows.push_back({emb, s * n + i});
    for (std::size_t i = 0; i <= n; ++i) pos.push_back({model.pos_embed, i});
  }
  return add(gather_rows(rows), gather_rows(pos));
}

Tensor patchify(const ModelParams& params, std::span<const std::uint8_t> image) {
  Tape tape;
  BoundModel m = bind_frozen(tape, params);
  std::span<const std::uint8_t> one[] = {image};
  return tape.value(embed(tape, m, one));
}

BlockOutput forward_block(Tape& tape, const BoundModel& model, std::size_t layer, Var input, std::size_t batch,
                          bool capture_trace, const ForwardOptions& options) {
  const ViTConfig& cfg = model.params->config;
  const BoundBlock& blk = model.blocks.at(layer);
  const std::size_t n = cfg.num_patches();
  const std::size_t m = options.insert_prompts ? cfg.prompts_per_layer : 0;
  const std::size_t in_seq = n + 1, seq = 1 + m + n;
  if (tape.value(input).rows() != batch * in_seq || tape.value(input).cols() != cfg.embed_dim) {
    throw ContractError("block " + std::to_string(layer) + " expects " + std::to_string(batch * in_seq) + " x " +
                        std::to_string(cfg.embed_dim) + " input rows, got " +
                        shape_string(tape.value(input).shape()));
  }

  Var z = input;
  if (m > 0) {
    std::vector<RowRef> rows;
    rows.reserve(batch * seq);
    for (std::size_t s = 0; s < batch; ++s) {
      rows.push_back({input, s * in_seq});
      for (std::size_t k = 0; k < m; ++k) rows.push_back({blk.prompts, k});
      for (std::size_t i = 0; i < n; ++i) rows.push_back({input, s * in_seq + 1 + i});
    }
    z = gather_rows(rows);
  }

  Var h = layer_norm(z, blk.ln1_gain, blk.ln1_bias);
  Var q = add_row(matmul(h, blk.wq), blk.bq);
  Var k = add_row(matmul(h, blk.wk), blk.bk);
  Var v = add_row(matmul(h, blk.wv), blk.bv);
  BlockOutput result;
  Var a = attention(q, k, v, batch, cfg.num_heads, capture_trace ? &result.trace.attention : nullptr);
  Var o = add_row(matmul(a, blk.wo), blk.bo);
  Var z1 = add(z, o);
  Var h2 = layer_norm(z1, blk.ln2_gain, blk.ln2_bias);
  Var mlp = add_row(matmul(gelu(add_row(matmul(h2, blk.fc1_weight), blk.fc1_bias)), blk.fc2_weight), blk.fc2_bias);
  Var z2 = add(z1, mlp);

  if (m > 0) {
    std::vector<RowRef> keep;
    keep.reserve(batch * in_seq);
    for (std::size_t s = 0; s < batch; ++s) {
      keep.push_back({z2, s * seq});
      for (std::size_t i = 0; i < n; ++i) keep.push_back({z2, s * seq + 1 + m + i});
    }
    result.out = gather_rows(keep);
  } else {
    result.out = z2;
  }

  if (capture_trace) {
    LayerTrace& tr = result.trace;
    tr.layer = layer;
    tr.seq_len = seq;
    tr.prompt_count = m;
    std::vector<RowRef> toks;
    toks.reserve(batch * n);
    for (std::size_t s = 0; s < batch; ++s)
      for (std::size_t i = 0; i < n; ++i) toks.push_back({o, s * seq + 1 + m + i});
    tr.tokens = gather_rows(toks);
    if (m > 0) {
      tr.prompts = blk.prompts;
      tr.query_prompts = add_row(matmul(blk.prompts, blk.wq), blk.bq);
    }
  }
  return result;
}

ForwardResult forward_model(Tape& tape, const BoundModel& model, std::span<const std::span<const std::uint8_t>> images,
                            std::span<const std::size_t> traced_layers, const ForwardOptions& options) {
  const ViTConfig& cfg = model.params->config;
  for (std::size_t l : traced_layers) {
    if (l >= cfg.num_layers) {
      throw ConfigError("traced layer " + std::to_string(l) + " out of range for " + std::to_string(cfg.num_layers) +
                        " layers");
    }
  }
  ForwardResult result;
  result.batch = images.size();
  Var x = embed(tape, model, images);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const bool traced = std::find(traced_layers.begin(), traced_layers.end(), l) != traced_layers.end();
    BlockOutput blk = forward_block(tape, model, l, x, result.batch, traced, options);
    x = blk.out;
    if (traced) result.traces.push_back(std::move(blk.trace));
  }
  const std::size_t in_seq = cfg.num_patches() + 1;
  std::vector<RowRef> cls;
  cls.reserve(result.batch);
  for (std::size_t s = 0; s < result.batch; ++s) cls.push_back({x, s * in_seq});
  result.cls = gather_rows(cls);
  result.logits = add_row(matmul_nt(result.cls, model.head_weight), model.head_bias);
  return result;
}

void init_prompts_data_mean(ModelParams& params, std::span<const std::span<const std::uint8_t>> images) {
  if (images.empty()) throw ConfigError("data_mean prompt initialization requires a dataset");
  const ViTConfig& cfg = params.config;
  const std::size_t d = cfg.embed_dim;
  std::vector<std::vector<double>> sums(cfg.num_layers, std::vector<double>(d, 0.0));
  std::vector<std::size_t> layers(cfg.num_layers);
  for (std::size_t l = 0; l < layers.size(); ++l) layers[l] = l;
  constexpr std::size_t chunk = 32;
  std::size_t rows = 0;
  for (std::size_t start = 0; start < images.size(); start += chunk) {
    const std::size_t end = std::min(images.size(), start + chunk);
    Tape tape;
    BoundModel m = bind_frozen(tape, params);
    ForwardOptions opts;
    opts.insert_prompts = false;
    ForwardResult fr = forward_model(tape, m, images.subspan(start, end - start), layers, opts);
    for (const LayerTrace& tr : fr.traces) {
      const Tensor& t = tape.value(tr.tokens);
      for (std::size_t r = 0; r < t.rows(); ++r)
        for (std::size_t j = 0; j < d; ++j) sums[tr.layer][j] += t.at(r, j);
    }
    rows += (end - start) * cfg.num_patches();
  }
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    Tensor& bank = params.blocks[l].prompts;
    for (std::size_t k = 0; k < bank.rows(); ++k)
      for (std::size_t j = 0; j < d; ++j) bank.at(k, j) = sums[l][j] / static_cast<double>(rows);
  }
}

}  // namespace davpt
