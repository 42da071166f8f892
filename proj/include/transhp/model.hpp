#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "transhp/dataset.hpp"
#include "transhp/hierarchy.hpp"
#include "transhp/objective.hpp"
#include "transhp/tensor.hpp"

// The TransHP architecture: a small pre-norm ViT whose designated blocks
// receive a pool of learnable coarse-class prompt tokens appended to the
// token sequence. Prompt output states leave the residual stream after their
// block (they feed the coarse head only), so the next block always sees
// 1+N tokens again.

namespace transhp {

inline constexpr double kLayerNormEps = 1e-5;

// One prompting block: placed at 1-based layer_index, tied to a hierarchy
// level with coarse_count classes, weighted by lambda in the total loss.
struct PromptingSpec {
  int layer_index = 0;
  int level_id = 0;
  int coarse_count = 0;
  double lambda = 1.0;
};

struct ModelConfig {
  int image_size = 32;
  int patch_size = 4;
  int embed_dim = 64;
  int depth = 8;
  int heads = 4;
  double mlp_ratio = 4.0;
  int fine_count = 0;
  std::vector<PromptingSpec> prompting_specs;

  int patch_grid() const { return image_size / patch_size; }
  int patch_tokens() const { return patch_grid() * patch_grid(); }  // N
  int patch_dim() const { return 3 * patch_size * patch_size; }
  int head_dim() const { return embed_dim / heads; }
  int mlp_hidden() const { return static_cast<int>(std::lround(mlp_ratio * embed_dim)); }
};

enum class Variant { transhp, baseline, no_prompts, no_coarse_labels };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::transhp: return "transhp";
    case Variant::baseline: return "baseline";
    case Variant::no_prompts: return "no-prompts";
    case Variant::no_coarse_labels: return "no-coarse-labels";
  }
  return "?";
}

inline Variant variant_from_name(const std::string& name) {
  if (name == "transhp") return Variant::transhp;
  if (name == "baseline") return Variant::baseline;
  if (name == "no-prompts") return Variant::no_prompts;
  if (name == "no-coarse-labels") return Variant::no_coarse_labels;
  throw ConfigError("unknown variant '" + name +
                    "' (expected transhp, baseline, no-prompts, no-coarse-labels)");
}

template <class S>
struct TransHPModel {
  ModelConfig config;
  Variant variant = Variant::transhp;
  uint64_t seed = 0;
  std::vector<std::string> warnings;

  std::vector<std::string> param_order;
  std::map<std::string, Tensor<S>> params;

  Tensor<S>& param(const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw ContractError("no parameter named '" + name + "'");
    return it->second;
  }
  const Tensor<S>& param(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw ContractError("no parameter named '" + name + "'");
    return it->second;
  }
  bool has_param(const std::string& name) const { return params.count(name) != 0; }

  void add_param(const std::string& name, Tensor<S> t) {
    t.set_requires_grad(true);
    param_order.push_back(name);
    params.emplace(name, std::move(t));
  }
  void drop_param(const std::string& name) {
    params.erase(name);
    param_order.erase(std::remove(param_order.begin(), param_order.end(), name),
                      param_order.end());
  }
  void zero_grads() {
    for (auto& [name, t] : params) t.zero_grad();
  }
};

struct ParamCount {
  long total = 0;
  long added_by_prompting = 0;
};

// Parameter totals; added_by_prompting counts every prompting-specific
// tensor (pools + prototypes for the full model; per-block coarse heads for
// the no-prompts variant).
template <class S>
ParamCount count_params(const TransHPModel<S>& model) {
  ParamCount pc;
  for (const auto& name : model.param_order) {
    const long n = model.param(name).numel();
    pc.total += n;
    if (name.rfind("prompt", 0) == 0) pc.added_by_prompting += n;
  }
  return pc;
}

namespace detail_model {

inline void validate_config(const ModelConfig& c, const LabelHierarchy& h) {
  if (c.image_size <= 0 || c.patch_size <= 0 || c.image_size % c.patch_size != 0)
    throw ConfigError("image size " + std::to_string(c.image_size) +
                      " is not divisible by patch size " + std::to_string(c.patch_size));
  if (c.embed_dim <= 0 || c.heads <= 0 || c.embed_dim % c.heads != 0)
    throw ConfigError("embed dim " + std::to_string(c.embed_dim) + " is not divisible by " +
                      std::to_string(c.heads) + " heads");
  if (c.depth < 1) throw ConfigError("depth must be >= 1");
  if (c.mlp_hidden() < 1) throw ConfigError("mlp_ratio too small");
  if (c.fine_count != h.fine_count())
    throw ConfigError("config fine_count " + std::to_string(c.fine_count) +
                      " differs from hierarchy fine_count " + std::to_string(h.fine_count()));
  int prev_layer = 0;
  for (const auto& s : c.prompting_specs) {
    if (s.layer_index < 1 || s.layer_index > c.depth)
      throw ConfigError("prompting layer " + std::to_string(s.layer_index) + " outside [1," +
                        std::to_string(c.depth) + "]");
    if (s.layer_index <= prev_layer)
      throw ConfigError("prompting layers must be strictly increasing (one pool per block)");
    prev_layer = s.layer_index;
    if (s.level_id < 0 || s.level_id >= h.level_count())
      throw ConfigError("prompting spec references hierarchy level " + std::to_string(s.level_id) +
                        ", hierarchy has " + std::to_string(h.level_count()));
    if (s.coarse_count != h.level(s.level_id).coarse_count)
      throw ConfigError("prompting spec at layer " + std::to_string(s.layer_index) + " declares M=" +
                        std::to_string(s.coarse_count) + " but hierarchy level '" +
                        h.level(s.level_id).name + "' has M=" +
                        std::to_string(h.level(s.level_id).coarse_count));
    if (s.lambda < 0) throw ConfigError("lambda must be >= 0");
  }
}

inline std::vector<std::string> placement_warnings(const ModelConfig& c) {
  // Coarser levels (smaller M) belong nearer the bottom; violations warn.
  std::vector<std::string> w;
  for (size_t i = 0; i + 1 < c.prompting_specs.size(); ++i) {
    const auto& lo = c.prompting_specs[i];
    const auto& hi = c.prompting_specs[i + 1];
    if (hi.coarse_count < lo.coarse_count)
      w.push_back("placement principle: level with M=" + std::to_string(hi.coarse_count) +
                  " at layer " + std::to_string(hi.layer_index) +
                  " sits above coarser level with M=" + std::to_string(lo.coarse_count) +
                  " at layer " + std::to_string(lo.layer_index));
  }
  return w;
}

template <class S>
Tensor<S> fanin_normal(std::vector<int> shape, uint64_t seed, const std::string& name) {
  auto rng = named_rng(seed, name);
  const S stddev = S(1) / std::sqrt(static_cast<S>(shape[0]));
  return make_normal<S>(std::move(shape), rng, stddev);
}

template <class S>
Tensor<S> token_init(std::vector<int> shape, uint64_t seed, const std::string& name) {
  auto rng = named_rng(seed, name);
  return make_trunc_normal<S>(std::move(shape), rng, S(0.02));
}

}  // namespace detail_model

// Deterministic construction: every tensor draws from its own named stream
// under the given seed, so two models sharing a seed share every parameter
// they have in common (a baseline is bitwise a TransHP minus the prompting
// tensors).
template <class S>
TransHPModel<S> assemble(const ModelConfig& config, const LabelHierarchy& hierarchy,
                         uint64_t seed) {
  detail_model::validate_config(config, hierarchy);
  TransHPModel<S> m;
  m.config = config;
  m.variant = config.prompting_specs.empty() ? Variant::baseline : Variant::transhp;
  m.seed = seed;
  m.warnings = detail_model::placement_warnings(config);

  const int C = config.embed_dim, N = config.patch_tokens();
  m.add_param("embed.weight", detail_model::fanin_normal<S>({config.patch_dim(), C}, seed, "embed.weight"));
  m.add_param("embed.bias", Tensor<S>::zeros({C}));
  m.add_param("cls_token", detail_model::token_init<S>({C}, seed, "cls_token"));
  m.add_param("pos_embed", detail_model::token_init<S>({1 + N, C}, seed, "pos_embed"));
  for (int l = 1; l <= config.depth; ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    m.add_param(p + "ln1.gain", Tensor<S>::full({C}, S(1)));
    m.add_param(p + "ln1.bias", Tensor<S>::zeros({C}));
    for (const char* proj : {"q", "k", "v"}) {
      m.add_param(p + proj + ".weight", detail_model::fanin_normal<S>({C, C}, seed, p + proj + ".weight"));
      m.add_param(p + proj + ".bias", Tensor<S>::zeros({C}));
    }
    m.add_param(p + "attn_out.weight", detail_model::fanin_normal<S>({C, C}, seed, p + "attn_out.weight"));
    m.add_param(p + "attn_out.bias", Tensor<S>::zeros({C}));
    m.add_param(p + "ln2.gain", Tensor<S>::full({C}, S(1)));
    m.add_param(p + "ln2.bias", Tensor<S>::zeros({C}));
    m.add_param(p + "mlp1.weight", detail_model::fanin_normal<S>({C, config.mlp_hidden()}, seed, p + "mlp1.weight"));
    m.add_param(p + "mlp1.bias", Tensor<S>::zeros({config.mlp_hidden()}));
    m.add_param(p + "mlp2.weight", detail_model::fanin_normal<S>({config.mlp_hidden(), C}, seed, p + "mlp2.weight"));
    m.add_param(p + "mlp2.bias", Tensor<S>::zeros({C}));
  }
  m.add_param("final_ln.gain", Tensor<S>::full({C}, S(1)));
  m.add_param("final_ln.bias", Tensor<S>::zeros({C}));
  m.add_param("fine_head.weight", detail_model::fanin_normal<S>({C, config.fine_count}, seed, "fine_head.weight"));
  m.add_param("fine_head.bias", Tensor<S>::zeros({config.fine_count}));
  for (const auto& s : config.prompting_specs) {
    const std::string p = "prompt" + std::to_string(s.layer_index) + ".";
    m.add_param(p + "pool", detail_model::token_init<S>({s.coarse_count, C}, seed, p + "pool"));
    m.add_param(p + "prototypes", detail_model::token_init<S>({s.coarse_count, C}, seed, p + "prototypes"));
  }
  return m;
}

// Fig.-4-style ablation arms derived from a full model. Shared parameters
// are carried over unchanged.
template <class S>
TransHPModel<S> make_variant(const TransHPModel<S>& model, Variant kind) {
  if (model.config.prompting_specs.empty())
    throw ContractError("make_variant requires a model with at least one prompting spec");
  if (kind != Variant::no_prompts && kind != Variant::no_coarse_labels)
    throw ContractError("make_variant produces the no-prompts / no-coarse-labels arms");
  TransHPModel<S> m = model;
  m.variant = kind;
  for (const auto& s : model.config.prompting_specs) {
    const std::string p = "prompt" + std::to_string(s.layer_index) + ".";
    if (kind == Variant::no_prompts) {
      // Coarse supervision moves onto the class token through a linear head.
      m.drop_param(p + "pool");
      m.drop_param(p + "prototypes");
      m.add_param(p + "head.weight", detail_model::fanin_normal<S>({model.config.embed_dim, s.coarse_count},
                                                                   model.seed, p + "head.weight"));
      m.add_param(p + "head.bias", Tensor<S>::zeros({s.coarse_count}));
    } else {
      // Pools stay in the sequence but carry no supervision.
      m.drop_param(p + "prototypes");
    }
  }
  if (kind == Variant::no_coarse_labels)
    for (auto& s : m.config.prompting_specs) s.lambda = 0.0;
  return m;
}

// Plain ViT with the shared parameters of the given model.
template <class S>
TransHPModel<S> make_baseline(const TransHPModel<S>& model) {
  TransHPModel<S> m = model;
  m.variant = Variant::baseline;
  for (const auto& s : model.config.prompting_specs) {
    const std::string p = "prompt" + std::to_string(s.layer_index) + ".";
    for (const char* suffix : {"pool", "prototypes", "head.weight", "head.bias"})
      if (m.has_param(p + suffix)) m.drop_param(p + suffix);
  }
  m.config.prompting_specs.clear();
  m.warnings.clear();
  return m;
}

// ---------------------------------------------------------------------------
// Forward pass

template <class S>
struct BlockOutput {
  Tensor<S> tokens;     // [B,T,C]
  Tensor<S> attention;  // [B,h,T,T]
};

// Pre-norm block: x + Attn(LN(x)), then + MLP(LN(.)). score_bias, when
// defined, is a [T,T] additive mask applied to the attention logits of every
// head (ablation tooling).
template <class S>
BlockOutput<S> block_forward_batch(const TransHPModel<S>& m, int layer, const Tensor<S>& x,
                                   const Tensor<S>& score_bias = {}) {
  const std::string p = "block" + std::to_string(layer) + ".";
  const int B = x.dim(0), T = x.dim(1);
  const int h = m.config.heads, d = m.config.head_dim();
  auto h1 = layer_norm(x, m.param(p + "ln1.gain"), m.param(p + "ln1.bias"), S(kLayerNormEps));
  auto q = split_heads(linear(h1, m.param(p + "q.weight"), m.param(p + "q.bias")), h);
  auto k = split_heads(linear(h1, m.param(p + "k.weight"), m.param(p + "k.bias")), h);
  auto v = split_heads(linear(h1, m.param(p + "v.weight"), m.param(p + "v.bias")), h);
  auto scores = scale(bmm_nt(q, k), S(1) / std::sqrt(static_cast<S>(d)));  // [B*h,T,T]
  if (score_bias.defined()) scores = add_broadcast_batch(scores, score_bias);
  auto attn = softmax(scores);
  auto mixed = merge_heads(bmm(attn, v), h);
  auto x2 = add(x, linear(mixed, m.param(p + "attn_out.weight"), m.param(p + "attn_out.bias")));
  auto h2 = layer_norm(x2, m.param(p + "ln2.gain"), m.param(p + "ln2.bias"), S(kLayerNormEps));
  auto hidden = gelu(linear(h2, m.param(p + "mlp1.weight"), m.param(p + "mlp1.bias")));
  auto y = add(x2, linear(hidden, m.param(p + "mlp2.weight"), m.param(p + "mlp2.bias")));
  return BlockOutput<S>{y, reshape(attn, {B, h, T, T})};
}

template <class S>
struct PromptingBlockOutput {
  Tensor<S> features;       // [B, 1+N, C], continues to the next block
  Tensor<S> prompt_states;  // [B, M, C], feeds the coarse head only
  Tensor<S> attention;      // [B, h, 1+N+M, 1+N+M]
};

// Runs one block on [x, pool]: features are the leading 1+N output rows, the
// trailing M rows are the prompt output states. With mask_prompt_keys the
// prompt columns are removed from every softmax (their keys absorb nothing),
// which reduces the feature rows to a plain block forward.
template <class S>
PromptingBlockOutput<S> prompting_block_forward(const TransHPModel<S>& m, int layer,
                                                const Tensor<S>& tokens, const Tensor<S>& pool,
                                                bool mask_prompt_keys = false) {
  if (tokens.rank() != 3) throw ShapeError("prompting_block_forward expects [B,T,C] tokens");
  if (pool.rank() != 2 || pool.dim(pool.rank() - 1) != m.config.embed_dim)
    throw ShapeError("prompt pool must be [M," + std::to_string(m.config.embed_dim) + "], got " +
                     shape_str(pool.shape()));
  const int B = tokens.dim(0), Tf = tokens.dim(1), M = pool.dim(0);
  auto xin = concat_tokens(tokens, broadcast_batch(pool, B));
  Tensor<S> bias;
  if (mask_prompt_keys && M > 0) {
    bias = Tensor<S>::zeros({Tf + M, Tf + M});
    for (int r = 0; r < Tf + M; ++r)
      for (int c = Tf; c < Tf + M; ++c) bias.data()[static_cast<size_t>(r) * (Tf + M) + c] = S(-1e30);
  }
  auto blk = block_forward_batch(m, layer, xin, bias);
  return PromptingBlockOutput<S>{slice_tokens(blk.tokens, 0, Tf), slice_tokens(blk.tokens, Tf, M),
                                 blk.attention};
}

// Images as a [B, N, 3*P*P] tensor of flattened patches, row-major patch
// grid, pixels interleaved H*W*3 within a patch row-major as well.
template <class S>
Tensor<S> make_patch_tensor(const std::vector<const ImageRecord*>& batch, const ModelConfig& c) {
  const int H = c.image_size, P = c.patch_size, G = c.patch_grid(), N = c.patch_tokens();
  const int pd = c.patch_dim();
  const int B = static_cast<int>(batch.size());
  std::vector<S> buf(static_cast<size_t>(B) * N * pd);
  for (int b = 0; b < B; ++b) {
    const auto& px = batch[static_cast<size_t>(b)]->pixels;
    if (static_cast<int>(px.size()) != H * H * 3)
      throw ConfigError("image " + std::to_string(batch[static_cast<size_t>(b)]->image_id) +
                        " has " + std::to_string(px.size()) + " values, config expects " +
                        std::to_string(H * H * 3));
    for (int gy = 0; gy < G; ++gy)
      for (int gx = 0; gx < G; ++gx) {
        S* dst = buf.data() + ((static_cast<size_t>(b) * N + gy * G + gx)) * pd;
        for (int py = 0; py < P; ++py)
          for (int pxx = 0; pxx < P; ++pxx)
            for (int ch = 0; ch < 3; ++ch)
              *dst++ = static_cast<S>(px[((static_cast<size_t>(gy * P + py) * H) + gx * P + pxx) * 3 + ch]);
      }
  }
  return Tensor<S>::from({B, N, pd}, std::move(buf));
}

// [B,1+N,C]: class token, then patch embeddings, plus position embeddings.
template <class S>
Tensor<S> patch_embed_batch(const TransHPModel<S>& m, const Tensor<S>& patches) {
  const int B = patches.dim(0);
  auto emb = linear(patches, m.param("embed.weight"), m.param("embed.bias"));
  auto cls = broadcast_batch(reshape(m.param("cls_token"), {1, m.config.embed_dim}), B);
  return add_broadcast_batch(concat_tokens(cls, emb), m.param("pos_embed"));
}

// Single-image [1+N, C] embedding.
template <class S>
Tensor<S> patch_embed(const TransHPModel<S>& m, const ImageRecord& image) {
  auto x = patch_embed_batch(m, make_patch_tensor<S>({&image}, m.config));
  return reshape(x, {1 + m.config.patch_tokens(), m.config.embed_dim});
}

template <class S>
struct ForwardBatch {
  Tensor<S> fine_logits;                 // [B, fine_count]
  std::vector<Tensor<S>> coarse_logits;  // per prompting block, [B, M]; empty for unsupervised arms
  std::vector<Tensor<S>> prompt_states;  // per prompting block, [B, M, C]
  std::vector<Tensor<S>> attention;      // per block, [B,h,T,T]; defined when retained
  std::vector<int> block_input_tokens;   // sequence length entering each block
  int batch = 0;
};

// Runs blocks 1..L, appending the prompt pool at each prompting layer and
// splitting its output states off before the next block.
template <class S>
ForwardBatch<S> forward_batch(const TransHPModel<S>& m, const std::vector<const ImageRecord*>& images,
                              bool retain_attention = false) {
  const int B = static_cast<int>(images.size());
  if (B == 0) throw ContractError("forward_batch: empty batch");
  const int N = m.config.patch_tokens();
  const bool has_pools =
      m.variant == Variant::transhp || m.variant == Variant::no_coarse_labels;

  ForwardBatch<S> out;
  out.batch = B;
  out.attention.resize(static_cast<size_t>(m.config.depth));

  auto x = patch_embed_batch(m, make_patch_tensor<S>(images, m.config));
  size_t spec_i = 0;
  for (int l = 1; l <= m.config.depth; ++l) {
    const PromptingSpec* spec = nullptr;
    if (spec_i < m.config.prompting_specs.size() &&
        m.config.prompting_specs[spec_i].layer_index == l)
      spec = &m.config.prompting_specs[spec_i];

    Tensor<S> xin = x;
    if (spec && has_pools) {
      const auto& pool = m.param("prompt" + std::to_string(l) + ".pool");
      xin = concat_tokens(x, broadcast_batch(pool, B));
    }
    out.block_input_tokens.push_back(xin.dim(1));
    auto blk = block_forward_batch(m, l, xin);
    const bool keep_attn = retain_attention || (spec && has_pools);
    if (keep_attn) out.attention[static_cast<size_t>(l - 1)] = blk.attention;

    if (spec && has_pools) {
      x = slice_tokens(blk.tokens, 0, 1 + N);
      auto pstates = slice_tokens(blk.tokens, 1 + N, spec->coarse_count);
      out.prompt_states.push_back(pstates);
      if (m.variant == Variant::transhp)
        out.coarse_logits.push_back(
            objective::coarse_scores(pstates, m.param("prompt" + std::to_string(l) + ".prototypes")));
    } else {
      x = blk.tokens;
      if (spec && m.variant == Variant::no_prompts) {
        auto cls = reshape(slice_tokens(x, 0, 1), {B, m.config.embed_dim});
        out.coarse_logits.push_back(linear(cls, m.param("prompt" + std::to_string(l) + ".head.weight"),
                                           m.param("prompt" + std::to_string(l) + ".head.bias")));
      }
    }
    if (spec) ++spec_i;
  }
  auto final_x = layer_norm(x, m.param("final_ln.gain"), m.param("final_ln.bias"), S(kLayerNormEps));
  auto cls = reshape(slice_tokens(final_x, 0, 1), {B, m.config.embed_dim});
  out.fine_logits = linear(cls, m.param("fine_head.weight"), m.param("fine_head.bias"));
  return out;
}

// Per-image view of a forward pass.
template <class S>
struct ForwardOutput {
  Tensor<S> fine_logits;                 // [fine_count]
  std::vector<Tensor<S>> coarse_logits;  // per prompting block, [M]
  std::vector<Tensor<S>> prompt_states;  // per prompting block, [M, C]
  std::vector<Tensor<S>> attention;      // per block, [h,T,T]; defined when retained
  std::vector<int> block_input_tokens;
};

template <class S>
ForwardOutput<S> forward(const TransHPModel<S>& m, const ImageRecord& image,
                         bool retain_attention = false) {
  auto batch = forward_batch<S>(m, {&image}, retain_attention);
  ForwardOutput<S> out;
  out.fine_logits = reshape(batch.fine_logits, {m.config.fine_count});
  for (auto& t : batch.coarse_logits) out.coarse_logits.push_back(reshape(t, {t.dim(1)}));
  for (auto& t : batch.prompt_states)
    out.prompt_states.push_back(reshape(t, {t.dim(1), t.dim(2)}));
  for (auto& t : batch.attention) {
    if (t.defined())
      out.attention.push_back(reshape(t, {t.dim(1), t.dim(2), t.dim(3)}));
    else
      out.attention.push_back(Tensor<S>());
  }
  out.block_input_tokens = batch.block_input_tokens;
  return out;
}

// Composite objective on a batch forward; coarse targets derived from the
// hierarchy per prompting spec.
template <class S>
objective::LossBreakdown<S> batch_loss(const TransHPModel<S>& m, const ForwardBatch<S>& fwd,
                                       const std::vector<int>& fine_targets,
                                       const LabelHierarchy& hierarchy) {
  std::vector<Tensor<S>> coarse_logits = fwd.coarse_logits;
  std::vector<std::vector<int>> coarse_targets;
  std::vector<double> lambdas;
  if (!coarse_logits.empty()) {
    for (const auto& spec : m.config.prompting_specs) {
      std::vector<int> ct(fine_targets.size());
      for (size_t i = 0; i < fine_targets.size(); ++i)
        ct[i] = hierarchy.ancestor_of(fine_targets[i], spec.level_id);
      coarse_targets.push_back(std::move(ct));
      lambdas.push_back(spec.lambda);
    }
  }
  return objective::total_loss(fwd.fine_logits, coarse_logits, fine_targets, coarse_targets,
                               lambdas);
}

}  // namespace transhp
