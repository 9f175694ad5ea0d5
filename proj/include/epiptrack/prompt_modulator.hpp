#pragma once

// Prompt modulator: attribute adapters, motion-noise corrector, text-query /
// visual-key interaction and attribute fusion, producing one multimodal
// embedding per target for each prompt branch.

#include <optional>
#include <stdexcept>
#include <string>

#include "epiptrack/autograd.hpp"
#include "epiptrack/nn.hpp"

namespace epiptrack {

using ag::Tensor;

enum class FusionStrategy { weighted, concat, self_attention };
enum class InteractionStrategy { cross_attention, concat, add };

inline FusionStrategy parse_fusion_strategy(const std::string& s) {
  if (s == "weighted") return FusionStrategy::weighted;
  if (s == "concat") return FusionStrategy::concat;
  if (s == "self-attention") return FusionStrategy::self_attention;
  throw std::invalid_argument("unknown fusion strategy '" + s + "'");
}

inline InteractionStrategy parse_interaction_strategy(const std::string& s) {
  if (s == "cross-attention") return InteractionStrategy::cross_attention;
  if (s == "concat") return InteractionStrategy::concat;
  if (s == "add") return InteractionStrategy::add;
  throw std::invalid_argument("unknown interaction strategy '" + s + "'");
}

inline std::string to_string(FusionStrategy f) {
  switch (f) {
    case FusionStrategy::weighted: return "weighted";
    case FusionStrategy::concat: return "concat";
    case FusionStrategy::self_attention: return "self-attention";
  }
  return "weighted";
}

inline std::string to_string(InteractionStrategy s) {
  switch (s) {
    case InteractionStrategy::cross_attention: return "cross-attention";
    case InteractionStrategy::concat: return "concat";
    case InteractionStrategy::add: return "add";
  }
  return "cross-attention";
}

inline constexpr std::size_t kExplicitSentences = 3;
inline constexpr std::size_t kImplicitSentences = 4;

/// One linear map per branch applied to every sentence's EOS embedding.
struct AttributeAdapter {
  nn::Linear explicit_map, implicit_map;

  AttributeAdapter() = default;
  AttributeAdapter(std::size_t d, nn::Rng& rng) : explicit_map(d, d, rng), implicit_map(d, d, rng) {}

  std::pair<Tensor, Tensor> operator()(const Tensor& eos_exp, const Tensor& eos_imp) const {
    if (eos_exp.rank() != 3 || eos_exp.dim(1) != kExplicitSentences)
      throw std::invalid_argument("adapt_attributes: expected 3 explicit sentences per target");
    if (eos_imp.rank() != 3 || eos_imp.dim(1) != kImplicitSentences)
      throw std::invalid_argument("adapt_attributes: expected 4 implicit sentences per target");
    if (eos_exp.dim(0) != eos_imp.dim(0)) throw std::invalid_argument("adapt_attributes: batch mismatch");
    return {explicit_map(eos_exp), implicit_map(eos_imp)};
  }

  void collect(nn::ParamList& out, const std::string& prefix) const {
    explicit_map.collect(out, prefix + ".explicit");
    implicit_map.collect(out, prefix + ".implicit");
  }
};

/// Four Linear-ReLU-LayerNorm blocks, d -> 2d -> 2d -> d -> d.
struct MNCorrector {
  std::vector<nn::Linear> linears;
  std::vector<nn::LayerNorm> norms;

  MNCorrector() = default;
  MNCorrector(std::size_t d, nn::Rng& rng) {
    const std::size_t dims[5] = {d, 2 * d, 2 * d, d, d};
    for (int i = 0; i < 4; ++i) {
      linears.emplace_back(dims[i], dims[i + 1], rng);
      norms.emplace_back(dims[i + 1]);
    }
  }

  Tensor operator()(const Tensor& cls) const {
    Tensor x = cls;
    for (std::size_t i = 0; i < linears.size(); ++i) x = norms[i](ag::relu(linears[i](x)));
    return x;
  }

  /// The same correction vector is added to each of a target's explicit
  /// attribute embeddings: [b,3,d] + xi([b,d]).
  Tensor correct(const Tensor& explicit_attrs, const Tensor& cls) const {
    return ag::add(explicit_attrs, ag::repeat_rows((*this)(cls), explicit_attrs.dim(1)));
  }

  void collect(nn::ParamList& out, const std::string& prefix) const {
    for (std::size_t i = 0; i < linears.size(); ++i) {
      linears[i].collect(out, prefix + ".block" + std::to_string(i) + ".linear");
      norms[i].collect(out, prefix + ".block" + std::to_string(i) + ".ln");
    }
  }
};

/// Single-layer multi-head cross-attention with learnable positional
/// encodings on queries (per branch) and keys (shared), text as residual.
struct InteractionBlock {
  nn::MultiHeadAttention mhca;
  Tensor pos_q_explicit;  // [3, d]
  Tensor pos_q_implicit;  // [4, d]
  Tensor pos_k;           // [l, d]

  InteractionBlock() = default;
  InteractionBlock(std::size_t d, std::size_t heads, std::size_t n_visual_tokens, nn::Rng& rng)
      : mhca(d, heads, rng),
        pos_q_explicit(nn::normal_param({kExplicitSentences, d}, 0.02, rng)),
        pos_q_implicit(nn::normal_param({kImplicitSentences, d}, 0.02, rng)),
        pos_k(nn::normal_param({n_visual_tokens, d}, 0.02, rng)) {}

  /// E_t = E_A + MHCA(E_A + P_Q, E_rv + P_K, E_rv).
  Tensor operator()(const Tensor& attrs, const Tensor& visual_tokens, Tensor* weights = nullptr) const {
    const std::size_t n = attrs.dim(1);
    const Tensor& pq = n == kExplicitSentences ? pos_q_explicit : pos_q_implicit;
    if (n != kExplicitSentences && n != kImplicitSentences)
      throw std::invalid_argument("interact: attribute count must be 3 or 4");
    if (visual_tokens.dim(1) != pos_k.dim(0))
      throw std::invalid_argument("interact: visual token count does not match P_K");
    Tensor q = ag::add(attrs, pq);
    Tensor k = ag::add(visual_tokens, pos_k);
    return ag::add(attrs, mhca(q, k, visual_tokens, nullptr, weights));
  }

  void collect(nn::ParamList& out, const std::string& prefix) const {
    mhca.collect(out, prefix + ".mhca");
    out.push_back({prefix + ".pos_q_explicit", pos_q_explicit});
    out.push_back({prefix + ".pos_q_implicit", pos_q_implicit});
    out.push_back({prefix + ".pos_k", pos_k});
  }
};

/// E_t = E_A + MLP3(pooled visual) broadcast over attributes.
struct AddInteraction {
  nn::Linear l1, l2, l3;

  AddInteraction() = default;
  AddInteraction(std::size_t d, nn::Rng& rng) : l1(d, d, rng), l2(d, d, rng), l3(d, d, rng) {}

  Tensor operator()(const Tensor& attrs, const Tensor& pooled) const {
    Tensor v = l3(ag::relu(l2(ag::relu(l1(pooled)))));
    return ag::add(attrs, ag::repeat_rows(v, attrs.dim(1)));
  }

  void collect(nn::ParamList& out, const std::string& prefix) const {
    l1.collect(out, prefix + ".l1");
    l2.collect(out, prefix + ".l2");
    l3.collect(out, prefix + ".l3");
  }
};

/// E_t = E_A + Linear(Proj(Linear([E_A, pooled]))).
struct ConcatInteraction {
  nn::Linear fuse, proj, out;

  ConcatInteraction() = default;
  ConcatInteraction(std::size_t d, nn::Rng& rng) : fuse(2 * d, d, rng), proj(d, d, rng), out(d, d, rng) {}

  Tensor operator()(const Tensor& attrs, const Tensor& pooled) const {
    Tensor joined = ag::concat({attrs, ag::repeat_rows(pooled, attrs.dim(1))}, 2);
    return ag::add(attrs, out(proj(ag::relu(fuse(joined)))));
  }

  void collect(nn::ParamList& o, const std::string& prefix) const {
    fuse.collect(o, prefix + ".fuse");
    proj.collect(o, prefix + ".proj");
    out.collect(o, prefix + ".out");
  }
};

/// Importance-weighted fusion: w = softmax(W1 E_t) over attributes,
/// E_m = W2 sum_i w_i E_t[:, i, :].
struct WeightedFusion {
  nn::Linear w1;  // d -> 1
  nn::Linear w2;  // d -> d

  WeightedFusion() = default;
  WeightedFusion(std::size_t d, nn::Rng& rng) : w1(d, 1, rng), w2(d, d, rng) {}

  Tensor weights(const Tensor& et) const {
    const std::size_t b = et.dim(0), n = et.dim(1);
    return ag::softmax_lastdim(ag::reshape(w1(et), {b, n}));
  }

  Tensor operator()(const Tensor& et, Tensor* weights_out = nullptr) const {
    const std::size_t b = et.dim(0), n = et.dim(1), d = et.dim(2);
    if (n == 0) throw std::invalid_argument("fuse_weighted: no attributes");
    Tensor w = weights(et);
    if (weights_out) *weights_out = w;
    Tensor pooled = ag::reshape(ag::bmm(ag::reshape(w, {b, 1, n}), et), {b, d});
    return w2(pooled);
  }

  void collect(nn::ParamList& out, const std::string& prefix) const {
    w1.collect(out, prefix + ".w1");
    w2.collect(out, prefix + ".w2");
  }
};

/// Channel-stack of the n attributes, then a linear map back to d.
struct ConcatFusion {
  nn::Linear map;

  ConcatFusion() = default;
  ConcatFusion(std::size_t n, std::size_t d, nn::Rng& rng) : map(n * d, d, rng) {}

  Tensor operator()(const Tensor& et) const {
    return map(ag::reshape(et, {et.dim(0), et.dim(1) * et.dim(2)}));
  }

  void collect(nn::ParamList& out, const std::string& prefix) const { map.collect(out, prefix + ".map"); }
};

/// One residual self-attention layer over attributes, then the mean.
struct SelfAttentionFusion {
  nn::MultiHeadAttention attn;

  SelfAttentionFusion() = default;
  SelfAttentionFusion(std::size_t d, std::size_t heads, nn::Rng& rng) : attn(d, heads, rng) {}

  Tensor operator()(const Tensor& et) const { return ag::mean_axis(ag::add(et, attn(et, et, et)), 1); }

  void collect(nn::ParamList& out, const std::string& prefix) const { attn.collect(out, prefix + ".attn"); }
};

/// Fusion head for one branch with all strategy variants.
struct BranchFusion {
  FusionStrategy strategy = FusionStrategy::weighted;
  WeightedFusion weighted;
  ConcatFusion concat;
  SelfAttentionFusion self_attention;

  BranchFusion() = default;
  BranchFusion(FusionStrategy s, std::size_t n, std::size_t d, std::size_t heads, nn::Rng& rng) : strategy(s) {
    switch (s) {
      case FusionStrategy::weighted: weighted = WeightedFusion(d, rng); break;
      case FusionStrategy::concat: concat = ConcatFusion(n, d, rng); break;
      case FusionStrategy::self_attention: self_attention = SelfAttentionFusion(d, heads, rng); break;
    }
  }

  Tensor operator()(const Tensor& et) const {
    switch (strategy) {
      case FusionStrategy::weighted: return weighted(et);
      case FusionStrategy::concat: return concat(et);
      case FusionStrategy::self_attention: return self_attention(et);
    }
    throw std::invalid_argument("fuse_variant: unknown strategy");
  }

  void collect(nn::ParamList& out, const std::string& prefix) const {
    switch (strategy) {
      case FusionStrategy::weighted: weighted.collect(out, prefix + ".weighted"); break;
      case FusionStrategy::concat: concat.collect(out, prefix + ".concat"); break;
      case FusionStrategy::self_attention: self_attention.collect(out, prefix + ".self_attention"); break;
    }
  }
};

struct ModulatorOptions {
  FusionStrategy fusion = FusionStrategy::weighted;
  InteractionStrategy interaction = InteractionStrategy::cross_attention;
  bool mn_corrector = true;
  std::size_t heads = 4;
  std::size_t n_visual_tokens = 8;
};

struct ModulatorOutputs {
  Tensor multimodal_explicit;  // E_m^ev [b, d]
  Tensor multimodal_implicit;  // E_m^iv [b, d]
};

struct PromptModulator {
  ModulatorOptions opts;
  AttributeAdapter adapter;
  MNCorrector corrector;
  InteractionBlock cross_attention;
  AddInteraction add_interaction;
  ConcatInteraction concat_interaction;
  BranchFusion fusion_explicit, fusion_implicit;

  PromptModulator() = default;
  PromptModulator(std::size_t d, const ModulatorOptions& o, nn::Rng& rng) : opts(o), adapter(d, rng) {
    // drawn unconditionally so toggling the corrector leaves every other
    // initial weight unchanged
    const auto corrector_seed = rng();
    if (opts.mn_corrector) {
      nn::Rng crng(corrector_seed);
      corrector = MNCorrector(d, crng);
    }
    switch (opts.interaction) {
      case InteractionStrategy::cross_attention:
        cross_attention = InteractionBlock(d, opts.heads, opts.n_visual_tokens, rng);
        break;
      case InteractionStrategy::add: add_interaction = AddInteraction(d, rng); break;
      case InteractionStrategy::concat: concat_interaction = ConcatInteraction(d, rng); break;
    }
    fusion_explicit = BranchFusion(opts.fusion, kExplicitSentences, d, opts.heads, rng);
    fusion_implicit = BranchFusion(opts.fusion, kImplicitSentences, d, opts.heads, rng);
  }

  Tensor interact(const Tensor& attrs, const Tensor& visual_tokens, const Tensor& visual_pooled) const {
    switch (opts.interaction) {
      case InteractionStrategy::cross_attention: return cross_attention(attrs, visual_tokens);
      case InteractionStrategy::add: return add_interaction(attrs, visual_pooled);
      case InteractionStrategy::concat: return concat_interaction(attrs, visual_pooled);
    }
    throw std::invalid_argument("interact_variant: unknown strategy");
  }

  /// eos_exp [b,3,d], eos_imp [b,4,d], visual tokens [b,l,d], pooled [b,d],
  /// global visual embedding [b,d].
  ModulatorOutputs operator()(const Tensor& eos_exp, const Tensor& eos_imp, const Tensor& visual_tokens,
                              const Tensor& visual_pooled, const Tensor& cls_final) const {
    auto [ea_exp, ea_imp] = adapter(eos_exp, eos_imp);
    if (opts.mn_corrector) ea_exp = corrector.correct(ea_exp, cls_final);
    ModulatorOutputs out;
    out.multimodal_explicit = fusion_explicit(interact(ea_exp, visual_tokens, visual_pooled));
    out.multimodal_implicit = fusion_implicit(interact(ea_imp, visual_tokens, visual_pooled));
    return out;
  }

  void collect(nn::ParamList& out, const std::string& prefix) const {
    adapter.collect(out, prefix + ".adapter");
    if (opts.mn_corrector) corrector.collect(out, prefix + ".mn_corrector");
    switch (opts.interaction) {
      case InteractionStrategy::cross_attention: cross_attention.collect(out, prefix + ".interaction"); break;
      case InteractionStrategy::add: add_interaction.collect(out, prefix + ".interaction_add"); break;
      case InteractionStrategy::concat: concat_interaction.collect(out, prefix + ".interaction_concat"); break;
    }
    fusion_explicit.collect(out, prefix + ".fusion_explicit");
    fusion_implicit.collect(out, prefix + ".fusion_implicit");
  }
};

}  // namespace epiptrack
