#pragma once

// The full embedding model: toy encoders, implicit prompt machinery,
// prompt modulator and feature augmentor wired together.

#include <array>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "epiptrack/encoder.hpp"
#include "epiptrack/explicit_prompts.hpp"
#include "epiptrack/feature_augmentor.hpp"
#include "epiptrack/implicit_prompts.hpp"
#include "epiptrack/prompt_modulator.hpp"

namespace epiptrack {

struct ModelConfig {
  EncoderConfig encoder;
  ModulatorOptions modulator;
  std::size_t k = 5;
  double alpha = 0.2;
  std::uint64_t seed = 7;

  void validate() const {
    encoder.validate();
    if (k == 0) throw std::invalid_argument("model config: augmentor.k must be >= 1");
    if (modulator.heads == 0 || encoder.d_joint % modulator.heads != 0)
      throw std::invalid_argument("model config: modulator heads must divide d_joint");
  }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["d_joint"] = c.encoder.d_joint;
  j["d_vis_cls"] = c.encoder.d_vis_cls;
  j["n_text_layers"] = c.encoder.n_text_layers;
  j["n_vis_layers"] = c.encoder.n_vis_layers;
  j["inject_layers"] = std::vector<int>(c.encoder.inject_layers.begin(), c.encoder.inject_layers.end());
  j["text_heads"] = c.encoder.text_heads;
  j["vis_heads"] = c.encoder.vis_heads;
  j["text_len"] = c.encoder.text_len;
  j["vocab"] = c.encoder.vocab;
  j["n_soft"] = c.encoder.n_soft;
  j["fusion"] = to_string(c.modulator.fusion);
  j["interaction"] = to_string(c.modulator.interaction);
  j["mn_corrector"] = c.modulator.mn_corrector;
  j["modulator_heads"] = c.modulator.heads;
  j["k"] = c.k;
  j["alpha"] = c.alpha;
  j["seed"] = c.seed;
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.encoder.d_joint = j.at("d_joint");
  c.encoder.d_vis_cls = j.at("d_vis_cls");
  c.encoder.n_text_layers = j.at("n_text_layers");
  c.encoder.n_vis_layers = j.at("n_vis_layers");
  auto layers = j.at("inject_layers").get<std::vector<int>>();
  c.encoder.inject_layers = std::set<int>(layers.begin(), layers.end());
  c.encoder.text_heads = j.at("text_heads");
  c.encoder.vis_heads = j.at("vis_heads");
  c.encoder.text_len = j.at("text_len");
  c.encoder.vocab = j.at("vocab");
  c.encoder.n_soft = j.at("n_soft");
  c.modulator.fusion = parse_fusion_strategy(j.at("fusion"));
  c.modulator.interaction = parse_interaction_strategy(j.at("interaction"));
  c.modulator.mn_corrector = j.at("mn_corrector");
  c.modulator.heads = j.at("modulator_heads");
  c.k = j.at("k");
  c.alpha = j.at("alpha");
  c.seed = j.at("seed");
  return c;
}

struct ModelOutputs {
  Tensor multimodal_explicit;  // E_m^ev [b, d]
  Tensor multimodal_implicit;  // E_m^iv [b, d]
  Tensor visual;               // E_dv [b, d]
  VisualOutputs encoded;
  AugmentorOutputs augmented;
  InjectionMap pseudo_tokens;
};

class EpipModel {
 public:
  ModelConfig cfg;
  ToyVisualEncoder visual_encoder;
  ToyTextEncoder text_encoder;
  SoftPrompt soft_prompt;
  TINet ti_net;
  PromptModulator modulator;
  FeatureAugmentor augmentor;

  explicit EpipModel(const ModelConfig& c = {}) : cfg(c) {
    cfg.validate();
    cfg.modulator.n_visual_tokens = kVisualTokens;
    nn::Rng rng(cfg.seed);
    const std::size_t d = cfg.encoder.d_joint;
    visual_encoder = ToyVisualEncoder(cfg.encoder, rng);
    text_encoder = ToyTextEncoder(cfg.encoder, rng);
    text_encoder.set_trainable(false);
    soft_prompt = SoftPrompt(cfg.encoder.n_soft, d, rng);
    ti_net = TINet(cfg.encoder.d_vis_cls, d, rng);
    modulator = PromptModulator(d, cfg.modulator, rng);
    augmentor = FeatureAugmentor(d, cfg.k, cfg.alpha, rng);
    implicit_ = build_implicit_sentences(cfg.encoder.n_soft, cfg.encoder.text_len, cfg.encoder.vocab);
  }

  /// Every parameter, or only the ones the optimizer updates.
  nn::ParamList parameters(bool trainable_only = false) const {
    nn::ParamList all;
    visual_encoder.collect(all, "visual");
    text_encoder.collect(all, "text");
    soft_prompt.collect(all, "soft_prompt");
    ti_net.collect(all, "ti_net");
    modulator.collect(all, "modulator");
    augmentor.collect(all, "augmentor");
    if (!trainable_only) return all;
    nn::ParamList out;
    for (auto& p : all)
      if (p.tensor.requires_grad()) out.push_back(p);
    return out;
  }

  const ImplicitPromptSet& implicit_prompts() const { return implicit_; }

  /// EOS embeddings of the explicit sentences, [b, 3, d]. The text encoder is
  /// frozen and explicit sentences have no learnable inputs, so results are
  /// cached per sentence.
  Tensor explicit_eos(const std::vector<ExplicitPromptSet>& prompts) const {
    const std::size_t b = prompts.size(), d = cfg.encoder.d_joint;
    std::vector<TokenSequence> pending;
    std::vector<std::string> pending_keys;
    for (const auto& p : prompts)
      for (const auto& s : p.sentences)
        if (!eos_cache_.count(s) && std::find(pending_keys.begin(), pending_keys.end(), s) == pending_keys.end()) {
          pending_keys.push_back(s);
          pending.push_back(tokenize(s, cfg.encoder.text_len, cfg.encoder.vocab));
        }
    if (!pending.empty()) {
      ag::NoGradGuard guard;
      Tensor eos = text_encoder.encode(pending).eos_embedding;
      const auto ev = eos.data();
      for (std::size_t i = 0; i < pending.size(); ++i)
        eos_cache_[pending_keys[i]] = std::vector<double>(ev.begin() + i * d, ev.begin() + (i + 1) * d);
    }
    std::vector<double> out;
    out.reserve(b * kExplicitSentences * d);
    for (const auto& p : prompts)
      for (const auto& s : p.sentences) {
        const auto& v = eos_cache_.at(s);
        out.insert(out.end(), v.begin(), v.end());
      }
    return Tensor::constant({b, kExplicitSentences, d}, std::move(out));
  }

  /// EOS embeddings of the four implicit sentences per target, [b, 4, d],
  /// with each target's pseudo-token placed at every sentence's slot.
  Tensor implicit_eos(const InjectionMap& pseudo, std::size_t b) const {
    const std::size_t d = cfg.encoder.d_joint;
    std::vector<TokenSequence> seqs;
    seqs.reserve(b * kImplicitSentences);
    for (std::size_t n = 0; n < b; ++n)
      for (const auto& t : implicit_.tokens) seqs.push_back(t);
    InjectionMap expanded;
    for (const auto& [layer, tok] : pseudo)
      expanded[layer] = ag::reshape(ag::repeat_rows(tok, kImplicitSentences), {b * kImplicitSentences, d});
    Tensor eos = text_encoder.encode(seqs, &soft_prompt.tokens, &expanded).eos_embedding;
    return ag::reshape(eos, {b, kImplicitSentences, d});
  }

  /// Augmented visual embedding only (no text side).
  AugmentorOutputs visual_embeddings(const Tensor& pixels, VisualOutputs* encoded = nullptr) const {
    VisualOutputs vo = visual_encoder.forward(pixels);
    AugmentorOutputs ao = augmentor(vo.tokens);
    if (encoded) *encoded = std::move(vo);
    return ao;
  }

  ModelOutputs forward(const Tensor& pixels, const std::vector<ExplicitPromptSet>& prompts) const {
    const std::size_t b = pixels.dim(0);
    if (prompts.size() != b) throw std::invalid_argument("model forward: one prompt set per crop required");
    ModelOutputs out;
    out.augmented = visual_embeddings(pixels, &out.encoded);
    out.visual = out.augmented.embedding;
    out.pseudo_tokens = ti_net.forward(out.encoded.cls_per_layer);
    Tensor eos_exp = explicit_eos(prompts);
    Tensor eos_imp = implicit_eos(out.pseudo_tokens, b);
    auto mm = modulator(eos_exp, eos_imp, out.augmented.tokens, out.augmented.pooled, out.encoded.cls_final);
    out.multimodal_explicit = mm.multimodal_explicit;
    out.multimodal_implicit = mm.multimodal_implicit;
    return out;
  }

  ModelOutputs forward(const CropBatch& crops, const std::vector<ExplicitPromptSet>& prompts) const {
    return forward(preprocess_crops(crops), prompts);
  }

  void clear_cache() const { eos_cache_.clear(); }

 private:
  ImplicitPromptSet implicit_;
  mutable std::unordered_map<std::string, std::vector<double>> eos_cache_;
};

}  // namespace epiptrack
