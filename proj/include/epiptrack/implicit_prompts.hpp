#pragma once

// Implicit prompts: "[X]1..[X]M [PART] [S*]." sentences, the shared soft
// prompt and the textual-inversion network that turns visual CLS states
// into pseudo-tokens.

#include <array>
#include <map>
#include <stdexcept>
#include <string>

#include "epiptrack/encoder.hpp"
#include "epiptrack/nn.hpp"

namespace epiptrack {

inline constexpr std::array<const char*, 4> kBodyParts{"head", "body", "arms", "legs"};

struct ImplicitPromptSet {
  std::array<std::string, 4> sentences;
  std::array<TokenSequence, 4> tokens;
};

inline ImplicitPromptSet build_implicit_sentences(std::size_t n_soft = 4, std::size_t text_len = 24,
                                                  std::size_t vocab = 4096) {
  ImplicitPromptSet set;
  std::string prefix;
  for (std::size_t k = 1; k <= n_soft; ++k) prefix += "[X]" + std::to_string(k);
  for (std::size_t p = 0; p < kBodyParts.size(); ++p) {
    set.sentences[p] = prefix + " " + kBodyParts[p] + " [S*].";
    set.tokens[p] = tokenize(set.sentences[p], text_len, vocab);
  }
  return set;
}

/// M learnable text tokens shared by every instance.
struct SoftPrompt {
  Tensor tokens;  // [M, d_joint]

  SoftPrompt() = default;
  SoftPrompt(std::size_t m, std::size_t d, nn::Rng& rng) : tokens(nn::normal_param({m, d}, 0.02, rng)) {}

  std::size_t size() const { return tokens.dim(0); }
  void collect(nn::ParamList& out, const std::string& prefix) const { out.push_back({prefix + ".tokens", tokens}); }
};

/// Pseudo-token = Proj(MLP(E_CLS)). One network serves every injection layer.
struct TINet {
  nn::Linear fc1, fc2;  // d_vis_cls -> d_vis_cls -> d_vis_cls
  nn::Linear proj;      // d_vis_cls -> d_joint

  TINet() = default;
  TINet(std::size_t d_vis_cls, std::size_t d_joint, nn::Rng& rng)
      : fc1(d_vis_cls, d_vis_cls, rng), fc2(d_vis_cls, d_vis_cls, rng), proj(d_vis_cls, d_joint, rng) {}

  Tensor operator()(const Tensor& cls) const {
    if (cls.rank() != 2 || cls.dim(1) != fc1.in_features())
      throw std::invalid_argument("ti_forward: expected [b, " + std::to_string(fc1.in_features()) + "], got " +
                                  ag::shape_str(cls.shape()));
    return proj(fc2(ag::relu(fc1(cls))));
  }

  std::map<int, Tensor> forward(const std::map<int, Tensor>& cls_per_layer) const {
    std::map<int, Tensor> out;
    for (const auto& [layer, cls] : cls_per_layer) out[layer] = (*this)(cls);
    return out;
  }

  void collect(nn::ParamList& out, const std::string& prefix) const {
    fc1.collect(out, prefix + ".fc1");
    fc2.collect(out, prefix + ".fc2");
    proj.collect(out, prefix + ".proj");
  }
};

}  // namespace epiptrack
