#pragma once

// Toy vision/text encoder pair. Exposes the signals the prompt modules
// consume: patch-token embeddings, a global visual embedding, per-layer CLS
// states, EOS text embeddings and pseudo-token injection ports.

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "epiptrack/autograd.hpp"
#include "epiptrack/datamodel.hpp"
#include "epiptrack/nn.hpp"

namespace epiptrack {

using ag::Tensor;

struct EncoderConfig {
  std::size_t d_joint = 16;
  std::size_t d_vis_cls = 24;
  std::size_t n_text_layers = 8;
  std::size_t n_vis_layers = 2;
  std::set<int> inject_layers{5, 8};
  std::size_t text_heads = 4;
  std::size_t vis_heads = 4;
  std::size_t text_len = 24;
  std::size_t vocab = 4096;
  std::size_t n_soft = 4;  // M

  void validate() const {
    if (d_joint == 0 || d_vis_cls == 0 || n_text_layers == 0 || n_vis_layers == 0)
      throw std::invalid_argument("encoder config: dimensions and layer counts must be positive");
    for (int l : inject_layers)
      if (l < 1 || l > static_cast<int>(n_text_layers))
        throw std::invalid_argument("encoder config: inject layer " + std::to_string(l) + " outside [1, " +
                                    std::to_string(n_text_layers) + "]");
    if (d_joint % text_heads != 0 || d_vis_cls % vis_heads != 0)
      throw std::invalid_argument("encoder config: head count must divide width");
    if (n_soft == 0 || n_soft > 16) throw std::invalid_argument("encoder config: n_soft must be in [1,16]");
  }
};

// ---------------------------------------------------------------------------
// Tokenizer

namespace token {
inline constexpr int kPad = 0;
inline constexpr int kEos = 1;
inline constexpr int kSlot = 2;        // [S*]
inline constexpr int kSoftBase = 3;    // [X]1 .. [X]16 -> 3 .. 18
inline constexpr int kFirstContent = 32;
}  // namespace token

struct TokenSequence {
  std::vector<int> ids;
  int eos_pos = -1;
  int slot_pos = -1;  // -1 when the sentence has no [S*]
};

inline int hash_word(const std::string& w, std::size_t vocab) {
  std::uint32_t h = 2166136261u;
  for (unsigned char c : w) h = (h ^ c) * 16777619u;
  return token::kFirstContent + static_cast<int>(h % (vocab - token::kFirstContent));
}

/// Whitespace tokenizer with a hashed vocabulary. Recognizes `[X]k` soft
/// placeholders and `[S*]`; a sentence-final period becomes its own token.
/// Output is padded to `len` and always ends content with EOS.
inline TokenSequence tokenize(const std::string& sentence, std::size_t len = 24, std::size_t vocab = 4096) {
  if (sentence.find_first_not_of(" \t\n") == std::string::npos)
    throw std::invalid_argument("tokenize: empty sentence");
  std::string s;
  for (std::size_t i = 0; i < sentence.size(); ++i) {
    // isolate markers so "[X]1[X]2" and "[S*]." split cleanly
    if (sentence.compare(i, 3, "[X]") == 0) {
      s += " [X]";
      i += 2;
      while (i + 1 < sentence.size() && std::isdigit(static_cast<unsigned char>(sentence[i + 1]))) s += sentence[++i];
      s += ' ';
    } else if (sentence.compare(i, 4, "[S*]") == 0) {
      s += " [S*] ";
      i += 3;
    } else {
      s += static_cast<char>(std::tolower(static_cast<unsigned char>(sentence[i])));
    }
  }
  std::vector<std::string> words;
  std::string w;
  std::istringstream is(s);
  while (is >> w) words.push_back(w);
  if (!words.empty()) {
    std::string& last = words.back();
    if (last.size() > 1 && last.back() == '.') {
      last.pop_back();
      words.push_back(".");
    }
  }
  TokenSequence seq;
  for (const auto& word : words) {
    if (seq.ids.size() + 1 >= len) break;  // keep room for EOS
    if (word == "[s*]" || word == "[S*]") {
      seq.slot_pos = static_cast<int>(seq.ids.size());
      seq.ids.push_back(token::kSlot);
    } else if (word.rfind("[x]", 0) == 0 || word.rfind("[X]", 0) == 0) {
      const int k = std::stoi(word.substr(3));
      if (k < 1 || k > 16) throw std::invalid_argument("tokenize: soft placeholder index out of range");
      seq.ids.push_back(token::kSoftBase + k - 1);
    } else {
      seq.ids.push_back(hash_word(word, vocab));
    }
  }
  seq.eos_pos = static_cast<int>(seq.ids.size());
  seq.ids.push_back(token::kEos);
  seq.ids.resize(len, token::kPad);
  return seq;
}

// ---------------------------------------------------------------------------
// Visual encoder

struct VisualOutputs {
  Tensor tokens;     // [b, l, d_joint]
  Tensor cls_final;  // [b, d_joint]
  std::map<int, Tensor> cls_per_layer;  // text layer -> [b, d_vis_cls]
};

inline constexpr int kPoolFactor = 4;
inline constexpr int kPooledHeight = kCropHeight / kPoolFactor;  // 64
inline constexpr int kPooledWidth = kCropWidth / kPoolFactor;    // 32
inline constexpr int kPatchStages = 4;
inline constexpr std::size_t kVisualTokens =
    (kPooledHeight >> kPatchStages) * (kPooledWidth >> kPatchStages);  // 8

/// Average-pools each crop by 4 and standardizes: [b, 64*32, 3].
inline Tensor preprocess_crops(const CropBatch& crops) {
  const std::size_t b = crops.size();
  std::vector<double> v(b * kPooledHeight * kPooledWidth * 3, 0.0);
  const double inv = 1.0 / (kPoolFactor * kPoolFactor);
  for (std::size_t i = 0; i < b; ++i) {
    const Patch& p = crops.crops[i];
    for (int y = 0; y < kCropHeight; ++y)
      for (int x = 0; x < kCropWidth; ++x)
        for (int c = 0; c < 3; ++c)
          v[((i * kPooledHeight + y / kPoolFactor) * kPooledWidth + x / kPoolFactor) * 3 + c] +=
              p.at(y, x, c) * inv;
  }
  for (auto& x : v) x = (x - 0.5) / 0.25;
  return Tensor::constant({b, static_cast<std::size_t>(kPooledHeight * kPooledWidth), 3}, std::move(v));
}

/// [b, H*W, C] on an H x W grid -> [b, (H/2)*(W/2), 4C] non-overlapping 2x2 patches.
inline Tensor patchify2x2(const Tensor& x, std::size_t H, std::size_t W) {
  const std::size_t b = x.dim(0), C = x.dim(2), h = H / 2, w = W / 2;
  ag::Index idx;
  idx.reserve(b * h * w * 4 * C);
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c)
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx)
            for (std::size_t ch = 0; ch < C; ++ch)
              idx.push_back(static_cast<long>(((n * H + 2 * r + dy) * W + 2 * c + dx) * C + ch));
  return ag::gather(x, std::move(idx), {b, h * w, 4 * C});
}

/// Four strided 2x2 convolution stages over the pooled crop, a CLS token and
/// a small pre-norm transformer.
struct ToyVisualEncoder {
  EncoderConfig cfg;
  std::vector<nn::Linear> stages;
  Tensor cls_token;  // [d_vis_cls]
  Tensor pos_embedding;  // [1 + l, d_vis_cls]
  std::vector<nn::TransformerBlock> blocks;
  nn::LayerNorm ln_post;
  nn::Linear proj;  // d_vis_cls -> d_joint

  ToyVisualEncoder() = default;
  ToyVisualEncoder(const EncoderConfig& c, nn::Rng& rng) : cfg(c) {
    const std::size_t dv = cfg.d_vis_cls;
    const std::array<std::size_t, kPatchStages + 1> ch{3, 8, 16, dv, dv};
    for (int s = 0; s < kPatchStages; ++s) stages.emplace_back(4 * ch[s], ch[s + 1], rng);
    cls_token = nn::normal_param({dv}, 0.02, rng);
    pos_embedding = nn::normal_param({1 + kVisualTokens, dv}, 0.02, rng);
    for (std::size_t i = 0; i < cfg.n_vis_layers; ++i) blocks.emplace_back(dv, cfg.vis_heads, 2 * dv, rng);
    ln_post = nn::LayerNorm(dv);
    proj = nn::Linear(dv, cfg.d_joint, rng, false);
  }

  VisualOutputs operator()(const CropBatch& crops) const { return forward(preprocess_crops(crops)); }

  /// `pixels` is the preprocessed [b, 64*32, 3] tensor.
  VisualOutputs forward(const Tensor& pixels) const {
    const std::size_t b = pixels.dim(0), dv = cfg.d_vis_cls;
    Tensor x = pixels;
    std::size_t H = kPooledHeight, W = kPooledWidth;
    for (std::size_t s = 0; s < stages.size(); ++s) {
      x = stages[s](patchify2x2(x, H, W));
      if (s + 1 < stages.size()) x = ag::relu(x);
      H /= 2;
      W /= 2;
    }
    // prepend CLS: gather with a repeated row
    ag::Index cls_idx(b * dv);
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t j = 0; j < dv; ++j) cls_idx[n * dv + j] = static_cast<long>(j);
    Tensor cls = ag::gather(cls_token, std::move(cls_idx), {b, 1, dv});
    x = ag::add(ag::concat({cls, x}, 1), pos_embedding);

    VisualOutputs out;
    std::vector<Tensor> cls_states;
    for (const auto& blk : blocks) {
      x = blk(x);
      cls_states.push_back(ag::reshape(ag::slice(x, 1, 0, 1), {b, dv}));
    }
    Tensor h = ln_post(x);
    out.tokens = proj(ag::slice(h, 1, 1, kVisualTokens));
    out.cls_final = proj(ag::reshape(ag::slice(h, 1, 0, 1), {b, dv}));
    // Text layer i reads the CLS state of visual block min(i, n_vis_layers).
    for (int layer : cfg.inject_layers) {
      const std::size_t blk = std::min<std::size_t>(static_cast<std::size_t>(layer), blocks.size());
      out.cls_per_layer[layer] = cls_states[blk - 1];
    }
    return out;
  }

  void collect(nn::ParamList& out, const std::string& prefix) const {
    for (std::size_t s = 0; s < stages.size(); ++s) stages[s].collect(out, prefix + ".stage" + std::to_string(s));
    out.push_back({prefix + ".cls_token", cls_token});
    out.push_back({prefix + ".pos_embedding", pos_embedding});
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(out, prefix + ".block" + std::to_string(i));
    ln_post.collect(out, prefix + ".ln_post");
    proj.collect(out, prefix + ".proj");
  }
};

// ---------------------------------------------------------------------------
// Text encoder

struct TextOutputs {
  Tensor token_states;   // [b, L, d_joint]
  Tensor eos_embedding;  // [b, d_joint]
  std::vector<Tensor> layer_states;  // output of each text layer, [b, L, d]
};

/// Text layer (1-based) -> [b, d_joint] pseudo-tokens, one per sequence.
using InjectionMap = std::map<int, Tensor>;

struct ToyTextEncoder {
  EncoderConfig cfg;
  Tensor token_embedding;  // [vocab, d]
  Tensor pos_embedding;    // [L, d]
  std::vector<nn::TransformerBlock> layers;
  nn::LayerNorm ln_final;
  nn::Linear proj;  // d -> d_joint, no bias
  Tensor mask;

  ToyTextEncoder() = default;
  ToyTextEncoder(const EncoderConfig& c, nn::Rng& rng) : cfg(c) {
    const std::size_t d = cfg.d_joint;
    token_embedding = nn::normal_param({cfg.vocab, d}, 0.5, rng);
    pos_embedding = nn::normal_param({cfg.text_len, d}, 0.1, rng);
    for (std::size_t i = 0; i < cfg.n_text_layers; ++i) layers.emplace_back(d, cfg.text_heads, 2 * d, rng);
    ln_final = nn::LayerNorm(d);
    proj = nn::Linear(d, d, rng, false);
    mask = nn::causal_mask(cfg.text_len);
  }

  /// Encodes `seqs`. Soft placeholders take rows of `soft_prompt` ([M, d])
  /// at the embedding layer; for each (layer, tokens) in `injected` the
  /// hidden state at every sequence's [S*] slot is replaced before that
  /// layer runs.
  TextOutputs encode(const std::vector<TokenSequence>& seqs, const Tensor* soft_prompt = nullptr,
                     const InjectionMap* injected = nullptr) const {
    const std::size_t b = seqs.size(), L = cfg.text_len, d = cfg.d_joint;
    if (b == 0) throw std::invalid_argument("encode_text: empty batch");
    if (injected) {
      for (const auto& [layer, t] : *injected) {
        if (!cfg.inject_layers.count(layer))
          throw std::invalid_argument("encode_text: layer " + std::to_string(layer) +
                                      " is not a configured injection layer");
        if (t.rank() != 2 || t.dim(0) != b || t.dim(1) != d)
          throw std::invalid_argument("encode_text: pseudo-token batch must be [b, d_joint]");
      }
      if (!injected->empty())
        for (const auto& s : seqs)
          if (s.slot_pos < 0) throw std::invalid_argument("encode_text: injection requires a [S*] slot");
    }
    ag::Index tok_idx(b * L * d), soft_idx(b * L * d, -1);
    bool any_soft = false;
    for (std::size_t n = 0; n < b; ++n) {
      if (seqs[n].ids.size() != L) throw std::invalid_argument("encode_text: sequence length mismatch");
      for (std::size_t p = 0; p < L; ++p) {
        const int id = seqs[n].ids[p];
        const bool soft = id >= token::kSoftBase && id < token::kSoftBase + static_cast<int>(cfg.n_soft) &&
                          soft_prompt != nullptr;
        for (std::size_t j = 0; j < d; ++j) {
          const std::size_t o = (n * L + p) * d + j;
          if (soft) {
            tok_idx[o] = -1;
            soft_idx[o] = static_cast<long>((id - token::kSoftBase) * d + j);
            any_soft = true;
          } else {
            tok_idx[o] = static_cast<long>(static_cast<std::size_t>(id) * d + j);
          }
        }
      }
    }
    Tensor x = ag::gather(token_embedding, std::move(tok_idx), {b, L, d});
    if (any_soft) x = ag::add(x, ag::gather(*soft_prompt, std::move(soft_idx), {b, L, d}));
    x = ag::add(x, pos_embedding);

    std::vector<Tensor> states;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const int layer = static_cast<int>(i) + 1;
      if (injected) {
        if (auto it = injected->find(layer); it != injected->end()) x = replace_slots(x, seqs, it->second);
      }
      x = layers[i](x, &mask);
      states.push_back(x);
    }
    TextOutputs out;
    out.layer_states = std::move(states);
    out.token_states = proj(ln_final(x));
    std::vector<std::size_t> rows(b);
    ag::Index eos_idx(b * d);
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t j = 0; j < d; ++j)
        eos_idx[n * d + j] = static_cast<long>((n * L + static_cast<std::size_t>(seqs[n].eos_pos)) * d + j);
    out.eos_embedding = ag::gather(out.token_states, std::move(eos_idx), {b, d});
    return out;
  }

  void collect(nn::ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".token_embedding", token_embedding});
    out.push_back({prefix + ".pos_embedding", pos_embedding});
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect(out, prefix + ".layer" + std::to_string(i + 1));
    ln_final.collect(out, prefix + ".ln_final");
    proj.collect(out, prefix + ".proj");
  }

  void set_trainable(bool on) {
    nn::ParamList ps;
    collect(ps, "text");
    for (auto& p : ps) p.tensor.set_requires_grad(on);
  }

 private:
  Tensor replace_slots(const Tensor& x, const std::vector<TokenSequence>& seqs, const Tensor& pseudo) const {
    const std::size_t b = seqs.size(), L = cfg.text_len, d = cfg.d_joint;
    std::vector<double> keep(b * L * d, 1.0);
    ag::Index idx(b * L * d, -1);
    for (std::size_t n = 0; n < b; ++n) {
      const std::size_t p = static_cast<std::size_t>(seqs[n].slot_pos);
      for (std::size_t j = 0; j < d; ++j) {
        keep[(n * L + p) * d + j] = 0.0;
        idx[(n * L + p) * d + j] = static_cast<long>(n * d + j);
      }
    }
    return ag::add(ag::mul(x, Tensor::constant({b, L, d}, std::move(keep))),
                   ag::gather(pseudo, std::move(idx), {b, L, d}));
  }
};

/// Loading real backbone weights is outside this build.
inline void load_pretrained_backbone(const std::string& /*path*/) {
  throw std::runtime_error("pretrained backbone loading is unsupported in this build");
}

}  // namespace epiptrack
