#pragma once

// Run configuration: one nested JSON document with defaults for every key,
// strict validation, dotted-key overrides and a content hash.

#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "epiptrack/association.hpp"
#include "epiptrack/training.hpp"

namespace epiptrack {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline nlohmann::json default_config() {
  using nlohmann::json;
  const TrainConfig t;
  const AssociationConfig a;
  const SynthSpec s;
  const ModelConfig m;
  return json{
      {"seed", 7},
      {"paths", {{"data_root", "data"}, {"out_dir", "out"}, {"checkpoint", "out/model.ckpt"}}},
      {"synth",
       {{"motions", {"linear", "crossing", "occlusion-gap"}},
        {"n_targets", s.n_targets},
        {"n_frames", s.n_frames},
        {"width", s.width},
        {"height", s.height},
        {"speed", s.speed},
        {"box_width", s.box_width},
        {"box_height", s.box_height},
        {"gap_target", s.gap_target},
        {"gap_start", s.gap_start},
        {"gap_end", s.gap_end},
        {"render_images", s.render_images}}},
      {"encoder",
       {{"d_joint", m.encoder.d_joint},
        {"d_vis_cls", m.encoder.d_vis_cls},
        {"n_text_layers", m.encoder.n_text_layers},
        {"n_vis_layers", m.encoder.n_vis_layers},
        {"inject_layers", std::vector<int>(m.encoder.inject_layers.begin(), m.encoder.inject_layers.end())},
        {"text_heads", m.encoder.text_heads},
        {"vis_heads", m.encoder.vis_heads},
        {"text_len", m.encoder.text_len},
        {"vocab", m.encoder.vocab},
        {"n_soft", m.encoder.n_soft}}},
      {"fusion", {{"strategy", to_string(m.modulator.fusion)}}},
      {"interaction", {{"strategy", to_string(m.modulator.interaction)}}},
      {"modulator", {{"mn_corrector", m.modulator.mn_corrector}, {"heads", m.modulator.heads}}},
      {"augmentor", {{"k", m.k}, {"alpha", m.alpha}}},
      {"loss",
       {{"tau", t.loss.tau},
        {"margin", t.loss.margin},
        {"eps", t.loss.eps},
        {"terms", {{"con", t.loss.terms.con}, {"tri", t.loss.terms.tri}, {"sim", t.loss.terms.sim}}}}},
      {"train",
       {{"source", "toy"},
        {"toy_frames", toy_train_spec().n_frames},
        {"heldout_fraction", 0.25},
        {"batch_size", t.batch_size},
        {"instances", t.instances},
        {"epochs", t.epochs},
        {"base_lr", t.base_lr},
        {"warmup_lr", t.warmup_lr},
        {"warmup_epochs", t.warmup_epochs},
        {"momentum", t.momentum},
        {"weight_decay", t.weight_decay},
        {"grad_clip", t.grad_clip},
        {"speed_noise", t.speed_noise},
        {"depth_noise", t.depth_noise},
        {"eval_every", t.eval_every}}},
      {"ablate", {{"grid", "loss_terms"}}},
      {"association",
       {{"mode", "baseline"},
        {"embeddings", "oracle"},
        {"high_score_thr", a.high_score_thr},
        {"low_score_thr", a.low_score_thr},
        {"iou_gate", a.iou_gate},
        {"tr_gate", a.tr_gate},
        {"fr_weight", a.fr_weight},
        {"max_lost_frames", a.max_lost_frames},
        {"ema_momentum", a.ema_momentum}}},
      {"eval", {{"iou_thr", 0.5}}}};
}

namespace detail {

inline bool same_kind(const nlohmann::json& def, const nlohmann::json& v) {
  if (def.is_boolean()) return v.is_boolean();
  if (def.is_number_integer()) return v.is_number_integer();
  if (def.is_number()) return v.is_number();
  if (def.is_string()) return v.is_string();
  if (def.is_array()) return v.is_array();
  if (def.is_object()) return v.is_object();
  return false;
}

inline const char* kind_name(const nlohmann::json& def) {
  if (def.is_boolean()) return "a boolean";
  if (def.is_number_integer()) return "an integer";
  if (def.is_number()) return "a number";
  if (def.is_string()) return "a string";
  if (def.is_array()) return "an array";
  return "an object";
}

inline void merge_checked(nlohmann::json& base, const nlohmann::json& user, const std::string& prefix) {
  if (!user.is_object()) throw ConfigError("config" + (prefix.empty() ? "" : " key '" + prefix + "'") + " must be an object");
  for (const auto& [key, value] : user.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    auto& slot = base[key];
    if (!same_kind(slot, value)) throw ConfigError("config key '" + path + "' must be " + kind_name(slot));
    if (slot.is_object())
      merge_checked(slot, value, path);
    else
      slot = value;
  }
}

inline std::vector<std::string> split_dotted(const std::string& key) {
  std::vector<std::string> parts;
  std::stringstream ss(key);
  std::string p;
  while (std::getline(ss, p, '.')) parts.push_back(p);
  return parts;
}

}  // namespace detail

/// Sets `key` (dotted) to `raw`, parsed as JSON when possible and as a
/// plain string otherwise.
inline void apply_override(nlohmann::json& cfg, const std::string& key, const std::string& raw) {
  const auto parts = detail::split_dotted(key);
  if (parts.empty()) throw ConfigError("empty config key");
  nlohmann::json* node = &cfg;
  for (const auto& p : parts) {
    if (!node->is_object() || !node->contains(p)) throw ConfigError("unknown config key '" + key + "'");
    node = &(*node)[p];
  }
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  if (node->is_number_integer() && value.is_number_float() && value.get<double>() == std::floor(value.get<double>()))
    value = static_cast<long long>(value.get<double>());
  if (!detail::same_kind(*node, value))
    throw ConfigError("config key '" + key + "' must be " + detail::kind_name(*node));
  *node = value;
}

/// Applies `KEY=VALUE` strings as produced by `--set`.
inline void apply_overrides(nlohmann::json& cfg, const std::vector<std::string>& sets) {
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + s + "' must look like key=value");
    apply_override(cfg, s.substr(0, eq), s.substr(eq + 1));
  }
}

/// EPIP_<KEY> with nesting written as a double underscore:
/// EPIP_LOSS__TAU=0.05 sets loss.tau.
inline void apply_env_overrides(nlohmann::json& cfg, char** envp) {
  if (!envp) return;
  for (char** e = envp; *e; ++e) {
    std::string kv = *e;
    if (kv.rfind("EPIP_", 0) != 0) continue;
    const auto eq = kv.find('=');
    if (eq == std::string::npos) continue;
    std::string key = kv.substr(5, eq - 5);
    std::string dotted;
    for (std::size_t i = 0; i < key.size(); ++i) {
      if (key[i] == '_' && i + 1 < key.size() && key[i + 1] == '_') {
        dotted += '.';
        ++i;
      } else {
        dotted += static_cast<char>(std::tolower(static_cast<unsigned char>(key[i])));
      }
    }
    apply_override(cfg, dotted, kv.substr(eq + 1));
  }
}

/// Defaults merged with `user`; throws ConfigError on unknown keys or
/// mistyped values.
inline nlohmann::json merge_config(const nlohmann::json& user) {
  nlohmann::json cfg = default_config();
  if (!user.is_null()) detail::merge_checked(cfg, user, "");
  return cfg;
}

inline nlohmann::json load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config file " + path.string() + " is not valid JSON");
  return merge_config(j);
}

/// FNV-1a over the canonical dump, paths excluded so relocating outputs
/// does not change the hash.
inline std::string config_hash(const nlohmann::json& cfg) {
  nlohmann::json c = cfg;
  c.erase("paths");
  const std::string s = c.dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Typed views. Each also runs the owning module's validation.

inline ModelConfig model_config(const nlohmann::json& c) {
  ModelConfig m;
  const auto& e = c.at("encoder");
  m.encoder.d_joint = e.at("d_joint");
  m.encoder.d_vis_cls = e.at("d_vis_cls");
  m.encoder.n_text_layers = e.at("n_text_layers");
  m.encoder.n_vis_layers = e.at("n_vis_layers");
  const auto layers = e.at("inject_layers").get<std::vector<int>>();
  m.encoder.inject_layers = std::set<int>(layers.begin(), layers.end());
  m.encoder.text_heads = e.at("text_heads");
  m.encoder.vis_heads = e.at("vis_heads");
  m.encoder.text_len = e.at("text_len");
  m.encoder.vocab = e.at("vocab");
  m.encoder.n_soft = e.at("n_soft");
  try {
    m.modulator.fusion = parse_fusion_strategy(c.at("fusion").at("strategy"));
    m.modulator.interaction = parse_interaction_strategy(c.at("interaction").at("strategy"));
  } catch (const std::invalid_argument& ex) {
    throw ConfigError(ex.what());
  }
  m.modulator.mn_corrector = c.at("modulator").at("mn_corrector");
  m.modulator.heads = c.at("modulator").at("heads");
  m.k = c.at("augmentor").at("k");
  m.alpha = c.at("augmentor").at("alpha");
  m.seed = c.at("seed");
  return m;
}

inline TrainConfig train_config(const nlohmann::json& c) {
  TrainConfig t;
  t.model = model_config(c);
  const auto& l = c.at("loss");
  t.loss.tau = l.at("tau");
  t.loss.margin = l.at("margin");
  t.loss.eps = l.at("eps");
  t.loss.terms = {l.at("terms").at("con"), l.at("terms").at("tri"), l.at("terms").at("sim")};
  const auto& r = c.at("train");
  t.batch_size = r.at("batch_size");
  t.instances = r.at("instances");
  t.epochs = r.at("epochs");
  t.base_lr = r.at("base_lr");
  t.warmup_lr = r.at("warmup_lr");
  t.warmup_epochs = r.at("warmup_epochs");
  t.momentum = r.at("momentum");
  t.weight_decay = r.at("weight_decay");
  t.grad_clip = r.at("grad_clip");
  t.speed_noise = r.at("speed_noise");
  t.depth_noise = r.at("depth_noise");
  t.eval_every = r.at("eval_every");
  t.seed = c.at("seed");
  try {
    t.validate();
  } catch (const std::invalid_argument& ex) {
    throw ConfigError(ex.what());
  }
  return t;
}

inline AssociationConfig association_config(const nlohmann::json& c) {
  const auto& a = c.at("association");
  AssociationConfig out;
  out.high_score_thr = a.at("high_score_thr");
  out.low_score_thr = a.at("low_score_thr");
  out.iou_gate = a.at("iou_gate");
  out.tr_gate = a.at("tr_gate");
  out.fr_weight = a.at("fr_weight");
  out.max_lost_frames = a.at("max_lost_frames");
  out.ema_momentum = a.at("ema_momentum");
  try {
    out.validate();
  } catch (const std::invalid_argument& ex) {
    throw ConfigError(ex.what());
  }
  return out;
}

inline SynthSpec synth_spec(const nlohmann::json& c, MotionModel motion) {
  const auto& s = c.at("synth");
  SynthSpec spec;
  spec.n_targets = s.at("n_targets");
  spec.n_frames = s.at("n_frames");
  spec.width = s.at("width");
  spec.height = s.at("height");
  spec.speed = s.at("speed");
  spec.box_width = s.at("box_width");
  spec.box_height = s.at("box_height");
  spec.gap_target = s.at("gap_target");
  spec.gap_start = s.at("gap_start");
  spec.gap_end = s.at("gap_end");
  spec.render_images = s.at("render_images");
  spec.motion = motion;
  spec.seed = c.at("seed");
  return spec;
}

inline std::vector<MotionModel> synth_motions(const nlohmann::json& c) {
  std::vector<MotionModel> out;
  for (const auto& m : c.at("synth").at("motions")) {
    if (!m.is_string()) throw ConfigError("synth.motions entries must be strings");
    try {
      out.push_back(parse_motion_model(m.get<std::string>()));
    } catch (const std::invalid_argument& ex) {
      throw ConfigError(ex.what());
    }
  }
  if (out.empty()) throw ConfigError("synth.motions must not be empty");
  return out;
}

/// Checks everything that can be checked without touching the filesystem.
inline void validate_config(const nlohmann::json& c) {
  train_config(c);
  association_config(c);
  synth_motions(c);
  try {
    for (auto m : synth_motions(c)) {
      SynthSpec s = synth_spec(c, m);
      if (s.n_targets < 1 || s.n_frames < 2) throw std::invalid_argument("synth: n_targets >= 1 and n_frames >= 2");
    }
    parse_association_mode(c.at("association").at("mode"));
  } catch (const std::invalid_argument& ex) {
    throw ConfigError(ex.what());
  }
  const std::string src = c.at("train").at("source");
  if (src != "toy" && src != "data_root") throw ConfigError("train.source must be 'toy' or 'data_root'");
  const double hf = c.at("train").at("heldout_fraction");
  if (!(hf > 0.0 && hf < 1.0)) throw ConfigError("train.heldout_fraction must be in (0,1)");
  if (c.at("train").at("toy_frames").get<int>() < 4) throw ConfigError("train.toy_frames must be >= 4");
  const std::string emb = c.at("association").at("embeddings");
  if (emb != "oracle" && emb != "model") throw ConfigError("association.embeddings must be 'oracle' or 'model'");
  const double thr = c.at("eval").at("iou_thr");
  if (!(thr > 0.0 && thr <= 1.0)) throw ConfigError("eval.iou_thr must be in (0,1]");
}

}  // namespace epiptrack
