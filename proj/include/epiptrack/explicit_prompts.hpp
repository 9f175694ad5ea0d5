#pragma once

// Motion attributes (speed, depth, score) and the explicit sentence template
// "A person with identity [ID] and a [ATTRIBUTE] of [VALUE]."

#include <array>
#include <cmath>
#include <cstdio>
#include <optional>
#include <regex>
#include <span>
#include <stdexcept>
#include <string>

#include "epiptrack/datamodel.hpp"

namespace epiptrack {

enum class Attribute { score = 0, speed = 1, depth = 2 };

inline constexpr std::array<Attribute, 3> kAttributeOrder{Attribute::score, Attribute::speed,
                                                          Attribute::depth};

inline const char* attribute_name(Attribute a) {
  switch (a) {
    case Attribute::score: return "score";
    case Attribute::speed: return "speed";
    case Attribute::depth: return "depth";
  }
  return "score";
}

struct MotionAttributes {
  double speed = 0.0;  // pixels / frame
  double depth = 0.0;  // pixels from the bottom edge of the image
  double score = 0.0;
};

struct ExplicitPromptSet {
  int id = 0;
  std::array<std::string, 3> sentences;  // score, speed, depth
};

/// Change of box size between consecutive observations of one target.
inline double compute_speed(const Observation& prev, const Observation& curr) {
  if (prev.id != curr.id) throw std::invalid_argument("compute_speed: observations belong to different ids");
  if (prev.frame >= curr.frame) throw std::invalid_argument("compute_speed: prev must precede curr");
  const double dw = curr.width() - prev.width();
  const double dh = curr.height() - prev.height();
  return std::sqrt(dw * dw + dh * dh);
}

/// Distance from the box bottom to the image bottom; negative when the box
/// extends past the image.
inline double compute_depth(int image_height, const Observation& obs) {
  if (image_height <= 0) throw std::invalid_argument("compute_depth: image height must be positive");
  return static_cast<double>(image_height) - obs.y2;
}

inline double compute_depth(const Frame& frame, const Observation& obs) {
  return compute_depth(frame.height, obs);
}

/// Attributes of the latest observation of a history ordered by frame. A
/// single-observation history has speed 0.
inline MotionAttributes motion_attributes(std::span<const Observation> history, int image_height) {
  if (history.empty()) throw std::invalid_argument("motion_attributes: empty history");
  const Observation& curr = history.back();
  MotionAttributes a;
  a.score = curr.score;
  a.depth = compute_depth(image_height, curr);
  if (history.size() >= 2) {
    Observation prev = history[history.size() - 2];
    prev.id = curr.id;
    a.speed = compute_speed(prev, curr);
  }
  return a;
}

inline std::string format_attribute_value(Attribute a, double v) {
  char buf[64];
  if (a == Attribute::score)
    std::snprintf(buf, sizeof(buf), "%.2f", v);
  else
    std::snprintf(buf, sizeof(buf), "%ld", std::lround(v));
  return buf;
}

inline std::string render_sentence(int id, Attribute a, double value) {
  return "A person with identity " + std::to_string(id) + " and a " + attribute_name(a) + " of " +
         format_attribute_value(a, value) + ".";
}

inline ExplicitPromptSet render_explicit_prompts(int id, const MotionAttributes& attrs) {
  if (!std::isfinite(attrs.speed) || !std::isfinite(attrs.depth) || !std::isfinite(attrs.score))
    throw std::invalid_argument("render_explicit_prompts: attributes must be finite");
  ExplicitPromptSet set;
  set.id = id;
  set.sentences = {render_sentence(id, Attribute::score, attrs.score),
                   render_sentence(id, Attribute::speed, attrs.speed),
                   render_sentence(id, Attribute::depth, attrs.depth)};
  return set;
}

struct ParsedSentence {
  int id;
  Attribute attribute;
  double value;
};

/// Inverse of render_sentence; nullopt when the text does not follow the template.
inline std::optional<ParsedSentence> parse_explicit_sentence(const std::string& s) {
  static const std::regex re(R"(^A person with identity (-?\d+) and a (score|speed|depth) of (-?\d+(?:\.\d+)?)\.$)");
  std::smatch m;
  if (!std::regex_match(s, m, re)) return std::nullopt;
  ParsedSentence p{};
  p.id = std::stoi(m[1].str());
  const std::string attr = m[2].str();
  p.attribute = attr == "score" ? Attribute::score : attr == "speed" ? Attribute::speed : Attribute::depth;
  p.value = std::stod(m[3].str());
  return p;
}

}  // namespace epiptrack
