#pragma once

// Core domain types, MOTChallenge text I/O, crop extraction and the
// synthetic sequence generator.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "epiptrack/image_io.hpp"

namespace epiptrack {

using Rng = std::mt19937_64;

inline constexpr int kCropHeight = 256;
inline constexpr int kCropWidth = 128;
inline constexpr int kUnsetId = -1;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One target observation O = [ID, f, x1, y1, x2, y2, s].
struct Observation {
  int id = kUnsetId;
  int frame = 1;
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  double score = 1.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  bool valid() const { return x2 > x1 && y2 > y1 && score >= 0.0 && score <= 1.0 && frame >= 1; }

  friend bool operator==(const Observation&, const Observation&) = default;
};

struct Frame {
  int index = 1;
  int width = 0;
  int height = 0;  // H_img
  std::optional<Image> image;
  std::vector<Observation> detections;
};

/// A fixed-size RGB patch in [0,1], HWC layout, kCropHeight x kCropWidth.
struct Patch {
  std::vector<float> pixels;

  Patch() : pixels(static_cast<std::size_t>(kCropHeight) * kCropWidth * 3, 0.0f) {}
  float& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * kCropWidth + x) * 3 + c]; }
  float at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * kCropWidth + x) * 3 + c];
  }
  friend bool operator==(const Patch&, const Patch&) = default;
};

struct CropBatch {
  std::vector<Patch> crops;
  std::vector<int> ids;
  std::vector<Observation> meta;

  std::size_t size() const { return crops.size(); }
};

// ---------------------------------------------------------------------------
// MOTChallenge text format

enum class MotKind { gt, det };

struct MotFile {
  std::map<int, std::vector<Observation>> by_frame;
  std::vector<std::string> warnings;

  std::vector<Observation> flatten() const {
    std::vector<Observation> all;
    for (const auto& [f, obs] : by_frame) all.insert(all.end(), obs.begin(), obs.end());
    return all;
  }
};

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) out.push_back(field);
  return out;
}

inline double parse_number(const std::string& s, std::size_t line_no) {
  try {
    std::size_t used = 0;
    double v = std::stod(s, &used);
    while (used < s.size() && std::isspace(static_cast<unsigned char>(s[used]))) ++used;
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError("line " + std::to_string(line_no) + ": malformed number '" + s + "'");
  }
}

}  // namespace detail

/// Parses `frame,id,bb_left,bb_top,bb_width,bb_height,conf[,class,visibility[,...]]`.
/// Detection files always yield id = -1.
inline MotFile parse_mot_text(const std::string& text, MotKind kind) {
  MotFile out;
  std::istringstream is(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    auto fields = detail::split_csv(line);
    if (fields.size() < 7)
      throw DataError("line " + std::to_string(line_no) + ": expected at least 7 fields, got " +
                      std::to_string(fields.size()));
    Observation o;
    o.frame = static_cast<int>(detail::parse_number(fields[0], line_no));
    const int id = static_cast<int>(detail::parse_number(fields[1], line_no));
    const double left = detail::parse_number(fields[2], line_no);
    const double top = detail::parse_number(fields[3], line_no);
    const double w = detail::parse_number(fields[4], line_no);
    const double h = detail::parse_number(fields[5], line_no);
    o.score = detail::parse_number(fields[6], line_no);
    o.id = kind == MotKind::det ? kUnsetId : id;
    if (w <= 0.0 || h <= 0.0) {
      out.warnings.push_back("line " + std::to_string(line_no) + ": non-positive box size, record rejected");
      continue;
    }
    if (o.frame < 1) throw DataError("line " + std::to_string(line_no) + ": frame must be >= 1");
    o.x1 = left;
    o.y1 = top;
    o.x2 = left + w;
    o.y2 = top + h;
    o.score = std::clamp(o.score, 0.0, 1.0);
    out.by_frame[o.frame].push_back(o);
  }
  return out;
}

inline MotFile parse_mot_file(const std::filesystem::path& path, MotKind kind) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_mot_text(ss.str(), kind);
}

/// `frame,id,x,y,w,h,score,-1,-1,-1`
inline std::string format_mot_line(const Observation& o) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%d,%d,%.2f,%.2f,%.2f,%.2f,%.4g,-1,-1,-1", o.frame, o.id, o.x1, o.y1,
                o.width(), o.height(), o.score);
  return buf;
}

inline std::string format_mot_text(std::vector<Observation> obs) {
  std::stable_sort(obs.begin(), obs.end(), [](const Observation& a, const Observation& b) {
    return a.frame != b.frame ? a.frame < b.frame : a.id < b.id;
  });
  std::string out;
  for (const auto& o : obs) out += format_mot_line(o) + "\n";
  return out;
}

inline void write_mot_file(const std::filesystem::path& path, const std::vector<Observation>& obs) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << format_mot_text(obs);
}

// ---------------------------------------------------------------------------
// Crops

struct ClampedBox {
  double x1, y1, x2, y2;
};

/// Clamps a box to the image rectangle; throws when nothing remains.
inline ClampedBox clamp_to_image(const Observation& obs, int width, int height) {
  ClampedBox b{std::clamp(obs.x1, 0.0, double(width)), std::clamp(obs.y1, 0.0, double(height)),
               std::clamp(obs.x2, 0.0, double(width)), std::clamp(obs.y2, 0.0, double(height))};
  if (b.x2 - b.x1 < 1e-9 || b.y2 - b.y1 < 1e-9)
    throw DataError("box does not intersect the image");
  return b;
}

/// Bilinear crop-and-resize to kCropHeight x kCropWidth. With `augment`,
/// a random sub-window keeping >= 80% of the box area is taken and the
/// result is mirrored with probability 0.5.
inline Patch crop_and_resize(const Image& image, const Observation& obs, bool augment = false,
                             Rng* rng = nullptr) {
  if (image.width <= 0 || image.height <= 0) throw DataError("empty image");
  ClampedBox b = clamp_to_image(obs, image.width, image.height);
  bool flip = false;
  if (augment) {
    if (!rng) throw std::invalid_argument("crop_and_resize: augmentation needs an RNG");
    std::uniform_real_distribution<double> area(0.8, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double s = std::sqrt(area(*rng));
    const double w = (b.x2 - b.x1) * s, h = (b.y2 - b.y1) * s;
    const double ox = unit(*rng) * ((b.x2 - b.x1) - w);
    const double oy = unit(*rng) * ((b.y2 - b.y1) - h);
    b = {b.x1 + ox, b.y1 + oy, b.x1 + ox + w, b.y1 + oy + h};
    flip = unit(*rng) < 0.5;
  }
  Patch patch;
  const double sx = (b.x2 - b.x1) / kCropWidth;
  const double sy = (b.y2 - b.y1) / kCropHeight;
  for (int r = 0; r < kCropHeight; ++r) {
    const double fy = std::clamp(b.y1 + (r + 0.5) * sy - 0.5, 0.0, double(image.height - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, image.height - 1);
    const double wy = fy - y0;
    for (int c = 0; c < kCropWidth; ++c) {
      const double fx = std::clamp(b.x1 + (c + 0.5) * sx - 0.5, 0.0, double(image.width - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, image.width - 1);
      const double wx = fx - x0;
      const int dst_c = flip ? kCropWidth - 1 - c : c;
      for (int ch = 0; ch < 3; ++ch) {
        const double top = (1 - wx) * image.pixel(x0, y0)[ch] + wx * image.pixel(x1, y0)[ch];
        const double bot = (1 - wx) * image.pixel(x0, y1)[ch] + wx * image.pixel(x1, y1)[ch];
        patch.at(r, dst_c, ch) = static_cast<float>(((1 - wy) * top + wy * bot) / 255.0);
      }
    }
  }
  return patch;
}

// ---------------------------------------------------------------------------
// Synthetic sequences

enum class MotionModel { linear, crossing, occlusion_gap };

inline MotionModel parse_motion_model(const std::string& s) {
  if (s == "linear") return MotionModel::linear;
  if (s == "crossing") return MotionModel::crossing;
  if (s == "occlusion-gap" || s == "occlusion_gap") return MotionModel::occlusion_gap;
  throw std::invalid_argument("unknown motion model '" + s + "'");
}

inline std::string to_string(MotionModel m) {
  switch (m) {
    case MotionModel::linear: return "linear";
    case MotionModel::crossing: return "crossing";
    case MotionModel::occlusion_gap: return "occlusion-gap";
  }
  return "linear";
}

struct SynthSpec {
  int n_targets = 5;
  int n_frames = 100;
  int width = 480;
  int height = 360;
  MotionModel motion = MotionModel::linear;
  double speed = 2.0;  // pixels per frame
  double box_width = 24.0;
  double box_height = 56.0;
  int gap_target = 3;  // 1-based identity hidden from detections
  int gap_start = 40;
  int gap_end = 60;
  bool render_images = true;
  std::uint64_t seed = 7;
};

struct SyntheticSequence {
  std::vector<Frame> frames;
  std::vector<Observation> gt;
  /// Ground-truth identity of every detection, parallel to frames[i].detections.
  std::vector<std::vector<int>> det_identity;
};

inline std::array<std::uint8_t, 3> hsv_color(double hue_turns, double s, double v) {
  const double hue = std::fmod(hue_turns, 1.0) * 6.0;
  const int sector = static_cast<int>(hue);
  const double f = hue - sector;
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  double r = v, g = t, b = p;
  switch (sector % 6) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
  return {static_cast<std::uint8_t>(r * 255), static_cast<std::uint8_t>(g * 255),
          static_cast<std::uint8_t>(b * 255)};
}

/// Upper-body colour: evenly spread hues, alternating brightness.
inline std::array<std::uint8_t, 3> identity_color(int id) {
  return hsv_color(0.61803398875 * id, 0.85, (id % 2) ? 0.95 : 0.7);
}

/// Lower-body colour, on a hue sequence unrelated to the upper one so that
/// identities do not lie on a single colour circle.
inline std::array<std::uint8_t, 3> identity_secondary_color(int id) {
  return hsv_color(0.1 + 0.41421356 * id * id, 0.6, (id % 3 == 0) ? 0.45 : 0.85);
}

namespace detail {

struct TargetPath {
  double x0, y0, vx;  // top-left at frame 1 and horizontal velocity
};

inline double overlap_area(const Observation& a, const Observation& b) {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  return (w > 0 && h > 0) ? w * h : 0.0;
}

inline void render_frame(Image& img, const std::vector<Observation>& boxes, std::uint64_t seed) {
  // Background and per-identity textures are fixed for a given seed, so the
  // same identity looks the same in every frame.
  Rng bg(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<int> bg_noise(-10, 10);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const int v = 110 + bg_noise(bg);
      auto* p = img.pixel(x, y);
      p[0] = p[1] = p[2] = static_cast<std::uint8_t>(v);
    }
  for (const auto& o : boxes) {
    const auto upper = identity_color(o.id);
    const auto lower = identity_secondary_color(o.id);
    const int x1 = std::max(0, static_cast<int>(std::lround(o.x1)));
    const int y1 = std::max(0, static_cast<int>(std::lround(o.y1)));
    const int x2 = std::min(img.width, static_cast<int>(std::lround(o.x2)));
    const int y2 = std::min(img.height, static_cast<int>(std::lround(o.y2)));
    const int split = static_cast<int>(std::lround(o.y1 + 0.55 * (o.y2 - o.y1)));
    for (int y = y1; y < y2; ++y)
      for (int x = x1; x < x2; ++x) {
        const auto& color = y < split ? upper : lower;
        // texture keyed on the position inside the box
        const std::uint64_t key = (static_cast<std::uint64_t>(o.id) * 1315423911ULL) ^
                                  (static_cast<std::uint64_t>(y - y1) * 2654435761ULL) ^
                                  (static_cast<std::uint64_t>(x - x1) * 40503ULL) ^ seed;
        const int noise = static_cast<int>((key * 0x2545F4914F6CDD1DULL) >> 59) - 16;
        auto* p = img.pixel(x, y);
        for (int c = 0; c < 3; ++c) p[c] = static_cast<std::uint8_t>(std::clamp(color[c] + noise, 0, 255));
      }
  }
}

}  // namespace detail

/// Deterministic synthetic sequence: per-identity two-tone boxes moving
/// in horizontal lanes. `crossing` pairs targets that converge, overlap at
/// the middle frame and turn back; `occlusion-gap` removes one target's
/// detections over [gap_start, gap_end] while it reverses direction unseen.
inline SyntheticSequence generate_synthetic_sequence(const SynthSpec& spec) {
  if (spec.n_targets < 1) throw std::invalid_argument("synthetic spec: n_targets must be >= 1");
  if (spec.n_frames < 2) throw std::invalid_argument("synthetic spec: n_frames must be >= 2");
  if (spec.width <= spec.box_width || spec.height <= spec.box_height)
    throw std::invalid_argument("synthetic spec: image smaller than a target box");
  Rng rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> jitter(-0.03, 0.03);

  const int n = spec.n_targets;
  const int lanes = spec.motion == MotionModel::crossing ? (n + 1) / 2 : n;
  const double lane_gap = (spec.height - spec.box_height) / std::max(1, lanes);
  const double travel = spec.speed * (spec.n_frames - 1);
  const double room = spec.width - spec.box_width;

  const int meet_frame = 1 + (spec.n_frames - 1) / 2;
  std::vector<detail::TargetPath> paths(n);
  for (int i = 0; i < n; ++i) {
    const double dir = unit(rng) < 0.5 ? -1.0 : 1.0;
    if (spec.motion == MotionModel::crossing && i % 2 == 0 && i + 1 < n) {
      // pair (i, i+1): converge and meet at the middle frame
      const double lane_y = (i / 2) * lane_gap + 0.5 * (lane_gap - 8.0) * unit(rng);
      const double half = spec.speed * (meet_frame - 1);
      const double meet_x = std::clamp(room / 2 + (unit(rng) - 0.5) * std::max(0.0, room - 2 * half - 2),
                                       half, room - half);
      paths[i] = {meet_x - half, lane_y, spec.speed};
      paths[i + 1] = {meet_x + half, lane_y + 8.0, -spec.speed};
      ++i;
      continue;
    }
    const int lane = spec.motion == MotionModel::crossing ? i / 2 : i;
    const double lane_y = lane * lane_gap + 0.5 * std::max(0.0, lane_gap - spec.box_height) * unit(rng);
    double x0;
    if (travel >= room) {
      x0 = dir > 0 ? 0.0 : room;
    } else {
      const double lo = dir > 0 ? 0.0 : travel;
      const double hi = dir > 0 ? room - travel : room;
      x0 = lo + (hi - lo) * unit(rng);
    }
    paths[i] = {x0, lane_y, dir * spec.speed};
  }

  auto position = [&](int i, int f) {
    const auto& p = paths[i];
    const bool paired = spec.motion == MotionModel::crossing && !(n % 2 == 1 && i == n - 1);
    double dx;
    if (paired && f > meet_frame) {
      dx = p.vx * (meet_frame - 1) - p.vx * (f - meet_frame);
    } else if (spec.motion == MotionModel::occlusion_gap && i + 1 == spec.gap_target && f > spec.gap_start) {
      const int back = std::min(f, spec.gap_end + 1) - spec.gap_start;
      const int fwd = std::max(0, f - spec.gap_end - 1);
      dx = p.vx * (spec.gap_start - 1) - p.vx * back - p.vx * fwd;
    } else {
      dx = p.vx * (f - 1);
    }
    const double x = std::clamp(p.x0 + dx, 0.0, room);
    return std::pair{x, p.y0};
  };

  SyntheticSequence seq;
  for (int f = 1; f <= spec.n_frames; ++f) {
    Frame frame;
    frame.index = f;
    frame.width = spec.width;
    frame.height = spec.height;
    std::vector<Observation> boxes;
    for (int i = 0; i < n; ++i) {
      auto [x, y] = position(i, f);
      Observation o{i + 1, f, x, y, x + spec.box_width, y + spec.box_height, 1.0};
      boxes.push_back(o);
      seq.gt.push_back(o);
    }
    std::vector<int> identity;
    for (int i = 0; i < n; ++i) {
      const bool hidden = spec.motion == MotionModel::occlusion_gap && i + 1 == spec.gap_target &&
                          f >= spec.gap_start && f <= spec.gap_end;
      const double noise = jitter(rng);
      if (hidden) continue;
      double covered = 0.0;
      for (int j = i + 1; j < n; ++j) covered += detail::overlap_area(boxes[i], boxes[j]);
      const double frac = std::min(1.0, covered / (spec.box_width * spec.box_height));
      Observation det = boxes[i];
      det.id = kUnsetId;
      det.score = std::clamp(0.95 - 0.6 * frac + noise, 0.05, 1.0);
      frame.detections.push_back(det);
      identity.push_back(i + 1);
    }
    if (spec.render_images) {
      Image img(spec.width, spec.height);
      detail::render_frame(img, boxes, spec.seed);
      frame.image = std::move(img);
    }
    seq.det_identity.push_back(std::move(identity));
    seq.frames.push_back(std::move(frame));
  }
  return seq;
}

// ---------------------------------------------------------------------------
// Sequence directories: <seq>/img1/%06d.jpg, <seq>/gt/gt.txt, <seq>/det/det.txt

inline void write_sequence_dir(const std::filesystem::path& dir, const SyntheticSequence& seq) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "img1");
  fs::create_directories(dir / "gt");
  fs::create_directories(dir / "det");
  std::vector<Observation> gt = seq.gt;
  for (auto& o : gt) o.score = 1.0;
  write_mot_file(dir / "gt" / "gt.txt", gt);
  std::vector<Observation> dets;
  for (const auto& f : seq.frames)
    for (auto d : f.detections) {
      d.id = kUnsetId;
      dets.push_back(d);
    }
  write_mot_file(dir / "det" / "det.txt", dets);
  for (const auto& f : seq.frames) {
    if (!f.image) continue;
    char name[32];
    std::snprintf(name, sizeof(name), "%06d.jpg", f.index);
    write_jpeg((dir / "img1" / name).string(), *f.image);
  }
  std::ofstream info(dir / "seqinfo.ini");
  const int w = seq.frames.empty() ? 0 : seq.frames.front().width;
  const int h = seq.frames.empty() ? 0 : seq.frames.front().height;
  info << "[Sequence]\nname=" << dir.filename().string() << "\nimDir=img1\nseqLength=" << seq.frames.size()
       << "\nimWidth=" << w << "\nimHeight=" << h << "\nimExt=.jpg\n";
}

struct SequenceData {
  std::string name;
  std::vector<Frame> frames;
  std::vector<Observation> gt;
};

/// Loads a sequence directory. Frames are enumerated from img1/ when
/// present, otherwise from the detection file.
inline SequenceData load_sequence_dir(const std::filesystem::path& dir, bool load_images = true) {
  namespace fs = std::filesystem;
  SequenceData out;
  out.name = dir.filename().string();
  MotFile dets;
  if (fs::exists(dir / "det" / "det.txt")) dets = parse_mot_file(dir / "det" / "det.txt", MotKind::det);
  if (fs::exists(dir / "gt" / "gt.txt")) out.gt = parse_mot_file(dir / "gt" / "gt.txt", MotKind::gt).flatten();
  std::vector<fs::path> images;
  if (fs::exists(dir / "img1"))
    for (const auto& e : fs::directory_iterator(dir / "img1"))
      if (e.path().extension() == ".jpg") images.push_back(e.path());
  std::sort(images.begin(), images.end());
  int width = 0, height = 0;
  {
    std::ifstream info(dir / "seqinfo.ini");
    std::string line;
    while (std::getline(info, line)) {
      if (line.rfind("imWidth=", 0) == 0) width = std::stoi(line.substr(8));
      if (line.rfind("imHeight=", 0) == 0) height = std::stoi(line.substr(9));
    }
  }
  int n_frames = static_cast<int>(images.size());
  if (n_frames == 0 && !dets.by_frame.empty()) n_frames = dets.by_frame.rbegin()->first;
  for (int f = 1; f <= n_frames; ++f) {
    Frame frame;
    frame.index = f;
    if (load_images && f <= static_cast<int>(images.size())) {
      frame.image = read_jpeg(images[f - 1].string());
      frame.width = frame.image->width;
      frame.height = frame.image->height;
    } else {
      frame.width = width;
      frame.height = height;
    }
    if (auto it = dets.by_frame.find(f); it != dets.by_frame.end()) frame.detections = it->second;
    out.frames.push_back(std::move(frame));
  }
  return out;
}

}  // namespace epiptrack
