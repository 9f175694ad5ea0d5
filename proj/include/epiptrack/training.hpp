#pragma once

// Training loop: PK-sampled batches, SGD with momentum and weight decay,
// constant warmup then cosine decay, held-out similarity evaluation,
// checkpointing with exact resume.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "epiptrack/association.hpp"
#include "epiptrack/checkpoint.hpp"
#include "epiptrack/evaluation.hpp"
#include "epiptrack/losses.hpp"
#include "epiptrack/model.hpp"

namespace epiptrack {

inline constexpr const char* kVersion = "0.1.0";

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  ModelConfig model;
  LossConfig loss;
  std::size_t batch_size = 16;
  std::size_t instances = 4;  // Q samples per identity in a batch
  int epochs = 60;
  double base_lr = 0.004;
  double warmup_lr = 0.0004;
  int warmup_epochs = 5;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 7;
  double speed_noise = 0.0;  // std of Gaussian noise added to speed before rendering prompts
  double depth_noise = 0.0;
  int eval_every = 10;       // held-out evaluation period in epochs; the last epoch is always evaluated
  double grad_clip = 10.0;   // global gradient-norm cap, 0 disables

  std::size_t identities_per_batch() const { return batch_size / instances; }

  void validate() const {
    model.validate();
    loss.validate();
    if (epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
    if (instances < 2) throw std::invalid_argument("train config: instances must be >= 2");
    if (batch_size % instances != 0 || batch_size / instances < 2)
      throw std::invalid_argument("train config: batch_size must be a multiple of instances with >= 2 identities");
    if (!(warmup_lr <= base_lr)) throw std::invalid_argument("train config: warmup_lr must not exceed base_lr");
    if (warmup_epochs < 0 || warmup_epochs >= epochs)
      throw std::invalid_argument("train config: warmup_epochs must be in [0, epochs)");
    if (base_lr <= 0) throw std::invalid_argument("train config: base_lr must be positive");
    if (eval_every < 1) throw std::invalid_argument("train config: eval_every must be >= 1");
    if (grad_clip < 0) throw std::invalid_argument("train config: grad_clip must be >= 0");
  }
};

/// Constant warmup_lr for the warmup epochs, then cosine decay from base_lr
/// to 0 at `epochs`.
inline double learning_rate(const TrainConfig& c, int epoch) {
  if (epoch < c.warmup_epochs) return c.warmup_lr;
  const double t = double(epoch - c.warmup_epochs) / double(c.epochs - c.warmup_epochs);
  return 0.5 * c.base_lr * (1.0 + std::cos(std::numbers::pi * std::min(1.0, t)));
}

// ---------------------------------------------------------------------------
// Dataset

inline constexpr std::size_t kPixelsPerCrop = std::size_t(kPooledHeight) * kPooledWidth * 3;

struct TrainSample {
  std::vector<double> pixels;  // preprocessed crop, kPixelsPerCrop values
  int id = 0;
  int frame = 0;
  MotionAttributes attrs;
};

struct Dataset {
  std::vector<TrainSample> train;
  std::vector<TrainSample> heldout;
};

/// Crops every ground-truth box from frames with images. Score comes from
/// the best-overlapping detection (1 when none), speed from the same
/// identity's box in the previous frame. Frames after `split_frame` are
/// held out.
inline Dataset build_dataset(const std::vector<Frame>& frames, const std::vector<Observation>& gt, int split_frame) {
  std::map<int, std::map<int, Observation>> by_frame;  // frame -> id -> box
  for (const auto& o : gt) by_frame[o.frame][o.id] = o;
  Dataset ds;
  for (const auto& frame : frames) {
    if (!frame.image) continue;
    auto it = by_frame.find(frame.index);
    if (it == by_frame.end()) continue;
    for (const auto& [id, box] : it->second) {
      Observation cur = box;
      double best = 0.5;
      cur.score = 1.0;
      for (const auto& d : frame.detections) {
        const double v = iou(d, box);
        if (v >= best) {
          best = v;
          cur.score = d.score;
        }
      }
      std::vector<Observation> hist;
      if (auto pf = by_frame.find(frame.index - 1); pf != by_frame.end())
        if (auto pb = pf->second.find(id); pb != pf->second.end()) hist.push_back(pb->second);
      hist.push_back(cur);
      CropBatch one;
      one.crops.push_back(crop_and_resize(*frame.image, box));
      one.ids.push_back(id);
      one.meta.push_back(box);
      TrainSample s;
      s.pixels = preprocess_crops(one).values();
      s.id = id;
      s.frame = frame.index;
      s.attrs = motion_attributes(hist, frame.height);
      (frame.index > split_frame ? ds.heldout : ds.train).push_back(std::move(s));
    }
  }
  return ds;
}

/// Default toy dataset: an 8-identity linear synthetic sequence.
inline SynthSpec toy_train_spec(std::uint64_t seed = 11) {
  SynthSpec spec;
  spec.n_targets = 8;
  spec.n_frames = 32;
  spec.width = 480;
  spec.height = 640;
  spec.motion = MotionModel::linear;
  spec.seed = seed;
  return spec;
}

inline Dataset build_toy_dataset(const SynthSpec& spec, double heldout_fraction = 0.25) {
  SyntheticSequence seq = generate_synthetic_sequence(spec);
  const int split = static_cast<int>(std::floor(spec.n_frames * (1.0 - heldout_fraction)));
  return build_dataset(seq.frames, seq.gt, split);
}

// ---------------------------------------------------------------------------
// Sampling

inline nn::Rng epoch_rng(std::uint64_t seed, int epoch, std::uint64_t stream = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(stream)};
  return nn::Rng(seq);
}

/// One epoch of PK batches: each identity's samples are shuffled and cut
/// into chunks of Q; batches take one chunk from each of P distinct
/// identities until fewer than P identities have chunks left.
inline std::vector<std::vector<std::size_t>> pk_batches(const std::vector<TrainSample>& samples, std::size_t p,
                                                        std::size_t q, nn::Rng& rng) {
  std::map<int, std::vector<std::size_t>> by_id;
  for (std::size_t i = 0; i < samples.size(); ++i) by_id[samples[i].id].push_back(i);
  std::map<int, std::vector<std::vector<std::size_t>>> chunks;
  for (auto& [id, idx] : by_id) {
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t s = 0; s + q <= idx.size(); s += q)
      chunks[id].emplace_back(idx.begin() + static_cast<long>(s), idx.begin() + static_cast<long>(s + q));
  }
  std::vector<std::vector<std::size_t>> batches;
  while (true) {
    std::vector<int> avail;
    for (const auto& [id, c] : chunks)
      if (!c.empty()) avail.push_back(id);
    if (avail.size() < p) break;
    std::shuffle(avail.begin(), avail.end(), rng);
    std::vector<std::size_t> batch;
    for (std::size_t k = 0; k < p; ++k) {
      auto& c = chunks[avail[k]];
      batch.insert(batch.end(), c.back().begin(), c.back().end());
      c.pop_back();
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

struct Batch {
  Tensor pixels;
  std::vector<ExplicitPromptSet> prompts;
  std::vector<int> ids;
};

inline Batch make_batch(const std::vector<TrainSample>& samples, const std::vector<std::size_t>& idx,
                        double speed_noise, double depth_noise, nn::Rng* rng) {
  Batch b;
  std::vector<double> px;
  px.reserve(idx.size() * kPixelsPerCrop);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::size_t i : idx) {
    const auto& s = samples.at(i);
    px.insert(px.end(), s.pixels.begin(), s.pixels.end());
    MotionAttributes a = s.attrs;
    if (rng && speed_noise > 0) a.speed += speed_noise * gauss(*rng);
    if (rng && depth_noise > 0) a.depth += depth_noise * gauss(*rng);
    b.prompts.push_back(render_explicit_prompts(s.id, a));
    b.ids.push_back(s.id);
  }
  b.pixels = Tensor::constant({idx.size(), std::size_t(kPooledHeight * kPooledWidth), 3}, std::move(px));
  return b;
}

/// Held-out similarity metrics in one batch. Noise, when configured, is
/// drawn from a fixed stream so every evaluation sees the same prompts.
inline SimilarityReport evaluate(const EpipModel& model, const std::vector<TrainSample>& samples,
                                 const TrainConfig& cfg) {
  if (samples.size() < 2) throw TrainingError("evaluation needs at least 2 held-out samples");
  std::vector<std::size_t> idx(samples.size());
  std::iota(idx.begin(), idx.end(), 0);
  nn::Rng rng = epoch_rng(cfg.seed, -1, 99);
  Batch b = make_batch(samples, idx, cfg.speed_noise, cfg.depth_noise, &rng);
  ag::NoGradGuard guard;
  ModelOutputs o = model.forward(b.pixels, b.prompts);
  return similarity_report(o.multimodal_explicit, o.multimodal_implicit, o.visual, b.ids);
}

// ---------------------------------------------------------------------------
// Optimizer and checkpoints

class SGD {
 public:
  SGD(nn::ParamList params, double momentum, double weight_decay)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    for (const auto& p : params_) buffers_.emplace_back(p.tensor.numel(), 0.0);
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  double grad_norm() const {
    double s = 0.0;
    for (const auto& p : params_)
      for (double g : p.tensor.grad()) s += g * g;
    return std::sqrt(s);
  }

  /// Rescales gradients so their global norm is at most `max_norm`.
  void clip(double max_norm) {
    const double n = grad_norm();
    if (max_norm <= 0 || n <= max_norm) return;
    for (auto& p : params_) {
      if (p.tensor.grad().empty()) continue;
      for (double& g : p.tensor.mutable_grad()) g *= max_norm / n;
    }
  }

  void step(double lr) {
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto w = params_[k].tensor.mutable_data();
      auto g = params_[k].tensor.grad();
      auto& buf = buffers_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = (g.empty() ? 0.0 : g[i]) + weight_decay_ * w[i];
        buf[i] = momentum_ * buf[i] + gi;
        w[i] -= lr * buf[i];
      }
    }
  }

  const nn::ParamList& params() const { return params_; }
  std::vector<std::vector<double>>& buffers() { return buffers_; }

 private:
  nn::ParamList params_;
  double momentum_, weight_decay_;
  std::vector<std::vector<double>> buffers_;
};

inline void snap_to_f32(std::span<double> v) {
  for (auto& x : v) x = static_cast<double>(static_cast<float>(x));
}

inline nlohmann::json train_config_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size}, {"instances", c.instances},       {"epochs", c.epochs},
          {"base_lr", c.base_lr},       {"warmup_lr", c.warmup_lr},       {"warmup_epochs", c.warmup_epochs},
          {"momentum", c.momentum},     {"weight_decay", c.weight_decay}, {"seed", c.seed},
          {"speed_noise", c.speed_noise}, {"depth_noise", c.depth_noise}, {"eval_every", c.eval_every},
          {"grad_clip", c.grad_clip},
          {"loss",
           {{"tau", c.loss.tau},
            {"margin", c.loss.margin},
            {"eps", c.loss.eps},
            {"terms", {{"con", c.loss.terms.con}, {"tri", c.loss.terms.tri}, {"sim", c.loss.terms.sim}}}}}};
}

inline Checkpoint make_checkpoint(const EpipModel& model, const SGD* opt, int epochs_done, const TrainConfig& cfg) {
  Checkpoint ck;
  ck.config = {{"model", to_json(model.cfg)}, {"train", train_config_json(cfg)}, {"epoch", epochs_done},
               {"version", kVersion}};
  store_params(ck, model.parameters());
  if (opt)
    for (std::size_t k = 0; k < opt->params().size(); ++k) {
      NamedArray a;
      a.shape = opt->params()[k].tensor.shape();
      for (double v : const_cast<SGD*>(opt)->buffers()[k]) a.data.push_back(static_cast<float>(v));
      ck.arrays["opt/" + opt->params()[k].name] = std::move(a);
    }
  return ck;
}

/// Restores model weights (and optimizer buffers when present).
inline int restore_checkpoint(const Checkpoint& ck, EpipModel& model, SGD* opt) {
  load_params(ck, model.parameters());
  model.clear_cache();
  if (opt)
    for (std::size_t k = 0; k < opt->params().size(); ++k) {
      auto it = ck.arrays.find("opt/" + opt->params()[k].name);
      if (it == ck.arrays.end()) continue;
      auto& buf = opt->buffers()[k];
      if (it->second.data.size() != buf.size()) throw CheckpointError("optimizer buffer size mismatch");
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = it->second.data[i];
    }
  return ck.config.value("epoch", 0);
}

inline std::unique_ptr<EpipModel> load_model(const std::filesystem::path& path) {
  Checkpoint ck = read_checkpoint(path);
  auto model = std::make_unique<EpipModel>(model_config_from_json(ck.config.at("model")));
  restore_checkpoint(ck, *model, nullptr);
  return model;
}

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
  std::filesystem::path checkpoint;  // written after every epoch when non-empty
  std::filesystem::path history;     // JSONL, appended
  bool resume = false;               // continue from `checkpoint`
  int stop_after = -1;               // stop once this many epochs are done (for staged runs)
  bool initial_eval = false;         // evaluate before the first update
};

struct TrainResult {
  std::vector<nlohmann::json> history;
  std::optional<SimilarityReport> initial;
  SimilarityReport final;
  std::shared_ptr<EpipModel> model;
  double first_loss = 0.0;
  double last_loss = 0.0;
  int epochs_done = 0;
};

inline TrainResult train(const Dataset& ds, const TrainConfig& cfg, const TrainOptions& opts = {}) {
  cfg.validate();
  if (ds.train.empty()) throw TrainingError("training set is empty");
  TrainResult res;
  res.model = std::make_shared<EpipModel>(cfg.model);
  EpipModel& model = *res.model;
  SGD opt(model.parameters(true), cfg.momentum, cfg.weight_decay);

  int start = 0;
  if (opts.resume) {
    if (opts.checkpoint.empty() || !std::filesystem::exists(opts.checkpoint))
      throw TrainingError("resume requested but checkpoint is missing");
    start = restore_checkpoint(read_checkpoint(opts.checkpoint), model, &opt);
  } else {
    // parameters live at checkpoint precision from the start so a resumed
    // run continues exactly where a single run would be
    for (auto& p : model.parameters()) snap_to_f32(p.tensor.mutable_data());
  }
  if (opts.initial_eval && !ds.heldout.empty()) res.initial = evaluate(model, ds.heldout, cfg);

  std::ofstream history;
  if (!opts.history.empty()) {
    if (opts.history.has_parent_path()) std::filesystem::create_directories(opts.history.parent_path());
    history.open(opts.history, opts.resume ? std::ios::app : std::ios::trunc);
  }
  const int end = opts.stop_after >= 0 ? std::min(cfg.epochs, opts.stop_after) : cfg.epochs;
  bool first = true;
  for (int epoch = start; epoch < end; ++epoch) {
    const double lr = learning_rate(cfg, epoch);
    nn::Rng rng = epoch_rng(cfg.seed, epoch);
    auto batches = pk_batches(ds.train, cfg.identities_per_batch(), cfg.instances, rng);
    if (batches.empty()) throw TrainingError("not enough identities/instances for one PK batch");
    double sum = 0, con = 0, tri = 0, sim = 0, gmax = 0;
    for (std::size_t step = 0; step < batches.size(); ++step) {
      Batch b = make_batch(ds.train, batches[step], cfg.speed_noise, cfg.depth_noise, &rng);
      ModelOutputs o = model.forward(b.pixels, b.prompts);
      LossBreakdown l = total_loss(o.multimodal_explicit, o.multimodal_implicit, o.visual, b.ids, cfg.loss);
      const double v = l.total.item();
      if (!std::isfinite(v)) {
        std::string ids;
        for (int id : b.ids) ids += std::to_string(id) + " ";
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + " step " + std::to_string(step) +
                            " (con " + std::to_string(l.con) + ", tri " + std::to_string(l.tri) + ", sim " +
                            std::to_string(l.sim) + "); batch ids: " + ids);
      }
      opt.zero_grad();
      ag::backward(l.total);
      gmax = std::max(gmax, opt.grad_norm());
      opt.clip(cfg.grad_clip);
      opt.step(lr);
      if (first) {
        res.first_loss = v;
        first = false;
      }
      sum += v;
      con += l.con;
      tri += l.tri;
      sim += l.sim;
    }
    for (auto& p : model.parameters(true)) snap_to_f32(p.tensor.mutable_data());
    for (auto& buf : opt.buffers()) snap_to_f32(buf);
    const double n = double(batches.size());
    res.last_loss = sum / n;
    nlohmann::json rec = {{"epoch", epoch + 1}, {"lr", lr},        {"loss", sum / n},
                          {"con", con / n},     {"tri", tri / n}, {"sim", sim / n}, {"grad_norm_max", gmax}};
    if (!ds.heldout.empty() && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs)) {
      res.final = evaluate(model, ds.heldout, cfg);
      rec["eval"] = to_json(res.final);
    }
    res.history.push_back(rec);
    if (history) history << rec.dump() << "\n" << std::flush;
    res.epochs_done = epoch + 1;
    if (!opts.checkpoint.empty()) write_checkpoint(opts.checkpoint, make_checkpoint(model, &opt, epoch + 1, cfg));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationCell {
  std::string name;
  std::optional<LossTerms> terms;
  std::optional<FusionStrategy> fusion;
  std::optional<InteractionStrategy> interaction;
  std::optional<std::set<int>> inject_layers;
  std::optional<bool> mn_corrector;
  std::optional<double> tau;
};

inline TrainConfig apply_cell(TrainConfig cfg, const AblationCell& cell) {
  if (cell.terms) cfg.loss.terms = *cell.terms;
  if (cell.fusion) cfg.model.modulator.fusion = *cell.fusion;
  if (cell.interaction) cfg.model.modulator.interaction = *cell.interaction;
  if (cell.inject_layers) cfg.model.encoder.inject_layers = *cell.inject_layers;
  if (cell.mn_corrector) cfg.model.modulator.mn_corrector = *cell.mn_corrector;
  if (cell.tau) cfg.loss.tau = *cell.tau;
  return cfg;
}

/// The four loss rows: con; con+tri; con+sim; con+tri+sim.
inline std::vector<AblationCell> loss_term_grid() {
  auto cell = [](std::string name, bool tri, bool sim) {
    AblationCell c;
    c.name = std::move(name);
    c.terms = LossTerms{true, tri, sim};
    return c;
  };
  return {cell("L_con", false, false), cell("L_con+L_tri", true, false), cell("L_con+L_sim", false, true),
          cell("L_con+L_tri+L_sim", true, true)};
}

struct AblationRow {
  std::string name;
  TrainResult result;
};

inline std::vector<AblationRow> ablate(const Dataset& ds, const TrainConfig& base,
                                       const std::vector<AblationCell>& grid) {
  if (grid.empty()) throw std::invalid_argument("ablate: empty grid");
  std::vector<AblationRow> rows;
  for (const auto& cell : grid) rows.push_back({cell.name, train(ds, apply_cell(base, cell))});
  return rows;
}

inline std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::vector<std::pair<std::string, SimilarityReport>> t;
  for (const auto& r : rows) t.emplace_back(r.name, r.result.final);
  return format_table(t);
}

}  // namespace epiptrack
