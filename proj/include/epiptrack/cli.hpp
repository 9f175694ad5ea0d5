#pragma once

// Command-line driver: gen-synth | train | ablate | track | eval.
// Exit codes: 0 success, 1 runtime failure, 2 config or usage error.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "epiptrack/association.hpp"
#include "epiptrack/config.hpp"
#include "epiptrack/evaluation.hpp"
#include "epiptrack/training.hpp"

namespace epiptrack {

namespace fs = std::filesystem;

/// Raised for problems the operator can fix by changing arguments.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CliContext {
  nlohmann::json config;
  std::string hash;
  bool force = false;
  bool resume = false;
  int stop_after = -1;
  int jobs = 1;
  std::string mode;
  std::string results;
  std::ostream* out = &std::cout;
  std::ostream* err = &std::cerr;

  fs::path data_root() const { return config.at("paths").at("data_root").get<std::string>(); }
  fs::path out_dir() const { return config.at("paths").at("out_dir").get<std::string>(); }
  fs::path checkpoint() const { return config.at("paths").at("checkpoint").get<std::string>(); }
  std::uint64_t seed() const { return config.at("seed").get<std::uint64_t>(); }

  nlohmann::json stamp() const { return {{"config_hash", hash}, {"seed", seed()}, {"version", kVersion}}; }
};

namespace cli_detail {

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

inline void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

/// Sequence directories under the data root, sorted by name.
inline std::vector<fs::path> sequence_dirs(const fs::path& root, bool need_gt) {
  std::vector<fs::path> out;
  if (!fs::is_directory(root)) return out;
  for (const auto& e : fs::directory_iterator(root)) {
    if (!e.is_directory()) continue;
    if (!fs::exists(e.path() / "det" / "det.txt")) continue;
    if (need_gt && !fs::exists(e.path() / "gt" / "gt.txt")) continue;
    out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// Training data: the built-in toy sequence or every sequence with ground
/// truth and images under the data root. Identities of different sequences
/// are kept apart by an offset.
inline Dataset load_dataset(const CliContext& ctx) {
  const auto& t = ctx.config.at("train");
  const double hf = t.at("heldout_fraction");
  if (t.at("source") == "toy") {
    SynthSpec spec = toy_train_spec(ctx.seed());
    spec.n_frames = t.at("toy_frames");
    return build_toy_dataset(spec, hf);
  }
  Dataset all;
  int offset = 0;
  for (const auto& dir : sequence_dirs(ctx.data_root(), true)) {
    SequenceData seq = load_sequence_dir(dir, true);
    if (seq.frames.empty()) continue;
    const int split = static_cast<int>(std::floor(static_cast<double>(seq.frames.size()) * (1.0 - hf)));
    Dataset ds = build_dataset(seq.frames, seq.gt, split);
    int max_id = 0;
    for (auto* part : {&ds.train, &ds.heldout})
      for (auto& s : *part) {
        max_id = std::max(max_id, s.id);
        s.id += offset;
      }
    all.train.insert(all.train.end(), ds.train.begin(), ds.train.end());
    all.heldout.insert(all.heldout.end(), ds.heldout.begin(), ds.heldout.end());
    offset += max_id + 1;
  }
  if (all.train.empty()) throw UsageError("no training sequences with gt and images under " + ctx.data_root().string());
  return all;
}

inline std::string mode_name(const CliContext& ctx) {
  return ctx.mode.empty() ? ctx.config.at("association").at("mode").get<std::string>() : ctx.mode;
}

inline std::string summary_line(const SimilarityReport& r) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(3);
  for (const auto& t : r.per_threshold) os << "F1@" << t.thr << "=" << t.f1 << " ";
  os << "gap=" << r.consistency.modality_gap << " align=" << r.consistency.alignment;
  return os.str();
}

}  // namespace cli_detail

// ---------------------------------------------------------------------------

inline int cmd_gen_synth(const CliContext& ctx) {
  const fs::path root = ctx.data_root();
  std::vector<std::pair<fs::path, SynthSpec>> jobs;
  for (auto motion : synth_motions(ctx.config)) {
    SynthSpec spec = synth_spec(ctx.config, motion);
    jobs.emplace_back(root / ("synth-" + to_string(motion)), spec);
  }
  for (const auto& [dir, spec] : jobs)
    if (fs::exists(dir) && !ctx.force) throw UsageError(dir.string() + " exists; pass --force to overwrite");
  nlohmann::json manifest = ctx.stamp();
  for (const auto& [dir, spec] : jobs) {
    if (fs::exists(dir)) fs::remove_all(dir);
    write_sequence_dir(dir, generate_synthetic_sequence(spec));
    manifest["sequences"].push_back({{"name", dir.filename().string()}, {"motion", to_string(spec.motion)}});
    *ctx.out << "wrote " << dir.string() << "\n";
  }
  cli_detail::write_json(root / "synth_manifest.json", manifest);
  return 0;
}

inline int cmd_train(const CliContext& ctx) {
  TrainConfig cfg = train_config(ctx.config);
  Dataset ds = cli_detail::load_dataset(ctx);
  TrainOptions opts;
  opts.checkpoint = ctx.checkpoint();
  opts.history = ctx.out_dir() / "history.jsonl";
  opts.resume = ctx.resume;
  opts.stop_after = ctx.stop_after;
  opts.initial_eval = !ctx.resume;
  if (opts.resume) {
    if (!fs::exists(opts.checkpoint)) throw UsageError("--resume: no checkpoint at " + opts.checkpoint.string());
    const Checkpoint ck = read_checkpoint(opts.checkpoint);
    if (ck.config.at("model") != to_json(cfg.model))
      throw UsageError("--resume: checkpoint was trained with a different model configuration");
  }
  *ctx.out << "training on " << ds.train.size() << " crops (" << ds.heldout.size() << " held out)\n";
  TrainResult r = train(ds, cfg, opts);
  nlohmann::json metrics = ctx.stamp();
  metrics["epochs_done"] = r.epochs_done;
  metrics["last_loss"] = r.last_loss;
  if (r.initial) metrics["initial"] = to_json(*r.initial);
  if (!ds.heldout.empty() && r.epochs_done == cfg.epochs) metrics["final"] = to_json(r.final);
  cli_detail::write_json(ctx.out_dir() / "train_metrics.json", metrics);
  *ctx.out << "epochs " << r.epochs_done << "/" << cfg.epochs << " loss " << r.last_loss << "\n";
  if (metrics.contains("final")) *ctx.out << cli_detail::summary_line(r.final) << "\n";
  return 0;
}

inline std::vector<AblationCell> ablation_grid(const std::string& name) {
  std::vector<AblationCell> g;
  auto cell = [&g](std::string n) -> AblationCell& {
    g.emplace_back();
    g.back().name = std::move(n);
    return g.back();
  };
  if (name == "loss_terms") return loss_term_grid();
  if (name == "tau") {
    for (double t : {0.05, 0.07, 0.1}) cell("tau=" + nlohmann::json(t).dump()).tau = t;
  } else if (name == "inject_layers") {
    for (const std::set<int>& s : std::vector<std::set<int>>{{2}, {5}, {8}, {5, 8}, {2, 5, 8}}) {
      std::string n = "layers";
      for (int l : s) n += " " + std::to_string(l);
      cell(n).inject_layers = s;
    }
  } else if (name == "fusion") {
    for (auto f : {FusionStrategy::weighted, FusionStrategy::concat, FusionStrategy::self_attention})
      cell(to_string(f)).fusion = f;
  } else if (name == "interaction") {
    for (auto i : {InteractionStrategy::cross_attention, InteractionStrategy::concat, InteractionStrategy::add})
      cell(to_string(i)).interaction = i;
  } else if (name == "mn_corrector") {
    cell("with corrector").mn_corrector = true;
    cell("without corrector").mn_corrector = false;
  } else {
    throw ConfigError("unknown ablation grid '" + name +
                      "' (expected loss_terms|tau|inject_layers|fusion|interaction|mn_corrector)");
  }
  return g;
}

inline int cmd_ablate(const CliContext& ctx) {
  TrainConfig base = train_config(ctx.config);
  const auto grid = ablation_grid(ctx.config.at("ablate").at("grid"));
  for (const auto& c : grid) apply_cell(base, c).validate();
  Dataset ds = cli_detail::load_dataset(ctx);
  if (ds.heldout.empty()) throw UsageError("ablation needs held-out samples");
  std::vector<AblationRow> rows;
  for (const auto& c : grid) {
    *ctx.out << "cell " << c.name << "\n";
    rows.push_back({c.name, train(ds, apply_cell(base, c))});
  }
  const std::string table = ablation_table(rows);
  nlohmann::json j = ctx.stamp();
  j["grid"] = ctx.config.at("ablate").at("grid");
  for (const auto& r : rows) j["rows"].push_back({{"name", r.name}, {"report", to_json(r.result.final)}});
  cli_detail::write_json(ctx.out_dir() / "ablation.json", j);
  cli_detail::write_text(ctx.out_dir() / "ablation.txt", table);
  *ctx.out << table;
  return 0;
}

inline int cmd_track(const CliContext& ctx) {
  const std::string mode_s = cli_detail::mode_name(ctx);
  AssociationMode mode;
  try {
    mode = parse_association_mode(mode_s);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const AssociationConfig acfg = association_config(ctx.config);
  const bool use_model = ctx.config.at("association").at("embeddings") == "model" && (mode.tr || mode.fr);
  if (use_model && !fs::exists(ctx.checkpoint()))
    throw UsageError("model embeddings need a checkpoint; none at " + ctx.checkpoint().string());
  const auto dirs = cli_detail::sequence_dirs(ctx.data_root(), false);
  if (dirs.empty()) throw UsageError("no sequences under " + ctx.data_root().string());
  const fs::path out = ctx.out_dir() / "track" / mode_s;

  auto run_one = [&](const fs::path& dir) {
    SequenceData seq = load_sequence_dir(dir, use_model);
    std::unique_ptr<EpipModel> model;
    std::unique_ptr<EmbeddingProvider> provider;
    if (mode.tr || mode.fr) {
      if (use_model) {
        model = load_model(ctx.checkpoint());
        provider = std::make_unique<ModelEmbeddings>(*model);
      } else {
        if (seq.gt.empty()) throw UsageError("oracle embeddings need gt for " + seq.name);
        provider = std::make_unique<OracleEmbeddings>(OracleEmbeddings::from_ground_truth(seq.frames, seq.gt));
      }
    }
    TrackingOutput r = track_sequence(seq.frames, mode, provider.get(), acfg);
    write_mot_file(out / (seq.name + ".txt"), r.results);
    cli_detail::write_text(out / (seq.name + ".events.jsonl"), r.events_jsonl());
    std::set<int> ids;
    for (const auto& o : r.results) ids.insert(o.id);
    return nlohmann::json{{"name", seq.name}, {"tracks", ids.size()}, {"boxes", r.results.size()}};
  };

  fs::create_directories(out);
  std::vector<nlohmann::json> rows(dirs.size());
  const std::size_t jobs = static_cast<std::size_t>(std::max(1, ctx.jobs));
  for (std::size_t start = 0; start < dirs.size(); start += jobs) {
    std::vector<std::future<nlohmann::json>> pending;
    for (std::size_t i = start; i < std::min(dirs.size(), start + jobs); ++i)
      pending.push_back(std::async(jobs > 1 ? std::launch::async : std::launch::deferred, run_one, dirs[i]));
    for (std::size_t k = 0; k < pending.size(); ++k) rows[start + k] = pending[k].get();
  }
  nlohmann::json summary = ctx.stamp();
  summary["mode"] = mode_s;
  summary["embeddings"] = use_model ? "model" : ((mode.tr || mode.fr) ? "oracle" : "none");
  summary["sequences"] = rows;
  cli_detail::write_json(out / "summary.json", summary);
  for (const auto& r : rows)
    *ctx.out << r["name"].get<std::string>() << ": " << r["tracks"] << " tracks -> " << (out / r["name"].get<std::string>()).string() << ".txt\n";
  return 0;
}

inline int cmd_eval(const CliContext& ctx) {
  const fs::path results = ctx.results.empty() ? ctx.out_dir() / "track" / cli_detail::mode_name(ctx) : fs::path(ctx.results);
  const double iou_thr = ctx.config.at("eval").at("iou_thr");
  nlohmann::json report = ctx.stamp();
  std::vector<nlohmann::json> per_seq_mot;
  for (const auto& dir : cli_detail::sequence_dirs(ctx.data_root(), true)) {
    const std::string name = dir.filename().string();
    const fs::path file = results / (name + ".txt");
    if (!fs::exists(file)) continue;
    const auto gt = parse_mot_file(dir / "gt" / "gt.txt", MotKind::gt).flatten();
    const auto res = parse_mot_file(file, MotKind::gt).flatten();  // results carry track ids
    const nlohmann::json m = to_json(mot_metrics(res, gt, iou_thr));
    report["per_sequence"].push_back({{"name", name}, {"mot", m}});
    per_seq_mot.push_back(m);
  }
  const bool have_model = fs::exists(ctx.checkpoint());
  if (per_seq_mot.empty() && !have_model)
    throw UsageError("nothing to evaluate: no result files in " + results.string() + " and no checkpoint");
  if (!per_seq_mot.empty()) report["mot"] = aggregate_equal_weight(per_seq_mot);
  std::string text;
  if (have_model) {
    const auto model = load_model(ctx.checkpoint());
    Dataset ds = cli_detail::load_dataset(ctx);
    SimilarityReport sim = evaluate(*model, ds.heldout, train_config(ctx.config));
    const nlohmann::json sj = to_json(sim);
    report["per_threshold"] = sj.at("per_threshold");
    report["consistency"] = sj.at("consistency");
    report["mean_positive_cosine"] = sj.at("mean_positive_cosine");
    text += format_table({{"checkpoint", sim}});
  }
  if (report.contains("mot")) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(4);
    os << "\nsequence                     | IDF1    MOTA    frag  idsw\n";
    for (const auto& s : report["per_sequence"]) {
      std::string n = s["name"].get<std::string>();
      n.resize(28, ' ');
      os << n << " | " << s["mot"]["idf1"].get<double>() << "  " << s["mot"]["mota"].get<double>() << "  "
         << s["mot"]["fragments"] << "  " << s["mot"]["id_switches"] << "\n";
    }
    std::string n = "overall (equal weight)";
    n.resize(28, ' ');
    os << n << " | " << report["mot"]["idf1"].get<double>() << "  " << report["mot"]["mota"].get<double>() << "\n";
    text += os.str();
  }
  cli_detail::write_json(ctx.out_dir() / "eval.json", report);
  cli_detail::write_text(ctx.out_dir() / "eval.txt", text);
  *ctx.out << text;
  return 0;
}

// ---------------------------------------------------------------------------

inline int run_cli(int argc, const char* const* argv, char** envp = nullptr, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"epiptrack: prompt-guided multi-object tracking at toy scale"};
  app.require_subcommand(1, 1);
  app.fallthrough();
  std::string config_path;
  std::vector<std::string> sets;
  CliContext ctx;
  ctx.out = &out;
  ctx.err = &err;
  app.add_option("-c,--config", config_path, "JSON config file");
  app.add_option("--set", sets, "override a config key: --set loss.tau=0.05")->allow_extra_args(false);

  auto* gen = app.add_subcommand("gen-synth", "write synthetic sequences to paths.data_root");
  gen->add_flag("--force", ctx.force, "overwrite existing sequence directories");
  auto* tr = app.add_subcommand("train", "train and write paths.checkpoint");
  tr->add_flag("--resume", ctx.resume, "continue from paths.checkpoint");
  tr->add_option("--stop-after", ctx.stop_after, "stop after this many epochs in total");
  app.add_subcommand("ablate", "one training run per grid cell, comparison table");
  auto* tk = app.add_subcommand("track", "track every sequence under paths.data_root");
  tk->add_option("--mode", ctx.mode, "baseline|tr|fr|trfr (default association.mode)");
  tk->add_option("--jobs", ctx.jobs, "sequences tracked in parallel")->check(CLI::PositiveNumber);
  auto* ev = app.add_subcommand("eval", "score results against gt and the checkpoint on held-out crops");
  ev->add_option("--results", ctx.results, "directory of <sequence>.txt result files");
  ev->add_option("--mode", ctx.mode, "selects out_dir/track/<mode> when --results is absent");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return 0;
    }
    err << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    ctx.config = config_path.empty() ? default_config() : load_config_file(config_path);
    apply_env_overrides(ctx.config, envp);
    apply_overrides(ctx.config, sets);
    validate_config(ctx.config);
    ctx.hash = config_hash(ctx.config);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  }

  try {
    const std::string sub = app.get_subcommands().front()->get_name();
    if (sub == "gen-synth") return cmd_gen_synth(ctx);
    if (sub == "train") return cmd_train(ctx);
    if (sub == "ablate") return cmd_ablate(ctx);
    if (sub == "track") return cmd_track(ctx);
    return cmd_eval(ctx);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "failed: " << e.what() << "\n";
    return 1;
  }
}

inline int run_cli(const std::vector<std::string>& args, char** envp = nullptr, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  std::vector<const char*> argv{"epiptrack"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data(), envp, out, err);
}

}  // namespace epiptrack
