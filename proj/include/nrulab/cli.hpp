#pragma once

// nrulab command line: train, eval, sweep, gradcheck, probe.
//
// Exit codes: 0 ok, 1 configuration or input error, 2 divergence,
// 3 failed gradient check.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "nrulab/checkpoint.hpp"
#include "nrulab/config.hpp"
#include "nrulab/diagnostics.hpp"
#include "nrulab/metrics.hpp"
#include "nrulab/training.hpp"

#ifndef NRULAB_BUILD_ID
#define NRULAB_BUILD_ID "unknown"
#endif

namespace nrulab {

enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitDiverged = 2, kExitGradcheck = 3 };

inline constexpr int kManifestVersion = 1;

/// Resolved config plus where the run writes its artifacts.
struct RunManifest {
  TrainConfig config;
  std::filesystem::path metrics;
  std::filesystem::path checkpoint_dir;
  std::string build = NRULAB_BUILD_ID;
};

inline json to_json(const RunManifest& m) {
  return json{{"manifest_version", kManifestVersion},
              {"config", to_json(m.config)},
              {"metrics", m.metrics.string()},
              {"checkpoint_dir", m.checkpoint_dir.string()},
              {"build", m.build}};
}

/// Reads a config file; a run manifest is accepted in place of a config and
/// contributes its resolved config.
inline TrainConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  json j = read_json_file(path);
  if (j.is_object() && j.contains("manifest_version")) {
    if (!j.contains("config")) throw ConfigError("manifest '" + path.string() + "' has no config");
    j = j.at("config");
  }
  for (const auto& o : overrides) apply_override(j, o);
  return config_from_json(j);
}

inline SweepGrid grid_from_json(const json& j, const TrainConfig& base) {
  static const std::vector<std::string> keys = {"num_heads", "memory_size", "hidden_size"};
  detail::check_keys(j, keys, "grid");
  SweepGrid grid;
  grid.base = base;
  detail::read_field(j, "num_heads", grid.num_heads, "grid");
  detail::read_field(j, "memory_size", grid.memory_size, "grid");
  detail::read_field(j, "hidden_size", grid.hidden_size, "grid");
  return grid;
}

namespace detail {

inline std::filesystem::path data_dir_or_default(const std::string& s) {
  return s.empty() ? default_data_dir() : std::filesystem::path(s);
}

/// `--task` value: a JSON file, inline JSON, or a bare task kind.
inline json task_argument(const std::string& arg) {
  if (std::filesystem::is_regular_file(arg)) return read_json_file(arg);
  json j = json::parse(arg, nullptr, false);
  if (!j.is_discarded() && j.is_object()) return j;
  return json{{"kind", arg}};
}

struct TrainArgs {
  std::string config, out = "runs", data_dir, resume;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  int checkpoint_every = 0;
};

inline int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  TrainConfig cfg = load_run_config(a.config, a.overrides);
  if (a.seed) cfg.seed = *a.seed;
  const auto data_dir = data_dir_or_default(a.data_dir);
  std::optional<Checkpoint> resume;
  if (!a.resume.empty()) resume = load_checkpoint(a.resume);

  TaskSource source(cfg.task, cfg.batch_size, data_dir);
  RunManifest manifest;
  manifest.config = resolve_config(cfg, source).config;
  const std::filesystem::path run_dir = std::filesystem::path(a.out) / cfg.run_id;
  manifest.metrics = run_dir / "metrics.jsonl";
  manifest.checkpoint_dir = run_dir / "checkpoints";
  std::filesystem::create_directories(manifest.checkpoint_dir);
  {
    std::ofstream mf(run_dir / "manifest.json");
    if (!mf) throw ConfigError("cannot write manifest in '" + run_dir.string() + "'");
    mf << to_json(manifest).dump(2) << '\n';
  }

  MetricsWriter writer(manifest.metrics, resume.has_value());
  SmoothedLoss smooth;
  double last_smoothed = 0.0;
  TrainOptions options;
  options.data_dir = data_dir;
  options.resume = resume ? &*resume : nullptr;
  options.checkpoint_every = a.checkpoint_every;
  options.on_checkpoint = [&](const Checkpoint& c) {
    save_checkpoint(manifest.checkpoint_dir / ("step-" + std::to_string(c.step) + ".ckpt"), c);
  };
  try {
    Checkpoint final = train_run(cfg, [&](const MetricsRecord& r) {
      writer.write(r);
      if (r.split == "train") last_smoothed = smooth.push(r.loss_nats);
      return true;
    }, options);
    save_checkpoint(manifest.checkpoint_dir / "final.ckpt", final);
    out << cfg.run_id << ": " << final.step << " steps, smoothed train loss " << last_smoothed << '\n';
    return kExitOk;
  } catch (const TrainingDiverged& e) {
    save_checkpoint(manifest.checkpoint_dir / "last_good.ckpt", e.last_good());
    err << "error: " << e.what() << "; last good checkpoint at step " << e.last_good().step << " saved to "
        << (manifest.checkpoint_dir / "last_good.ckpt").string() << '\n';
    return kExitDiverged;
  }
}

struct EvalArgs {
  std::string checkpoint, task, data_dir;
  std::vector<std::string> overrides;
  int batches = -1;
  std::optional<std::uint64_t> seed;
};

inline int cmd_eval(const EvalArgs& a, std::ostream& out) {
  Checkpoint ckpt = load_checkpoint(a.checkpoint);
  json j = to_json(ckpt.config);
  if (!a.task.empty()) {
    json task = task_argument(a.task);
    detail::check_keys(task, task_keys(), "task");
    for (const auto& item : task.items()) j["task"][item.key()] = item.value();
  }
  for (const auto& o : a.overrides) apply_override(j, o);
  const TrainConfig cfg = config_from_json(j);
  TaskSource source(cfg.task, cfg.batch_size, data_dir_or_default(a.data_dir));
  if (source.input_size() != static_cast<std::size_t>(ckpt.config.cell.input_size) ||
      source.num_classes() != ckpt.num_classes) {
    throw DimensionError("task has " + std::to_string(source.input_size()) + " inputs and " +
                         std::to_string(source.num_classes()) + " classes; checkpoint expects " +
                         std::to_string(ckpt.config.cell.input_size) + " and " + std::to_string(ckpt.num_classes));
  }
  std::size_t count = 0;
  if (a.batches >= 0) {
    count = static_cast<std::size_t>(a.batches);
  } else if (cfg.task.kind != TaskKind::PsMnist && cfg.task.kind != TaskKind::CharLm) {
    count = static_cast<std::size_t>(cfg.eval_batches);
  }
  const auto dataset = source.eval_set(count, a.seed ? *a.seed : eval_seed(cfg.seed));
  MetricsRecord rec = evaluate(ckpt, dataset, source.stateful());
  out << to_json(rec).dump() << '\n';
  return kExitOk;
}

struct SweepArgs {
  std::string config, grid, out = "runs", data_dir;
  std::vector<std::string> overrides;
  int parallel = 1;
};

inline int cmd_sweep(const SweepArgs& a, std::ostream& out, std::ostream& err) {
  const TrainConfig base = load_run_config(a.config, a.overrides);
  const SweepGrid grid = grid_from_json(read_json_file(a.grid), base);
  TrainOptions options;
  options.data_dir = data_dir_or_default(a.data_dir);
  const SweepResult result = sweep(grid, a.parallel, options);
  for (const auto& s : result.skipped) {
    err << "skipped k=" << s.point.num_heads << " m=" << s.point.memory_size << " h=" << s.point.hidden_size << ": "
        << s.reason << '\n';
  }
  const std::filesystem::path dir(a.out);
  for (const auto& row : result.rows) {
    std::filesystem::create_directories(dir / row.run_id);
    MetricsWriter w(dir / row.run_id / "metrics.jsonl");
    for (const auto& r : row.records) w.write(r);
  }
  std::ofstream table(dir / (base.run_id + "_sweep.csv"));
  write_sweep_table(table, result);
  write_sweep_table(out, result);
  return kExitOk;
}

struct GradcheckArgs {
  std::string cell;
  int steps = 5;
  double tol = 1e-5;
  std::uint64_t seed = 0;
  bool no_layer_norm = false;
};

inline int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
  GradcheckSetup setup;
  setup.steps = a.steps;
  setup.tol = a.tol;
  setup.seed = a.seed;
  setup.layer_norm = !a.no_layer_norm;
  if (setup.steps < 1) throw ConfigError("gradcheck: --steps must be >= 1");
  const CellKind kind = parse_cell_kind(a.cell);
  const GradReport r = cell_gradient_check(kind, setup);
  out.precision(3);
  for (const auto& [name, e] : r.max_rel_error) out << "  " << name << " " << std::scientific << e << '\n';
  out << to_string(kind) << " max rel err " << std::scientific << r.max_error << " (" << r.worst_param << "), tol "
      << r.tolerance << ": " << (r.passed ? "PASS" : "FAIL") << '\n';
  return r.passed ? kExitOk : kExitGradcheck;
}

struct ProbeArgs {
  std::string checkpoint, mode, out, data_dir;
  std::optional<std::uint64_t> seed;
};

inline int cmd_probe(const ProbeArgs& a, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  const TrainConfig& cfg = ckpt.config;
  const std::uint64_t seed = a.seed ? *a.seed : eval_seed(cfg.seed);
  const bool trace = a.mode == "memtrace";
  TaskSource source(cfg.task, trace ? 1 : cfg.batch_size, data_dir_or_default(a.data_dir));
  const auto batches = source.eval_set(1, seed);
  if (batches.empty()) throw ConfigError("probe: the task produced no batch");
  std::ofstream file;
  if (!a.out.empty()) {
    file.open(a.out);
    if (!file) throw ConfigError("cannot write '" + a.out + "'");
  }
  std::ostream& dest = a.out.empty() ? out : file;
  if (trace) write_trace(dest, memory_trace(ckpt, batches.front()));
  else write_profile(dest, grad_norm_probe(ckpt, batches.front()));
  return kExitOk;
}

}  // namespace detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"nrulab: non-saturating recurrent unit experiments"};
  app.require_subcommand(1);

  detail::TrainArgs train;
  auto* t = app.add_subcommand("train", "train a model from a config file");
  t->add_option("--config", train.config, "config JSON (or a run manifest)")->required();
  t->add_option("--seed", train.seed, "overrides the config seed");
  t->add_option("--override", train.overrides, "dotted key=value, repeatable");
  t->add_option("--out", train.out, "output root; the run writes to OUT/<run_id>")->capture_default_str();
  t->add_option("--data-dir", train.data_dir, "dataset root (default: $NRULAB_DATA_DIR or ./data)");
  t->add_option("--resume", train.resume, "continue from a checkpoint");
  t->add_option("--checkpoint-every", train.checkpoint_every, "also save every N updates");

  detail::EvalArgs eval;
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint");
  e->add_option("--checkpoint", eval.checkpoint)->required();
  e->add_option("--task", eval.task, "task JSON file, inline JSON or task kind (default: the training task)");
  e->add_option("--override", eval.overrides, "dotted key=value, repeatable");
  e->add_option("--batches", eval.batches, "number of batches (default: eval_batches, or the full held-out set)");
  e->add_option("--seed", eval.seed, "seed for generated tasks");
  e->add_option("--data-dir", eval.data_dir);

  detail::SweepArgs sw;
  auto* s = app.add_subcommand("sweep", "run a grid over heads, memory and hidden sizes");
  s->add_option("--config", sw.config)->required();
  s->add_option("--grid", sw.grid, "JSON with num_heads, memory_size, hidden_size lists")->required();
  s->add_option("--parallel", sw.parallel)->capture_default_str();
  s->add_option("--override", sw.overrides);
  s->add_option("--out", sw.out)->capture_default_str();
  s->add_option("--data-dir", sw.data_dir);

  detail::GradcheckArgs gc;
  auto* g = app.add_subcommand("gradcheck", "finite-difference check of a cell");
  g->add_option("--cell", gc.cell, "NRU, LSTM, LSTM_CHRONO, GRU, JANET, RNN_ORTH, RNN_ID")->required();
  g->add_option("--steps", gc.steps)->capture_default_str();
  g->add_option("--tol", gc.tol)->capture_default_str();
  g->add_option("--seed", gc.seed)->capture_default_str();
  g->add_flag("--no-layer-norm", gc.no_layer_norm, "vanilla RNNs without layer norm");

  detail::ProbeArgs probe;
  auto* p = app.add_subcommand("probe", "input-gradient profile or memory trace of a checkpoint");
  p->add_option("--checkpoint", probe.checkpoint)->required();
  p->add_option("--mode", probe.mode)->required()->check(CLI::IsMember({"gradnorm", "memtrace"}));
  p->add_option("--out", probe.out, "output file (default: stdout)");
  p->add_option("--seed", probe.seed);
  p->add_option("--data-dir", probe.data_dir);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*t) return detail::cmd_train(train, out, err);
    if (*e) return detail::cmd_eval(eval, out);
    if (*s) return detail::cmd_sweep(sw, out, err);
    if (*g) return detail::cmd_gradcheck(gc, out);
    if (*p) return detail::cmd_probe(probe, out);
  } catch (const DivergenceError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitDiverged;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitConfig;
  }
  return kExitConfig;
}

}  // namespace nrulab
