#pragma once

// Run configuration as JSON. Field names are exactly those of TrainConfig,
// CellSpec and TaskSpec; unknown keys are rejected with a suggestion.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "nrulab/cells.hpp"
#include "nrulab/error.hpp"

namespace nrulab {

using json = nlohmann::ordered_json;

enum class TaskKind { Copy, VariableCopy, Denoise, PsMnist, CharLm };

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::Copy: return "copy";
    case TaskKind::VariableCopy: return "varcopy";
    case TaskKind::Denoise: return "denoise";
    case TaskKind::PsMnist: return "psmnist";
    case TaskKind::CharLm: return "charlm";
  }
  return "?";
}

inline TaskKind parse_task_kind(const std::string& s) {
  for (TaskKind k : {TaskKind::Copy, TaskKind::VariableCopy, TaskKind::Denoise, TaskKind::PsMnist, TaskKind::CharLm}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown task kind '" + s + "' (expected copy, varcopy, denoise, psmnist or charlm)");
}

struct TaskSpec {
  TaskKind kind = TaskKind::Copy;
  int T = 100;  // lag (copy), maximum lag (varcopy) or noise length (denoise)
  int n = 8;
  int recall_k = 10;
  // psMNIST files, relative to the data directory unless absolute.
  std::string images = "mnist/train-images-idx3-ubyte";
  std::string labels = "mnist/train-labels-idx1-ubyte";
  std::string test_images = "mnist/t10k-images-idx3-ubyte";
  std::string test_labels = "mnist/t10k-labels-idx1-ubyte";
  std::uint64_t perm_seed = 0;
  // Character LM corpora.
  std::string train_corpus = "ptb/ptb.char.train.txt";
  std::string valid_corpus = "ptb/ptb.char.valid.txt";
  int window = 150;

  friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

struct TrainConfig {
  std::string run_id = "run";
  CellSpec cell;
  TaskSpec task;
  std::uint64_t param_budget = 0;  // > 0: hidden size chosen by match_budget
  double learning_rate = 0.001;
  double clip_norm = 1.0;  // <= 0 disables clipping
  int batch_size = 10;
  std::int64_t max_steps = 1000;
  int eval_every = 0;  // 0: no periodic evaluation
  int eval_batches = 10;
  std::uint64_t seed = 0;
  bool random_label_mode = false;
  int memory_reset_period = 0;  // 0: memory reset with every example
  bool log_wall_time = false;   // wall_ms is 0 unless enabled, keeping metrics reproducible

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (max_steps < 0) throw ConfigError("max_steps must be >= 0");
    if (eval_every < 0) throw ConfigError("eval_every must be >= 0");
    if (eval_batches < 0) throw ConfigError("eval_batches must be >= 0");
    if (memory_reset_period < 0) throw ConfigError("memory_reset_period must be >= 0");
    if (memory_reset_period > 0 && cell.kind != CellKind::NRU) {
      throw ConfigError("memory_reset_period applies to NRU memory only");
    }
    if (task.n < 1 || task.recall_k < 0 || task.T < 1 || task.window < 1) {
      throw ConfigError("task sizes must be positive");
    }
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// ---------------------------------------------------------------------------
// Key validation
// ---------------------------------------------------------------------------

inline std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline std::string nearest_name(const std::string& key, const std::vector<std::string>& valid) {
  std::string best;
  std::size_t best_d = static_cast<std::size_t>(-1);
  for (const auto& v : valid) {
    const std::size_t d = edit_distance(key, v);
    if (d < best_d) {
      best_d = d;
      best = v;
    }
  }
  return best;
}

namespace detail {

inline const std::vector<std::string>& cell_keys() {
  static const std::vector<std::string> keys = {"kind",      "input_size",     "hidden_size", "memory_size",
                                                "num_heads", "heads_use_relu", "layer_norm",  "t_max"};
  return keys;
}

inline const std::vector<std::string>& task_keys() {
  static const std::vector<std::string> keys = {"kind",        "T",           "n",         "recall_k",
                                                "images",      "labels",      "test_images", "test_labels",
                                                "perm_seed",   "train_corpus", "valid_corpus", "window"};
  return keys;
}

inline const std::vector<std::string>& train_keys() {
  static const std::vector<std::string> keys = {
      "run_id",     "cell",       "task",           "param_budget",      "learning_rate",       "clip_norm",
      "batch_size", "max_steps",  "eval_every",     "eval_batches",      "seed",                "random_label_mode",
      "memory_reset_period",      "log_wall_time"};
  return keys;
}

inline void check_keys(const json& j, const std::vector<std::string>& valid, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& item : j.items()) {
    if (std::find(valid.begin(), valid.end(), item.key()) == valid.end()) {
      const std::string path = where.empty() ? item.key() : where + "." + item.key();
      throw ConfigError("unknown config key '" + path + "'; did you mean '" + nearest_name(item.key(), valid) + "'?");
    }
  }
}

template <class T>
void read_field(const json& j, const char* key, T& out, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->template get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config key '" + (where.empty() ? std::string(key) : where + "." + key) +
                      "' has the wrong type: " + e.what());
  }
}

}  // namespace detail

inline json to_json(const CellSpec& c) {
  return json{{"kind", to_string(c.kind)},         {"input_size", c.input_size}, {"hidden_size", c.hidden_size},
              {"memory_size", c.memory_size},      {"num_heads", c.num_heads},   {"heads_use_relu", c.heads_use_relu},
              {"layer_norm", c.layer_norm},        {"t_max", c.t_max}};
}

inline CellSpec cell_from_json(const json& j) {
  detail::check_keys(j, detail::cell_keys(), "cell");
  CellSpec c;
  std::string kind = to_string(c.kind);
  detail::read_field(j, "kind", kind, "cell");
  c.kind = parse_cell_kind(kind);
  detail::read_field(j, "input_size", c.input_size, "cell");
  detail::read_field(j, "hidden_size", c.hidden_size, "cell");
  detail::read_field(j, "memory_size", c.memory_size, "cell");
  detail::read_field(j, "num_heads", c.num_heads, "cell");
  detail::read_field(j, "heads_use_relu", c.heads_use_relu, "cell");
  detail::read_field(j, "layer_norm", c.layer_norm, "cell");
  detail::read_field(j, "t_max", c.t_max, "cell");
  return c;
}

inline json to_json(const TaskSpec& t) {
  return json{{"kind", to_string(t.kind)},
              {"T", t.T},
              {"n", t.n},
              {"recall_k", t.recall_k},
              {"images", t.images},
              {"labels", t.labels},
              {"test_images", t.test_images},
              {"test_labels", t.test_labels},
              {"perm_seed", t.perm_seed},
              {"train_corpus", t.train_corpus},
              {"valid_corpus", t.valid_corpus},
              {"window", t.window}};
}

inline TaskSpec task_from_json(const json& j) {
  detail::check_keys(j, detail::task_keys(), "task");
  TaskSpec t;
  std::string kind = to_string(t.kind);
  detail::read_field(j, "kind", kind, "task");
  t.kind = parse_task_kind(kind);
  detail::read_field(j, "T", t.T, "task");
  detail::read_field(j, "n", t.n, "task");
  detail::read_field(j, "recall_k", t.recall_k, "task");
  detail::read_field(j, "images", t.images, "task");
  detail::read_field(j, "labels", t.labels, "task");
  detail::read_field(j, "test_images", t.test_images, "task");
  detail::read_field(j, "test_labels", t.test_labels, "task");
  detail::read_field(j, "perm_seed", t.perm_seed, "task");
  detail::read_field(j, "train_corpus", t.train_corpus, "task");
  detail::read_field(j, "valid_corpus", t.valid_corpus, "task");
  detail::read_field(j, "window", t.window, "task");
  return t;
}

inline json to_json(const TrainConfig& c) {
  return json{{"run_id", c.run_id},
              {"cell", to_json(c.cell)},
              {"task", to_json(c.task)},
              {"param_budget", c.param_budget},
              {"learning_rate", c.learning_rate},
              {"clip_norm", c.clip_norm},
              {"batch_size", c.batch_size},
              {"max_steps", c.max_steps},
              {"eval_every", c.eval_every},
              {"eval_batches", c.eval_batches},
              {"seed", c.seed},
              {"random_label_mode", c.random_label_mode},
              {"memory_reset_period", c.memory_reset_period},
              {"log_wall_time", c.log_wall_time}};
}

inline TrainConfig config_from_json(const json& j) {
  detail::check_keys(j, detail::train_keys(), "");
  TrainConfig c;
  detail::read_field(j, "run_id", c.run_id, "");
  if (j.contains("cell")) c.cell = cell_from_json(j.at("cell"));
  if (j.contains("task")) c.task = task_from_json(j.at("task"));
  detail::read_field(j, "param_budget", c.param_budget, "");
  detail::read_field(j, "learning_rate", c.learning_rate, "");
  detail::read_field(j, "clip_norm", c.clip_norm, "");
  detail::read_field(j, "batch_size", c.batch_size, "");
  detail::read_field(j, "max_steps", c.max_steps, "");
  detail::read_field(j, "eval_every", c.eval_every, "");
  detail::read_field(j, "eval_batches", c.eval_batches, "");
  detail::read_field(j, "seed", c.seed, "");
  detail::read_field(j, "random_label_mode", c.random_label_mode, "");
  detail::read_field(j, "memory_reset_period", c.memory_reset_period, "");
  detail::read_field(j, "log_wall_time", c.log_wall_time, "");
  c.validate();
  return c;
}

/// Applies `path=value` with a dotted path (e.g. `cell.hidden_size=64`).
/// The value is parsed as JSON when possible, otherwise taken as a string.
inline void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json* node = &j;
  std::size_t start = 0;
  const std::vector<std::string>* valid = &detail::train_keys();
  std::string where;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (std::find(valid->begin(), valid->end(), key) == valid->end()) {
      throw ConfigError("unknown config key '" + (where.empty() ? key : where + "." + key) + "'; did you mean '" +
                        nearest_name(key, *valid) + "'?");
    }
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    if (key != "cell" && key != "task") throw ConfigError("config key '" + key + "' has no sub-keys");
    if (!node->contains(key)) (*node)[key] = json::object();
    node = &(*node)[key];
    valid = key == "cell" ? &detail::cell_keys() : &detail::task_keys();
    where = key;
    start = dot + 1;
  }
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config file '" + path.string() + "' is not valid JSON");
  return j;
}

inline TrainConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
  json j = read_json_file(path);
  for (const auto& o : overrides) apply_override(j, o);
  return config_from_json(j);
}

}  // namespace nrulab
