#pragma once

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <memory>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "nrulab/autodiff.hpp"
#include "nrulab/cells.hpp"
#include "nrulab/checkpoint.hpp"
#include "nrulab/config.hpp"
#include "nrulab/metrics.hpp"
#include "nrulab/optim.hpp"
#include "nrulab/tasks.hpp"

namespace nrulab {

inline constexpr const char* kCellPrefix = "cell/";

/// Cell parameters under "cell/" plus the readout "head/W" [h x C], "head/b" [C].
inline ParamMap init_model_params(const CellSpec& spec, std::size_t num_classes, Rng& rng) {
  ParamMap params;
  for (auto& [name, t] : init_cell_params(spec, rng)) params.emplace(kCellPrefix + name, std::move(t));
  params.emplace("head/W", init_xavier(static_cast<std::size_t>(spec.hidden_size), num_classes, rng));
  params.emplace("head/b", Tensor::zeros({num_classes}));
  return params;
}

inline std::map<std::string, ad::Var> bind_params(ad::Tape& tape, const ParamMap& params) {
  std::map<std::string, ad::Var> vars;
  for (const auto& [name, t] : params) vars.emplace(name, tape.leaf(t, name));
  return vars;
}

struct ForwardPass {
  ad::Var loss;                    // masked mean cross-entropy
  ad::Var logits;                  // [T*B x C], row t*B + b
  std::vector<ad::Var> inputs;     // x_t, one per step
  std::vector<CellState> states;   // state after each step
};

/// Unrolls the cell over the batch from `initial` (zeros when null) and
/// applies the readout to every hidden state. With `differentiable_inputs`
/// the x_t are tape leaves so their gradients can be read back.
inline ForwardPass unroll(ad::Tape& tape, const std::map<std::string, ad::Var>& vars, const CellSpec& spec,
                          const Batch& batch, const StateValues* initial = nullptr,
                          bool differentiable_inputs = false) {
  if (batch.features() != static_cast<std::size_t>(spec.input_size)) {
    throw DimensionError("batch has " + std::to_string(batch.features()) + " features, cell expects " +
                         std::to_string(spec.input_size));
  }
  BoundCell cell(spec, vars, kCellPrefix);
  CellState state = initial ? cell.detached_state(*initial) : cell.zero_state(batch.batch_size());
  ForwardPass out;
  std::vector<ad::Var> hidden;
  hidden.reserve(batch.steps());
  for (std::size_t t = 0; t < batch.steps(); ++t) {
    ad::Var x = differentiable_inputs ? tape.leaf(batch.input_at(t)) : tape.constant(batch.input_at(t));
    state = cell.step(state, x);
    out.inputs.push_back(x);
    out.states.push_back(state);
    hidden.push_back(state.h);
  }
  out.logits = ad::affine(ad::stack_rows(hidden), vars.at("head/W"), vars.at("head/b"));
  out.loss = ad::masked_softmax_cross_entropy(out.logits, batch.targets, batch.loss_mask);
  return out;
}

struct SequenceResult {
  double loss = 0.0;           // masked mean cross-entropy (nats)
  std::size_t correct = 0;     // masked argmax hits
  std::size_t counted = 0;     // masked positions
  Tensor logits;               // [T*B x C]
  StateValues final_state;
  ParamMap grads;              // filled when requested

  double accuracy() const { return counted ? static_cast<double>(correct) / static_cast<double>(counted) : 0.0; }
};

inline void count_hits(const Tensor& logits, const Batch& batch, SequenceResult& r) {
  const std::size_t C = logits.cols();
  for (std::size_t row = 0; row < batch.targets.size(); ++row) {
    if (!batch.loss_mask[row]) continue;
    const double* l = logits.data() + row * C;
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c) {
      if (l[c] > l[best]) best = c;
    }
    ++r.counted;
    if (static_cast<int>(best) == batch.targets[row]) ++r.correct;
  }
}

/// Forward pass (and optionally backward) for one batch on a fresh tape.
inline SequenceResult run_sequence(const CellSpec& spec, const ParamMap& params, const Batch& batch,
                                   const StateValues* initial = nullptr, bool with_grads = false) {
  ad::Tape tape;
  const auto vars = bind_params(tape, params);
  ForwardPass pass = unroll(tape, vars, spec, batch, initial);
  SequenceResult r;
  r.loss = pass.loss.value().item();
  r.logits = pass.logits.value();
  r.final_state = state_values(pass.states.back());
  count_hits(r.logits, batch, r);
  if (with_grads) r.grads = ad::backward(tape, pass.loss);
  return r;
}

// ---------------------------------------------------------------------------
// Task sources
// ---------------------------------------------------------------------------

inline std::filesystem::path default_data_dir() {
  if (const char* env = std::getenv("NRULAB_DATA_DIR"); env && *env) return env;
  return "data";
}

inline std::filesystem::path resolve_data_path(const std::string& p, const std::filesystem::path& data_dir) {
  std::filesystem::path path(p);
  return path.is_absolute() ? path : data_dir / path;
}

/// Supplies training and evaluation batches for a TaskSpec.
class TaskSource {
 public:
  TaskSource(const TaskSpec& spec, int batch_size, const std::filesystem::path& data_dir)
      : spec_(spec), batch_size_(batch_size) {
    switch (spec_.kind) {
      case TaskKind::Copy:
      case TaskKind::Denoise:
        input_size_ = classes_ = static_cast<std::size_t>(SymbolLayout{spec_.n, false}.size());
        break;
      case TaskKind::VariableCopy:
        input_size_ = classes_ = static_cast<std::size_t>(SymbolLayout{spec_.n, true}.size());
        break;
      case TaskKind::PsMnist: {
        train_mnist_ = std::make_shared<PermutedMnist>(make_psmnist(
            load_mnist_idx(resolve_data_path(spec_.images, data_dir), resolve_data_path(spec_.labels, data_dir)),
            spec_.perm_seed));
        const auto ti = resolve_data_path(spec_.test_images, data_dir);
        const auto tl = resolve_data_path(spec_.test_labels, data_dir);
        if (std::filesystem::exists(ti) && std::filesystem::exists(tl)) {
          test_mnist_ = std::make_shared<PermutedMnist>(make_psmnist(load_mnist_idx(ti, tl), spec_.perm_seed));
        } else {
          test_mnist_ = train_mnist_;
        }
        input_size_ = 1;
        classes_ = 10;
        break;
      }
      case TaskKind::CharLm: {
        Corpus train = load_text_corpus(resolve_data_path(spec_.train_corpus, data_dir));
        vocab_ = train.vocab;
        train_stream_ = std::make_shared<TbpttStream>(train.ids, vocab_.size(), batch_size_, spec_.window);
        const auto vp = resolve_data_path(spec_.valid_corpus, data_dir);
        if (std::filesystem::exists(vp)) {
          valid_stream_ = std::make_shared<TbpttStream>(
              encode_text(detail::read_text(vp), vocab_, vp.string()), vocab_.size(), batch_size_, spec_.window);
        } else {
          valid_stream_ = train_stream_;
        }
        input_size_ = classes_ = vocab_.size();
        break;
      }
    }
  }

  std::size_t input_size() const { return input_size_; }
  /// Steps per training sequence (the longest, for variable-length copy).
  int sequence_length() const {
    switch (spec_.kind) {
      case TaskKind::Copy:
      case TaskKind::VariableCopy: return spec_.T + 2 * spec_.recall_k;
      case TaskKind::Denoise: return spec_.T + 1 + spec_.recall_k;
      case TaskKind::PsMnist: return static_cast<int>(train_mnist_->steps());
      case TaskKind::CharLm: return spec_.window;
    }
    return 0;
  }
  std::size_t num_classes() const { return classes_; }
  /// Whether recurrent state carries across consecutive training batches.
  bool stateful() const { return spec_.kind == TaskKind::CharLm; }
  /// True when the last train batch began a fresh pass over the corpus.
  bool pass_started() const { return pass_started_; }

  Batch next_train(Rng& rng) {
    pass_started_ = false;
    switch (spec_.kind) {
      case TaskKind::Copy: return gen_copy(spec_.T, spec_.n, spec_.recall_k, batch_size_, rng);
      case TaskKind::VariableCopy: return gen_copy_variable(spec_.T, spec_.n, spec_.recall_k, batch_size_, rng);
      case TaskKind::Denoise: return gen_denoise(spec_.T, spec_.n, spec_.recall_k, batch_size_, rng);
      case TaskKind::PsMnist: {
        std::uniform_int_distribution<std::size_t> pick(0, train_mnist_->size() - 1);
        std::vector<std::size_t> idx(static_cast<std::size_t>(batch_size_));
        for (auto& i : idx) i = pick(rng);
        return train_mnist_->batch(idx);
      }
      case TaskKind::CharLm: {
        if (cursor_ >= train_stream_->window_count()) {
          cursor_ = 0;
          ++epoch_;
        }
        pass_started_ = cursor_ == 0;
        return train_stream_->window(cursor_++);
      }
    }
    throw ContractError("unreachable task kind");
  }

  /// Fixed evaluation set: `count` batches (0 means the whole held-out set for
  /// psMNIST and the language model).
  std::vector<Batch> eval_set(std::size_t count, std::uint64_t seed) const {
    std::vector<Batch> out;
    Rng rng(seed);
    switch (spec_.kind) {
      case TaskKind::Copy:
      case TaskKind::VariableCopy:
      case TaskKind::Denoise: {
        TaskSource copy = *this;
        for (std::size_t i = 0; i < count; ++i) out.push_back(copy.next_train(rng));
        break;
      }
      case TaskKind::PsMnist: {
        const std::size_t B = static_cast<std::size_t>(batch_size_);
        const std::size_t total = test_mnist_->size() / B;
        const std::size_t n = count == 0 ? total : std::min(count, total);
        for (std::size_t i = 0; i < n; ++i) {
          std::vector<std::size_t> idx(B);
          for (std::size_t b = 0; b < B; ++b) idx[b] = i * B + b;
          out.push_back(test_mnist_->batch(idx));
        }
        break;
      }
      case TaskKind::CharLm: {
        const std::size_t total = valid_stream_->window_count();
        const std::size_t n = count == 0 ? total : std::min(count, total);
        for (std::size_t i = 0; i < n; ++i) out.push_back(valid_stream_->window(i));
        break;
      }
    }
    return out;
  }

  json cursor() const { return json{{"window", cursor_}, {"epoch", epoch_}}; }
  void restore_cursor(const json& j) {
    if (j.contains("window")) cursor_ = j.at("window").get<std::size_t>();
    if (j.contains("epoch")) epoch_ = j.at("epoch").get<std::size_t>();
  }

 private:
  TaskSpec spec_;
  int batch_size_;
  std::size_t input_size_ = 0, classes_ = 0;
  std::shared_ptr<PermutedMnist> train_mnist_, test_mnist_;
  Vocab vocab_;
  std::shared_ptr<TbpttStream> train_stream_, valid_stream_;
  std::size_t cursor_ = 0, epoch_ = 0;
  bool pass_started_ = false;
};

struct ResolvedConfig {
  TrainConfig config;
  std::size_t num_classes = 0;
};

/// Fixes input_size from the task and applies param_budget (then cleared).
inline ResolvedConfig resolve_config(TrainConfig config, const TaskSource& source) {
  config.validate();
  config.cell.input_size = static_cast<int>(source.input_size());
  const bool chrono = config.cell.kind == CellKind::LSTM_CHRONO || config.cell.kind == CellKind::JANET;
  if (chrono && config.cell.t_max < 3) config.cell.t_max = std::max(3, source.sequence_length());
  if (config.param_budget > 0) {
    config.cell = match_budget(config.cell.kind, config.cell.input_size, config.param_budget, config.cell);
    config.param_budget = 0;
  }
  config.cell.validate();
  return {config, source.num_classes()};
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Masked mean cross-entropy over all batches (weighted by masked count),
/// bits per character and accuracy. No parameter updates.
inline MetricsRecord evaluate(const CellSpec& spec, const ParamMap& params, const std::vector<Batch>& dataset,
                              bool carry_state = false) {
  double total_nats = 0.0;
  std::size_t correct = 0, counted = 0;
  std::optional<StateValues> carried;
  for (const Batch& batch : dataset) {
    SequenceResult r = run_sequence(spec, params, batch, carried ? &*carried : nullptr);
    total_nats += r.loss * static_cast<double>(r.counted);
    correct += r.correct;
    counted += r.counted;
    if (carry_state) carried = r.final_state;
  }
  MetricsRecord rec;
  rec.split = "eval";
  if (counted) {
    rec.loss_nats = total_nats / static_cast<double>(counted);
    rec.accuracy = static_cast<double>(correct) / static_cast<double>(counted);
  }
  rec.bpc = rec.loss_nats / std::numbers::ln2;
  return rec;
}

inline MetricsRecord evaluate(const Checkpoint& ckpt, const std::vector<Batch>& dataset, bool carry_state = false) {
  MetricsRecord rec = evaluate(ckpt.config.cell, ckpt.params, dataset, carry_state);
  rec.run_id = ckpt.config.run_id;
  rec.step = ckpt.step;
  return rec;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Divergence with the last checkpoint whose parameters were still finite.
class TrainingDiverged : public DivergenceError {
 public:
  TrainingDiverged(const std::string& what, Checkpoint last_good)
      : DivergenceError(what), last_good_(std::move(last_good)) {}
  const Checkpoint& last_good() const { return last_good_; }

 private:
  Checkpoint last_good_;
};

/// Receives each record; returning false stops training after that record.
using MetricsSink = std::function<bool(const MetricsRecord&)>;

struct TrainOptions {
  std::filesystem::path data_dir = default_data_dir();
  const Checkpoint* resume = nullptr;
  /// Called with the checkpoint after every `checkpoint_every` updates.
  std::function<void(const Checkpoint&)> on_checkpoint;
  int checkpoint_every = 0;
};

inline std::string rng_state(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline Rng rng_from_state(const std::string& s) {
  Rng rng;
  std::istringstream is(s);
  is >> rng;
  if (!is) throw FormatError("checkpoint: malformed rng state");
  return rng;
}

inline std::uint64_t data_seed(std::uint64_t seed) { return seed ^ 0x9E3779B97F4A7C15ULL; }
inline std::uint64_t eval_seed(std::uint64_t seed) { return seed ^ 0xD1B54A32D192ED03ULL; }

/// Fresh model and optimizer state for a resolved config.
inline Checkpoint initial_checkpoint(const ResolvedConfig& resolved) {
  Checkpoint ckpt;
  ckpt.config = resolved.config;
  ckpt.num_classes = resolved.num_classes;
  Rng init_rng(resolved.config.seed);
  ckpt.params = init_model_params(resolved.config.cell, resolved.num_classes, init_rng);
  ckpt.data_rng = rng_state(Rng(data_seed(resolved.config.seed)));
  return ckpt;
}

namespace detail {

/// Permutes the targets of masked positions among themselves.
inline void shuffle_masked_targets(Batch& batch, Rng& rng) {
  std::vector<std::size_t> slots;
  for (std::size_t i = 0; i < batch.targets.size(); ++i) {
    if (batch.loss_mask[i]) slots.push_back(i);
  }
  for (std::size_t i = slots.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(batch.targets[slots[i - 1]], batch.targets[slots[pick(rng)]]);
  }
}

inline StateValues carried_from(const ParamMap& carried) {
  StateValues s;
  if (auto it = carried.find("h"); it != carried.end()) s.h = it->second;
  if (auto it = carried.find("m"); it != carried.end()) s.m = it->second;
  if (auto it = carried.find("c"); it != carried.end()) s.c = it->second;
  return s;
}

inline ParamMap carried_to(const StateValues& s) {
  ParamMap out;
  if (s.h.size()) out.emplace("h", s.h);
  if (s.m.size()) out.emplace("m", s.m);
  if (s.c.size()) out.emplace("c", s.c);
  return out;
}

}  // namespace detail

/// Online training loop: batch -> forward/backward -> clip -> Adam -> record.
/// Returns the final checkpoint. Throws TrainingDiverged on a non-finite
/// loss, gradient or update.
inline Checkpoint train_run(const TrainConfig& config, const MetricsSink& sink = {}, const TrainOptions& options = {}) {
  TaskSource source(config.task, config.batch_size, options.data_dir);
  const ResolvedConfig resolved = resolve_config(config, source);
  const TrainConfig& cfg = resolved.config;
  Checkpoint ckpt = options.resume ? *options.resume : initial_checkpoint(resolved);
  if (options.resume) {
    ckpt.config.max_steps = cfg.max_steps;
    source.restore_cursor(ckpt.task_cursor);
  }
  Rng data_rng = rng_from_state(ckpt.data_rng);
  const std::vector<Batch> eval_batches =
      cfg.eval_every > 0 ? source.eval_set(static_cast<std::size_t>(cfg.eval_batches), eval_seed(cfg.seed))
                         : std::vector<Batch>{};
  const AdamConfig adam{cfg.learning_rate};
  const auto started = std::chrono::steady_clock::now();
  auto wall_ms = [&] {
    if (!cfg.log_wall_time) return 0.0;
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
  };

  while (ckpt.step < cfg.max_steps) {
    Batch batch = source.next_train(data_rng);
    if (cfg.random_label_mode) detail::shuffle_masked_targets(batch, data_rng);

    std::optional<StateValues> initial;
    if (source.stateful()) {
      if (!source.pass_started() && !ckpt.carried.empty()) initial = detail::carried_from(ckpt.carried);
    } else if (cfg.memory_reset_period > 0 && ckpt.step % cfg.memory_reset_period != 0 &&
               ckpt.carried.count("m")) {
      StateValues s;
      s.h = Tensor::zeros({static_cast<std::size_t>(cfg.batch_size), static_cast<std::size_t>(cfg.cell.hidden_size)});
      s.m = ckpt.carried.at("m");
      initial = s;
    }

    SequenceResult r = run_sequence(cfg.cell, ckpt.params, batch, initial ? &*initial : nullptr, true);
    // ckpt is untouched until the update succeeds, so it is the last good state.
    if (!std::isfinite(r.loss)) {
      throw TrainingDiverged("training diverged at step " + std::to_string(ckpt.step + 1) + ": loss is " +
                                 std::to_string(r.loss),
                             Checkpoint(ckpt));
    }
    MetricsRecord rec;
    rec.run_id = cfg.run_id;
    rec.step = ckpt.step + 1;
    rec.loss_nats = r.loss;
    rec.bpc = r.loss / std::numbers::ln2;
    rec.accuracy = r.accuracy();
    try {
      rec.grad_norm_preclip = global_norm(r.grads);
      ParamMap grads = cfg.clip_norm > 0.0 ? clip_by_norm(std::move(r.grads), cfg.clip_norm) : std::move(r.grads);
      if (cfg.clip_norm <= 0.0) {
        for (const auto& [name, g] : grads) {
          if (!g.all_finite()) throw DivergenceError("non-finite gradient in '" + name + "'");
        }
      }
      rec.grad_norm_postclip = global_norm(grads);
      adam_step(ckpt.params, grads, ckpt.adam, adam);
    } catch (const DivergenceError& e) {
      throw TrainingDiverged("training diverged at step " + std::to_string(ckpt.step + 1) + ": " + e.what(),
                             Checkpoint(ckpt));
    }
    ckpt.step += 1;
    if (source.stateful() || cfg.memory_reset_period > 0) ckpt.carried = detail::carried_to(r.final_state);
    ckpt.data_rng = rng_state(data_rng);
    ckpt.task_cursor = source.cursor();
    rec.wall_ms = wall_ms();
    bool keep_going = !sink || sink(rec);
    if (options.on_checkpoint && options.checkpoint_every > 0 && ckpt.step % options.checkpoint_every == 0) {
      options.on_checkpoint(ckpt);
    }

    if (cfg.eval_every > 0 && ckpt.step % cfg.eval_every == 0 && !eval_batches.empty()) {
      MetricsRecord ev = evaluate(cfg.cell, ckpt.params, eval_batches, source.stateful());
      ev.run_id = cfg.run_id;
      ev.step = ckpt.step;
      ev.wall_ms = wall_ms();
      if (sink && !sink(ev)) keep_going = false;
    }
    if (!keep_going) break;
  }
  return ckpt;
}

}  // namespace nrulab
