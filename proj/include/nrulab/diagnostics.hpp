#pragma once

// Analysis tools: input-gradient profiles, memory traces, hyperparameter
// sweeps and steps-to-threshold tables.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <random>
#include <cmath>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "nrulab/training.hpp"

namespace nrulab {

struct GradientProfile {
  std::vector<double> input_grad_norms;  // ||dL/dx_t||_2 over the batch, per step

  /// sqrt(sum_t ||dL/dx_t||^2)
  double total() const {
    double s = 0.0;
    for (double v : input_grad_norms) s += v * v;
    return std::sqrt(s);
  }
};

/// One forward+backward on a private tape; parameters are read only.
inline GradientProfile grad_norm_probe(const CellSpec& spec, const ParamMap& params, const Batch& batch) {
  ad::Tape tape;
  const auto vars = bind_params(tape, params);
  ForwardPass pass = unroll(tape, vars, spec, batch, nullptr, true);
  tape.backward(pass.loss);
  GradientProfile profile;
  profile.input_grad_norms.reserve(pass.inputs.size());
  for (const ad::Var& x : pass.inputs) profile.input_grad_norms.push_back(std::sqrt(tape.grad(x).squared_norm()));
  return profile;
}

inline GradientProfile grad_norm_probe(const Checkpoint& ckpt, const Batch& batch) {
  return grad_norm_probe(ckpt.config.cell, ckpt.params, batch);
}

struct GradcheckSetup {
  int steps = 5;
  int batch = 2;
  int input_size = 3;
  int hidden_size = 4;
  int memory_size = 9;
  int num_heads = 1;
  int classes = 3;
  bool layer_norm = true;  // vanilla RNN kinds only
  double h = 1e-5;
  double tol = 1e-5;
  std::uint64_t seed = 0;
};

/// Unrolls a small cell for `steps` steps and compares the gradient of the
/// readout cross-entropy at the last step against central differences, for
/// every parameter and every input x_t.
inline GradReport cell_gradient_check(CellKind kind, const GradcheckSetup& setup = {}) {
  CellSpec spec;
  spec.kind = kind;
  spec.input_size = setup.input_size;
  spec.hidden_size = setup.hidden_size;
  spec.memory_size = setup.memory_size;
  spec.num_heads = setup.num_heads;
  spec.layer_norm = is_vanilla_rnn(kind) && setup.layer_norm;
  spec.t_max = 10;
  spec.validate();
  Rng rng(setup.seed);
  ParamMap params = init_model_params(spec, static_cast<std::size_t>(setup.classes), rng);
  // Zero biases make every gate exactly symmetric; perturb them so the
  // check exercises the nonlinearities away from 0.
  std::uniform_real_distribution<double> jitter(-0.5, 0.5);
  for (auto& [name, t] : params)
    if (t.rank() == 1)
      for (double& v : t.values()) v += jitter(rng);
  const std::size_t B = static_cast<std::size_t>(setup.batch), d = static_cast<std::size_t>(setup.input_size);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int t = 0; t < setup.steps; ++t) {
    Tensor x({B, d});
    for (double& v : x.values()) v = normal(rng);
    params.emplace("x" + std::to_string(t), std::move(x));
  }
  std::vector<int> targets(B);
  std::uniform_int_distribution<int> pick(0, setup.classes - 1);
  for (int& y : targets) y = pick(rng);

  LossBuilder build = [&](ad::Tape& tape, const std::map<std::string, ad::Var>& vars) {
    BoundCell cell(spec, vars, kCellPrefix);
    CellState state = cell.zero_state(B);
    for (int t = 0; t < setup.steps; ++t) state = cell.step(state, vars.at("x" + std::to_string(t)));
    ad::Var logits = ad::affine(state.h, vars.at("head/W"), vars.at("head/b"));
    return ad::softmax_cross_entropy(logits, targets);
  };
  return finite_diff_check(build, params, setup.h, setup.tol);
}

/// Row t is the NRU memory m_{t+1} after consuming input t.
inline Tensor memory_trace(const CellSpec& spec, const ParamMap& params, const Batch& sequence) {
  if (spec.kind != CellKind::NRU) {
    throw CapabilityError("memory_trace: " + to_string(spec.kind) + " has no memory vector");
  }
  if (sequence.batch_size() != 1) {
    throw DimensionError("memory_trace: expected a single sequence, got batch of " +
                         std::to_string(sequence.batch_size()));
  }
  ad::Tape tape;
  const auto vars = bind_params(tape, params);
  ForwardPass pass = unroll(tape, vars, spec, sequence);
  const std::size_t T = pass.states.size(), m = static_cast<std::size_t>(spec.memory_size);
  Tensor trace({T, m});
  for (std::size_t t = 0; t < T; ++t) {
    const Tensor& row = pass.states[t].m.value();
    std::copy(row.values().begin(), row.values().end(), trace.data() + t * m);
  }
  return trace;
}

inline Tensor memory_trace(const Checkpoint& ckpt, const Batch& sequence) {
  return memory_trace(ckpt.config.cell, ckpt.params, sequence);
}

/// ||m_t - m_{t-1}||_2 per row of a trace, with m_{-1} = 0.
inline std::vector<double> memory_step_changes(const Tensor& trace) {
  const std::size_t T = trace.rows(), m = trace.cols();
  std::vector<double> out(T);
  for (std::size_t t = 0; t < T; ++t) {
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double prev = t ? trace.at(t - 1, j) : 0.0;
      const double d = trace.at(t, j) - prev;
      s += d * d;
    }
    out[t] = std::sqrt(s);
  }
  return out;
}

/// Comma-separated numeric grid with a one-line header.
inline void write_delimited(std::ostream& out, const std::vector<std::string>& header,
                            const std::vector<std::vector<double>>& rows, char delim = ',') {
  for (std::size_t i = 0; i < header.size(); ++i) out << (i ? std::string(1, delim) : "") << header[i];
  out << '\n';
  out.precision(17);
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? std::string(1, delim) : "") << row[i];
    out << '\n';
  }
}

inline void write_profile(std::ostream& out, const GradientProfile& p) {
  std::vector<std::vector<double>> rows;
  for (std::size_t t = 0; t < p.input_grad_norms.size(); ++t) rows.push_back({double(t), p.input_grad_norms[t]});
  write_delimited(out, {"t", "input_grad_norm"}, rows);
}

inline void write_trace(std::ostream& out, const Tensor& trace) {
  std::vector<std::string> header{"t"};
  for (std::size_t j = 0; j < trace.cols(); ++j) header.push_back("m" + std::to_string(j));
  std::vector<std::vector<double>> rows;
  for (std::size_t t = 0; t < trace.rows(); ++t) {
    std::vector<double> row{double(t)};
    for (std::size_t j = 0; j < trace.cols(); ++j) row.push_back(trace.at(t, j));
    rows.push_back(std::move(row));
  }
  write_delimited(out, header, rows);
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

struct SweepGrid {
  TrainConfig base;
  std::vector<int> num_heads;
  std::vector<int> memory_size;
  std::vector<int> hidden_size;
};

struct SweepPoint {
  int num_heads = 0, memory_size = 0, hidden_size = 0;
};

struct SweepRow {
  SweepPoint point;
  std::string run_id;
  std::vector<MetricsRecord> records;
  double final_train_loss = 0.0;  // window-100 smoothed
  std::optional<double> final_eval_loss;
  std::optional<double> best_eval_loss;
  std::optional<double> best_eval_accuracy;
  std::string error;  // non-empty if the run diverged
};

struct SkippedPoint {
  SweepPoint point;
  std::string reason;
};

struct SweepResult {
  std::vector<SweepRow> rows;  // grid order, one per feasible point
  std::vector<SkippedPoint> skipped;
};

/// Cartesian product over the grid lists; empty lists keep the base value.
inline std::vector<std::pair<SweepPoint, TrainConfig>> expand_grid(const SweepGrid& grid,
                                                                   std::vector<SkippedPoint>* skipped = nullptr) {
  auto or_base = [](const std::vector<int>& v, int base) { return v.empty() ? std::vector<int>{base} : v; };
  std::vector<std::pair<SweepPoint, TrainConfig>> out;
  for (int k : or_base(grid.num_heads, grid.base.cell.num_heads))
    for (int m : or_base(grid.memory_size, grid.base.cell.memory_size))
      for (int h : or_base(grid.hidden_size, grid.base.cell.hidden_size)) {
        SweepPoint p{k, m, h};
        TrainConfig cfg = grid.base;
        cfg.cell.num_heads = k;
        cfg.cell.memory_size = m;
        cfg.cell.hidden_size = h;
        if (!grid.hidden_size.empty()) cfg.param_budget = 0;  // explicit sizes win over the budget
        cfg.run_id = grid.base.run_id + "_k" + std::to_string(k) + "_m" + std::to_string(m) + "_h" + std::to_string(h);
        try {
          CellSpec shape = cfg.cell;  // input_size and t_max come from the task later
          shape.input_size = std::max(shape.input_size, 1);
          shape.t_max = std::max(shape.t_max, 3);
          shape.validate();
          out.emplace_back(p, cfg);
        } catch (const ConfigError& e) {
          if (skipped) skipped->push_back({p, e.what()});
        }
      }
  return out;
}

inline SweepRow summarize_run(const SweepPoint& point, const std::string& run_id, std::vector<MetricsRecord> records) {
  SweepRow row;
  row.point = point;
  row.run_id = run_id;
  std::vector<double> train;
  for (const auto& r : records) {
    if (r.split == "train") {
      train.push_back(r.loss_nats);
    } else {
      row.final_eval_loss = r.loss_nats;
      if (!row.best_eval_loss || r.loss_nats < *row.best_eval_loss) row.best_eval_loss = r.loss_nats;
      if (!row.best_eval_accuracy || r.accuracy > *row.best_eval_accuracy) row.best_eval_accuracy = r.accuracy;
    }
  }
  if (!train.empty()) row.final_train_loss = smoothed(train).back();
  row.records = std::move(records);
  return row;
}

/// Runs every feasible grid point. Each run owns its tape and rng, so the
/// result does not depend on `parallelism`.
inline SweepResult sweep(const SweepGrid& grid, int parallelism = 1, const TrainOptions& options = {}) {
  SweepResult result;
  const auto points = expand_grid(grid, &result.skipped);
  result.rows.resize(points.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < points.size(); i = next++) {
      const auto& [point, cfg] = points[i];
      std::vector<MetricsRecord> records;
      std::string error;
      try {
        train_run(cfg, [&](const MetricsRecord& r) {
          records.push_back(r);
          return true;
        }, options);
      } catch (const DivergenceError& e) {
        error = e.what();
      }
      result.rows[i] = summarize_run(point, cfg.run_id, std::move(records));
      result.rows[i].error = error;
    }
  };
  const int n = std::max(1, std::min<int>(parallelism, static_cast<int>(points.size())));
  std::vector<std::thread> threads;
  for (int t = 1; t < n; ++t) threads.emplace_back(worker);
  worker();
  for (auto& th : threads) th.join();
  return result;
}

inline void write_sweep_table(std::ostream& out, const SweepResult& result) {
  out << "run_id,num_heads,memory_size,hidden_size,final_train_loss,final_eval_loss,best_eval_loss,"
         "best_eval_accuracy,status\n";
  out.precision(17);
  auto opt = [](const std::optional<double>& v) {
    if (!v) return std::string("nan");
    std::ostringstream os;
    os.precision(17);
    os << *v;
    return os.str();
  };
  for (const auto& row : result.rows) {
    out << row.run_id << ',' << row.point.num_heads << ',' << row.point.memory_size << ',' << row.point.hidden_size << ','
        << row.final_train_loss << ',' << opt(row.final_eval_loss) << ',' << opt(row.best_eval_loss) << ','
        << opt(row.best_eval_accuracy) << ',' << (row.error.empty() ? "ok" : "diverged") << '\n';
  }
  for (const auto& s : result.skipped) {
    out << "# skipped k=" << s.point.num_heads << " m=" << s.point.memory_size << " h=" << s.point.hidden_size << ": "
        << s.reason << '\n';
  }
}

// ---------------------------------------------------------------------------
// Convergence
// ---------------------------------------------------------------------------

struct ConvergenceRow {
  std::string run_id;
  std::optional<std::int64_t> steps_to_threshold;  // nullopt: not reached
};

/// First step at which the window-100 smoothed train loss drops below `threshold`.
inline std::optional<std::int64_t> steps_to_threshold(const std::vector<MetricsRecord>& stream, double threshold,
                                                      std::size_t window = 100) {
  SmoothedLoss smooth(window);
  for (const auto& r : stream) {
    if (r.split != "train") continue;
    if (smooth.push(r.loss_nats) < threshold) return r.step;
  }
  return std::nullopt;
}

inline std::vector<ConvergenceRow> convergence_report(const std::vector<std::vector<MetricsRecord>>& streams,
                                                      double threshold, std::size_t window = 100) {
  std::vector<ConvergenceRow> out;
  for (const auto& s : streams) {
    out.push_back({s.empty() ? std::string{} : s.front().run_id, steps_to_threshold(s, threshold, window)});
  }
  return out;
}

inline void write_convergence_table(std::ostream& out, const std::vector<ConvergenceRow>& rows) {
  out << "run_id,steps_to_threshold\n";
  for (const auto& r : rows) {
    out << r.run_id << ',' << (r.steps_to_threshold ? std::to_string(*r.steps_to_threshold) : "not reached") << '\n';
  }
}

}  // namespace nrulab
