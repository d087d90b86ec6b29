#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "nrulab/diagnostics.hpp"
#include "test_util.hpp"

using namespace nrulab;

namespace {

TrainConfig tiny(CellKind kind, std::int64_t steps) {
  TrainConfig c;
  c.run_id = "g";
  c.cell.kind = kind;
  c.cell.hidden_size = 8;
  c.cell.memory_size = 4;
  c.cell.num_heads = 1;
  c.task.T = 6;
  c.task.n = 4;
  c.task.recall_k = 2;
  c.batch_size = 4;
  c.max_steps = steps;
  c.learning_rate = 0.01;
  return c;
}

Checkpoint fresh(const TrainConfig& c) {
  TaskSource src(c.task, c.batch_size, default_data_dir());
  return initial_checkpoint(resolve_config(c, src));
}

Batch prefix(const Batch& b, std::size_t len) {
  const std::size_t B = b.batch_size(), D = b.features();
  Batch out;
  out.inputs = Tensor({len, B, D}, std::vector<double>(b.inputs.values().begin(),
                                                       b.inputs.values().begin() + static_cast<std::ptrdiff_t>(len * B * D)));
  out.targets.assign(b.targets.begin(), b.targets.begin() + static_cast<std::ptrdiff_t>(len * B));
  out.loss_mask.assign(b.loss_mask.begin(), b.loss_mask.begin() + static_cast<std::ptrdiff_t>(len * B));
  return out;
}

MetricsRecord train_rec(std::int64_t step, double loss) {
  MetricsRecord r;
  r.run_id = "s";
  r.step = step;
  r.loss_nats = loss;
  return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// Gradient probe
// ---------------------------------------------------------------------------

TEST(Probe, OneNormPerStepAndNoSideEffects) {
  const Checkpoint ck = fresh(tiny(CellKind::NRU, 0));
  const ParamMap before = ck.params;
  Rng rng(1);
  const Batch batch = gen_copy(6, 4, 2, 3, rng);
  const GradientProfile a = grad_norm_probe(ck, batch);
  const GradientProfile b = grad_norm_probe(ck, batch);
  EXPECT_EQ(a.input_grad_norms.size(), batch.steps());
  EXPECT_EQ(a.input_grad_norms, b.input_grad_norms);
  EXPECT_EQ(ck.params, before);
  for (double v : a.input_grad_norms) EXPECT_GE(v, 0.0);
  EXPECT_GT(a.total(), 0.0);
}

TEST(Probe, ZeroParametersGiveZeroGradients) {
  Checkpoint ck = fresh(tiny(CellKind::LSTM, 0));
  for (auto& [name, t] : ck.params) t = Tensor::zeros(t.shape());
  Rng rng(2);
  const GradientProfile p = grad_norm_probe(ck, gen_copy(6, 4, 2, 2, rng));
  for (double v : p.input_grad_norms) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(p.total(), 0.0);
}

TEST(Probe, ContractiveRnnGradientsShrinkBackwards) {
  CellSpec spec;
  spec.kind = CellKind::RNN_ID;
  spec.input_size = 5;
  spec.hidden_size = 5;
  spec.layer_norm = false;
  Rng rng(3);
  ParamMap params = init_model_params(spec, 3, rng);
  Tensor W({5, 5}), U({5, 5});
  for (std::size_t i = 0; i < 5; ++i) {
    W.at(i, i) = 0.5;
    U.at(i, i) = 1.0;
  }
  params.at("cell/W") = W;
  params.at("cell/U") = U;
  const std::size_t T = 12;
  std::normal_distribution<double> N(0.0, 1.0);
  Tensor inputs({T, 1, 5});
  for (double& v : inputs.values()) v = N(rng);
  Batch batch{inputs, std::vector<int>(T, 1), std::vector<bool>(T, false)};
  batch.loss_mask.back() = true;
  const GradientProfile p = grad_norm_probe(spec, params, batch);
  for (std::size_t t = 1; t < T; ++t) EXPECT_LE(p.input_grad_norms[t - 1], 0.5 * p.input_grad_norms[t] + 1e-15) << t;
}

TEST(Probe, ProfileExportHasHeader) {
  GradientProfile p{{0.5, 0.25}};
  std::ostringstream os;
  write_profile(os, p);
  EXPECT_EQ(os.str(), "t,input_grad_norm\n0,0.5\n1,0.25\n");
  EXPECT_DOUBLE_EQ(p.total(), std::sqrt(0.3125));
}

// ---------------------------------------------------------------------------
// Memory trace
// ---------------------------------------------------------------------------

TEST(MemoryTrace, RowTIsMemoryAfterInputT) {
  TrainConfig c = tiny(CellKind::NRU, 0);
  const Checkpoint ck = fresh(c);
  Rng rng(4);
  const Batch seq = gen_copy(6, 4, 2, 1, rng);
  const Tensor trace = memory_trace(ck, seq);
  ASSERT_EQ(trace.rows(), seq.steps());
  ASSERT_EQ(trace.cols(), 4u);
  for (std::size_t t = 0; t < seq.steps(); ++t) {
    const SequenceResult r = run_sequence(ck.config.cell, ck.params, prefix(seq, t + 1));
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(trace.at(t, j), r.final_state.m.at(0, j)) << t;
  }
  EXPECT_TRUE(bitwise_equal(trace, memory_trace(ck, seq)));
}

TEST(MemoryTrace, NoWritesWithoutHeads) {
  Checkpoint ck = fresh(tiny(CellKind::NRU, 0));
  for (const char* name : {"cell/W_alpha", "cell/b_alpha", "cell/W_beta", "cell/b_beta"})
    ck.params.at(name) = Tensor::zeros(ck.params.at(name).shape());
  Rng rng(5);
  const Tensor trace = memory_trace(ck, gen_copy(6, 4, 2, 1, rng));
  EXPECT_EQ(trace.squared_norm(), 0.0);
  for (double d : memory_step_changes(trace)) EXPECT_EQ(d, 0.0);
}

TEST(MemoryTrace, RejectsOtherCellsAndBatches) {
  Rng rng(6);
  EXPECT_THROW(memory_trace(fresh(tiny(CellKind::GRU, 0)), gen_copy(6, 4, 2, 1, rng)), CapabilityError);
  EXPECT_THROW(memory_trace(fresh(tiny(CellKind::NRU, 0)), gen_copy(6, 4, 2, 2, rng)), DimensionError);
}

TEST(MemoryTrace, StepChangesAndExport) {
  const Tensor trace = Tensor::matrix({{3, 4}, {3, 4}, {0, 0}});
  EXPECT_EQ(memory_step_changes(trace), (std::vector<double>{5, 0, 5}));
  std::ostringstream os;
  write_trace(os, trace);
  EXPECT_EQ(os.str(), "t,m0,m1\n0,3,4\n1,3,4\n2,0,0\n");
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

TEST(Sweep, GridExpansionSkipsInfeasiblePoints) {
  SweepGrid grid;
  grid.base = tiny(CellKind::NRU, 0);
  grid.num_heads = {1, 2, 4, 9, 16};
  grid.memory_size = {256};
  std::vector<SkippedPoint> skipped;
  const auto points = expand_grid(grid, &skipped);
  ASSERT_EQ(points.size(), 4u);
  std::vector<int> ks;
  for (const auto& [p, cfg] : points) {
    ks.push_back(p.num_heads);
    EXPECT_EQ(cfg.cell.memory_size, 256);
    EXPECT_EQ(cfg.run_id, "g_k" + std::to_string(p.num_heads) + "_m256_h8");
  }
  EXPECT_EQ(ks, (std::vector<int>{1, 4, 9, 16}));
  ASSERT_EQ(skipped.size(), 1u);
  EXPECT_EQ(skipped[0].point.num_heads, 2);
  EXPECT_FALSE(skipped[0].reason.empty());
}

TEST(Sweep, ParallelMatchesSerial) {
  SweepGrid grid;
  grid.base = tiny(CellKind::NRU, 8);
  grid.base.eval_every = 4;
  grid.base.eval_batches = 2;
  grid.num_heads = {1, 4};
  grid.memory_size = {4, 8};
  const SweepResult serial = sweep(grid, 1);
  const SweepResult parallel = sweep(grid, 3);
  ASSERT_EQ(serial.rows.size(), 2u);  // k*m = 8 and 32 are not perfect squares
  ASSERT_EQ(serial.skipped.size(), 2u);
  ASSERT_EQ(parallel.rows.size(), serial.rows.size());
  for (std::size_t i = 0; i < serial.rows.size(); ++i) {
    EXPECT_EQ(serial.rows[i].run_id, parallel.rows[i].run_id);
    EXPECT_EQ(serial.rows[i].records, parallel.rows[i].records);
    EXPECT_EQ(serial.rows[i].final_train_loss, parallel.rows[i].final_train_loss);
    EXPECT_EQ(serial.rows[i].best_eval_loss, parallel.rows[i].best_eval_loss);
    EXPECT_EQ(serial.rows[i].records.size(), 10u);
  }
  std::ostringstream a, b;
  write_sweep_table(a, serial);
  write_sweep_table(b, parallel);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_EQ(a.str().substr(0, a.str().find('\n')),
            "run_id,num_heads,memory_size,hidden_size,final_train_loss,final_eval_loss,best_eval_loss,"
            "best_eval_accuracy,status");
  EXPECT_NE(a.str().find("# skipped k=4 m=8"), std::string::npos);
}

TEST(Sweep, SinglePointEqualsTrainRun) {
  SweepGrid grid;
  grid.base = tiny(CellKind::JANET, 6);
  const SweepResult r = sweep(grid, 2);
  ASSERT_EQ(r.rows.size(), 1u);
  TrainConfig cfg = grid.base;
  cfg.run_id = r.rows[0].run_id;
  std::vector<MetricsRecord> direct;
  train_run(cfg, [&](const MetricsRecord& m) { direct.push_back(m); return true; });
  EXPECT_EQ(r.rows[0].records, direct);
  EXPECT_TRUE(r.rows[0].error.empty());
}

// ---------------------------------------------------------------------------
// Convergence
// ---------------------------------------------------------------------------

TEST(Convergence, FirstSmoothedCrossing) {
  std::vector<MetricsRecord> linear;
  for (int s = 1; s <= 1000; ++s) linear.push_back(train_rec(s, 1.0 - s / 1000.0));
  EXPECT_EQ(steps_to_threshold(linear, 0.5, 1), 501);
  // Window-100 mean at step s is 1 - (s - 49.5) / 1000.
  EXPECT_EQ(steps_to_threshold(linear, 0.5, 100), 550);
}

TEST(Convergence, EvalRecordsIgnoredAndNeverReached) {
  std::vector<MetricsRecord> flat;
  for (int s = 1; s <= 300; ++s) {
    flat.push_back(train_rec(s, 2.0));
    MetricsRecord ev = train_rec(s, 0.0);
    ev.split = "eval";
    flat.push_back(ev);
  }
  EXPECT_FALSE(steps_to_threshold(flat, 1.0).has_value());
  std::vector<MetricsRecord> fast = {train_rec(1, 0.1)};
  fast[0].run_id = "fast";
  const auto rows = convergence_report({flat, fast}, 1.0);
  std::ostringstream os;
  write_convergence_table(os, rows);
  EXPECT_EQ(os.str(), "run_id,steps_to_threshold\ns,not reached\nfast,1\n");
}
