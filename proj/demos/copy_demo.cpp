// Trains an NRU on a short copy task and prints one recalled sequence.
// Usage: copy_demo [steps] [T]

#include <cstdlib>
#include <iostream>

#include "nrulab/metrics.hpp"
#include "nrulab/training.hpp"

using namespace nrulab;

int main(int argc, char** argv) {
  TrainConfig c;
  c.run_id = "copy-demo";
  c.cell.kind = CellKind::NRU;
  c.cell.hidden_size = 32;
  c.cell.memory_size = 16;
  c.cell.num_heads = 4;
  c.task.T = argc > 2 ? std::atoi(argv[2]) : 10;
  c.task.n = 4;
  c.task.recall_k = 3;
  c.max_steps = argc > 1 ? std::atoll(argv[1]) : 3000;
  c.learning_rate = 0.003;

  SmoothedLoss smooth;
  const Checkpoint ck = train_run(c, [&](const MetricsRecord& r) {
    const double s = smooth.push(r.loss_nats);
    if (r.step % 500 == 0) std::cout << "step " << r.step << "  smoothed loss " << s << '\n';
    return true;
  });
  std::cout << "memoryless baseline " << baseline_ce(c.task.T, c.task.n, c.task.recall_k) << '\n';

  Rng rng(42);
  const Batch seq = gen_copy(c.task.T, c.task.n, c.task.recall_k, 1, rng);
  const SequenceResult r = run_sequence(ck.config.cell, ck.params, seq);
  const Vocab vocab = SymbolLayout{c.task.n, false}.vocab();
  auto show = [&](auto symbol_at) {
    for (std::size_t t = 0; t < seq.steps(); ++t) {
      const std::string s = vocab.symbol(symbol_at(t));
      std::cout << (s.size() == 1 ? s : std::string(s == "<marker>" ? ":" : ".")) ;
    }
    std::cout << '\n';
  };
  std::cout << "input   ";
  show([&](std::size_t t) {
    const Tensor x = seq.input_at(t);
    for (std::size_t j = 0; j < x.cols(); ++j)
      if (x.at(0, j) > 0.5) return static_cast<int>(j);
    return 0;
  });
  std::cout << "target  ";
  show([&](std::size_t t) { return seq.target(t, 0); });
  std::cout << "output  ";
  show([&](std::size_t t) {
    const std::size_t C = r.logits.cols();
    std::size_t best = 0;
    for (std::size_t j = 1; j < C; ++j)
      if (r.logits.at(t, j) > r.logits.at(t, best)) best = j;
    return static_cast<int>(best);
  });
  std::cout << "accuracy " << r.accuracy() << '\n';
}
