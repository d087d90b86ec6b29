#pragma once

#include "nrulab/training.hpp"

namespace nrulab::testutil {

struct HandModel {
  CellSpec spec;
  ParamMap params;
};

/// Memoryless copy-task predictor built from an NRU with hidden size 2:
/// h0 fires on the marker, h1 latches one step later and stays on. Before the
/// latch the readout puts all mass on blank; after it, uniform mass on the n
/// data symbols. Its masked mean loss is k ln(n) / (T + 2k).
inline HandModel copy_baseline_model(int n) {
  const SymbolLayout sym{n, false};
  const std::size_t V = static_cast<std::size_t>(sym.size());
  HandModel out;
  out.spec.kind = CellKind::NRU;
  out.spec.input_size = sym.size();
  out.spec.hidden_size = 2;
  out.spec.memory_size = 1;
  out.spec.num_heads = 1;
  for (const auto& [name, shape] : param_shapes(out.spec)) out.params.emplace(kCellPrefix + name, Tensor::zeros(shape));
  Tensor& Wi = out.params.at("cell/W_i");  // [d x h]
  Wi.at(static_cast<std::size_t>(sym.marker()), 0) = 1.0;
  Tensor& Wh = out.params.at("cell/W_h");  // [h x h], row = source unit
  Wh.at(0, 1) = 1.0;
  Wh.at(1, 1) = 1.0;
  const double L = 50.0;
  Tensor W({2, V});
  Tensor b({V});
  b[static_cast<std::size_t>(sym.blank())] = L;
  for (std::size_t c = 0; c < static_cast<std::size_t>(n); ++c) W.at(1, c) = L;
  W.at(1, static_cast<std::size_t>(sym.blank())) = -L;
  out.params.emplace("head/W", W);
  out.params.emplace("head/b", b);
  return out;
}

}  // namespace nrulab::testutil
