#pragma once

// Recurrent cells behind one step contract: NRU plus the gated and vanilla
// baselines. Parameters live in a ParamMap keyed by name; BoundCell fuses
// them into tape leaves once per sequence so each step is a handful of
// dense ops.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "nrulab/autodiff.hpp"
#include "nrulab/error.hpp"
#include "nrulab/gradcheck.hpp"
#include "nrulab/init.hpp"

namespace nrulab {

enum class CellKind { NRU, LSTM, LSTM_CHRONO, GRU, JANET, RNN_ORTH, RNN_ID };

inline constexpr std::array<CellKind, 7> kAllCellKinds = {CellKind::NRU,   CellKind::LSTM,     CellKind::LSTM_CHRONO,
                                                          CellKind::GRU,   CellKind::JANET,    CellKind::RNN_ORTH,
                                                          CellKind::RNN_ID};

inline std::string to_string(CellKind kind) {
  switch (kind) {
    case CellKind::NRU: return "NRU";
    case CellKind::LSTM: return "LSTM";
    case CellKind::LSTM_CHRONO: return "LSTM_CHRONO";
    case CellKind::GRU: return "GRU";
    case CellKind::JANET: return "JANET";
    case CellKind::RNN_ORTH: return "RNN_ORTH";
    case CellKind::RNN_ID: return "RNN_ID";
  }
  return "?";
}

/// Accepts the canonical names case-insensitively, with '-' or '_'.
inline CellKind parse_cell_kind(std::string_view text) {
  std::string norm;
  for (char ch : text) norm.push_back(ch == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch))));
  for (CellKind k : kAllCellKinds) {
    if (to_string(k) == norm) return k;
  }
  throw ConfigError("unknown cell kind '" + std::string(text) +
                    "' (expected NRU, LSTM, LSTM_CHRONO, GRU, JANET, RNN_ORTH or RNN_ID)");
}

inline bool is_vanilla_rnn(CellKind k) { return k == CellKind::RNN_ORTH || k == CellKind::RNN_ID; }

inline std::optional<std::size_t> exact_sqrt(std::size_t n) {
  auto r = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  for (std::size_t c = r > 0 ? r - 1 : 0; c <= r + 1; ++c) {
    if (c * c == n) return c;
  }
  return std::nullopt;
}

struct CellSpec {
  CellKind kind = CellKind::NRU;
  int input_size = 1;
  int hidden_size = 1;
  int memory_size = 1;  // NRU only
  int num_heads = 1;    // NRU only
  bool heads_use_relu = false;
  bool layer_norm = false;  // vanilla RNNs only
  int t_max = 0;            // chrono initialization (LSTM_CHRONO, JANET)

  void validate() const {
    if (input_size < 1) throw ConfigError("cell: input_size must be >= 1");
    if (hidden_size < 1) throw ConfigError("cell: hidden_size must be >= 1");
    if (kind == CellKind::NRU) {
      if (memory_size < 1) throw ConfigError("cell: memory_size must be >= 1");
      if (num_heads < 1) throw ConfigError("cell: num_heads must be >= 1");
      if (!exact_sqrt(static_cast<std::size_t>(memory_size) * static_cast<std::size_t>(num_heads))) {
        throw ConfigError("cell: num_heads * memory_size = " + std::to_string(num_heads * memory_size) +
                          " is not a perfect square");
      }
    }
    if ((kind == CellKind::LSTM_CHRONO || kind == CellKind::JANET) && t_max < 3) {
      throw ConfigError("cell: " + to_string(kind) + " needs t_max >= 3 for chrono initialization");
    }
    if (is_vanilla_rnn(kind) && layer_norm && hidden_size < 2) {
      throw ConfigError("cell: layer norm needs hidden_size >= 2");
    }
  }

  /// sqrt(k * m): width of each factor vector p, q.
  std::size_t factor_size() const {
    return exact_sqrt(static_cast<std::size_t>(memory_size) * static_cast<std::size_t>(num_heads)).value_or(0);
  }

  friend bool operator==(const CellSpec&, const CellSpec&) = default;
};

/// Parameter names and shapes, in initialization order.
inline std::vector<std::pair<std::string, Shape>> param_shapes(const CellSpec& spec) {
  spec.validate();
  const std::size_t d = spec.input_size, h = spec.hidden_size;
  switch (spec.kind) {
    case CellKind::NRU: {
      const std::size_t m = spec.memory_size, k = spec.num_heads, s = spec.factor_size();
      const std::size_t in = d + h + m;
      return {{"W_h", {h, h}},      {"W_i", {d, h}},      {"W_c", {m, h}},   {"b_h", {h}},
              {"W_alpha", {in, k}}, {"b_alpha", {k}},     {"W_beta", {in, k}}, {"b_beta", {k}},
              {"W_pw", {in, s}},    {"b_pw", {s}},        {"W_qw", {in, s}}, {"b_qw", {s}},
              {"W_pe", {in, s}},    {"b_pe", {s}},        {"W_qe", {in, s}}, {"b_qe", {s}}};
    }
    case CellKind::LSTM:
    case CellKind::LSTM_CHRONO:
      return {{"W_x", {d, 4 * h}}, {"W_h", {h, 4 * h}}, {"b", {4 * h}}};
    case CellKind::GRU:
      return {{"W_x", {d, 3 * h}}, {"U_rz", {h, 2 * h}}, {"U_c", {h, h}}, {"b", {3 * h}}};
    case CellKind::JANET:
      return {{"W_x", {d, 2 * h}}, {"W_h", {h, 2 * h}}, {"b", {2 * h}}};
    case CellKind::RNN_ORTH:
    case CellKind::RNN_ID: {
      std::vector<std::pair<std::string, Shape>> out = {{"W", {h, h}}, {"U", {d, h}}, {"b", {h}}};
      if (spec.layer_norm) {
        out.push_back({"ln_gain", {h}});
        out.push_back({"ln_bias", {h}});
      }
      return out;
    }
  }
  return {};
}

inline std::size_t count_params(const CellSpec& spec) {
  std::size_t n = 0;
  for (const auto& [name, shape] : param_shapes(spec)) n += shape_size(shape);
  return n;
}

/// Fresh parameters for `spec`. Non-recurrent weights are uniform Xavier;
/// biases are zero except where a scheme below says otherwise.
inline constexpr double kNruHeadInitScale = 0.02;

inline ParamMap init_cell_params(const CellSpec& spec, Rng& rng) {
  ParamMap params;
  const std::size_t h = spec.hidden_size;
  for (const auto& [name, shape] : param_shapes(spec)) {
    if (shape.size() == 2) {
      params.emplace(name, init_xavier(shape[0], shape[1], rng));
    } else {
      params.emplace(name, Tensor::zeros(shape));
    }
  }
  switch (spec.kind) {
    case CellKind::LSTM: {
      Tensor& b = params.at("b");
      for (std::size_t i = h; i < 2 * h; ++i) b[i] = 1.0;  // forget gate
      break;
    }
    case CellKind::LSTM_CHRONO: {
      ChronoBias chrono = init_chrono(spec.t_max, h, rng);
      Tensor& b = params.at("b");
      for (std::size_t i = 0; i < h; ++i) {
        b[i] = chrono.input[i];
        b[h + i] = chrono.forget[i];
      }
      break;
    }
    case CellKind::JANET: {
      ChronoBias chrono = init_chrono(spec.t_max, h, rng);
      Tensor& b = params.at("b");
      for (std::size_t i = 0; i < h; ++i) b[i] = chrono.forget[i];
      break;
    }
    case CellKind::RNN_ORTH:
      params.at("W") = init_orthogonal(h, rng);
      break;
    case CellKind::RNN_ID:
      params.at("W") = init_identity(h);
      break;
    default:
      break;
  }
  if (spec.kind == CellKind::NRU) {
    // alpha and beta read m_{t-1}, so the write/erase heads feed the memory
    // back into itself; at full Xavier scale it grows geometrically along
    // the sequence before the first update.
    for (const char* name : {"W_alpha", "W_beta"})
      for (double& v : params.at(name).values()) v *= kNruHeadInitScale;
  }
  if (is_vanilla_rnn(spec.kind) && spec.layer_norm) params.at("ln_gain") = Tensor::ones({h});
  return params;
}

/// Recurrent state for one batch of sequences; unused members stay unbound.
struct CellState {
  ad::Var h;
  ad::Var m;  // NRU memory
  ad::Var c;  // LSTM cell
};

/// Detached copy of a state's values, for carrying across tapes.
struct StateValues {
  Tensor h, m, c;
};

inline StateValues state_values(const CellState& s) {
  StateValues out;
  if (s.h.valid()) out.h = s.h.value();
  if (s.m.valid()) out.m = s.m.value();
  if (s.c.valid()) out.c = s.c.value();
  return out;
}

// ---------------------------------------------------------------------------
// Step functions. Each takes the tape-bound weights for its kind.
// ---------------------------------------------------------------------------

struct NruWeights {
  ad::Var hidden_w;  // [h + d + m, h], rows ordered (h, x, m)
  ad::Var hidden_b;  // [h]
  ad::Var head_w;    // [d + h + m, 2k + 4s], columns (alpha, beta, p_w, q_w, p_e, q_e)
  ad::Var head_b;
};

/// Directions from factor vectors: per row, vec(p q^T) split into k chunks of
/// m, optional ReLU, each chunk L5-normalized. Result is [B x k*m].
inline ad::Var nru_directions(ad::Var p, ad::Var q, const CellSpec& spec) {
  const std::size_t B = p.value().rows();
  const std::size_t k = spec.num_heads, m = spec.memory_size;
  ad::Var v = ad::outer_product(p, q);
  if (spec.heads_use_relu) v = ad::relu(v);
  v = ad::reshape(v, {B * k, m});
  v = ad::lp_normalize(v, 5, 1e-12);
  return ad::reshape(v, {B, k * m});
}

struct NruHeads {
  ad::Var alpha;        // [B x k]
  ad::Var beta;         // [B x k]
  ad::Var write_dirs;   // [B x k*m], chunk i is v^w_i
  ad::Var erase_dirs;   // [B x k*m], chunk i is v^e_i
};

/// Head outputs from (x_t, h_t, m_{t-1}).
inline NruHeads nru_head_directions(const NruWeights& w, const CellSpec& spec, ad::Var x, ad::Var h_t,
                                    ad::Var m_prev) {
  const std::size_t k = spec.num_heads, s = spec.factor_size();
  ad::Var heads = ad::affine(ad::concat({x, h_t, m_prev}), w.head_w, w.head_b);
  NruHeads out;
  out.alpha = ad::slice(heads, 0, k);
  out.beta = ad::slice(heads, k, 2 * k);
  if (spec.heads_use_relu) {
    out.alpha = ad::relu(out.alpha);
    out.beta = ad::relu(out.beta);
  }
  const std::size_t base = 2 * k;
  out.write_dirs = nru_directions(ad::slice(heads, base, base + s), ad::slice(heads, base + s, base + 2 * s), spec);
  out.erase_dirs =
      nru_directions(ad::slice(heads, base + 2 * s, base + 3 * s), ad::slice(heads, base + 3 * s, base + 4 * s), spec);
  return out;
}

inline void check_state_shape(const ad::Var& v, std::size_t rows, std::size_t cols, const char* what) {
  if (!v.valid() || v.value().rank() != 2 || v.value().rows() != rows || v.value().cols() != cols) {
    throw DimensionError(std::string("cell state ") + what + " must be [" + std::to_string(rows) + "x" +
                         std::to_string(cols) + "], got " + (v.valid() ? shape_str(v.value().shape()) : "unbound"));
  }
}

inline void check_input(const CellSpec& spec, ad::Var x) {
  if (x.value().rank() != 2 || x.value().cols() != static_cast<std::size_t>(spec.input_size)) {
    throw DimensionError("cell input must be [B x " + std::to_string(spec.input_size) + "], got " +
                         shape_str(x.value().shape()));
  }
}

/// h_t = relu(W_h h + W_i x + W_c m + b); m_t = m + sum alpha_i v^w_i - sum beta_i v^e_i.
inline CellState nru_step(const NruWeights& w, const CellSpec& spec, const CellState& state, ad::Var x) {
  check_input(spec, x);
  const std::size_t B = x.value().rows();
  check_state_shape(state.h, B, spec.hidden_size, "h");
  check_state_shape(state.m, B, spec.memory_size, "m");
  ad::Var h_t = ad::relu(ad::affine(ad::concat({state.h, x, state.m}), w.hidden_w, w.hidden_b));
  NruHeads heads = nru_head_directions(w, spec, x, h_t, state.m);
  ad::Var written = ad::weighted_head_sum(heads.alpha, heads.write_dirs);
  ad::Var erased = ad::weighted_head_sum(heads.beta, heads.erase_dirs);
  return CellState{h_t, ad::sub(ad::add(state.m, written), erased), {}};
}

struct GatedWeights {
  ad::Var w;  // [d + h, G*h], rows ordered (x, h)
  ad::Var b;  // [G*h]
};

/// Gate order (input, forget, candidate, output).
inline CellState lstm_step(const GatedWeights& w, const CellSpec& spec, const CellState& state, ad::Var x) {
  check_input(spec, x);
  const std::size_t B = x.value().rows(), h = spec.hidden_size;
  check_state_shape(state.h, B, h, "h");
  check_state_shape(state.c, B, h, "c");
  ad::Var gates = ad::affine(ad::concat({x, state.h}), w.w, w.b);
  ad::Var i = ad::sigmoid(ad::slice(gates, 0, h));
  ad::Var f = ad::sigmoid(ad::slice(gates, h, 2 * h));
  ad::Var g = ad::tanh_act(ad::slice(gates, 2 * h, 3 * h));
  ad::Var o = ad::sigmoid(ad::slice(gates, 3 * h, 4 * h));
  ad::Var c_t = ad::add(ad::mul(f, state.c), ad::mul(i, g));
  return CellState{ad::mul(o, ad::tanh_act(c_t)), {}, c_t};
}

/// Forget-gate-only recurrence:
/// h_t = sigma(s) * h + (1 - sigma(s - 1)) * tanh(c~), with the shift of 1 on the
/// candidate gate.
inline CellState janet_step(const GatedWeights& w, const CellSpec& spec, const CellState& state, ad::Var x) {
  check_input(spec, x);
  const std::size_t B = x.value().rows(), h = spec.hidden_size;
  check_state_shape(state.h, B, h, "h");
  ad::Var pre = ad::affine(ad::concat({x, state.h}), w.w, w.b);
  ad::Var s = ad::slice(pre, 0, h);
  ad::Var candidate = ad::tanh_act(ad::slice(pre, h, 2 * h));
  ad::Var keep = ad::sigmoid(s);
  ad::Var admit = ad::scale_shift(ad::sigmoid(ad::scale_shift(s, 1.0, -1.0)), -1.0, 1.0);
  return CellState{ad::add(ad::mul(keep, state.h), ad::mul(admit, candidate)), {}, {}};
}

struct GruWeights {
  ad::Var w_x;   // [d, 3h], columns (reset, update, candidate)
  ad::Var u_rz;  // [h, 2h]
  ad::Var u_c;   // [h, h]
  ad::Var b;     // [3h]
};

/// h_t = (1 - z) * h + z * tanh(W_c x + U_c (r * h) + b_c).
inline CellState gru_step(const GruWeights& w, const CellSpec& spec, const CellState& state, ad::Var x) {
  check_input(spec, x);
  const std::size_t B = x.value().rows(), h = spec.hidden_size;
  check_state_shape(state.h, B, h, "h");
  ad::Var gx = ad::affine(x, w.w_x, w.b);
  ad::Var rz = ad::sigmoid(ad::add(ad::slice(gx, 0, 2 * h), ad::matmul(state.h, w.u_rz)));
  ad::Var r = ad::slice(rz, 0, h);
  ad::Var z = ad::slice(rz, h, 2 * h);
  ad::Var candidate = ad::tanh_act(ad::add(ad::slice(gx, 2 * h, 3 * h), ad::matmul(ad::mul(r, state.h), w.u_c)));
  ad::Var keep = ad::scale_shift(z, -1.0, 1.0);
  return CellState{ad::add(ad::mul(keep, state.h), ad::mul(z, candidate)), {}, {}};
}

struct RnnWeights {
  ad::Var w;  // [h + d, h], rows ordered (h, x)
  ad::Var b;
  ad::Var ln_gain;  // unbound without layer norm
  ad::Var ln_bias;
};

/// h_t = tanh(LN?(W h + U x + b)).
inline CellState rnn_step(const RnnWeights& w, const CellSpec& spec, const CellState& state, ad::Var x,
                          bool use_layer_norm) {
  check_input(spec, x);
  check_state_shape(state.h, x.value().rows(), spec.hidden_size, "h");
  ad::Var z = ad::affine(ad::concat({state.h, x}), w.w, w.b);
  if (use_layer_norm) z = ad::layer_norm(z, w.ln_gain, w.ln_bias);
  return CellState{ad::tanh_act(z), {}, {}};
}

/// Cell parameters bound to a tape, ready to step.
class BoundCell {
 public:
  /// `vars` must contain every name of param_shapes(spec), each prefixed by `prefix`.
  BoundCell(const CellSpec& spec, const std::map<std::string, ad::Var>& vars, const std::string& prefix = "")
      : spec_(spec) {
    spec_.validate();
    auto get = [&](const std::string& name) {
      auto it = vars.find(prefix + name);
      if (it == vars.end()) throw ConfigError("missing cell parameter '" + prefix + name + "'");
      const Shape& have = it->second.value().shape();
      for (const auto& [n, shape] : param_shapes(spec_)) {
        if (n == name && have != shape) {
          throw DimensionError("cell parameter '" + prefix + name + "' has shape " + shape_str(have) + ", expected " +
                               shape_str(shape));
        }
      }
      return it->second;
    };
    switch (spec_.kind) {
      case CellKind::NRU:
        weights_ = NruWeights{
            ad::stack_rows({get("W_h"), get("W_i"), get("W_c")}), get("b_h"),
            ad::concat({get("W_alpha"), get("W_beta"), get("W_pw"), get("W_qw"), get("W_pe"), get("W_qe")}),
            ad::concat({get("b_alpha"), get("b_beta"), get("b_pw"), get("b_qw"), get("b_pe"), get("b_qe")})};
        break;
      case CellKind::LSTM:
      case CellKind::LSTM_CHRONO:
      case CellKind::JANET:
        weights_ = GatedWeights{ad::stack_rows({get("W_x"), get("W_h")}), get("b")};
        break;
      case CellKind::GRU:
        weights_ = GruWeights{get("W_x"), get("U_rz"), get("U_c"), get("b")};
        break;
      case CellKind::RNN_ORTH:
      case CellKind::RNN_ID: {
        RnnWeights rw{ad::stack_rows({get("W"), get("U")}), get("b"), {}, {}};
        if (spec_.layer_norm) {
          rw.ln_gain = get("ln_gain");
          rw.ln_bias = get("ln_bias");
        }
        weights_ = rw;
        break;
      }
    }
    tape_ = vars.empty() ? nullptr : vars.begin()->second.tape;
  }

  const CellSpec& spec() const { return spec_; }

  CellState zero_state(std::size_t batch) const {
    const std::size_t h = spec_.hidden_size;
    CellState s;
    s.h = tape_->constant(Tensor::zeros({batch, h}));
    if (spec_.kind == CellKind::NRU) s.m = tape_->constant(Tensor::zeros({batch, std::size_t(spec_.memory_size)}));
    if (spec_.kind == CellKind::LSTM || spec_.kind == CellKind::LSTM_CHRONO) s.c = tape_->constant(Tensor::zeros({batch, h}));
    return s;
  }

  /// State whose members are constants copied from `values` (gradients stop here).
  CellState detached_state(const StateValues& values) const {
    CellState s;
    s.h = tape_->constant(values.h);
    if (values.m.size()) s.m = tape_->constant(values.m);
    if (values.c.size()) s.c = tape_->constant(values.c);
    return s;
  }

  CellState step(const CellState& state, ad::Var x) const {
    switch (spec_.kind) {
      case CellKind::NRU: return nru_step(std::get<NruWeights>(weights_), spec_, state, x);
      case CellKind::LSTM:
      case CellKind::LSTM_CHRONO: return lstm_step(std::get<GatedWeights>(weights_), spec_, state, x);
      case CellKind::JANET: return janet_step(std::get<GatedWeights>(weights_), spec_, state, x);
      case CellKind::GRU: return gru_step(std::get<GruWeights>(weights_), spec_, state, x);
      case CellKind::RNN_ORTH:
      case CellKind::RNN_ID: return rnn_step(std::get<RnnWeights>(weights_), spec_, state, x, spec_.layer_norm);
    }
    throw ContractError("unreachable cell kind");
  }

 private:
  CellSpec spec_;
  std::variant<NruWeights, GatedWeights, GruWeights, RnnWeights> weights_;
  ad::Tape* tape_ = nullptr;
};

// ---------------------------------------------------------------------------
// Parameter budgets
// ---------------------------------------------------------------------------

namespace detail {

/// Smallest hidden size whose count is >= target, searched over [1, 1<<20].
inline int hidden_for_budget(CellSpec spec, std::size_t target) {
  int lo = 1, hi = 1 << 20;
  while (lo < hi) {
    const int mid = lo + (hi - lo) / 2;
    spec.hidden_size = mid;
    if (count_params(spec) >= target) hi = mid;
    else lo = mid + 1;
  }
  return lo;
}

inline CellSpec closest_hidden(CellSpec spec, std::size_t target) {
  const int above = hidden_for_budget(spec, target);
  CellSpec best = spec;
  double best_gap = 1e300;
  for (int h : {above - 1, above}) {
    if (h < 1) continue;
    spec.hidden_size = h;
    if (is_vanilla_rnn(spec.kind) && spec.layer_norm && h < 2) continue;
    const double gap = std::abs(static_cast<double>(count_params(spec)) - static_cast<double>(target));
    if (gap < best_gap) {
      best_gap = gap;
      best = spec;
    }
  }
  return best;
}

inline double budget_gap(const CellSpec& spec, std::size_t target) {
  return std::abs(static_cast<double>(count_params(spec)) - static_cast<double>(target)) / static_cast<double>(target);
}

}  // namespace detail

/// Chooses the hidden size (and, for NRU, memory size if needed) so that
/// count_params lands within 2% of `target`. `shape` supplies every other
/// field; its hidden_size is ignored. For NRU the memory size from `shape`
/// is tried first, then other sizes m for which k*m is a perfect square,
/// nearest first.
inline CellSpec match_budget(CellKind kind, int input_size, std::size_t target, CellSpec shape = {}) {
  shape.kind = kind;
  shape.input_size = input_size;
  shape.hidden_size = 1;
  if ((kind == CellKind::LSTM_CHRONO || kind == CellKind::JANET) && shape.t_max < 3) shape.t_max = 100;
  if (is_vanilla_rnn(kind) && shape.layer_norm) shape.hidden_size = 2;
  shape.validate();
  if (target <= count_params(shape)) {
    throw ConfigError("match_budget: target " + std::to_string(target) + " is not above the minimum " +
                      std::to_string(count_params(shape)) + " for " + to_string(kind));
  }
  std::vector<int> memory_candidates = {shape.memory_size};
  if (kind == CellKind::NRU) {
    const int k = shape.num_heads;
    std::vector<int> others;
    for (int m = 1; m <= 4 * shape.memory_size + 64; ++m) {
      if (m != shape.memory_size && exact_sqrt(static_cast<std::size_t>(m) * k)) others.push_back(m);
    }
    std::stable_sort(others.begin(), others.end(), [&](int a, int b) {
      return std::abs(a - shape.memory_size) < std::abs(b - shape.memory_size);
    });
    memory_candidates.insert(memory_candidates.end(), others.begin(), others.end());
  }
  CellSpec nearest = shape;
  double nearest_gap = 1e300;
  for (int m : memory_candidates) {
    CellSpec trial = shape;
    trial.memory_size = m;
    trial = detail::closest_hidden(trial, target);
    const double gap = detail::budget_gap(trial, target);
    if (gap < 0.02) return trial;
    if (gap < nearest_gap) {
      nearest_gap = gap;
      nearest = trial;
    }
  }
  throw ConfigError("match_budget: cannot reach " + std::to_string(target) + " parameters within 2% for " +
                    to_string(kind) + "; nearest achievable is " + std::to_string(count_params(nearest)) +
                    " (hidden_size=" + std::to_string(nearest.hidden_size) + ")");
}

}  // namespace nrulab
