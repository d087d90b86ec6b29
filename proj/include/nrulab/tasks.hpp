#pragma once

// Sequence tasks. Every generator emits a Batch laid out time-major:
// inputs [T x B x D], with targets and the loss mask indexed t * B + b.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "nrulab/error.hpp"
#include "nrulab/init.hpp"
#include "nrulab/tensor.hpp"

namespace nrulab {

struct Batch {
  Tensor inputs;                 // [T x B x D]
  std::vector<int> targets;      // T * B
  std::vector<bool> loss_mask;   // T * B

  std::size_t steps() const { return inputs.shape()[0]; }
  std::size_t batch_size() const { return inputs.shape()[1]; }
  std::size_t features() const { return inputs.shape()[2]; }

  /// Input rows for time step t, as [B x D].
  Tensor input_at(std::size_t t) const {
    const std::size_t n = batch_size() * features();
    const auto begin = inputs.values().begin() + static_cast<std::ptrdiff_t>(t * n);
    return Tensor({batch_size(), features()}, std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(n)));
  }

  int target(std::size_t t, std::size_t b) const { return targets[t * batch_size() + b]; }
  bool masked(std::size_t t, std::size_t b) const { return loss_mask[t * batch_size() + b]; }
};

/// Ordered symbol set with dense ids.
class Vocab {
 public:
  Vocab() = default;
  explicit Vocab(std::vector<std::string> symbols) : symbols_(std::move(symbols)) {
    for (std::size_t i = 0; i < symbols_.size(); ++i) ids_.emplace(symbols_[i], static_cast<int>(i));
  }

  std::size_t size() const { return symbols_.size(); }
  const std::string& symbol(int id) const { return symbols_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& symbols() const { return symbols_; }
  bool contains(const std::string& s) const { return ids_.count(s) != 0; }
  int id(const std::string& s) const {
    auto it = ids_.find(s);
    if (it == ids_.end()) throw FormatError("symbol '" + s + "' is not in the vocabulary");
    return it->second;
  }
  /// Returns the id of `s`, appending it when new.
  int intern(const std::string& s) {
    auto [it, inserted] = ids_.emplace(s, static_cast<int>(symbols_.size()));
    if (inserted) symbols_.push_back(s);
    return it->second;
  }

 private:
  std::vector<std::string> symbols_;
  std::map<std::string, int> ids_;
};

/// Symbols for the copy-style tasks: data 0..n-1, then blank, marker and
/// (variable copy only) pad.
struct SymbolLayout {
  int n = 8;
  bool with_pad = false;

  int blank() const { return n; }
  int marker() const { return n + 1; }
  int pad() const { return n + 2; }
  int size() const { return n + (with_pad ? 3 : 2); }

  Vocab vocab() const {
    std::vector<std::string> s;
    for (int i = 0; i < n; ++i) s.push_back(std::to_string(i));
    s.push_back("<blank>");
    s.push_back("<marker>");
    if (with_pad) s.push_back("<pad>");
    return Vocab(std::move(s));
  }
};

namespace detail {

/// Builds a batch from per-sequence symbol/target lists, right-padding with
/// `pad` (mask false) to the longest sequence.
inline Batch assemble_batch(const std::vector<std::vector<int>>& inputs, const std::vector<std::vector<int>>& targets,
                            const std::vector<std::vector<bool>>& masks, int vocab_size, int pad) {
  const std::size_t B = inputs.size();
  std::size_t T = 0;
  for (const auto& s : inputs) T = std::max(T, s.size());
  Batch batch{Tensor({T, B, static_cast<std::size_t>(vocab_size)}), std::vector<int>(T * B, pad),
              std::vector<bool>(T * B, false)};
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < T; ++t) {
      const bool real = t < inputs[b].size();
      const int symbol = real ? inputs[b][t] : pad;
      batch.inputs[(t * B + b) * vocab_size + symbol] = 1.0;
      if (real) {
        batch.targets[t * B + b] = targets[b][t];
        batch.loss_mask[t * B + b] = masks[b][t];
      }
    }
  }
  return batch;
}

/// One copy sequence with lag T: k symbols, T-1 blanks, marker, k blanks.
inline void copy_sequence(int T, int recall_k, const SymbolLayout& sym, Rng& rng, std::vector<int>& input,
                          std::vector<int>& target) {
  std::uniform_int_distribution<int> symbol(0, sym.n - 1);
  const std::size_t length = static_cast<std::size_t>(T + 2 * recall_k);
  input.assign(length, sym.blank());
  target.assign(length, sym.blank());
  for (int i = 0; i < recall_k; ++i) {
    const int s = symbol(rng);
    input[static_cast<std::size_t>(i)] = s;
    target[length - static_cast<std::size_t>(recall_k) + static_cast<std::size_t>(i)] = s;
  }
  input[static_cast<std::size_t>(recall_k + T - 1)] = sym.marker();
}

}  // namespace detail

/// Copy task: length T + 2k; loss on every step.
inline Batch gen_copy(int T, int n, int recall_k, int B, Rng& rng) {
  if (n < 1 || recall_k < 0 || B < 1 || T <= recall_k) {
    throw ConfigError("gen_copy: need n >= 1, B >= 1 and T > recall_k (T=" + std::to_string(T) +
                      ", recall_k=" + std::to_string(recall_k) + ")");
  }
  const SymbolLayout sym{n, false};
  std::vector<std::vector<int>> in(B), tg(B);
  std::vector<std::vector<bool>> mask(B);
  for (int b = 0; b < B; ++b) {
    detail::copy_sequence(T, recall_k, sym, rng, in[b], tg[b]);
    mask[b].assign(in[b].size(), true);
  }
  return detail::assemble_batch(in, tg, mask, sym.size(), sym.blank());
}

/// Variable-lag copy: per sequence T' ~ U{recall_k..T_max}; padded to the
/// longest sequence in the batch with the pad symbol (mask false).
inline Batch gen_copy_variable(int T_max, int n, int recall_k, int B, Rng& rng, std::vector<int>* lags = nullptr) {
  if (n < 1 || recall_k < 1 || B < 1 || T_max < recall_k) {
    throw ConfigError("gen_copy_variable: need n >= 1, B >= 1 and T_max >= recall_k >= 1 (T_max=" +
                      std::to_string(T_max) + ", recall_k=" + std::to_string(recall_k) + ")");
  }
  const SymbolLayout sym{n, true};
  std::uniform_int_distribution<int> lag(recall_k, T_max);
  std::vector<std::vector<int>> in(B), tg(B);
  std::vector<std::vector<bool>> mask(B);
  if (lags) lags->clear();
  for (int b = 0; b < B; ++b) {
    const int T = lag(rng);
    if (lags) lags->push_back(T);
    detail::copy_sequence(T, recall_k, sym, rng, in[b], tg[b]);
    mask[b].assign(in[b].size(), true);
  }
  return detail::assemble_batch(in, tg, mask, sym.size(), sym.pad());
}

/// Denoising: k symbols at sorted distinct random positions of a length-T
/// noise string, then the marker and k recall steps. Noise uses the blank id.
inline Batch gen_denoise(int T, int n, int recall_k, int B, Rng& rng) {
  if (n < 1 || recall_k < 0 || B < 1 || T < recall_k) {
    throw ConfigError("gen_denoise: need n >= 1, B >= 1 and T >= recall_k (T=" + std::to_string(T) +
                      ", recall_k=" + std::to_string(recall_k) + ")");
  }
  const SymbolLayout sym{n, false};
  std::uniform_int_distribution<int> symbol(0, n - 1);
  std::vector<int> slots(static_cast<std::size_t>(T));
  std::vector<std::vector<int>> in(B), tg(B);
  std::vector<std::vector<bool>> mask(B);
  const std::size_t length = static_cast<std::size_t>(T + 1 + recall_k);
  for (int b = 0; b < B; ++b) {
    std::iota(slots.begin(), slots.end(), 0);
    // Partial Fisher-Yates: first k slots become a uniform k-subset.
    for (int i = 0; i < recall_k; ++i) {
      std::uniform_int_distribution<int> pick(i, T - 1);
      std::swap(slots[static_cast<std::size_t>(i)], slots[static_cast<std::size_t>(pick(rng))]);
    }
    std::vector<int> positions(slots.begin(), slots.begin() + recall_k);
    std::sort(positions.begin(), positions.end());
    in[b].assign(length, sym.blank());
    tg[b].assign(length, sym.blank());
    for (int i = 0; i < recall_k; ++i) {
      const int s = symbol(rng);
      in[b][static_cast<std::size_t>(positions[static_cast<std::size_t>(i)])] = s;
      tg[b][length - static_cast<std::size_t>(recall_k) + static_cast<std::size_t>(i)] = s;
    }
    in[b][static_cast<std::size_t>(T)] = sym.marker();
    mask[b].assign(length, true);
  }
  return detail::assemble_batch(in, tg, mask, sym.size(), sym.blank());
}

/// Per-step cross-entropy of the memoryless copy predictor: k ln(n) / (T + 2k).
inline double baseline_ce(int T, int n, int recall_k) {
  return static_cast<double>(recall_k) * std::log(static_cast<double>(n)) / static_cast<double>(T + 2 * recall_k);
}

// ---------------------------------------------------------------------------
// MNIST
// ---------------------------------------------------------------------------

struct MnistData {
  Tensor images;            // [N x rows*cols], scaled to [0, 1]
  std::vector<int> labels;  // N
};

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset, const std::string& what) {
  if (offset + 4 > bytes.size()) {
    throw FormatError(what + ": truncated header at offset " + std::to_string(offset));
  }
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;  // 2051
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;  // 2049

inline MnistData load_mnist_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto img = detail::read_file(images_path);
  const std::string iname = images_path.string();
  const std::uint32_t imagic = detail::read_be32(img, 0, iname);
  if (imagic != kIdxImageMagic) {
    throw FormatError(iname + ": bad magic " + std::to_string(imagic) + " at offset 0 (expected 2051)");
  }
  const std::size_t n = detail::read_be32(img, 4, iname);
  const std::size_t rows = detail::read_be32(img, 8, iname);
  const std::size_t cols = detail::read_be32(img, 12, iname);
  const std::size_t pixels = rows * cols;
  if (n == 0 || pixels == 0) throw FormatError(iname + ": empty image set in header at offset 4");
  if (img.size() < 16 + n * pixels) {
    throw FormatError(iname + ": truncated pixel data at offset " + std::to_string(img.size()) + " (need " +
                      std::to_string(16 + n * pixels) + " bytes)");
  }
  const auto lab = detail::read_file(labels_path);
  const std::string lname = labels_path.string();
  const std::uint32_t lmagic = detail::read_be32(lab, 0, lname);
  if (lmagic != kIdxLabelMagic) {
    throw FormatError(lname + ": bad magic " + std::to_string(lmagic) + " at offset 0 (expected 2049)");
  }
  const std::size_t nl = detail::read_be32(lab, 4, lname);
  if (nl != n) {
    throw FormatError(lname + ": label count " + std::to_string(nl) + " at offset 4 does not match " +
                      std::to_string(n) + " images");
  }
  if (lab.size() < 8 + n) {
    throw FormatError(lname + ": truncated label data at offset " + std::to_string(lab.size()));
  }
  MnistData out{Tensor({n, pixels}), std::vector<int>(n)};
  for (std::size_t i = 0; i < n * pixels; ++i) out.images[i] = static_cast<double>(img[16 + i]) / 255.0;
  for (std::size_t i = 0; i < n; ++i) {
    out.labels[i] = lab[8 + i];
    if (out.labels[i] > 9) throw FormatError(lname + ": label " + std::to_string(out.labels[i]) + " at offset " +
                                             std::to_string(8 + i) + " is not a digit");
  }
  return out;
}

/// Fixed pseudo-random permutation of [0, n).
inline std::vector<std::size_t> permutation_from_seed(std::uint64_t seed, std::size_t n) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(perm[i - 1], perm[pick(rng)]);
  }
  return perm;
}

/// Pixel-by-pixel classification with one fixed pixel permutation. Inputs are
/// scalar (D = 1); only the final step carries a loss.
class PermutedMnist {
 public:
  PermutedMnist(MnistData data, std::vector<std::size_t> permutation)
      : data_(std::move(data)), perm_(std::move(permutation)) {
    std::vector<std::size_t> sorted = perm_;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      if (sorted[i] != i || sorted.size() != data_.images.cols()) {
        throw ConfigError("psmnist: permutation is not a bijection on the pixel indices");
      }
    }
  }

  std::size_t size() const { return data_.labels.size(); }
  std::size_t steps() const { return perm_.size(); }
  const std::vector<std::size_t>& permutation() const { return perm_; }

  /// Pixel sequence of example i in presentation order.
  std::vector<double> sequence(std::size_t i) const {
    std::vector<double> out(perm_.size());
    for (std::size_t t = 0; t < perm_.size(); ++t) out[t] = data_.images.at(i, perm_[t]);
    return out;
  }

  Batch batch(const std::vector<std::size_t>& indices) const {
    const std::size_t B = indices.size(), T = perm_.size();
    Batch batch{Tensor({T, B, 1}), std::vector<int>(T * B, 0), std::vector<bool>(T * B, false)};
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t i = indices[b];
      for (std::size_t t = 0; t < T; ++t) batch.inputs[t * B + b] = data_.images.at(i, perm_[t]);
      batch.targets[(T - 1) * B + b] = data_.labels[i];
      batch.loss_mask[(T - 1) * B + b] = true;
    }
    return batch;
  }

 private:
  MnistData data_;
  std::vector<std::size_t> perm_;
};

inline PermutedMnist make_psmnist(MnistData data, std::uint64_t perm_seed) {
  const std::size_t n = data.images.cols();
  return PermutedMnist(std::move(data), permutation_from_seed(perm_seed, n));
}

// ---------------------------------------------------------------------------
// Character-level corpus
// ---------------------------------------------------------------------------

namespace detail {

/// Splits UTF-8 text into code-point strings.
inline std::vector<std::string> utf8_chars(const std::string& text, const std::string& where) {
  std::vector<std::string> out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    const auto lead = static_cast<unsigned char>(text[i]);
    std::size_t len = lead < 0x80 ? 1 : (lead >> 5) == 0x6 ? 2 : (lead >> 4) == 0xE ? 3 : (lead >> 3) == 0x1E ? 4 : 0;
    if (len == 0 || i + len > text.size()) {
      throw FormatError(where + ": invalid UTF-8 at byte offset " + std::to_string(i));
    }
    for (std::size_t j = 1; j < len; ++j) {
      if ((static_cast<unsigned char>(text[i + j]) & 0xC0) != 0x80) {
        throw FormatError(where + ": invalid UTF-8 at byte offset " + std::to_string(i + j));
      }
    }
    out.push_back(text.substr(i, len));
    i += len;
  }
  return out;
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open corpus '" + path.string() + "'");
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace detail

struct Corpus {
  std::vector<int> ids;
  Vocab vocab;
};

/// Builds a vocabulary by first occurrence.
inline Corpus corpus_from_text(const std::string& text, const std::string& where = "corpus") {
  const auto chars = detail::utf8_chars(text, where);
  if (chars.empty()) throw FormatError(where + ": empty corpus");
  Corpus c;
  c.ids.reserve(chars.size());
  for (const auto& ch : chars) c.ids.push_back(c.vocab.intern(ch));
  return c;
}

inline Corpus load_text_corpus(const std::filesystem::path& path) {
  return corpus_from_text(detail::read_text(path), path.string());
}

/// Encodes text with a fixed vocabulary; unseen characters are an error.
inline std::vector<int> encode_text(const std::string& text, const Vocab& vocab, const std::string& where = "corpus") {
  std::vector<int> ids;
  for (const auto& ch : detail::utf8_chars(text, where)) {
    if (!vocab.contains(ch)) throw FormatError(where + ": character '" + ch + "' not in the training vocabulary");
    ids.push_back(vocab.id(ch));
  }
  if (ids.empty()) throw FormatError(where + ": empty corpus");
  return ids;
}

/// Truncated-BPTT windows over B contiguous streams of the corpus.
/// Window w covers stream positions [w*window, (w+1)*window) with next-char
/// targets; all steps carry a loss.
class TbpttStream {
 public:
  TbpttStream(std::vector<int> ids, std::size_t vocab_size, std::size_t batch_size, std::size_t window = 150)
      : ids_(std::move(ids)), vocab_size_(vocab_size), batch_(batch_size), window_(window) {
    if (batch_ == 0 || window_ == 0) throw ConfigError("iter_tbptt: batch size and window must be >= 1");
    stream_len_ = ids_.size() / batch_;
    if (stream_len_ < window_ + 1) {
      throw ConfigError("iter_tbptt: corpus of " + std::to_string(ids_.size()) + " symbols is too short for " +
                        std::to_string(batch_) + " streams of window " + std::to_string(window_));
    }
  }

  /// floor((len / B - 1) / window)
  std::size_t window_count() const { return (stream_len_ - 1) / window_; }
  std::size_t stream_length() const { return stream_len_; }

  Batch window(std::size_t w) const {
    if (w >= window_count()) throw IndexError("iter_tbptt: window " + std::to_string(w) + " out of range");
    const std::size_t T = window_, B = batch_, V = vocab_size_;
    Batch batch{Tensor({T, B, V}), std::vector<int>(T * B), std::vector<bool>(T * B, true)};
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t base = b * stream_len_ + w * window_;
      for (std::size_t t = 0; t < T; ++t) {
        batch.inputs[(t * B + b) * V + static_cast<std::size_t>(ids_[base + t])] = 1.0;
        batch.targets[t * B + b] = ids_[base + t + 1];
      }
    }
    return batch;
  }

 private:
  std::vector<int> ids_;
  std::size_t vocab_size_, batch_, window_, stream_len_ = 0;
};

inline TbpttStream iter_tbptt(std::vector<int> ids, std::size_t vocab_size, std::size_t batch_size,
                              std::size_t window = 150) {
  return TbpttStream(std::move(ids), vocab_size, batch_size, window);
}

}  // namespace nrulab
