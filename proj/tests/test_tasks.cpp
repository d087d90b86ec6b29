#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "nrulab/tasks.hpp"
#include "nrulab/training.hpp"
#include "test_util.hpp"

using namespace nrulab;

namespace {

std::vector<int> input_symbols(const Batch& b, std::size_t row) {
  std::vector<int> out;
  for (std::size_t t = 0; t < b.steps(); ++t) {
    const double* x = b.inputs.data() + (t * b.batch_size() + row) * b.features();
    out.push_back(static_cast<int>(std::max_element(x, x + b.features()) - x));
  }
  return out;
}

void expect_valid(const Batch& b) {
  const std::size_t D = b.features();
  ASSERT_EQ(b.targets.size(), b.steps() * b.batch_size());
  ASSERT_EQ(b.loss_mask.size(), b.targets.size());
  for (std::size_t i = 0; i < b.steps() * b.batch_size(); ++i) {
    double s = 0.0;
    for (std::size_t d = 0; d < D; ++d) {
      const double v = b.inputs[i * D + d];
      EXPECT_TRUE(v == 0.0 || v == 1.0);
      s += v;
    }
    EXPECT_EQ(s, 1.0);
    EXPECT_GE(b.targets[i], 0);
    EXPECT_LT(b.targets[i], static_cast<int>(D));
  }
}

}  // namespace

TEST(Copy, LayoutForT100) {
  Rng rng(1);
  Batch b = gen_copy(100, 8, 10, 4, rng);
  expect_valid(b);
  EXPECT_EQ(b.steps(), 120u);
  EXPECT_EQ(b.features(), 10u);
  const SymbolLayout sym{8, false};
  for (std::size_t r = 0; r < 4; ++r) {
    auto in = input_symbols(b, r);
    EXPECT_EQ(in[109], sym.marker());
    for (std::size_t t = 0; t < 120; ++t) {
      if (t < 10) {
        EXPECT_LT(in[t], 8);
        EXPECT_EQ(b.target(110 + t, r), in[t]);
      } else if (t != 109) {
        EXPECT_EQ(in[t], sym.blank());
      }
      if (t < 110) EXPECT_EQ(b.target(t, r), sym.blank());
      EXPECT_TRUE(b.masked(t, r));
    }
  }
}

TEST(Copy, SymbolsDrawnWithReplacement) {
  Rng rng(2);
  Batch b = gen_copy(20, 8, 10, 200, rng);
  bool repeat = false;
  std::vector<int> hist(8);
  for (std::size_t r = 0; r < 200; ++r) {
    auto in = input_symbols(b, r);
    std::vector<int> first(in.begin(), in.begin() + 10);
    std::sort(first.begin(), first.end());
    repeat = repeat || std::adjacent_find(first.begin(), first.end()) != first.end();
    for (int s : first) ++hist[s];
  }
  EXPECT_TRUE(repeat);
  for (int h : hist) EXPECT_GT(h, 150);
}

TEST(Copy, InvalidSizes) {
  Rng rng(3);
  EXPECT_THROW(gen_copy(10, 8, 10, 1, rng), ConfigError);
  EXPECT_THROW(gen_copy(100, 0, 10, 1, rng), ConfigError);
  EXPECT_THROW(gen_copy(100, 8, 10, 0, rng), ConfigError);
}

TEST(Copy, Reproducible) {
  Rng a(9), b(9);
  Batch x = gen_copy(30, 8, 10, 5, a), y = gen_copy(30, 8, 10, 5, b);
  EXPECT_TRUE(bitwise_equal(x.inputs, y.inputs));
  EXPECT_EQ(x.targets, y.targets);
  EXPECT_EQ(x.loss_mask, y.loss_mask);
}

TEST(VariableCopy, DegenerateLag) {
  Rng rng(4);
  std::vector<int> lags;
  Batch b = gen_copy_variable(10, 8, 10, 6, rng, &lags);
  expect_valid(b);
  EXPECT_EQ(b.steps(), 30u);
  for (int l : lags) EXPECT_EQ(l, 10);
  for (bool m : b.loss_mask) EXPECT_TRUE(m);
}

TEST(VariableCopy, PaddingAndTargets) {
  Rng rng(5);
  std::vector<int> lags;
  Batch b = gen_copy_variable(60, 8, 10, 16, rng, &lags);
  expect_valid(b);
  const SymbolLayout sym{8, true};
  const int longest = *std::max_element(lags.begin(), lags.end());
  EXPECT_EQ(b.steps(), static_cast<std::size_t>(longest + 20));
  for (std::size_t r = 0; r < 16; ++r) {
    const std::size_t len = static_cast<std::size_t>(lags[r] + 20);
    auto in = input_symbols(b, r);
    EXPECT_EQ(in[static_cast<std::size_t>(lags[r] + 9)], sym.marker());
    std::size_t data_targets = 0;
    for (std::size_t t = 0; t < b.steps(); ++t) {
      EXPECT_EQ(b.masked(t, r), t < len);
      if (t >= len) EXPECT_EQ(in[t], sym.pad());
      if (b.masked(t, r) && b.target(t, r) < 8) ++data_targets;
    }
    EXPECT_EQ(data_targets, 10u);
    for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(b.target(len - 10 + i, r), in[i]);
  }
}

TEST(VariableCopy, LagMeanMonteCarlo) {
  Rng rng(6);
  double sum = 0.0;
  std::size_t count = 0;
  std::vector<int> lags;
  while (count < 10000) {
    gen_copy_variable(100, 8, 10, 100, rng, &lags);
    for (int l : lags) {
      EXPECT_GE(l, 10);
      EXPECT_LE(l, 100);
      sum += l;
    }
    count += lags.size();
  }
  const double mean = sum / static_cast<double>(count);
  EXPECT_NEAR(mean, 55.0, 0.02 * 55.0);
}

TEST(Denoise, Layout) {
  Rng rng(7);
  Batch b = gen_denoise(100, 8, 10, 8, rng);
  expect_valid(b);
  EXPECT_EQ(b.steps(), 111u);
  const SymbolLayout sym{8, false};
  for (std::size_t r = 0; r < 8; ++r) {
    auto in = input_symbols(b, r);
    EXPECT_EQ(in[100], sym.marker());
    std::vector<int> data;
    std::size_t last = 0;
    bool first = true;
    for (std::size_t t = 0; t < 111; ++t) {
      EXPECT_TRUE(b.masked(t, r));
      if (in[t] < 8) {
        EXPECT_LT(t, 100u);
        if (!first) EXPECT_GT(t, last);
        first = false;
        last = t;
        data.push_back(in[t]);
      }
    }
    ASSERT_EQ(data.size(), 10u);
    for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(b.target(101 + i, r), data[i]);
  }
  EXPECT_THROW(gen_denoise(5, 8, 10, 1, rng), ConfigError);
}

TEST(BaselineCe, KnownValues) {
  EXPECT_NEAR(baseline_ce(100, 8, 10), 0.1733, 5e-5);
  EXPECT_NEAR(baseline_ce(200, 8, 10), 0.0945, 5e-5);
  EXPECT_EQ(baseline_ce(100, 8, 0), 0.0);
}

TEST(Mnist, ParsesIdx) {
  const auto dir = nrulab::testutil::scratch_dir("idx");
  nrulab::testutil::write_idx(dir / "img", dir / "lab", {{0, 128, 255, 7}, {255, 255, 0, 0}, {1, 2, 3, 4}}, {3, 9, 0}, 2, 2);
  std::string raw;
  {
    std::ifstream in(dir / "img", std::ios::binary);
    raw.assign(std::istreambuf_iterator<char>(in), {});
  }
  EXPECT_EQ(detail::read_be32(std::vector<unsigned char>(raw.begin(), raw.end()), 0, "img"), 2051u);
  MnistData d = load_mnist_idx(dir / "img", dir / "lab");
  EXPECT_EQ(d.images.rows(), 3u);
  EXPECT_EQ(d.images.cols(), 4u);
  EXPECT_EQ(d.labels, (std::vector<int>{3, 9, 0}));
  EXPECT_EQ(d.images.at(0, 1), 128.0 / 255.0);
  for (double v : d.images.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Mnist, RejectsBadMagicAndTruncation) {
  const auto dir = nrulab::testutil::scratch_dir("idx_bad");
  nrulab::testutil::write_idx(dir / "img", dir / "lab", {{1, 2, 3, 4}}, {1}, 2, 2);
  // Labels passed as images: wrong magic.
  try {
    load_mnist_idx(dir / "lab", dir / "lab");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("offset 0"), std::string::npos) << e.what();
  }
  std::filesystem::resize_file(dir / "img", 18);
  try {
    load_mnist_idx(dir / "img", dir / "lab");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos) << e.what();
  }
  EXPECT_THROW(load_mnist_idx(dir / "missing", dir / "lab"), FormatError);
}

TEST(PsMnist, PermutationProperties) {
  auto a = permutation_from_seed(3, 784), b = permutation_from_seed(3, 784);
  EXPECT_EQ(a, b);
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 784; ++i) EXPECT_EQ(sorted[i], i);
  EXPECT_NE(a, permutation_from_seed(4, 784));
}

TEST(PsMnist, BatchLayout) {
  MnistData d{Tensor({2, 4}, std::vector<double>{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8}), {7, 2}};
  PermutedMnist identity(d, {0, 1, 2, 3});
  EXPECT_EQ(identity.sequence(1), (std::vector<double>{0.5, 0.6, 0.7, 0.8}));
  PermutedMnist shuffled(d, {3, 1, 0, 2});
  EXPECT_EQ(shuffled.sequence(0), (std::vector<double>{0.4, 0.2, 0.1, 0.3}));
  Batch b = shuffled.batch({1, 0});
  EXPECT_EQ(b.features(), 1u);
  EXPECT_EQ(b.steps(), 4u);
  for (std::size_t t = 0; t < 4; ++t) {
    EXPECT_EQ(b.masked(t, 0), t == 3);
    EXPECT_EQ(b.masked(t, 1), t == 3);
  }
  EXPECT_EQ(b.target(3, 0), 2);
  EXPECT_EQ(b.target(3, 1), 7);
  EXPECT_EQ(b.inputs[0], 0.8);  // t=0, row 0 is example 1, pixel 3
  EXPECT_THROW(PermutedMnist(d, {0, 1, 1, 3}), ConfigError);
}

TEST(Corpus, FirstOccurrenceIds) {
  Corpus c = corpus_from_text("aba");
  EXPECT_EQ(c.vocab.size(), 2u);
  EXPECT_EQ(c.ids, (std::vector<int>{0, 1, 0}));
  EXPECT_THROW(corpus_from_text(""), FormatError);
  EXPECT_THROW(encode_text("abc", c.vocab), FormatError);
}

TEST(Corpus, Utf8) {
  Corpus c = corpus_from_text("h\xC3\xA9h");
  EXPECT_EQ(c.vocab.size(), 2u);
  EXPECT_EQ(c.ids, (std::vector<int>{0, 1, 0}));
  EXPECT_THROW(corpus_from_text("\xC3"), FormatError);
}

TEST(Tbptt, WindowsAndTargets) {
  std::vector<int> ids(1003);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i % 7);
  TbpttStream s = iter_tbptt(ids, 7, 4, 20);
  EXPECT_EQ(s.window_count(), (1003 / 4 - 1) / 20);
  const std::size_t len = 1003 / 4;
  for (std::size_t w = 0; w < s.window_count(); ++w) {
    Batch b = s.window(w);
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t t = 0; t < 20; ++t) {
        const std::size_t pos = r * len + w * 20 + t;
        EXPECT_EQ(b.inputs[(t * 4 + r) * 7 + static_cast<std::size_t>(ids[pos])], 1.0);
        EXPECT_EQ(b.target(t, r), ids[pos + 1]);
        EXPECT_TRUE(b.masked(t, r));
        // Next-char targets are the inputs shifted by one within the stream.
        if (t + 1 < 20) EXPECT_EQ(b.inputs[((t + 1) * 4 + r) * 7 + static_cast<std::size_t>(b.target(t, r))], 1.0);
      }
  }
  EXPECT_THROW(s.window(s.window_count()), IndexError);
  EXPECT_THROW(iter_tbptt({1, 2, 3}, 4, 2, 5), ConfigError);
}

TEST(TaskSource, LoadsCorpusFromDataDir) {
  const auto dir = nrulab::testutil::scratch_dir("corpus");
  nrulab::testutil::write_text(dir / "ptb" / "ptb.char.train.txt", nrulab::testutil::synthetic_text(5000, 1));
  TaskSpec spec;
  spec.kind = TaskKind::CharLm;
  spec.window = 50;
  TaskSource src(spec, 4, dir);
  EXPECT_TRUE(src.stateful());
  EXPECT_EQ(src.input_size(), src.num_classes());
  Rng rng(0);
  Batch first = src.next_train(rng);
  EXPECT_TRUE(src.pass_started());
  EXPECT_EQ(first.steps(), 50u);
  src.next_train(rng);
  EXPECT_FALSE(src.pass_started());
}
