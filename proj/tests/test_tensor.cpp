#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "nrulab/tensor.hpp"

using nrulab::Tensor;

TEST(Tensor, ShapeAndSize) {
  Tensor t({2, 3});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  for (double v : t.values()) EXPECT_EQ(v, 0.0);
}

TEST(Tensor, FillConstructor) {
  Tensor t({4}, 2.5);
  for (double v : t.values()) EXPECT_EQ(v, 2.5);
  EXPECT_EQ(t.rows(), 1u);
  EXPECT_EQ(t.cols(), 4u);
}

TEST(Tensor, RejectsMismatchedData) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), nrulab::DimensionError);
}

TEST(Tensor, RejectsZeroDimension) { EXPECT_THROW(Tensor({0, 3}), nrulab::DimensionError); }

TEST(Tensor, MatrixLiteralIsRowMajor) {
  Tensor m = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
  EXPECT_EQ(m.at(0, 2), 3.0);
  EXPECT_EQ(m.at(1, 0), 4.0);
  EXPECT_EQ(m[4], 5.0);
  EXPECT_THROW(Tensor::matrix({{1, 2}, {3}}), nrulab::DimensionError);
}

TEST(Tensor, ItemRequiresSingleElement) {
  EXPECT_EQ(Tensor({1}, 7.0).item(), 7.0);
  EXPECT_THROW(Tensor({2}).item(), nrulab::ContractError);
}

TEST(Tensor, Reshape) {
  Tensor m = Tensor::matrix({{1, 2}, {3, 4}});
  Tensor v = m.reshaped({4});
  EXPECT_EQ(v.values(), m.values());
  EXPECT_THROW(m.reshaped({3}), nrulab::DimensionError);
}

TEST(Tensor, FiniteAndNorm) {
  Tensor t = Tensor::vector({3, 4});
  EXPECT_TRUE(t.all_finite());
  EXPECT_EQ(t.squared_norm(), 25.0);
  t[0] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_FALSE(t.all_finite());
}

TEST(Tensor, BitwiseEquality) {
  Tensor a = Tensor::vector({0.0, 1.0});
  Tensor b = Tensor::vector({-0.0, 1.0});
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(nrulab::bitwise_equal(a, b));
  Tensor n1 = Tensor::vector({std::numeric_limits<double>::quiet_NaN()});
  Tensor n2 = n1;
  EXPECT_TRUE(nrulab::bitwise_equal(n1, n2));
  EXPECT_FALSE(nrulab::bitwise_equal(a, a.reshaped({1, 2})));
}
