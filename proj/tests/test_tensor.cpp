// Copyright 2026 The unilora Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace unilora;
using namespace unilora::testing;

TEST(Matrix, RejectsWrongDataLength) {
  EXPECT_THROW(Matrix<double>(2, 3, std::vector<double>(5)), Error);
  Matrix<double> m(2, 3, std::vector<double>(6, 1.0));
  EXPECT_EQ(m.size(), 6u);
  EXPECT_EQ(m.byte_size(), 6 * sizeof(double));
}

TEST(Matrix, SliceAndSetRows) {
  const auto m = random_matrix(5, 3, 1);
  const auto s = m.slice_rows(1, 3);
  EXPECT_EQ(s.rows(), 3u);
  EXPECT_EQ(s(0, 0), m(1, 0));
  Matrix<double> z(5, 3);
  z.set_rows(1, s);
  EXPECT_EQ(z(3, 2), m(3, 2));
  EXPECT_THROW(m.slice_rows(4, 2), Error);
  EXPECT_THROW(z.set_rows(4, s), Error);
}

TEST(Matmul, IdentityTimesM) {
  const auto m = random_matrix(3, 3, 2);
  EXPECT_EQ(matmul(Matrix<double>::identity(3), m), m);
}

TEST(Matmul, ScalarProduct) {
  const Matrix<double> a(1, 1, {2.0}), b(1, 1, {3.0});
  EXPECT_EQ(matmul(a, b)(0, 0), 6.0);
}

TEST(Matmul, MatchesTripleLoop) {
  const auto a = random_matrix(5, 4, 3), b = random_matrix(4, 3, 4);
  Matrix<double> ref(5, 3);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 4; ++k) ref(i, j) += a(i, k) * b(k, j);
  EXPECT_LE(max_abs_diff(matmul(a, b), ref), 1e-12);
}

TEST(Matmul, TransposedVariantsAgree) {
  const auto a = random_matrix(6, 5, 5), b = random_matrix(7, 5, 6), c = random_matrix(6, 4, 7);
  EXPECT_LE(max_abs_diff(matmul_nt(a, b), naive_xwt(a, b)), 1e-12);
  EXPECT_LE(max_abs_diff(matmul_tn(a, c), matmul(transpose(a), c)), 1e-12);
}

TEST(Matmul, DimensionMismatch) {
  EXPECT_THROW(matmul(random_matrix(2, 3, 1), random_matrix(2, 3, 1)), Error);
  EXPECT_THROW(matmul_nt(random_matrix(2, 3, 1), random_matrix(2, 4, 1)), Error);
  EXPECT_THROW(matmul_tn(random_matrix(2, 3, 1), random_matrix(3, 3, 1)), Error);
}

TEST(Matmul, NonFiniteIsAnError) {
  auto a = random_matrix(2, 2, 1);
  a(0, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(matmul(a, random_matrix(2, 2, 2)), Error);
  Matrix<double> big(1, 1, {1e200});
  EXPECT_THROW(matmul(big, big), Error);
}

TEST(Matmul, IdentityAssociativityIsExact) {
  const auto a = random_matrix(4, 5, 8), b = random_matrix(5, 3, 9);
  EXPECT_EQ(matmul(matmul(a, Matrix<double>::identity(5)), b), matmul(a, b));
}

TEST(Matmul, Deterministic) {
  const auto a = random_matrix(9, 17, 10), b = random_matrix(17, 11, 11);
  EXPECT_EQ(matmul(a, b), matmul(a, b));
}

TEST(Softmax, UniformRow) {
  const auto y = softmax_rows(Matrix<double>(1, 4));
  for (double v : y.flat()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  const auto y = softmax_rows(Matrix<double>(1, 2, {1000.0, 0.0}));
  EXPECT_NEAR(y(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(y(0, 1), 0.0, 1e-12);
}

TEST(Softmax, MatchesDirectFormula) {
  const auto x = random_matrix(3, 9, 12, 2.0);
  const auto y = softmax_rows(x, 0.7);
  for (std::size_t i = 0; i < 3; ++i) {
    long double z = 0;
    for (std::size_t j = 0; j < 9; ++j) z += std::exp(0.7L * x(i, j));
    double sum = 0;
    for (std::size_t j = 0; j < 9; ++j) {
      EXPECT_NEAR(y(i, j), static_cast<double>(std::exp(0.7L * x(i, j)) / z), 1e-12);
      sum += y(i, j);
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(Softmax, ShiftInvariant) {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_matrix(4, 6, rng.next_u64(), 3.0);
    auto shifted = x;
    for (std::size_t i = 0; i < 4; ++i) {
      const double c = rng.normal() * 50;
      for (std::size_t j = 0; j < 6; ++j) shifted(i, j) += c;
    }
    EXPECT_LE(max_abs_diff(softmax_rows(x), softmax_rows(shifted)), 1e-12);
  }
}

TEST(Softmax, RejectsNonFinite) {
  Matrix<double> x(1, 2, {std::numeric_limits<double>::infinity(), 0.0});
  EXPECT_THROW(softmax_rows(x), Error);
}

TEST(Softmax, BackwardMatchesFiniteDifferences) {
  auto x = random_matrix(3, 5, 14);
  const auto up = random_matrix(3, 5, 15);
  const double scale = 0.8;
  auto loss = [&] {
    const auto y = softmax_rows(x, scale);
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y.storage()[i] * up.storage()[i];
    return s;
  };
  const auto dx = softmax_rows_backward(softmax_rows(x, scale), up, scale);
  EXPECT_LE(max_rel_err(dx.flat(), central_differences(x.flat(), loss)), 1e-6);
}

TEST(RmsNorm, UnitRowStaysUnit) {
  const std::vector<double> gain(4, 1.0);
  const auto y = rms_norm(Matrix<double>(1, 4, {1, 1, 1, 1}), std::span<const double>(gain), 0.0);
  for (double v : y.flat()) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(RmsNorm, ZeroRowStaysZero) {
  const std::vector<double> gain(3, 2.0);
  const auto y = rms_norm(Matrix<double>(1, 3), std::span<const double>(gain), 1e-6);
  for (double v : y.flat()) EXPECT_EQ(v, 0.0);
}

TEST(RmsNorm, MatchesFormula) {
  const auto x = random_matrix(2, 7, 16);
  std::vector<double> gain(7);
  for (std::size_t j = 0; j < 7; ++j) gain[j] = 0.5 + 0.1 * static_cast<double>(j);
  const auto y = rms_norm(x, std::span<const double>(gain), 1e-5);
  for (std::size_t i = 0; i < 2; ++i) {
    double ms = 0;
    for (std::size_t j = 0; j < 7; ++j) ms += x(i, j) * x(i, j) / 7.0;
    for (std::size_t j = 0; j < 7; ++j) EXPECT_NEAR(y(i, j), x(i, j) / std::sqrt(ms + 1e-5) * gain[j], 1e-12);
  }
}

TEST(RmsNorm, GainLengthMismatch) {
  const std::vector<double> gain(3, 1.0);
  EXPECT_THROW(rms_norm(random_matrix(1, 4, 1), std::span<const double>(gain), 1e-6), Error);
}

TEST(RmsNorm, BackwardMatchesFiniteDifferences) {
  auto x = random_matrix(3, 6, 17);
  const auto up = random_matrix(3, 6, 18);
  std::vector<double> gain(6);
  for (std::size_t j = 0; j < 6; ++j) gain[j] = 1.0 + 0.2 * static_cast<double>(j);
  auto loss = [&] {
    const auto y = rms_norm(x, std::span<const double>(gain), 1e-6);
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y.storage()[i] * up.storage()[i];
    return s;
  };
  const auto dx = rms_norm_backward(x, std::span<const double>(gain), 1e-6, up);
  EXPECT_LE(max_rel_err(dx.flat(), central_differences(x.flat(), loss)), 1e-6);
}

TEST(Silu, ForwardAndBackward) {
  auto x = random_matrix(2, 5, 19, 2.0);
  const auto y = silu(x);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x.storage()[i];
    EXPECT_NEAR(y.storage()[i], v / (1 + std::exp(-v)), 1e-15);
  }
  const auto up = random_matrix(2, 5, 20);
  auto loss = [&] {
    const auto s = silu(x);
    double t = 0;
    for (std::size_t i = 0; i < s.size(); ++i) t += s.storage()[i] * up.storage()[i];
    return t;
  };
  EXPECT_LE(max_rel_err(silu_backward(x, up).flat(), central_differences(x.flat(), loss)), 1e-6);
}

TEST(Embedding, GatherAndScatter) {
  const auto table = random_matrix(6, 3, 21);
  const std::vector<TokenId> toks{4, 1, 4};
  const auto e = embedding(table, std::span<const TokenId>(toks));
  EXPECT_EQ(e(0, 2), table(4, 2));
  EXPECT_EQ(e(1, 0), table(1, 0));
  const auto dy = random_matrix(3, 3, 22);
  const auto g = embedding_backward<double>(6, std::span<const TokenId>(toks), dy);
  EXPECT_DOUBLE_EQ(g(4, 1), dy(0, 1) + dy(2, 1));
  EXPECT_EQ(g(0, 0), 0.0);
  const std::vector<TokenId> bad{6};
  EXPECT_THROW(embedding(table, std::span<const TokenId>(bad)), Error);
}

TEST(Embedding, BackwardMatchesFiniteDifferences) {
  auto table = random_matrix(5, 4, 23);
  const std::vector<TokenId> toks{0, 3, 3, 2};
  const auto up = random_matrix(4, 4, 24);
  auto loss = [&] {
    const auto e = embedding(table, std::span<const TokenId>(toks));
    double s = 0;
    for (std::size_t i = 0; i < e.size(); ++i) s += e.storage()[i] * up.storage()[i];
    return s;
  };
  const auto g = embedding_backward<double>(5, std::span<const TokenId>(toks), up);
  EXPECT_LE(max_rel_err(g.flat(), central_differences(table.flat(), loss)), 1e-6);
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  const std::vector<TokenId> labels{kIgnoreLabel, 1, 3};
  const auto r = cross_entropy_shifted(Matrix<double>(3, 4), std::span<const TokenId>(labels), kIgnoreLabel);
  EXPECT_NEAR(r.loss, std::log(4.0), 1e-15);
}

TEST(CrossEntropy, PerfectPredictionIsZero) {
  Matrix<double> logits(3, 4);
  const std::vector<TokenId> labels{0, 2, 1};
  logits(0, 2) = 1e9;
  logits(1, 1) = 1e9;
  const auto r = cross_entropy_shifted(logits, std::span<const TokenId>(labels), kIgnoreLabel);
  EXPECT_NEAR(r.loss, 0.0, 1e-12);
}

TEST(CrossEntropy, MatchesDirectFormulaAndFiniteDifferences) {
  auto logits = random_matrix(5, 6, 25, 1.5);
  const std::vector<TokenId> labels{3, 1, kIgnoreLabel, 5, 0};
  const auto r = cross_entropy_shifted(logits, std::span<const TokenId>(labels), kIgnoreLabel);
  double ref = 0;
  int n = 0;
  for (std::size_t p = 0; p + 1 < 5; ++p) {
    if (labels[p + 1] == kIgnoreLabel) continue;
    double z = 0;
    for (std::size_t j = 0; j < 6; ++j) z += std::exp(logits(p, j));
    ref += std::log(z) - logits(p, static_cast<std::size_t>(labels[p + 1]));
    ++n;
  }
  EXPECT_NEAR(r.loss, ref / n, 1e-12);
  auto loss = [&] { return cross_entropy_shifted(logits, std::span<const TokenId>(labels), kIgnoreLabel).loss; };
  EXPECT_LE(max_rel_err(r.dlogits.flat(), central_differences(logits.flat(), loss)), 1e-6);
  for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(r.dlogits(4, j), 0.0);  // last row predicts nothing
}

TEST(CrossEntropy, Errors) {
  const std::vector<TokenId> all_ignored{1, kIgnoreLabel, kIgnoreLabel};
  EXPECT_THROW(cross_entropy_shifted(Matrix<double>(3, 4), std::span<const TokenId>(all_ignored), kIgnoreLabel), Error);
  const std::vector<TokenId> one{1};
  EXPECT_THROW(cross_entropy_shifted(Matrix<double>(1, 4), std::span<const TokenId>(one), kIgnoreLabel), Error);
  const std::vector<TokenId> out_of_vocab{0, 9};
  EXPECT_THROW(cross_entropy_shifted(Matrix<double>(2, 4), std::span<const TokenId>(out_of_vocab), kIgnoreLabel), Error);
}

TEST(Argmax, PicksFirstMaximum) {
  const std::vector<double> v{1, 3, 3, 2};
  EXPECT_EQ(argmax(std::span<const double>(v)), 1u);
  EXPECT_THROW(argmax(std::span<const double>()), Error);
}

TEST(Precision, SingleTracksDouble) {
  const auto a = random_matrix(8, 8, 26), b = random_matrix(8, 8, 27);
  const auto d = matmul(a, b);
  const auto s = matmul(a.cast<float>(), b.cast<float>());
  EXPECT_LE(max_rel_diff(s.cast<double>(), d), 1e-5);
}
