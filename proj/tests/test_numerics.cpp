#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <set>

#include "test_util.hpp"

using namespace spdcfl;
using spdcfl::testing::max_abs_diff;
using spdcfl::testing::naive_matmul;
using spdcfl::testing::random_matrix;

TEST(Matrix, ShapeAndIndexing) {
  Matrix m{{1, 2, 3}, {4, 5, 6}};
  EXPECT_EQ(m.rows(), 2u);
  EXPECT_EQ(m.cols(), 3u);
  EXPECT_EQ(m(1, 2), 6.0);
  EXPECT_EQ(transpose(m)(2, 1), 6.0);
  EXPECT_THROW((Matrix{{1, 2}, {3}}), ShapeError);
}

TEST(Matrix, ElementwiseOpsRejectShapeMismatch) {
  Matrix a(2, 2, 1.0), b(2, 3, 1.0);
  EXPECT_THROW(a += b, ShapeError);
  EXPECT_THROW(hadamard(a, b), ShapeError);
}

TEST(Matmul, MatchesTripleLoopBitForBit) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 1 + rng.below(9), k = 1 + rng.below(9), n = 1 + rng.below(9);
    const Matrix a = random_matrix(m, k, rng), b = random_matrix(k, n, rng);
    EXPECT_EQ(matmul(a, b), naive_matmul(a, b));
    EXPECT_EQ(matmul_tn(transpose(a), b), naive_matmul(a, b));
    EXPECT_EQ(matmul_nt(a, transpose(b)), naive_matmul(a, b));
  }
}

TEST(Matmul, HandExample) {
  const Matrix a{{1, 2}, {3, 4}};
  const Matrix b{{5, 6}, {7, 8}};
  EXPECT_EQ(matmul(a, b), (Matrix{{19, 22}, {43, 50}}));
}

TEST(Matmul, InnerDimensionMismatchThrows) {
  EXPECT_THROW(matmul(Matrix(2, 3), Matrix(2, 3)), ShapeError);
  EXPECT_THROW(matmul_tn(Matrix(2, 3), Matrix(3, 3)), ShapeError);
  EXPECT_THROW(matmul_nt(Matrix(2, 3), Matrix(2, 4)), ShapeError);
}

TEST(Matmul, CountsMultiplies) {
  multiply_counter() = 0;
  matmul(Matrix(3, 4), Matrix(4, 5));
  EXPECT_EQ(multiply_counter(), 60u);
  matmul_tn(Matrix(4, 3), Matrix(4, 2));
  EXPECT_EQ(multiply_counter(), 60u + 24u);
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, DerivedStreamsIgnoreParentConsumption) {
  Rng a(7), b(7);
  for (int i = 0; i < 13; ++i) a.next_u64();
  Rng ca = a.derive({3, 4}), cb = b.derive({3, 4});
  for (int i = 0; i < 20; ++i) EXPECT_EQ(ca.next_u64(), cb.next_u64());
  Rng other = b.derive({4, 3});
  EXPECT_NE(b.derive({3, 4}).next_u64(), other.next_u64());
}

TEST(Rng, UniformAndNormalMoments) {
  Rng rng(5);
  double su = 0.0, sn = 0.0, sn2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    su += u;
    const double z = rng.normal();
    sn += z;
    sn2 += z * z;
  }
  EXPECT_NEAR(su / n, 0.5, 0.005);
  EXPECT_NEAR(sn / n, 0.0, 0.01);
  EXPECT_NEAR(sn2 / n, 1.0, 0.02);
}

TEST(Rng, ShuffleIsAPermutation) {
  Rng rng(9);
  std::vector<int> v(100);
  std::iota(v.begin(), v.end(), 0);
  rng.shuffle(std::span<int>(v));
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sorted[i], i);
  EXPECT_FALSE(std::is_sorted(v.begin(), v.end()));
}

TEST(Rng, BelowCoversRange) {
  Rng rng(1);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 1000; ++i) {
    const auto x = rng.below(7);
    ASSERT_LT(x, 7u);
    seen.insert(x);
  }
  EXPECT_EQ(seen.size(), 7u);
}

TEST(GaussianMatrix, RejectsNonPositiveSigma) {
  Rng rng(0);
  EXPECT_THROW(gaussian_matrix(2, 2, 0.0, rng), ParameterError);
}

TEST(SoftmaxCrossEntropy, GradientMatchesFiniteDifference) {
  Rng rng(3);
  Matrix logits = random_matrix(5, 4, rng);
  const std::vector<int> labels{0, 3, 1, 1, 2};
  const auto lg = softmax_cross_entropy(logits, labels);
  const Matrix num = spdcfl::testing::numeric_grad(logits, [&] { return softmax_cross_entropy(logits, labels).loss; });
  EXPECT_LT(spdcfl::testing::relative_error(lg.grad, num), 1e-7);
}

TEST(SoftmaxCrossEntropy, UniformLogitsGiveLogC) {
  const Matrix logits(3, 4, 0.0);
  const std::vector<int> labels{0, 1, 2};
  EXPECT_NEAR(softmax_cross_entropy(logits, labels).loss, std::log(4.0), 1e-15);
}

TEST(SoftmaxCrossEntropy, LabelOutOfRangeThrows) {
  const std::vector<int> labels{5};
  EXPECT_THROW(softmax_cross_entropy(Matrix(1, 3), labels), InputError);
}

TEST(Svd, ReconstructsFullRank) {
  Rng rng(21);
  for (auto [m, n] : {std::pair{6, 4}, std::pair{3, 7}, std::pair{5, 5}}) {
    const Matrix a = random_matrix(m, n, rng);
    const auto svd = svd_truncate(a, std::min(m, n));
    EXPECT_LT(max_abs_diff(reconstruct(svd), a), 1e-12);
    EXPECT_TRUE(std::is_sorted(svd.sigma.rbegin(), svd.sigma.rend()));
    const Matrix utu = matmul_tn(svd.u, svd.u);
    const Matrix vtv = matmul_tn(svd.v, svd.v);
    EXPECT_LT(max_abs_diff(utu, Matrix::identity(utu.rows())), 1e-12);
    EXPECT_LT(max_abs_diff(vtv, Matrix::identity(vtv.rows())), 1e-12);
  }
}

TEST(Svd, TruncationErrorIsTailEnergy) {
  Rng rng(22);
  const Matrix a = random_matrix(8, 5, rng);
  const auto full = svd_truncate(a, 5);
  for (std::size_t r = 1; r <= 5; ++r) {
    const double err = frobenius_norm(a - reconstruct(svd_truncate(a, r)));
    double tail = 0.0;
    for (std::size_t k = r; k < 5; ++k) tail += full.sigma[k] * full.sigma[k];
    EXPECT_NEAR(err, std::sqrt(tail), 1e-10);
  }
}

TEST(Svd, RankOneHandCase) {
  const Matrix a{{3, 0}, {0, 0}};
  const auto svd = svd_truncate(a, 1);
  EXPECT_NEAR(svd.sigma[0], 3.0, 1e-15);
  EXPECT_LT(max_abs_diff(reconstruct(svd), a), 1e-15);
}

TEST(Svd, RankOutOfRangeThrows) {
  EXPECT_THROW(svd_truncate(Matrix(3, 2), 0), ParameterError);
  EXPECT_THROW(svd_truncate(Matrix(3, 2), 3), ParameterError);
}
