#include <gtest/gtest.h>

#include <sstream>

#include "test_util.hpp"

using namespace spdcfl;
using spdcfl::testing::max_abs_diff;
using spdcfl::testing::random_matrix;

namespace {

std::size_t numeric_rank(const Matrix& m, double rel = 1e-10) {
  const auto svd = svd_truncate(m, std::min(m.rows(), m.cols()));
  std::size_t r = 0;
  for (double s : svd.sigma)
    if (s > rel * svd.sigma[0]) ++r;
  return r;
}

Matrix random_rank_r(std::size_t rows, std::size_t cols, std::size_t r, Rng& rng) {
  return matmul(random_matrix(rows, r, rng), random_matrix(r, cols, rng));
}

}  // namespace

TEST(InitAdapter, FreshAdapterIsZeroDelta) {
  Rng rng(1);
  for (auto [h1, h2, r] : {std::tuple{4, 6, 2}, std::tuple{8, 3, 3}, std::tuple{6, 32, 8}}) {
    const auto a = init_adapter(h1, h2, r, 0.02, rng);
    EXPECT_EQ(dense(a), Matrix(h1, h2));
    EXPECT_EQ(a.rank(), static_cast<std::size_t>(r));
    EXPECT_EQ(a.parameter_count(), static_cast<std::size_t>(r * (h1 + h2)));
  }
}

TEST(InitAdapter, SameSeedSameA) {
  Rng r1(5), r2(5);
  EXPECT_EQ(init_adapter(4, 4, 2, 0.02, r1).a, init_adapter(4, 4, 2, 0.02, r2).a);
}

TEST(InitAdapter, RankAboveWidestSideIsRejected) {
  Rng rng(0);
  EXPECT_THROW(init_adapter(8, 8, 9, 0.02, rng), ParameterError);
  EXPECT_THROW(init_adapter(8, 8, 0, 0.02, rng), ParameterError);
}

TEST(Dense, HandOuterProduct) {
  const LoRAAdapter a{0, Matrix{{1}, {0}}, Matrix{{2, 3}}};
  EXPECT_EQ(dense(a), (Matrix{{2, 3}, {0, 0}}));
}

TEST(Dense, RankBoundedByAdapterRank) {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    const LoRAAdapter a{0, random_matrix(7, 3, rng), random_matrix(3, 9, rng)};
    EXPECT_LE(numeric_rank(dense(a)), 3u);
  }
}

TEST(ForwardContribution, MatchesDensePath) {
  Rng rng(3);
  const LoRAAdapter a{0, random_matrix(5, 2, rng), random_matrix(2, 4, rng)};
  const Matrix x = random_matrix(6, 4, rng);
  const Matrix via_dense = matmul_nt(x, dense(a));
  EXPECT_LT(spdcfl::testing::relative_error(forward_contribution(a, x), via_dense), 1e-12);
  EXPECT_EQ(forward_contribution(a, Matrix(6, 4)), Matrix(6, 5));
  EXPECT_THROW(forward_contribution(a, Matrix(6, 3)), ShapeError);
}

TEST(ReinitAtRank, ExactRankIsReconstructed) {
  Rng rng(4);
  DenseDelta acc{{random_rank_r(6, 5, 2, rng), random_rank_r(3, 6, 2, rng)}};
  const AdapterSet set = reinit_at_rank(acc, 2);
  EXPECT_EQ(set.rank(), 2u);
  for (std::size_t j = 0; j < acc.size(); ++j) EXPECT_LT(frobenius_norm(dense(set.layers[j]) - acc.layers[j]), 1e-9);
}

TEST(ReinitAtRank, ZeroAccumulatorGivesZeroProduct) {
  DenseDelta acc{{Matrix(4, 3)}};
  EXPECT_EQ(dense(reinit_at_rank(acc, 2).layers[0]), Matrix(4, 3));
}

TEST(ReinitAtRank, EqualsDirectTruncation) {
  Rng rng(6);
  DenseDelta acc{{random_matrix(7, 5, rng)}};
  const Matrix via_reinit = dense(reinit_at_rank(acc, 2).layers[0]);
  const Matrix via_svd = reconstruct(svd_truncate(acc.layers[0], 2));
  EXPECT_LT(max_abs_diff(via_reinit, via_svd), 1e-10);
}

TEST(ReinitAtRank, BalancedFactors) {
  Rng rng(7);
  DenseDelta acc{{random_matrix(6, 4, rng)}};
  const auto layer = reinit_at_rank(acc, 3).layers[0];
  // B = U√S and A = √S Vᵀ have matching column/row norms.
  for (std::size_t k = 0; k < 3; ++k) {
    double nb = 0.0, na = 0.0;
    for (std::size_t i = 0; i < layer.b.rows(); ++i) nb += layer.b(i, k) * layer.b(i, k);
    for (std::size_t i = 0; i < layer.a.cols(); ++i) na += layer.a(k, i) * layer.a(k, i);
    EXPECT_NEAR(nb, na, 1e-12);
  }
}

TEST(ReinitAtRank, RankAboveNarrowSideIsZeroPadded) {
  Rng rng(8);
  DenseDelta acc{{random_matrix(3, 10, rng)}};
  const auto layer = reinit_at_rank(acc, 5).layers[0];
  EXPECT_EQ(layer.rank(), 5u);
  EXPECT_LT(max_abs_diff(dense(layer), acc.layers[0]), 1e-12);
  for (std::size_t k = 3; k < 5; ++k)
    for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(layer.a(k, i), 0.0);
}

TEST(Accumulate, FirstEventAdoptsPhaseFinal) {
  Rng rng(9);
  const AdapterSet g = spdcfl::testing::random_adapters(std::vector<LayerShape>{{3, 4}}, 2, rng);
  EXPECT_EQ(accumulate(std::nullopt, g, 0.5).layers[0], dense(g).layers[0]);
}

TEST(Accumulate, Midpoint) {
  const AdapterSet g{{LoRAAdapter{0, Matrix{{1}}, Matrix{{2}}}}};
  const DenseDelta acc{{Matrix{{0}}}};
  EXPECT_EQ(accumulate(acc, g, 0.5).layers[0], Matrix{{1}});
  EXPECT_EQ(accumulate(acc, g, 1.0).layers[0], Matrix{{0}});
}

TEST(Accumulate, AffineSymmetry) {
  Rng rng(10);
  const std::vector<LayerShape> shapes{{4, 3}};
  const AdapterSet g1 = spdcfl::testing::random_adapters(shapes, 2, rng);
  const AdapterSet g2 = spdcfl::testing::random_adapters(shapes, 2, rng);
  const double lambda = 0.3;
  const Matrix a = accumulate(dense(g1), g2, lambda).layers[0];
  const Matrix b = accumulate(dense(g2), g1, 1.0 - lambda).layers[0];
  EXPECT_LT(max_abs_diff(a, b), 1e-15);
}

TEST(Accumulate, RejectsOutOfRangeLambdaAndShapeMismatch) {
  const AdapterSet g{{LoRAAdapter{0, Matrix{{1}}, Matrix{{2}}}}};
  EXPECT_THROW(accumulate(std::nullopt, g, 1.5), ParameterError);
  const DenseDelta wrong{{Matrix(2, 2)}};
  EXPECT_THROW(accumulate(wrong, g, 0.5), ShapeError);
}

TEST(RankSchedule, StepsAndFloor) {
  RankSchedule s{8, 2, 2, 1};
  EXPECT_EQ(s.current_rank(), 8u);
  s.phase = 3;
  EXPECT_EQ(s.current_rank(), 4u);
  s.phase = 9;
  EXPECT_EQ(s.current_rank(), 2u);
  EXPECT_FALSE(s.can_drop());
  EXPECT_THROW((RankSchedule{2, 4, 1, 1}.validate()), ParameterError);
  EXPECT_THROW((RankSchedule{8, 2, 0, 1}.validate()), ParameterError);
}

TEST(AdapterSet, MixedRanksAreAnInvariantViolation) {
  Rng rng(11);
  AdapterSet set;
  set.layers.push_back(init_adapter(4, 4, 2, 0.02, rng, 0));
  set.layers.push_back(init_adapter(4, 4, 3, 0.02, rng, 1));
  EXPECT_THROW(set.rank(), InvariantError);
}

TEST(Checkpoint, BitExactRoundTrip) {
  Rng rng(12);
  const std::vector<LayerShape> shapes{{32, 16}, {6, 32}};
  const AdapterSet set = spdcfl::testing::random_adapters(shapes, 8, rng);
  std::stringstream ss;
  write_checkpoint(ss, set);
  const AdapterSet back = read_checkpoint(ss);
  EXPECT_TRUE(back == set);
  for (std::size_t j = 0; j < set.size(); ++j) EXPECT_EQ(back.layers[j].layer_id, set.layers[j].layer_id);
}

TEST(Checkpoint, HeaderLayout) {
  const AdapterSet set{{LoRAAdapter{0, Matrix{{1.0}}, Matrix{{2.0}}}}};
  std::stringstream ss;
  write_checkpoint(ss, set);
  const std::string bytes = ss.str();
  ASSERT_EQ(bytes.size(), 4u + 4u + 4u + 12u + 16u);
  EXPECT_EQ(bytes.substr(0, 4), "SPDL");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1u);  // version, little-endian
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 1u);  // layer count
}

TEST(Checkpoint, CorruptInputsAreFormatErrors) {
  std::stringstream bad_magic("XXXX");
  EXPECT_THROW(read_checkpoint(bad_magic), FormatError);
  const AdapterSet set{{LoRAAdapter{0, Matrix{{1.0}}, Matrix{{2.0}}}}};
  std::stringstream ss;
  write_checkpoint(ss, set);
  std::stringstream truncated(ss.str().substr(0, ss.str().size() - 3));
  EXPECT_THROW(read_checkpoint(truncated), FormatError);
}
