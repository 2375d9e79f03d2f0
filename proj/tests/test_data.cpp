#include <gtest/gtest.h>

#include <algorithm>
#include <set>
#include <sstream>

#include "test_util.hpp"

using namespace spdcfl;

namespace {

// Softmax-regression probe trained on the train split, scored on test.
double linear_probe_accuracy(const Dataset& ds, std::uint64_t seed) {
  const std::vector<std::size_t> widths{ds.features.cols(), ds.classes};
  ClientState st;
  st.shard = ds.batch(Split::kTrain);
  st.rng = Rng(seed);
  const FrozenBase init = make_base(widths, Activation::kIdentity, Rng(seed));
  const FullTrainResult fit = local_train_full(st, init, LocalTrainConfig{30, 0.05, 16}, RoundContext{});
  const Batch test = ds.batch(Split::kTest);
  return accuracy(multiclass_counts(forward(fit.model, test.features).logits, test.labels));
}

Dataset make(std::size_t classes, std::size_t dim, std::size_t n, double sep, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.classes = classes;
  spec.dim = dim;
  spec.n_per_class = n;
  spec.separation = sep;
  const Rng root(seed);
  return generate_synthetic(spec, root.derive({2}), root.derive({1}));
}

}  // namespace

TEST(GenerateSynthetic, DeterministicPerSeed) {
  const Dataset a = make(4, 8, 30, 3.0, 9), b = make(4, 8, 30, 3.0, 9), c = make(4, 8, 30, 3.0, 10);
  EXPECT_EQ(a.features, b.features);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.splits, b.splits);
  EXPECT_NE(a.features, c.features);
}

TEST(GenerateSynthetic, StratifiedSplitsCoverEveryClass) {
  const Dataset ds = make(5, 6, 40, 2.0, 3);
  ASSERT_EQ(ds.size(), 200u);
  for (Split s : {Split::kTrain, Split::kVal, Split::kTest}) {
    std::vector<std::size_t> per_class(5, 0);
    for (std::size_t i : ds.indices(s)) ++per_class[static_cast<std::size_t>(ds.labels[i])];
    for (std::size_t c = 0; c < 5; ++c) {
      const std::size_t want = s == Split::kTrain ? 28 : 6;
      EXPECT_EQ(per_class[c], want) << "class " << c;
    }
  }
}

TEST(GenerateSynthetic, RejectsBadParameters) {
  EXPECT_THROW(make(1, 4, 10, 1.0, 1), ParameterError);
  EXPECT_THROW(make(3, 1, 10, 1.0, 1), ParameterError);
  EXPECT_THROW(make(3, 4, 10, -1.0, 1), ParameterError);
}

TEST(GenerateSynthetic, ZeroSeparationIsChanceLevel) {
  double mean = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) mean += linear_probe_accuracy(make(4, 16, 500, 0.0, seed), seed);
  mean /= 5.0;
  EXPECT_NEAR(mean, 0.25, 0.05);
}

TEST(GenerateSynthetic, WideSeparationIsLinearlySeparable) {
  EXPECT_GT(linear_probe_accuracy(make(6, 16, 100, 8.0, 4), 4), 0.95);
}

TEST(GenerateSynthetic, MultiLabelModeHasBothClassesPerLabel) {
  SyntheticSpec spec;
  spec.classes = 5;
  spec.n_per_class = 60;
  spec.multi_label = true;
  const Rng root(2);
  const Dataset ds = generate_synthetic(spec, root.derive({2}), root.derive({1}));
  ASSERT_TRUE(ds.multi_label());
  ASSERT_EQ(ds.targets.cols(), 5u);
  const Batch test = ds.batch(Split::kTest);
  for (std::size_t l = 0; l < 5; ++l) {
    std::set<double> seen;
    for (std::size_t i = 0; i < test.size(); ++i) seen.insert(test.targets(i, l));
    EXPECT_EQ(seen.size(), 2u) << "label " << l;
  }
}

TEST(LoadLabeledCsv, ParsesAndValidates) {
  std::istringstream good("a,label,b\n1.5,0,2\n-1,2,0.25\n3,1,4\n");
  const Dataset ds = load_labeled_csv(good, Rng(1));
  ASSERT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds.classes, 3u);
  EXPECT_EQ(ds.features(1, 0), -1.0);
  EXPECT_EQ(ds.features(1, 1), 0.25);
  EXPECT_EQ(ds.labels[1], 2);

  std::istringstream no_label("a,b\n1,2\n");
  EXPECT_THROW(load_labeled_csv(no_label, Rng(1)), FormatError);
  std::istringstream ragged("a,label\n1,0\n2\n");
  EXPECT_THROW(load_labeled_csv(ragged, Rng(1)), FormatError);
  std::istringstream junk("a,label\nx,0\n");
  EXPECT_THROW(load_labeled_csv(junk, Rng(1)), FormatError);
}

TEST(KsStatistic, HandCases) {
  const std::vector<double> p{1, 1, 0, 0}, q{0, 0, 1, 1}, r{2, 2, 0, 0};
  EXPECT_EQ(ks_statistic(p, q), 1.0);
  EXPECT_EQ(ks_statistic(p, r), 0.0);
  const std::vector<double> e{0, 0, 0, 0};
  EXPECT_THROW(ks_statistic(p, e), InputError);
}

TEST(KsStatistic, SymmetricAndBounded) {
  Rng rng(5);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> p(6), q(6);
    for (auto& v : p) v = static_cast<double>(rng.below(5));
    for (auto& v : q) v = static_cast<double>(rng.below(5));
    p[0] += 1.0;
    q[5] += 1.0;
    const double a = ks_statistic(p, q);
    EXPECT_EQ(a, ks_statistic(q, p));
    EXPECT_GE(a, 0.0);
    EXPECT_LE(a, 1.0);
  }
}

class PartitionTest : public ::testing::TestWithParam<std::uint64_t> {};

namespace {

void expect_covers_train_exactly(const Dataset& ds, const PartitionPlan& plan) {
  std::vector<std::size_t> all;
  for (const auto& s : plan.shards) all.insert(all.end(), s.begin(), s.end());
  std::sort(all.begin(), all.end());
  EXPECT_TRUE(std::adjacent_find(all.begin(), all.end()) == all.end()) << "shards overlap";
  EXPECT_EQ(all, ds.indices(Split::kTrain));
}

}  // namespace

TEST_P(PartitionTest, DisjointReachesKsOne) {
  const Dataset ds = make(10, 4, 40, 1.0, GetParam());
  const auto plan = partition(ds, 5, PartitionScheme::disjoint(), Rng(GetParam()));
  EXPECT_EQ(plan.mean_ks, 1.0);
  expect_covers_train_exactly(ds, plan);
}

TEST_P(PartitionTest, IidStaysNearZero) {
  const Dataset ds = make(10, 4, 100, 1.0, GetParam());
  for (std::size_t s : {2u, 3u, 5u, 7u}) {
    const auto plan = partition(ds, s, PartitionScheme::iid(), Rng(GetParam()));
    EXPECT_LE(plan.mean_ks, 0.02) << s << " clients";
    expect_covers_train_exactly(ds, plan);
  }
}

TEST_P(PartitionTest, OverlapIsStrictlyIntermediate) {
  const Dataset ds = make(10, 4, 40, 1.0, GetParam());
  const auto plan = partition(ds, 5, PartitionScheme::overlap(4, 2), Rng(GetParam()));
  EXPECT_GT(plan.mean_ks, 0.0);
  EXPECT_LT(plan.mean_ks, 1.0);
  expect_covers_train_exactly(ds, plan);
  for (const auto& h : plan.histograms) {
    EXPECT_EQ(std::count_if(h.begin(), h.end(), [](std::size_t n) { return n > 0; }), 4);
  }
}

TEST_P(PartitionTest, DeterministicPerSeed) {
  const Dataset ds = make(6, 4, 30, 1.0, GetParam());
  const auto a = partition(ds, 3, PartitionScheme::iid(), Rng(GetParam()));
  const auto b = partition(ds, 3, PartitionScheme::iid(), Rng(GetParam()));
  EXPECT_EQ(a.shards, b.shards);
}

INSTANTIATE_TEST_SUITE_P(Seeds, PartitionTest, ::testing::Values(1u, 2u, 3u));

TEST(Partition, InfeasibleSchemesAreParameterErrors) {
  const Dataset ds = make(4, 4, 20, 1.0, 1);
  EXPECT_THROW(partition(ds, 5, PartitionScheme::disjoint(), Rng(1)), ParameterError);
  EXPECT_THROW(partition(ds, 3, PartitionScheme::overlap(3, 1), Rng(1)), ParameterError);
  EXPECT_THROW(partition(ds, 2, PartitionScheme::overlap(2, 2), Rng(1)), ParameterError);
  EXPECT_THROW(partition(ds, 0, PartitionScheme::iid(), Rng(1)), ParameterError);
}

TEST(Partition, ManifestListsEveryShard) {
  const Dataset ds = make(4, 4, 20, 1.0, 1);
  const auto plan = partition(ds, 2, PartitionScheme::disjoint(), Rng(1));
  std::ostringstream os;
  write_manifest(os, plan, PartitionScheme::disjoint());
  const std::string text = os.str();
  EXPECT_EQ(text.rfind("spdcfl-partition 1\nscheme disjoint\nclients 2\nmean_ks 1\n", 0), 0u);
  EXPECT_NE(text.find("client 0 " + std::to_string(plan.shards[0].size()) + ":"), std::string::npos);
  EXPECT_NE(text.find("client 1 " + std::to_string(plan.shards[1].size()) + ":"), std::string::npos);
}
