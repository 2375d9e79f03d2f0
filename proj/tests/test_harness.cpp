#include <gtest/gtest.h>

#include <atomic>
#include <set>
#include <sstream>

#include "test_util.hpp"

using namespace spdcfl;

namespace {

RunConfig small_config(std::uint64_t seed = 1) {
  RunConfig c;
  c.T = 12;
  c.S = 3;
  c.r1 = 4;
  c.rK = 2;
  c.delta = 2;
  c.cooldown = 3;
  c.data.classes = 6;
  c.data.dim = 8;
  c.data.n_per_class = 40;
  c.hidden = 12;
  c.pretrain_epochs = 2;
  c.probe_size = 32;
  c.seed = seed;
  return c;
}

std::string jsonl(const RunResult& r) {
  std::ostringstream os;
  write_jsonl(os, r.records);
  return os.str();
}

// Softmax probe on the frozen hidden representation; test accuracy.
double probe_accuracy(const FrozenBase& base, const Dataset& ds, std::uint64_t seed) {
  auto features = [&](Split s) {
    Batch b = ds.batch(s);
    b.features = forward(base, b.features).outputs.front();
    return b;
  };
  ClientState st;
  st.shard = features(Split::kTrain);
  st.rng = Rng(seed);
  const std::vector<std::size_t> widths{st.shard.features.cols(), ds.classes};
  const FrozenBase init = make_base(widths, Activation::kIdentity, Rng(seed));
  const auto fit = local_train_full(st, init, LocalTrainConfig{20, 0.05, 16}, RoundContext{});
  const Batch test = features(Split::kTest);
  return accuracy(multiclass_counts(forward(fit.model, test.features).logits, test.labels));
}

}  // namespace

TEST(Config, ParsesEverySection) {
  std::istringstream in(R"(
[train]
T = 7
E = 2
eta = 0.1
batch_size = 8
lr_decay = 0.99
[rank]
r1 = 6
rK = 2
delta = 2
cooldown = inf
[server]
theta = 0.8
lambda = 0.25
aggregation = dense
reinit = fresh
[cl]
method = mas
mu1 = 0.5
mu2 = 0.125
[federation]
S = 4
participation = 0.5
mode = fixed-rank-lora
seed = 42
[data]
classes = 8
dim = 10
n_per_class = 20
separation = 3
multi_label = false
[partition]
scheme = overlap
classes_per_client = 4
shared_classes = 2
[model]
hidden = 16
activation = relu
pretrain_epochs = 0
[log]
probe_size = 64
)");
  const RunConfig c = parse_config(in);
  EXPECT_EQ(c.T, 7u);
  EXPECT_EQ(c.E, 2u);
  EXPECT_EQ(c.eta, 0.1);
  EXPECT_EQ(c.r1, 6u);
  EXPECT_FALSE(c.cooldown.has_value());
  EXPECT_EQ(c.theta, 0.8);
  EXPECT_EQ(c.aggregation, AggregationMode::kDense);
  EXPECT_EQ(c.reinit, ReinitMode::kFresh);
  EXPECT_EQ(c.cl_method, CLConfig::Method::kMAS);
  EXPECT_EQ(c.mu2, 0.125);
  EXPECT_EQ(c.S, 4u);
  EXPECT_EQ(c.mode, RunMode::kFixedRankLora);
  EXPECT_EQ(c.seed, 42u);
  EXPECT_EQ(c.data.classes, 8u);
  EXPECT_EQ(c.partition.kind, PartitionScheme::Kind::kOverlap);
  EXPECT_EQ(c.activation, Activation::kRelu);
  EXPECT_EQ(c.probe_size, 64u);
}

TEST(Config, RejectsUnknownKeysBadValuesAndInvariants) {
  std::istringstream unknown("[train]\nT = 3\nbogus = 1\n");
  EXPECT_THROW(parse_config(unknown), InputError);
  std::istringstream bad("[train]\nT = three\n");
  EXPECT_THROW(parse_config(bad), InputError);
  std::istringstream theta("[server]\ntheta = 1\n");
  EXPECT_THROW(parse_config(theta), ParameterError);
  std::istringstream ranks("[rank]\nr1 = 2\nrK = 4\n");
  EXPECT_THROW(parse_config(ranks), ParameterError);
  std::istringstream mode("[federation]\nmode = gossip\n");
  EXPECT_THROW(parse_config(mode), ParameterError);
  EXPECT_THROW(load_config("/nonexistent/config.ini"), InputError);
}

TEST(Harness, ParallelForVisitsEveryIndexOnce) {
  for (std::size_t workers : {1u, 3u, 8u}) {
    std::vector<std::atomic<int>> hits(17);
    detail::parallel_for(17, workers, [&](std::size_t i) { hits[i]++; });
    for (const auto& h : hits) EXPECT_EQ(h.load(), 1);
  }
}

TEST(Harness, ParticipantsAreSortedAndSized) {
  RunConfig c = small_config();
  c.S = 7;
  c.participation = 0.4;
  const auto p = detail::participants(c, Rng(3), 5);
  EXPECT_EQ(p.size(), 3u);
  EXPECT_TRUE(std::is_sorted(p.begin(), p.end()));
  EXPECT_EQ(std::set<std::size_t>(p.begin(), p.end()).size(), 3u);
  c.participation = 1.0;
  EXPECT_EQ(detail::participants(c, Rng(3), 5).size(), 7u);
}

TEST(Harness, SingleRoundSingleClientIsTheClientUpdate) {
  RunConfig c = small_config();
  c.T = 1;
  c.S = 1;
  c.mode = RunMode::kFixedRankLora;
  const RunResult r = run_federated(c, RunOptions{1});

  detail::Setup s = detail::build_setup(c);
  const ServerState st = make_server_state(s.base.shapes(), RankSchedule{c.r1, c.rK, c.delta, 1}, c.init_sigma,
                                           Rng(c.seed).derive({6}));
  const auto local = local_train(s.clients[0], s.base, st.global, std::nullopt,
                                 LocalTrainConfig{c.E, c.eta, c.batch_size}, RoundContext{1, 1, c.r1});
  EXPECT_TRUE(r.final_adapters == local.adapters);
  ASSERT_EQ(r.records.size(), 1u);
  EXPECT_DOUBLE_EQ(r.records[0].global_loss, local.final_loss);
}

TEST(Harness, DeterministicAcrossWorkerCounts) {
  const RunConfig c = small_config(5);
  const std::string one = jsonl(run_federated(c, RunOptions{1}));
  EXPECT_EQ(one, jsonl(run_federated(c, RunOptions{1})));
  EXPECT_EQ(one, jsonl(run_federated(c, RunOptions{4})));
}

TEST(Harness, NeverDroppingNeutralSpdEqualsFixedRank) {
  RunConfig spd = small_config(6);
  spd.mu1 = spd.mu2 = 0.0;
  spd.cooldown.reset();
  RunConfig fixed = spd;
  fixed.mode = RunMode::kFixedRankLora;
  const RunResult a = run_federated(spd, RunOptions{1});
  const RunResult b = run_federated(fixed, RunOptions{1});
  EXPECT_EQ(jsonl(a), jsonl(b));
  EXPECT_TRUE(a.final_adapters == b.final_adapters);
}

TEST(Harness, BaseIsFrozenAndLedgerMatchesRankSchedule) {
  const RunConfig c = small_config(7);
  const RunResult r = run_federated(c, RunOptions{1});
  EXPECT_EQ(r.base_checksum_before, r.base_checksum_after);
  std::size_t widths_sum = 0;
  for (const auto& s : r.base.shapes()) widths_sum += s.out + s.in;
  std::uint64_t cum = 0, prev = 0;
  bool dropped = false;
  for (const auto& rec : r.records) {
    cum += 2ULL * rec.participants * rec.rank * widths_sum;
    EXPECT_EQ(rec.cumulative_parameters, cum);
    EXPECT_GE(rec.cumulative_parameters, prev);
    prev = rec.cumulative_parameters;
    dropped |= rec.dropped;
    EXPECT_LE(rec.rank_next, rec.rank);
    if (rec.sgc) {
      EXPECT_GE(*rec.sgc, 0.0);
      EXPECT_LE(*rec.sgc, 1.0);
    }
  }
  EXPECT_EQ(communication_cost(r.ledger).parameters, cum);
  ASSERT_TRUE(dropped);
  RunConfig fixed = c;
  fixed.mode = RunMode::kFixedRankLora;
  EXPECT_LT(cum, run_federated(fixed, RunOptions{1}).records.back().cumulative_parameters);
}

TEST(Harness, FinalAccuracyMatchesReevaluation) {
  const RunConfig c = small_config(8);
  const RunResult r = run_federated(c, RunOptions{1});
  const detail::Setup s = detail::build_setup(c);
  EXPECT_EQ(evaluate(s.base, r.final_adapters, s.data, Split::kTest).acc, r.records.back().test.acc);
}

TEST(Harness, FedAvgFullTransmitsWholeModel) {
  RunConfig c = small_config(9);
  c.mode = RunMode::kFedAvgFull;
  c.T = 3;
  const RunResult r = run_federated(c, RunOptions{1});
  const detail::Setup s = detail::build_setup(c);
  EXPECT_EQ(r.records[0].round_parameters, s.base.parameter_count());
  EXPECT_TRUE(r.final_adapters.layers.empty());
  EXPECT_NE(r.base.checksum(), s.base.checksum());
}

TEST(Harness, SeparableTaskTrainsAboveNinetyFive) {
  RunConfig c;
  c.T = 20;
  c.S = 3;
  c.data.classes = 6;
  c.data.dim = 16;
  c.data.n_per_class = 100;
  c.data.separation = 8.0;
  c.seed = 10;
  EXPECT_GT(run_federated(c, RunOptions{1}).final_metric(), 0.95);
}

TEST(Harness, RandomModelAucIsChanceLevel) {
  std::vector<double> mean(5, 0.0);
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    RunConfig c = small_config(seed);
    c.data.multi_label = true;
    c.data.classes = 5;
    c.data.n_per_class = 200;
    c.pretrain_epochs = 0;
    const detail::Setup s = detail::build_setup(c);
    Rng rng(seed);
    const AdapterSet zero = init_adapter_set(s.base.shapes(), 2, 0.02, rng);
    const EvalResult e = evaluate(s.base, zero, s.data, Split::kTest);
    ASSERT_EQ(e.label_auc.size(), 5u);
    for (std::size_t l = 0; l < 5; ++l) mean[l] += e.label_auc[l].value() / 5.0;
  }
  for (double m : mean) {
    EXPECT_GE(m, 0.4);
    EXPECT_LE(m, 0.6);
  }
}

TEST(Harness, PretrainingTransfers) {
  double pretrained = 0.0, random = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    RunConfig c = small_config(seed);
    c.data.separation = 2.0;
    c.data.dim = 16;
    c.data.signal_dim = 4;
    c.data.n_per_class = 100;
    c.pretrain_epochs = 5;
    const detail::Setup with = detail::build_setup(c);
    c.pretrain_epochs = 0;
    const detail::Setup without = detail::build_setup(c);
    pretrained += probe_accuracy(with.base, with.data, seed) / 5.0;
    random += probe_accuracy(without.base, without.data, seed) / 5.0;
  }
  EXPECT_GT(pretrained, random);
}

TEST(OpCount, LinearityAndInstrumentedCounter) {
  RunConfig c = small_config(11);
  const double base = op_count_budget(c);
  RunConfig e2 = c;
  e2.E = 2;
  EXPECT_DOUBLE_EQ(op_count_budget(e2), 2.0 * base);

  const std::vector<LayerShape> shapes{{12, 8}, {6, 12}};
  const double fixed_part = psi(shapes, 1) - (psi(shapes, 2) - psi(shapes, 1));
  EXPECT_DOUBLE_EQ(psi(shapes, 8) - fixed_part, 2.0 * (psi(shapes, 4) - fixed_part));

  const RunResult r = run_federated(c, RunOptions{1});
  std::vector<std::size_t> ranks;
  for (const auto& rec : r.records) ranks.push_back(rec.rank);
  const double est = op_count_budget(c, ranks);
  const double measured = static_cast<double>(r.training_multiplies);
  ASSERT_GT(measured, 0.0);
  EXPECT_LT(measured, 4.0 * est);
  EXPECT_GT(measured, est / 4.0);
}

TEST(Writers, JsonlAndCsvCarryTheSchema) {
  const RunConfig c = small_config(12);
  const RunResult r = run_federated(c, RunOptions{1});
  std::istringstream lines(jsonl(r));
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("schema_version"), kRecordSchemaVersion);
    EXPECT_EQ(j.at("round"), ++n);
    EXPECT_EQ(j.at("clients").size(), c.S);
    for (const char* k : {"phase", "rank", "rank_next", "sgc", "dropped", "global_loss", "val_acc", "test_acc",
                          "cumulative_parameters"})
      EXPECT_TRUE(j.contains(k)) << k;
  }
  EXPECT_EQ(n, c.T);

  std::ostringstream csv;
  write_summary_csv(csv, r.records, c.S);
  std::istringstream rows(csv.str());
  std::getline(rows, line);
  const auto columns = std::count(line.begin(), line.end(), ',') + 1;
  EXPECT_EQ(columns, 15 + 5 * static_cast<long>(c.S));
  std::size_t data_rows = 0;
  while (std::getline(rows, line)) {
    EXPECT_EQ(std::count(line.begin(), line.end(), ',') + 1, columns);
    ++data_rows;
  }
  EXPECT_EQ(data_rows, c.T);
}
