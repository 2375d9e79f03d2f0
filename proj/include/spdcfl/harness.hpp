#pragma once

// Run orchestration: configuration, base pretraining, the federated loop for
// the three modes, evaluation, and the per-round log.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <limits>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <nlohmann/json.hpp>

#include "spdcfl/client.hpp"
#include "spdcfl/data.hpp"
#include "spdcfl/error.hpp"
#include "spdcfl/lora.hpp"
#include "spdcfl/metrics.hpp"
#include "spdcfl/model.hpp"
#include "spdcfl/numerics.hpp"
#include "spdcfl/server.hpp"

namespace spdcfl {

inline constexpr int kRecordSchemaVersion = 1;

enum class RunMode { kSpdCfl, kFedAvgFull, kFixedRankLora };

inline std::string to_string(RunMode m) {
  switch (m) {
    case RunMode::kSpdCfl: return "spd-cfl";
    case RunMode::kFedAvgFull: return "fedavg-full";
    case RunMode::kFixedRankLora: return "fixed-rank-lora";
  }
  return "spd-cfl";
}

inline RunMode parse_run_mode(const std::string& s) {
  if (s == "spd-cfl") return RunMode::kSpdCfl;
  if (s == "fedavg-full") return RunMode::kFedAvgFull;
  if (s == "fixed-rank-lora") return RunMode::kFixedRankLora;
  throw ParameterError("unknown mode '" + s + "' (expected spd-cfl, fedavg-full or fixed-rank-lora)");
}

inline PartitionScheme parse_partition_scheme(const std::string& s, std::size_t per_client = 4,
                                              std::size_t shared = 2) {
  if (s == "iid") return PartitionScheme::iid();
  if (s == "disjoint") return PartitionScheme::disjoint();
  if (s == "overlap") return PartitionScheme::overlap(per_client, shared);
  throw ParameterError("unknown partition scheme '" + s + "' (expected iid, overlap or disjoint)");
}

struct RunConfig {
  // [train]
  std::size_t T = 60;
  std::size_t E = 1;
  double eta = 0.05;
  std::size_t batch_size = 16;
  double lr_decay = 1.0;  // eta_t = eta * lr_decay^(t-1)

  // [rank]
  std::size_t r1 = 8;
  std::size_t rK = 2;
  std::size_t delta = 2;
  std::optional<std::size_t> cooldown = 5;  // unset = never drop

  // [server]
  double theta = 0.9;
  double lambda = 0.5;
  AggregationMode aggregation = AggregationMode::kFactorwise;
  ReinitMode reinit = ReinitMode::kSvd;
  double init_sigma = 0.02;

  // [cl]
  CLConfig::Method cl_method = CLConfig::Method::kEWC;
  double mu1 = 0.01;
  double mu2 = 0.01;
  double temperature = 1.0;

  // [federation]
  std::size_t S = 5;
  double participation = 1.0;
  RunMode mode = RunMode::kSpdCfl;
  std::uint64_t seed = 0;

  // [data]
  SyntheticSpec data{};
  std::string csv_path;  // empty = synthetic
  PartitionScheme partition = PartitionScheme::disjoint();

  // [model]
  std::size_t hidden = 32;
  Activation activation = Activation::kTanh;
  std::size_t pretrain_epochs = 5;
  double pretrain_eta = 0.05;

  // [log]
  std::size_t probe_size = 128;

  void validate() const {
    auto fail = [](const std::string& m) { throw ParameterError("config: " + m); };
    if (T < 1) fail("T must be >= 1");
    if (!(eta >= 0.0) || !std::isfinite(eta)) fail("eta must be a finite value >= 0");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) fail("lr_decay must be in (0, 1]");
    if (rK < 1) fail("rK must be >= 1");
    if (r1 < rK) fail("r1 must be >= rK");
    if (delta < 1) fail("delta must be >= 1");
    if (!(theta >= 0.0 && theta < 1.0)) fail("theta must be in [0, 1)");
    if (!(lambda >= 0.0 && lambda < 1.0)) fail("lambda must be in [0, 1)");
    if (!(mu1 >= 0.0) || !(mu2 >= 0.0)) fail("mu1 and mu2 must be >= 0");
    if (!(temperature > 0.0)) fail("temperature must be > 0");
    if (!(init_sigma > 0.0)) fail("init_sigma must be > 0");
    if (S < 1) fail("S must be >= 1");
    if (!(participation > 0.0 && participation <= 1.0)) fail("participation must be in (0, 1]");
    if (hidden < 1) fail("hidden must be >= 1");
    if (probe_size < 2) fail("probe_size must be >= 2");
  }

  std::vector<std::size_t> widths(std::size_t input_dim, std::size_t outputs) const {
    return {input_dim, hidden, outputs};
  }
};

// ---------------------------------------------------------------------------
// Config file
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void read_key(const boost::property_tree::ptree& pt, const char* key, T& out) {
  if (auto v = pt.get_optional<std::string>(key)) {
    std::istringstream is(*v);
    T parsed{};
    is >> parsed;
    if (is.fail() || !(is >> std::ws).eof()) throw InputError(std::string("config: bad value for ") + key + ": '" + *v + "'");
    out = parsed;
  }
}

inline bool parse_bool(const std::string& v, const char* key) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw InputError(std::string("config: bad boolean for ") + key + ": '" + v + "'");
}

inline const std::vector<std::string>& known_config_keys() {
  static const std::vector<std::string> keys = {
      "train.T", "train.E", "train.eta", "train.batch_size", "train.lr_decay",
      "rank.r1", "rank.rK", "rank.delta", "rank.cooldown",
      "server.theta", "server.lambda", "server.aggregation", "server.reinit", "server.init_sigma",
      "cl.method", "cl.mu1", "cl.mu2", "cl.temperature",
      "federation.S", "federation.participation", "federation.mode", "federation.seed",
      "data.classes", "data.dim", "data.n_per_class", "data.separation", "data.signal_dim",
      "data.multi_label", "data.csv",
      "partition.scheme", "partition.classes_per_client", "partition.shared_classes",
      "model.hidden", "model.activation", "model.pretrain_epochs", "model.pretrain_eta",
      "log.probe_size"};
  return keys;
}

}  // namespace detail

/// Parses the INI-style config. Unknown sections or keys are rejected.
inline RunConfig parse_config(std::istream& in) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw InputError(std::string("config: ") + e.message() + " at line " + std::to_string(e.line()));
  }
  const auto& known = detail::known_config_keys();
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) throw InputError("config: key '" + section + "' outside a section");
    for (const auto& kv : body) {
      const std::string full = section + "." + kv.first;
      if (std::find(known.begin(), known.end(), full) == known.end()) throw InputError("config: unknown key " + full);
    }
  }

  RunConfig c;
  using detail::read_key;
  read_key(tree, "train.T", c.T);
  read_key(tree, "train.E", c.E);
  read_key(tree, "train.eta", c.eta);
  read_key(tree, "train.batch_size", c.batch_size);
  read_key(tree, "train.lr_decay", c.lr_decay);
  read_key(tree, "rank.r1", c.r1);
  read_key(tree, "rank.rK", c.rK);
  read_key(tree, "rank.delta", c.delta);
  if (auto v = tree.get_optional<std::string>("rank.cooldown")) {
    if (*v == "inf" || *v == "never") {
      c.cooldown.reset();
    } else {
      std::size_t cd = 0;
      read_key(tree, "rank.cooldown", cd);
      c.cooldown = cd;
    }
  }
  read_key(tree, "server.theta", c.theta);
  read_key(tree, "server.lambda", c.lambda);
  if (auto v = tree.get_optional<std::string>("server.aggregation")) {
    if (*v == "factorwise") c.aggregation = AggregationMode::kFactorwise;
    else if (*v == "dense") c.aggregation = AggregationMode::kDense;
    else throw InputError("config: server.aggregation must be factorwise or dense");
  }
  if (auto v = tree.get_optional<std::string>("server.reinit")) {
    if (*v == "svd") c.reinit = ReinitMode::kSvd;
    else if (*v == "fresh") c.reinit = ReinitMode::kFresh;
    else throw InputError("config: server.reinit must be svd or fresh");
  }
  read_key(tree, "server.init_sigma", c.init_sigma);
  if (auto v = tree.get_optional<std::string>("cl.method")) c.cl_method = parse_cl_method(*v);
  read_key(tree, "cl.mu1", c.mu1);
  read_key(tree, "cl.mu2", c.mu2);
  read_key(tree, "cl.temperature", c.temperature);
  read_key(tree, "federation.S", c.S);
  read_key(tree, "federation.participation", c.participation);
  if (auto v = tree.get_optional<std::string>("federation.mode")) c.mode = parse_run_mode(*v);
  read_key(tree, "federation.seed", c.seed);
  read_key(tree, "data.classes", c.data.classes);
  read_key(tree, "data.dim", c.data.dim);
  read_key(tree, "data.n_per_class", c.data.n_per_class);
  read_key(tree, "data.separation", c.data.separation);
  read_key(tree, "data.signal_dim", c.data.signal_dim);
  if (auto v = tree.get_optional<std::string>("data.multi_label")) c.data.multi_label = detail::parse_bool(*v, "data.multi_label");
  if (auto v = tree.get_optional<std::string>("data.csv")) c.csv_path = *v;
  {
    std::string scheme = "disjoint";
    if (auto v = tree.get_optional<std::string>("partition.scheme")) scheme = *v;
    std::size_t per_client = 4, shared = 2;
    read_key(tree, "partition.classes_per_client", per_client);
    read_key(tree, "partition.shared_classes", shared);
    c.partition = parse_partition_scheme(scheme, per_client, shared);
  }
  read_key(tree, "model.hidden", c.hidden);
  if (auto v = tree.get_optional<std::string>("model.activation")) {
    if (*v == "tanh") c.activation = Activation::kTanh;
    else if (*v == "relu") c.activation = Activation::kRelu;
    else if (*v == "identity") c.activation = Activation::kIdentity;
    else throw InputError("config: model.activation must be tanh, relu or identity");
  }
  read_key(tree, "model.pretrain_epochs", c.pretrain_epochs);
  read_key(tree, "model.pretrain_eta", c.pretrain_eta);
  read_key(tree, "log.probe_size", c.probe_size);
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("config: cannot open " + path);
  return parse_config(in);
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

struct PretrainOptions {
  std::vector<std::size_t> widths;
  Activation activation = Activation::kTanh;
  double eta = 0.05;
  std::size_t batch_size = 32;
};

/// Fits every base weight on `dataset` for `epochs` passes of mini-batch SGD,
/// then hands the result back as a frozen base. epochs = 0 returns the random
/// initialization.
inline FrozenBase pretrain_base(const Dataset& dataset, std::size_t epochs, const Rng& rng,
                                const PretrainOptions& opts) {
  if (dataset.size() == 0) throw InputError("pretrain_base: empty dataset");
  FrozenBase base = make_base(opts.widths, opts.activation, rng.derive({0x1a}));
  if (epochs == 0) return base;
  ClientState trainer;
  trainer.shard = dataset.batch(dataset.indices(Split::kTrain));
  if (trainer.shard.size() == 0) trainer.shard = dataset.batch(dataset.indices(Split::kTest));
  trainer.rng = rng.derive({0x1b});
  LocalTrainConfig cfg{epochs, opts.eta, opts.batch_size};
  return local_train_full(trainer, base, cfg, RoundContext{0, 0, 0}).model;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
  std::optional<double> acc;                   // multiclass
  std::optional<double> mean_auc;              // multi-label: macro mean over defined labels
  std::vector<std::optional<double>> label_auc;
  std::size_t samples = 0;

  /// The task's headline metric.
  double primary() const { return acc ? *acc : mean_auc.value_or(0.0); }
};

inline EvalResult evaluate_logits(const Matrix& logits, const Batch& batch) {
  if (batch.size() == 0) throw InputError("evaluate: empty split");
  EvalResult out;
  out.samples = batch.size();
  if (!batch.multi_label()) {
    out.acc = accuracy(multiclass_counts(logits, batch.labels));
    return out;
  }
  double sum = 0.0;
  std::size_t defined = 0;
  std::vector<double> scores(batch.size());
  std::vector<int> labels(batch.size());
  for (std::size_t l = 0; l < logits.cols(); ++l) {
    for (std::size_t i = 0; i < batch.size(); ++i) {
      scores[i] = logits(i, l);
      labels[i] = batch.targets(i, l) > 0.5 ? 1 : 0;
    }
    try {
      const double a = auc(scores, labels);
      out.label_auc.push_back(a);
      sum += a;
      ++defined;
    } catch (const UndefinedMetricError&) {
      out.label_auc.push_back(std::nullopt);
    }
  }
  if (defined == 0) throw UndefinedMetricError("evaluate: no label has both classes in this split");
  out.mean_auc = sum / static_cast<double>(defined);
  return out;
}

inline EvalResult evaluate(const FrozenBase& base, const AdapterSet& adapters, const Dataset& ds, Split split) {
  const Batch b = ds.batch(split);
  if (b.size() == 0) throw InputError("evaluate: empty split");
  return evaluate_logits(forward(base, adapters, b.features).logits, b);
}

inline EvalResult evaluate(const FrozenBase& model, const Dataset& ds, Split split) {
  const Batch b = ds.batch(split);
  if (b.size() == 0) throw InputError("evaluate: empty split");
  return evaluate_logits(forward(model, b.features).logits, b);
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

struct ClientRoundMetrics {
  std::size_t client_id = 0;
  std::size_t shard_size = 0;
  double loss = 0.0;
  std::optional<double> wd_sta;
  std::optional<double> wd_pla;
  std::optional<double> cka_sta;
  std::optional<double> cka_pla;
};

struct RoundRecord {
  std::size_t round = 0;
  std::size_t phase = 1;
  std::size_t rank = 0;       // rank trained this round (0 in fedavg-full)
  std::size_t rank_next = 0;  // rank distributed next round
  std::optional<double> sgc;
  bool dropped = false;
  double global_loss = 0.0;
  EvalResult val;
  EvalResult test;
  std::uint64_t round_parameters = 0;  // Param^t
  std::size_t participants = 0;        // S_t
  std::uint64_t cumulative_parameters = 0;
  std::vector<ClientRoundMetrics> clients;
};

struct RunResult {
  std::vector<RoundRecord> records;
  AdapterSet final_adapters;  // empty in fedavg-full
  FrozenBase base;            // the frozen base (or the trained model in fedavg-full)
  std::uint64_t base_checksum_before = 0;
  std::uint64_t base_checksum_after = 0;
  PartitionPlan plan;
  CommLedger ledger;
  std::uint64_t training_multiplies = 0;  // local-training matmul work, when run single-threaded

  double final_metric() const { return records.empty() ? 0.0 : records.back().test.primary(); }

  /// First round reaching the best validation metric (1-based; 0 if no rounds).
  std::size_t best_round() const {
    std::size_t best = 0;
    for (std::size_t i = 0; i < records.size(); ++i)
      if (best == 0 || records[i].val.primary() > records[best - 1].val.primary()) best = i + 1;
    return best;
  }

  /// Transmission cost counted up to the best validation round.
  CommunicationCost communication_to_best() const { return communication_cost(ledger, best_round()); }
};

struct RunOptions {
  /// Worker threads for client tasks; 0 reads SPDCFL_WORKERS (default 1).
  std::size_t workers = 0;
};

inline std::size_t resolve_workers(std::size_t requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("SPDCFL_WORKERS")) {
    char* end = nullptr;
    const unsigned long v = std::strtoul(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
    throw ParameterError(std::string("SPDCFL_WORKERS must be a positive integer, got '") + env + "'");
  }
  return 1;
}

namespace detail {

/// Runs task(i) for i in [0, n) on `workers` threads. Each task writes only
/// its own slot, so output does not depend on scheduling. The first exception
/// (lowest index) is rethrown.
template <class F>
void parallel_for(std::size_t n, std::size_t workers, F&& task) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) task(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto body = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        task(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(workers, n); ++w) pool.emplace_back(body);
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline std::vector<std::size_t> participants(const RunConfig& cfg, const Rng& rng, std::size_t round) {
  std::vector<std::size_t> all(cfg.S);
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (cfg.participation >= 1.0) return all;
  const auto k = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(cfg.participation * static_cast<double>(cfg.S) - 1e-9)));
  Rng pick = rng.derive({0x9a, round});
  pick.shuffle(std::span<std::size_t>(all));
  all.resize(k);
  std::sort(all.begin(), all.end());
  return all;
}

inline std::optional<double> safe_cka(std::span<const Matrix> a, std::span<const Matrix> b) {
  try {
    return layer_averaged_cka(a, b);
  } catch (const UndefinedMetricError&) {
    return std::nullopt;
  }
}

inline double model_distance(const FrozenBase& a, const FrozenBase& b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.layers.size(); ++j) {
    const Matrix d = a.layers[j].weight - b.layers[j].weight;
    s += sum_of_squares(d.values());
    for (std::size_t i = 0; i < a.layers[j].bias.size(); ++i) {
      const double e = a.layers[j].bias[i] - b.layers[j].bias[i];
      s += e * e;
    }
  }
  return std::sqrt(s);
}

inline FrozenBase average_models(std::span<const FrozenBase> models, std::span<const std::size_t> sizes) {
  double total = 0.0;
  for (std::size_t n : sizes) total += static_cast<double>(n);
  FrozenBase out = models.front();
  for (auto& layer : out.layers) {
    layer.weight *= 0.0;
    std::fill(layer.bias.begin(), layer.bias.end(), 0.0);
  }
  for (std::size_t s = 0; s < models.size(); ++s) {
    const double w = static_cast<double>(sizes[s]) / total;
    for (std::size_t j = 0; j < out.layers.size(); ++j) {
      out.layers[j].weight.add_scaled(models[s].layers[j].weight, w);
      for (std::size_t i = 0; i < out.layers[j].bias.size(); ++i) out.layers[j].bias[i] += w * models[s].layers[j].bias[i];
    }
  }
  return out;
}

struct Setup {
  Dataset data;
  FrozenBase base;
  PartitionPlan plan;
  std::vector<ClientState> clients;
  Batch probe;
};

inline Setup build_setup(const RunConfig& cfg) {
  const Rng root(cfg.seed);
  const Rng domain = root.derive({1});
  Setup s;
  if (cfg.csv_path.empty()) {
    s.data = generate_synthetic(cfg.data, root.derive({2}), domain);
  } else {
    s.data = load_labeled_csv(cfg.csv_path, root.derive({2}));
  }
  const std::size_t outputs = s.data.multi_label() ? s.data.targets.cols() : s.data.classes;

  SyntheticSpec generic = cfg.data;
  generic.dim = s.data.features.cols();
  generic.classes = outputs;
  const Dataset pretrain_set = generate_synthetic(generic, root.derive({3}), domain);
  PretrainOptions popts{cfg.widths(s.data.features.cols(), outputs), cfg.activation, cfg.pretrain_eta, 32};
  s.base = pretrain_base(pretrain_set, cfg.pretrain_epochs, root.derive({4}), popts);

  s.plan = partition(s.data, cfg.S, cfg.partition, root.derive({5}));
  const CLConfig cl{cfg.cl_method, cfg.mu1, cfg.mu2, cfg.temperature};
  for (std::size_t c = 0; c < cfg.S; ++c) {
    ClientState st;
    st.client_id = c;
    st.shard = s.data.batch(s.plan.shards[c]);
    st.cl = cl;
    st.rng = root.derive({7, c});
    s.clients.push_back(std::move(st));
  }
  auto val = s.data.indices(Split::kVal);
  val.resize(std::min(val.size(), cfg.probe_size));
  s.probe = s.data.batch(val);
  return s;
}

/// Shard-size-weighted mean of the clients' end-of-round losses.
inline double global_loss(std::span<const std::size_t> sizes, std::span<const double> losses) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    num += static_cast<double>(sizes[i]) * losses[i];
    den += static_cast<double>(sizes[i]);
  }
  return num / den;
}

}  // namespace detail

/// Algorithm orchestration for all three modes. Client tasks of a round run
/// on a worker pool; their results are consumed in client-id order.
inline RunResult run_federated(const RunConfig& cfg, const RunOptions& options = {}) {
  cfg.validate();
  const std::size_t workers = resolve_workers(options.workers);
  const Rng root(cfg.seed);
  detail::Setup setup = detail::build_setup(cfg);

  RunResult result;
  result.plan = setup.plan;
  result.base_checksum_before = setup.base.checksum();
  const FrozenBase& base = setup.base;
  const bool lora = cfg.mode != RunMode::kFedAvgFull;

  ServerConfig scfg;
  scfg.theta = cfg.theta;
  scfg.lambda = cfg.lambda;
  scfg.cooldown = cfg.cooldown;
  scfg.dropout_enabled = cfg.mode == RunMode::kSpdCfl;
  scfg.aggregation = cfg.aggregation;
  scfg.reinit = cfg.reinit;
  scfg.init_sigma = cfg.init_sigma;

  ServerState server;
  if (lora) {
    RankSchedule schedule{cfg.r1, cfg.rK, cfg.delta, 1};
    server = make_server_state(base.shapes(), schedule, cfg.init_sigma, root.derive({6}));
  }
  FrozenBase global_model = base;  // fedavg-full only
  std::uint64_t cumulative = 0;
  std::uint64_t training_work = 0;

  for (std::size_t t = 1; t <= cfg.T; ++t) {
    const auto active = detail::participants(cfg, root, t);
    const double eta_t = cfg.eta * std::pow(cfg.lr_decay, static_cast<double>(t - 1));
    const LocalTrainConfig ltc{cfg.E, eta_t, cfg.batch_size};
    const RoundContext ctx{t, server.schedule.phase, lora ? server.rank() : 0};

    RoundRecord rec;
    rec.round = t;
    rec.phase = lora ? server.schedule.phase : 1;
    rec.rank = lora ? server.rank() : 0;
    rec.participants = active.size();
    rec.round_parameters = lora ? server.global.parameter_count() : global_model.parameter_count();
    result.ledger.record(static_cast<std::size_t>(rec.round_parameters), active.size());
    cumulative += 2ULL * rec.round_parameters * active.size();
    rec.cumulative_parameters = cumulative;
    rec.clients.resize(active.size());

    std::vector<double> losses(active.size());
    std::vector<std::size_t> sizes(active.size());
    for (std::size_t i = 0; i < active.size(); ++i) sizes[i] = setup.clients[active[i]].shard.size();

    const std::uint64_t before = multiply_counter();
    if (lora) {
      const std::optional<DenseDelta>& acc = server.accumulated;
      const DenseDelta global_dense = dense(server.global);
      std::vector<ClientUpdate> updates(active.size());
      std::vector<AdapterSet> locals(active.size());
      detail::parallel_for(active.size(), workers, [&](std::size_t i) {
        ClientState& st = setup.clients[active[i]];
        LocalTrainResult r = local_train(std::move(st), base, server.global, acc, ltc, ctx);
        st = std::move(r.state);
        losses[i] = r.final_loss;
        updates[i] = ClientUpdate{st.client_id, r.adapters, st.shard.size()};
        locals[i] = std::move(r.adapters);
      });
      training_work += multiply_counter() - before;

      detail::parallel_for(active.size(), workers, [&](std::size_t i) {
        ClientRoundMetrics& m = rec.clients[i];
        m.client_id = active[i];
        m.shard_size = sizes[i];
        m.loss = losses[i];
        const DenseDelta local_dense = dense(locals[i]);
        m.wd_pla = weight_distance(local_dense, global_dense);
        const auto local_rep = forward(base, locals[i], setup.probe.features).outputs;
        m.cka_pla = detail::safe_cka(local_rep, forward(base, global_dense, setup.probe.features).outputs);
        if (acc) {
          m.wd_sta = weight_distance(local_dense, *acc);
          m.cka_sta = detail::safe_cka(local_rep, forward(base, *acc, setup.probe.features).outputs);
        }
      });

      ServerRoundResult sr = server_round(std::move(server), updates, scfg, root.derive({8, t}));
      server = std::move(sr.state);
      rec.sgc = sr.sgc;
      rec.dropped = sr.dropped;
      rec.rank_next = sr.rank_next;
      rec.global_loss = detail::global_loss(sizes, losses);
      rec.val = evaluate(base, server.global, setup.data, Split::kVal);
      rec.test = evaluate(base, server.global, setup.data, Split::kTest);
    } else {
      std::vector<FrozenBase> models(active.size());
      detail::parallel_for(active.size(), workers, [&](std::size_t i) {
        FullTrainResult r = local_train_full(setup.clients[active[i]], global_model, ltc, ctx);
        losses[i] = r.final_loss;
        models[i] = std::move(r.model);
      });
      training_work += multiply_counter() - before;
      const auto global_rep = forward(global_model, setup.probe.features).outputs;
      detail::parallel_for(active.size(), workers, [&](std::size_t i) {
        ClientRoundMetrics& m = rec.clients[i];
        m.client_id = active[i];
        m.shard_size = sizes[i];
        m.loss = losses[i];
        m.wd_pla = detail::model_distance(models[i], global_model);
        m.cka_pla = detail::safe_cka(forward(models[i], setup.probe.features).outputs, global_rep);
      });
      global_model = detail::average_models(models, sizes);
      rec.global_loss = detail::global_loss(sizes, losses);
      rec.val = evaluate(global_model, setup.data, Split::kVal);
      rec.test = evaluate(global_model, setup.data, Split::kTest);
    }
    result.records.push_back(std::move(rec));
  }

  result.training_multiplies = workers <= 1 ? training_work : 0;
  result.base_checksum_after = base.checksum();
  if (lora) {
    result.final_adapters = server.global;
    result.base = setup.base;
  } else {
    result.base = global_model;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Operation budget
// ---------------------------------------------------------------------------

/// Multiplies per sample for one forward and backward pass through the
/// adapted model at rank r: 2·h1·h2 for the frozen weights plus 4·r·(h1+h2)
/// for the adapter path and its gradients. r = 0 gives the full-weight model
/// (3·h1·h2: forward, backprop, weight gradient).
inline double psi(std::span<const LayerShape> shapes, std::size_t r) {
  double total = 0.0;
  for (const auto& s : shapes) {
    const double hh = static_cast<double>(s.out * s.in);
    total += r == 0 ? 3.0 * hh : 2.0 * hh + 4.0 * static_cast<double>(r) * static_cast<double>(s.out + s.in);
  }
  return total;
}

/// Closed-form multiply estimate Σ_t S_t·E·ψ(r_t)·γ·⌈n̄/γ⌉, where n̄ is the mean
/// training-shard size and γ the batch size. Without a realized rank
/// trajectory every round is costed at r₁.
inline double op_count_budget(const RunConfig& cfg, std::span<const std::size_t> rank_per_round = {}) {
  cfg.validate();
  const std::size_t outputs = cfg.data.classes;
  const std::vector<std::size_t> widths = cfg.widths(cfg.data.dim, outputs);
  std::vector<LayerShape> shapes;
  for (std::size_t j = 0; j + 1 < widths.size(); ++j) shapes.push_back({widths[j + 1], widths[j]});

  const double train_total = std::round(0.70 * static_cast<double>(cfg.data.n_per_class)) * static_cast<double>(cfg.data.classes);
  const double shard = train_total / static_cast<double>(cfg.S);
  const double gamma = static_cast<double>(cfg.batch_size);
  const double per_epoch_samples = gamma * std::ceil(shard / gamma);
  const double active = std::max(1.0, std::ceil(cfg.participation * static_cast<double>(cfg.S) - 1e-9));

  double total = 0.0;
  for (std::size_t t = 0; t < cfg.T; ++t) {
    std::size_t r = cfg.mode == RunMode::kFedAvgFull ? 0 : cfg.r1;
    if (cfg.mode != RunMode::kFedAvgFull && t < rank_per_round.size()) r = rank_per_round[t];
    total += active * static_cast<double>(cfg.E) * psi(shapes, r) * per_epoch_samples;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Writers
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json opt_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string fmt_opt(const std::optional<double>& v) { return v ? fmt_double(*v) : std::string(); }

}  // namespace detail

inline nlohmann::json to_json(const RoundRecord& r) {
  using detail::opt_json;
  nlohmann::json clients = nlohmann::json::array();
  for (const auto& c : r.clients) {
    clients.push_back({{"client_id", c.client_id},
                       {"shard_size", c.shard_size},
                       {"loss", c.loss},
                       {"wd_sta", opt_json(c.wd_sta)},
                       {"wd_pla", opt_json(c.wd_pla)},
                       {"cka_sta", opt_json(c.cka_sta)},
                       {"cka_pla", opt_json(c.cka_pla)}});
  }
  return {{"schema_version", kRecordSchemaVersion},
          {"round", r.round},
          {"phase", r.phase},
          {"rank", r.rank},
          {"rank_next", r.rank_next},
          {"sgc", opt_json(r.sgc)},
          {"dropped", r.dropped},
          {"global_loss", r.global_loss},
          {"val_acc", opt_json(r.val.acc)},
          {"val_auc", opt_json(r.val.mean_auc)},
          {"test_acc", opt_json(r.test.acc)},
          {"test_auc", opt_json(r.test.mean_auc)},
          {"round_parameters", r.round_parameters},
          {"participants", r.participants},
          {"cumulative_parameters", r.cumulative_parameters},
          {"clients", clients}};
}

inline void write_jsonl(std::ostream& os, std::span<const RoundRecord> records) {
  for (const auto& r : records) os << to_json(r).dump() << '\n';
}

/// One row per round. Per-client columns are laid out for every client id;
/// cells of clients absent from a round stay empty.
inline void write_summary_csv(std::ostream& os, std::span<const RoundRecord> records, std::size_t clients) {
  os << "schema_version,round,phase,rank,rank_next,sgc,dropped,global_loss,val_acc,val_auc,test_acc,test_auc,"
        "round_parameters,participants,cumulative_parameters";
  for (std::size_t c = 0; c < clients; ++c)
    for (const char* f : {"loss", "wd_sta", "wd_pla", "cka_sta", "cka_pla"}) os << ",c" << c << "_" << f;
  os << '\n';
  using detail::fmt_double;
  using detail::fmt_opt;
  for (const auto& r : records) {
    os << kRecordSchemaVersion << ',' << r.round << ',' << r.phase << ',' << r.rank << ',' << r.rank_next << ','
       << fmt_opt(r.sgc) << ',' << (r.dropped ? 1 : 0) << ',' << fmt_double(r.global_loss) << ','
       << fmt_opt(r.val.acc) << ',' << fmt_opt(r.val.mean_auc) << ',' << fmt_opt(r.test.acc) << ','
       << fmt_opt(r.test.mean_auc) << ',' << r.round_parameters << ',' << r.participants << ','
       << r.cumulative_parameters;
    for (std::size_t c = 0; c < clients; ++c) {
      const ClientRoundMetrics* m = nullptr;
      for (const auto& x : r.clients)
        if (x.client_id == c) m = &x;
      if (m) {
        os << ',' << fmt_double(m->loss) << ',' << fmt_opt(m->wd_sta) << ',' << fmt_opt(m->wd_pla) << ','
           << fmt_opt(m->cka_sta) << ',' << fmt_opt(m->cka_pla);
      } else {
        os << ",,,,,";
      }
    }
    os << '\n';
  }
}

}  // namespace spdcfl
