// spdcfl command-line driver: run, partition, eval, sweep.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "spdcfl/spdcfl.hpp"

namespace fs = std::filesystem;
using namespace spdcfl;

namespace {

constexpr int kUsageExit = 2;
constexpr int kErrorExit = 1;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

RunConfig read_config_or_usage(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file " + path);
  return parse_config(in);
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw InputError("cannot write " + p.string());
  return os;
}

int cmd_run(const std::string& config_path, std::optional<std::uint64_t> seed, const std::string& out_dir,
            const std::string& mode) {
  RunConfig cfg = read_config_or_usage(config_path);
  if (seed) cfg.seed = *seed;
  if (!mode.empty()) cfg.mode = parse_run_mode(mode);
  cfg.validate();

  const RunResult res = run_federated(cfg);
  fs::create_directories(out_dir);
  {
    auto os = open_out(fs::path(out_dir) / "records.jsonl");
    write_jsonl(os, res.records);
  }
  {
    auto os = open_out(fs::path(out_dir) / "summary.csv");
    write_summary_csv(os, res.records, cfg.S);
  }
  {
    auto os = open_out(fs::path(out_dir) / "partition.manifest");
    write_manifest(os, res.plan, cfg.partition);
  }
  if (cfg.mode != RunMode::kFedAvgFull) save_checkpoint((fs::path(out_dir) / "adapters_final.ckpt").string(), res.final_adapters);

  const RoundRecord& last = res.records.back();
  std::cout << "mode=" << to_string(cfg.mode) << " rounds=" << last.round << " rank=" << last.rank_next
            << " test=" << detail::fmt_double(last.test.primary())
            << " cumulative_parameters=" << last.cumulative_parameters << " best_round=" << res.best_round()
            << " mb_to_best=" << detail::fmt_double(res.communication_to_best().megabytes) << "\n";
  return 0;
}

int cmd_partition(const std::string& config_path, const std::string& scheme, std::size_t clients,
                  std::size_t classes, std::size_t per_client, std::size_t shared, std::optional<std::uint64_t> seed,
                  const std::string& out) {
  RunConfig cfg;
  if (!config_path.empty()) cfg = read_config_or_usage(config_path);
  if (!scheme.empty()) cfg.partition = parse_partition_scheme(scheme, per_client, shared);
  if (clients > 0) cfg.S = clients;
  if (classes > 0) cfg.data.classes = classes;
  if (seed) cfg.seed = *seed;
  cfg.validate();

  const Rng root(cfg.seed);
  const Dataset ds = cfg.csv_path.empty() ? generate_synthetic(cfg.data, root.derive({2}), root.derive({1}))
                                          : load_labeled_csv(cfg.csv_path, root.derive({2}));
  const PartitionPlan plan = partition(ds, cfg.S, cfg.partition, root.derive({5}));
  if (out.empty() || out == "-") {
    write_manifest(std::cout, plan, cfg.partition);
  } else {
    auto os = open_out(out);
    write_manifest(os, plan, cfg.partition);
    std::cout << "mean_ks " << detail::fmt_double(plan.mean_ks) << "\n";
  }
  return 0;
}

int cmd_eval(const std::string& config_path, const std::string& checkpoint, const std::string& split_name,
             std::optional<std::uint64_t> seed) {
  RunConfig cfg = read_config_or_usage(config_path);
  if (seed) cfg.seed = *seed;
  Split split = Split::kTest;
  if (split_name == "val") split = Split::kVal;
  else if (split_name == "train") split = Split::kTrain;
  else if (split_name != "test") throw UsageError("--split must be train, val or test");

  const detail::Setup setup = detail::build_setup(cfg);
  const AdapterSet adapters = load_checkpoint(checkpoint);
  const EvalResult r = evaluate(setup.base, adapters, setup.data, split);
  nlohmann::json j{{"split", split_name},
                   {"samples", r.samples},
                   {"rank", adapters.rank()},
                   {"acc", detail::opt_json(r.acc)},
                   {"mean_auc", detail::opt_json(r.mean_auc)}};
  nlohmann::json labels = nlohmann::json::array();
  for (const auto& a : r.label_auc) labels.push_back(detail::opt_json(a));
  j["label_auc"] = labels;
  std::cout << j.dump() << "\n";
  return 0;
}

int cmd_sweep(const std::string& config_path, std::vector<double> mu1, std::vector<double> mu2,
              std::vector<double> theta, std::vector<double> lambda, const std::string& out) {
  const RunConfig base_cfg = read_config_or_usage(config_path);
  if (mu1.empty()) mu1 = {base_cfg.mu1};
  if (mu2.empty()) mu2 = {base_cfg.mu2};
  if (theta.empty()) theta = {base_cfg.theta};
  if (lambda.empty()) lambda = {base_cfg.lambda};

  std::ostringstream csv;
  csv << "mu1,mu2,theta,lambda,final_metric,final_rank,drops,cumulative_parameters\n";
  for (double a : mu1)
    for (double b : mu2)
      for (double th : theta)
        for (double la : lambda) {
          RunConfig cfg = base_cfg;
          cfg.mu1 = a;
          cfg.mu2 = b;
          cfg.theta = th;
          cfg.lambda = la;
          const RunResult res = run_federated(cfg);
          std::size_t drops = 0;
          for (const auto& r : res.records) drops += r.dropped ? 1 : 0;
          const auto& last = res.records.back();
          csv << detail::fmt_double(a) << ',' << detail::fmt_double(b) << ',' << detail::fmt_double(th) << ','
              << detail::fmt_double(la) << ',' << detail::fmt_double(last.test.primary()) << ',' << last.rank_next
              << ',' << drops << ',' << last.cumulative_parameters << '\n';
        }
  if (out.empty() || out == "-") {
    std::cout << csv.str();
  } else {
    auto os = open_out(out);
    os << csv.str();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"spdcfl: federated LoRA simulator with stepwise rank dropout"};
  app.require_subcommand(1);

  std::string config, out, mode, scheme, checkpoint, split = "test";
  std::optional<std::uint64_t> seed;
  std::size_t clients = 0, classes = 0, per_client = 4, shared = 2;
  std::vector<double> mu1, mu2, theta, lambda;

  auto* run = app.add_subcommand("run", "Run a federated simulation from a config file");
  run->add_option("config", config, "Config file (INI)")->required();
  run->add_option("--seed", seed, "Override the config seed");
  run->add_option("--out", out, "Output directory")->required();
  run->add_option("--mode", mode, "spd-cfl | fedavg-full | fixed-rank-lora");

  auto* part = app.add_subcommand("partition", "Emit a partition manifest and its mean pairwise KS");
  part->add_option("--config", config, "Config file (INI)");
  part->add_option("--scheme", scheme, "iid | overlap | disjoint");
  part->add_option("--clients", clients, "Number of clients");
  part->add_option("--classes", classes, "Number of classes");
  part->add_option("--classes-per-client", per_client, "Overlap: classes per client");
  part->add_option("--shared", shared, "Overlap: classes shared with the next client");
  part->add_option("--seed", seed, "Seed");
  part->add_option("--out", out, "Manifest path (default stdout)");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the config's dataset");
  ev->add_option("config", config, "Config file (INI)")->required();
  ev->add_option("--checkpoint", checkpoint, "Adapter checkpoint")->required();
  ev->add_option("--split", split, "train | val | test");
  ev->add_option("--seed", seed, "Override the config seed");

  auto* sw = app.add_subcommand("sweep", "Grid over mu1/mu2/theta/lambda, one CSV row per cell");
  sw->add_option("config", config, "Config file (INI)")->required();
  sw->add_option("--mu1", mu1, "Values for mu1")->delimiter(',');
  sw->add_option("--mu2", mu2, "Values for mu2")->delimiter(',');
  sw->add_option("--theta", theta, "Values for theta")->delimiter(',');
  sw->add_option("--lambda", lambda, "Values for lambda")->delimiter(',');
  sw->add_option("--out", out, "CSV path (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << e.what() << "\n";
    return kUsageExit;
  }

  try {
    if (*run) return cmd_run(config, seed, out, mode);
    if (*part) return cmd_partition(config, scheme, clients, classes, per_client, shared, seed, out);
    if (*ev) return cmd_eval(config, checkpoint, split, seed);
    if (*sw) return cmd_sweep(config, mu1, mu2, theta, lambda, out);
  } catch (const UsageError& e) {
    std::cerr << "error: usage: " << e.what() << "\n";
    return kUsageExit;
  } catch (const spdcfl::Error& e) {
    std::cerr << "error: " << e.kind() << ": " << e.what() << "\n";
    return kErrorExit;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return kErrorExit;
  }
  return kUsageExit;
}
