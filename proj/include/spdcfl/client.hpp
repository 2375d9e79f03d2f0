#pragma once

// Client side of a round: E epochs of mini-batch SGD on the local shard
// under the supervised + stability + plasticity objective.

#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spdcfl/error.hpp"
#include "spdcfl/lora.hpp"
#include "spdcfl/model.hpp"
#include "spdcfl/numerics.hpp"

namespace spdcfl {

struct LocalTrainConfig {
  std::size_t epochs = 1;
  double eta = 0.05;
  std::size_t batch_size = 16;
};

/// Where in the protocol a call happens; keys the mini-batch stream and the
/// per-phase importance cache.
struct RoundContext {
  std::size_t round = 1;
  std::size_t phase = 1;
  std::size_t rank = 0;
};

struct ClientState {
  std::size_t client_id = 0;
  Batch shard;
  CLConfig cl;
  std::optional<ImportanceEstimate> importance;
  std::optional<std::size_t> importance_phase;
  Rng rng{0};
};

/// Estimates and caches the EWC (Fisher) or MAS importance for `phase` at the
/// given anchor adapters. A second call in the same phase is a no-op; LwF and
/// plain training cache nothing.
inline ClientState refresh_importances(ClientState state, const FrozenBase& base, const AdapterSet& anchor,
                                       std::size_t phase) {
  if (state.importance_phase == phase) return state;
  switch (state.cl.method) {
    case CLConfig::Method::kEWC:
      state.importance = estimate_fim(base, anchor, state.shard);
      break;
    case CLConfig::Method::kMAS:
      state.importance = estimate_mas_importance(base, anchor, state.shard);
      break;
    case CLConfig::Method::kLwF:
    case CLConfig::Method::kNone:
      state.importance.reset();
      break;
  }
  state.importance_phase = phase;
  return state;
}

struct LocalTrainResult {
  ClientState state;
  AdapterSet adapters;
  std::vector<double> epoch_losses;  // mean total loss per epoch
  double final_loss = 0.0;           // last epoch's mean, or the shard loss when E = 0
};

/// Shuffled mini-batch order for one epoch; a pure function of the client
/// stream, the round and the epoch.
inline std::vector<std::size_t> epoch_order(const Rng& client_rng, std::size_t n, std::size_t round,
                                            std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = client_rng.derive({0xba7c, round, epoch});
  rng.shuffle(std::span<std::size_t>(order));
  return order;
}

inline Batch select_rows(const Batch& shard, std::span<const std::size_t> rows) {
  Batch b{Matrix(rows.size(), shard.features.cols()), {}, {}};
  if (shard.multi_label()) b.targets = Matrix(rows.size(), shard.targets.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(shard.features.row(rows[i]).begin(), shard.features.cols(), b.features.row(i).begin());
    if (!shard.labels.empty()) b.labels.push_back(shard.labels[rows[i]]);
    if (shard.multi_label()) std::copy_n(shard.targets.row(rows[i]).begin(), shard.targets.cols(), b.targets.row(i).begin());
  }
  return b;
}

/// Starts from a copy of the global adapters and runs E epochs of SGD on
/// L_sup + L_sta + L_pla. The plasticity anchor is dense(global) for the
/// whole round; the stability anchor is the accumulated delta (absent in the
/// first phase).
inline LocalTrainResult local_train(ClientState state, const FrozenBase& base, const AdapterSet& global_adapters,
                                    const std::optional<DenseDelta>& stability_anchor,
                                    const LocalTrainConfig& config, const RoundContext& ctx) {
  if (state.shard.size() == 0) throw InputError("local_train: client " + std::to_string(state.client_id) + " has no data");
  if (config.batch_size == 0) throw ParameterError("local_train: batch_size must be >= 1");
  if (ctx.rank != 0 && global_adapters.rank() != ctx.rank) {
    throw ProtocolError("local_train: global adapters at rank " + std::to_string(global_adapters.rank()) +
                        ", phase rank is " + std::to_string(ctx.rank));
  }
  const bool uses_importance =
      state.cl.method == CLConfig::Method::kEWC || state.cl.method == CLConfig::Method::kMAS;
  if (uses_importance && config.epochs > 0) state = refresh_importances(std::move(state), base, global_adapters, ctx.phase);

  const std::optional<DenseDelta> plasticity_anchor =
      state.cl.method == CLConfig::Method::kNone ? std::nullopt : std::optional<DenseDelta>(dense(global_adapters));

  LocalTrainResult out;
  AdapterSet adapters = global_adapters;
  const std::size_t n = state.shard.size();
  for (std::size_t e = 1; e <= config.epochs; ++e) {
    const auto order = epoch_order(state.rng, n, ctx.round, e);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t stop = std::min(n, start + config.batch_size);
      const Batch batch = select_rows(state.shard, std::span<const std::size_t>(order).subspan(start, stop - start));
      LocalLoss loss = total_local_loss(base, adapters, batch, stability_anchor, plasticity_anchor, state.importance,
                                        state.cl);
      if (!std::isfinite(loss.total)) {
        throw NumericError("local_train: non-finite loss at client " + std::to_string(state.client_id) + ", round " +
                           std::to_string(ctx.round));
      }
      adapters = sgd_step(std::move(adapters), loss.grads, config.eta);
      epoch_loss += loss.total;
      ++batches;
    }
    out.epoch_losses.push_back(epoch_loss / static_cast<double>(batches));
  }
  out.final_loss = out.epoch_losses.empty() ? supervised_loss_and_grads(base, adapters, state.shard).loss
                                            : out.epoch_losses.back();
  out.adapters = std::move(adapters);
  out.state = std::move(state);
  return out;
}

struct FullTrainResult {
  FrozenBase model;
  std::vector<double> epoch_losses;
  double final_loss = 0.0;
};

/// FedAvg baseline: same loop, but every base weight and bias is trained.
inline FullTrainResult local_train_full(const ClientState& state, const FrozenBase& global_model,
                                        const LocalTrainConfig& config, const RoundContext& ctx) {
  if (state.shard.size() == 0) throw InputError("local_train_full: empty shard");
  FullTrainResult out{global_model, {}, 0.0};
  const std::size_t n = state.shard.size();
  for (std::size_t e = 1; e <= config.epochs; ++e) {
    const auto order = epoch_order(state.rng, n, ctx.round, e);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t stop = std::min(n, start + config.batch_size);
      const Batch batch = select_rows(state.shard, std::span<const std::size_t>(order).subspan(start, stop - start));
      LossAndBaseGrads lg = full_loss_and_grads(out.model, batch);
      if (!std::isfinite(lg.loss)) throw NumericError("local_train_full: non-finite loss");
      out.model = full_sgd_step(std::move(out.model), lg.grads, config.eta);
      epoch_loss += lg.loss;
      ++batches;
    }
    out.epoch_losses.push_back(epoch_loss / static_cast<double>(batches));
  }
  out.final_loss = out.epoch_losses.empty() ? full_loss_and_grads(out.model, state.shard).loss : out.epoch_losses.back();
  return out;
}

}  // namespace spdcfl
