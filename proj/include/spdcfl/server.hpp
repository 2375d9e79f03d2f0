#pragma once

// Server side of a round: weighted aggregation of client adapters, the
// sensitivity-weighted gradient consistency signal (SGC) and the stepwise
// rank dropout it drives.
//
// Per round, with g_s = dense(local_s) − dense(global):
//   U_s = Σ |dense(local_s) ⊙ g_s|          α_s = U_s / Σ U
//   P = Σ α_s relu(g_s)                      N = −Σ α_s relu(−g_s)
//   P̄ ← θP̄ + (1−θ)P,  N̄ ← θN̄ + (1−θ)N       M = ‖P̄ + N̄‖ / (‖P̄‖ + ‖N̄‖)
// and the rank drops by δ when M^t ≥ M^{t−1}.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spdcfl/error.hpp"
#include "spdcfl/lora.hpp"
#include "spdcfl/numerics.hpp"

namespace spdcfl {

struct ClientUpdate {
  std::size_t client_id = 0;
  AdapterSet adapters;
  std::size_t shard_size = 0;
};

enum class AggregationMode {
  kFactorwise,  // average B and A separately
  kDense,       // average B·A, then refactor at the current rank
};

enum class ReinitMode {
  kSvd,    // truncated SVD of the accumulated delta
  kFresh,  // B = 0, A Gaussian
};

struct ServerConfig {
  double theta = 0.9;   // EMA decay of the pooled components
  double lambda = 0.5;  // decay of the accumulated adapter
  /// Minimum rounds at a rank before it may drop again; unset = never drop.
  std::optional<std::size_t> cooldown = 5;
  bool dropout_enabled = true;
  AggregationMode aggregation = AggregationMode::kFactorwise;
  ReinitMode reinit = ReinitMode::kSvd;
  double init_sigma = 0.02;  // only for ReinitMode::kFresh
};

struct ServerState {
  AdapterSet global;
  std::optional<DenseDelta> accumulated;
  std::optional<std::vector<Matrix>> ema_pos;
  std::optional<std::vector<Matrix>> ema_neg;
  std::optional<double> sgc_prev;
  RankSchedule schedule;
  std::size_t rounds_in_phase = 0;

  std::size_t rank() const noexcept { return schedule.current_rank(); }
};

inline ServerState make_server_state(std::span<const LayerShape> shapes, const RankSchedule& schedule,
                                     double init_sigma, const Rng& rng) {
  schedule.validate();
  ServerState state;
  state.schedule = schedule;
  state.global = init_adapter_set(shapes, schedule.current_rank(), init_sigma, rng);
  return state;
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

/// |D_s| / |D| for each update, in the given order.
inline std::vector<double> aggregation_weights(std::span<const ClientUpdate> updates) {
  double total = 0.0;
  for (const auto& u : updates) {
    if (u.shard_size == 0) throw InputError("aggregate: client " + std::to_string(u.client_id) + " has empty shard");
    total += static_cast<double>(u.shard_size);
  }
  std::vector<double> w;
  w.reserve(updates.size());
  for (const auto& u : updates) w.push_back(static_cast<double>(u.shard_size) / total);
  return w;
}

namespace detail {

inline std::vector<const ClientUpdate*> sorted_by_client(std::span<const ClientUpdate> updates) {
  std::vector<const ClientUpdate*> order;
  for (const auto& u : updates) order.push_back(&u);
  std::stable_sort(order.begin(), order.end(),
                   [](const ClientUpdate* a, const ClientUpdate* b) { return a->client_id < b->client_id; });
  return order;
}

inline void require_same_structure(const AdapterSet& a, const AdapterSet& b, const char* where) {
  if (a.size() != b.size()) throw ShapeError(std::string(where) + ": layer count mismatch");
  if (a.rank() != b.rank()) {
    throw ProtocolError(std::string(where) + ": rank " + std::to_string(a.rank()) + " vs " + std::to_string(b.rank()));
  }
  for (std::size_t j = 0; j < a.size(); ++j) {
    if (a.layers[j].shape() != b.layers[j].shape()) throw ShapeError(std::string(where) + ": layer shape mismatch");
  }
}

}  // namespace detail

/// Shard-size weighted average of the client adapters. Clients are summed in
/// client_id order, so the result does not depend on arrival order.
inline AdapterSet aggregate(std::span<const ClientUpdate> updates,
                            AggregationMode mode = AggregationMode::kFactorwise) {
  if (updates.empty()) throw InputError("aggregate: no client updates");
  const auto order = detail::sorted_by_client(updates);
  std::vector<ClientUpdate> sorted;
  for (const auto* u : order) sorted.push_back(*u);
  const auto weights = aggregation_weights(sorted);
  const AdapterSet& first = sorted.front().adapters;
  for (const auto& u : sorted) detail::require_same_structure(first, u.adapters, "aggregate");

  if (mode == AggregationMode::kDense) {
    DenseDelta mean;
    for (std::size_t j = 0; j < first.size(); ++j) {
      Matrix m(first.layers[j].b.rows(), first.layers[j].a.cols());
      for (std::size_t s = 0; s < sorted.size(); ++s) m.add_scaled(dense(sorted[s].adapters.layers[j]), weights[s]);
      mean.layers.push_back(std::move(m));
    }
    return reinit_at_rank(mean, first.rank());
  }

  AdapterSet out;
  for (std::size_t j = 0; j < first.size(); ++j) {
    LoRAAdapter layer{first.layers[j].layer_id, Matrix(first.layers[j].b.rows(), first.layers[j].b.cols()),
                      Matrix(first.layers[j].a.rows(), first.layers[j].a.cols())};
    for (std::size_t s = 0; s < sorted.size(); ++s) {
      layer.b.add_scaled(sorted[s].adapters.layers[j].b, weights[s]);
      layer.a.add_scaled(sorted[s].adapters.layers[j].a, weights[s]);
    }
    out.layers.push_back(std::move(layer));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient consistency
// ---------------------------------------------------------------------------

/// Per layer dense(local) − dense(global_prev).
inline std::vector<Matrix> accumulated_gradient(const AdapterSet& local, const AdapterSet& global_prev) {
  detail::require_same_structure(local, global_prev, "accumulated_gradient");
  std::vector<Matrix> g;
  for (std::size_t j = 0; j < local.size(); ++j) g.push_back(dense(local.layers[j]) - dense(global_prev.layers[j]));
  return g;
}

/// Σ over layers and entries of |ΔW ⊙ grad|.
inline double sensitivity(std::span<const Matrix> local_dense, std::span<const Matrix> grad) {
  if (local_dense.size() != grad.size()) throw ShapeError("sensitivity: layer count mismatch");
  double u = 0.0;
  for (std::size_t j = 0; j < grad.size(); ++j) {
    if (!local_dense[j].same_shape(grad[j])) throw ShapeError("sensitivity: layer shape mismatch");
    for (std::size_t i = 0; i < grad[j].size(); ++i) u += std::abs(local_dense[j].values()[i] * grad[j].values()[i]);
  }
  return u;
}

/// U_s / Σ U, or uniform 1/S when every sensitivity is zero.
inline std::vector<double> normalize_sensitivities(std::span<const double> u) {
  if (u.empty()) throw InputError("normalize_sensitivities: no clients");
  double total = 0.0;
  for (double x : u) {
    if (!(x >= 0.0)) throw InvariantError("normalize_sensitivities: negative sensitivity");
    total += x;
  }
  std::vector<double> alpha(u.size());
  for (std::size_t s = 0; s < u.size(); ++s) {
    alpha[s] = total > 0.0 ? u[s] / total : 1.0 / static_cast<double>(u.size());
  }
  return alpha;
}

struct PooledGradients {
  std::vector<Matrix> positive;  // entries >= 0
  std::vector<Matrix> negative;  // entries <= 0
};

/// P = Σ α_s·relu(g_s), N = −Σ α_s·relu(−g_s), per layer.
inline PooledGradients pool_gradients(std::span<const std::vector<Matrix>> grads, std::span<const double> alpha) {
  if (grads.size() != alpha.size() || grads.empty()) throw ShapeError("pool_gradients: client count mismatch");
  double sum = 0.0;
  for (double a : alpha) sum += a;
  if (std::abs(sum - 1.0) > 1e-12) throw InvariantError("pool_gradients: weights do not sum to 1");
  PooledGradients out;
  for (const auto& layer : grads.front()) {
    out.positive.emplace_back(layer.rows(), layer.cols());
    out.negative.emplace_back(layer.rows(), layer.cols());
  }
  for (std::size_t s = 0; s < grads.size(); ++s) {
    if (grads[s].size() != out.positive.size()) throw ShapeError("pool_gradients: layer count mismatch");
    for (std::size_t j = 0; j < grads[s].size(); ++j) {
      out.positive[j].add_scaled(relu(grads[s][j]), alpha[s]);
      out.negative[j].add_scaled(relu(-grads[s][j]), -alpha[s]);
    }
  }
  return out;
}

/// θ·prev + (1−θ)·current; an absent prev adopts current.
inline Matrix ema_update(const std::optional<Matrix>& prev, const Matrix& current, double theta) {
  if (!(theta >= 0.0 && theta < 1.0)) throw ParameterError("ema_update: theta must lie in [0, 1)");
  if (!prev) return current;
  Matrix out = *prev * theta;
  out.add_scaled(current, 1.0 - theta);
  return out;
}

/// ‖P̄ + N̄‖_F / (‖P̄‖_F + ‖N̄‖_F) over all layers; 1 when both are zero.
inline double sgc(std::span<const Matrix> ema_pos, std::span<const Matrix> ema_neg) {
  if (ema_pos.size() != ema_neg.size()) throw ShapeError("sgc: layer count mismatch");
  double sum_sq = 0.0, pos_sq = 0.0, neg_sq = 0.0;
  for (std::size_t j = 0; j < ema_pos.size(); ++j) {
    if (!ema_pos[j].same_shape(ema_neg[j])) throw ShapeError("sgc: layer shape mismatch");
    for (std::size_t i = 0; i < ema_pos[j].size(); ++i) {
      const double p = ema_pos[j].values()[i];
      const double n = ema_neg[j].values()[i];
      if (p < 0.0 || n > 0.0) throw InvariantError("sgc: pooled components have the wrong sign");
      sum_sq += (p + n) * (p + n);
      pos_sq += p * p;
      neg_sq += n * n;
    }
  }
  const double denom = std::sqrt(pos_sq) + std::sqrt(neg_sq);
  if (denom == 0.0) return 1.0;
  return std::clamp(std::sqrt(sum_sq) / denom, 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Drop iff M^{t−1} exists, M^t ≥ M^{t−1}, the floor allows another δ, and
/// the phase has lasted at least the cooldown.
inline bool should_drop(const ServerState& state, double m_t, const ServerConfig& cfg) {
  if (!cfg.dropout_enabled || !cfg.cooldown) return false;
  if (!state.sgc_prev) return false;
  if (m_t < *state.sgc_prev) return false;
  if (!state.schedule.can_drop()) return false;
  return state.rounds_in_phase >= *cfg.cooldown;
}

struct DropDecision {
  bool dropped = false;
  std::size_t rank = 0;  // rank in force after the decision
};

/// Applies the keep/drop rule to a state whose `global` already holds this
/// round's aggregate. On a drop the aggregate is folded into the accumulated
/// delta, the rank steps down by δ, the global adapters are re-derived from
/// the accumulator, and the EMA/SGC history restarts.
inline DropDecision maybe_dropout(ServerState& state, double m_t, const ServerConfig& cfg, const Rng& rng) {
  if (!should_drop(state, m_t, cfg)) {
    state.sgc_prev = m_t;
    return {false, state.rank()};
  }
  state.accumulated = accumulate(state.accumulated, state.global, cfg.lambda);
  ++state.schedule.phase;
  const std::size_t r = state.rank();
  if (cfg.reinit == ReinitMode::kSvd) {
    state.global = reinit_at_rank(*state.accumulated, r);
  } else {
    const auto shapes = state.global.shapes();
    state.global = init_adapter_set(shapes, r, cfg.init_sigma, rng.derive({0x7e1, state.schedule.phase}));
  }
  state.ema_pos.reset();
  state.ema_neg.reset();
  state.sgc_prev.reset();
  state.rounds_in_phase = 0;
  return {true, r};
}

struct ServerRoundResult {
  ServerState state;
  double sgc = 1.0;
  std::size_t rank_used = 0;  // rank the clients trained at
  std::size_t rank_next = 0;  // rank distributed for the next round
  bool dropped = false;
  std::vector<double> alpha;  // normalized sensitivities, client_id order
};

/// One server round: consistency signal over the incoming updates, weighted
/// aggregation, then the keep/drop decision.
inline ServerRoundResult server_round(ServerState state, std::span<const ClientUpdate> updates,
                                      const ServerConfig& cfg, const Rng& rng = Rng(0)) {
  if (updates.empty()) throw InputError("server_round: no client updates");
  const std::size_t rank = state.rank();
  for (const auto& u : updates) {
    if (u.adapters.rank() != rank) {
      throw ProtocolError("server_round: client " + std::to_string(u.client_id) + " sent rank " +
                          std::to_string(u.adapters.rank()) + ", phase rank is " + std::to_string(rank));
    }
  }
  const auto order = detail::sorted_by_client(updates);

  std::vector<std::vector<Matrix>> grads;
  std::vector<double> u;
  for (const auto* up : order) {
    grads.push_back(accumulated_gradient(up->adapters, state.global));
    const DenseDelta local = dense(up->adapters);
    u.push_back(sensitivity(local.layers, grads.back()));
  }
  const auto alpha = normalize_sensitivities(u);
  const PooledGradients pooled = pool_gradients(grads, alpha);

  std::vector<Matrix> pos, neg;
  for (std::size_t j = 0; j < pooled.positive.size(); ++j) {
    pos.push_back(ema_update(state.ema_pos ? std::optional<Matrix>((*state.ema_pos)[j]) : std::nullopt,
                             pooled.positive[j], cfg.theta));
    neg.push_back(ema_update(state.ema_neg ? std::optional<Matrix>((*state.ema_neg)[j]) : std::nullopt,
                             pooled.negative[j], cfg.theta));
  }
  const double m_t = sgc(pos, neg);
  state.ema_pos = std::move(pos);
  state.ema_neg = std::move(neg);

  state.global = aggregate(updates, cfg.aggregation);
  ++state.rounds_in_phase;
  const DropDecision decision = maybe_dropout(state, m_t, cfg, rng);

  ServerRoundResult out;
  out.sgc = m_t;
  out.rank_used = rank;
  out.rank_next = decision.rank;
  out.dropped = decision.dropped;
  out.alpha = alpha;
  out.state = std::move(state);
  return out;
}

}  // namespace spdcfl
