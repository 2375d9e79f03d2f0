#pragma once

// Evaluation metrics: accuracy, ROC AUC, communication cost, weight
// distance, and linear-HSIC centered kernel alignment.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "spdcfl/error.hpp"
#include "spdcfl/lora.hpp"
#include "spdcfl/numerics.hpp"

namespace spdcfl {

struct ConfusionCounts {
  std::size_t tp = 0;
  std::size_t tn = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;

  std::size_t total() const noexcept { return tp + tn + fp + fn; }
};

/// (TP + TN) / total.
inline double accuracy(const ConfusionCounts& c) {
  if (c.total() == 0) throw InputError("accuracy: no samples");
  return static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
}

/// Multiclass argmax predictions folded into counts: a correct prediction is
/// a true positive, a wrong one a false positive.
inline ConfusionCounts multiclass_counts(const Matrix& logits, std::span<const int> labels) {
  if (labels.size() != logits.rows()) throw ShapeError("multiclass_counts: label count mismatch");
  ConfusionCounts c;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto row = logits.row(i);
    const auto pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    if (pred == labels[i]) ++c.tp; else ++c.fp;
  }
  return c;
}

/// Trapezoidal area under the ROC curve, sweeping every distinct score as a
/// threshold. Tied positive/negative pairs count one half.
inline double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ShapeError("auc: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  double positives = 0.0, negatives = 0.0;
  for (int y : labels) (y != 0 ? positives : negatives) += 1.0;
  if (positives == 0.0 || negatives == 0.0) {
    throw UndefinedMetricError("auc: both classes must be present");
  }

  double area = 0.0, tp = 0.0, fp = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    double group_tp = 0.0, group_fp = 0.0;
    std::size_t j = i;
    for (; j < order.size() && scores[order[j]] == scores[order[i]]; ++j) {
      (labels[order[j]] != 0 ? group_tp : group_fp) += 1.0;
    }
    area += group_fp * (tp + 0.5 * group_tp);
    tp += group_tp;
    fp += group_fp;
    i = j;
  }
  return area / (positives * negatives);
}

// ---------------------------------------------------------------------------
// Communication
// ---------------------------------------------------------------------------

struct CommLedger {
  struct Entry {
    std::size_t parameters = 0;  // Param^t per client and direction
    std::size_t clients = 0;
  };
  std::vector<Entry> rounds;
  double bytes_per_parameter = 4.0;

  void record(std::size_t parameters, std::size_t clients) { rounds.push_back({parameters, clients}); }
};

struct CommunicationCost {
  std::uint64_t parameters = 0;
  double megabytes = 0.0;
};

/// 2 · Σ_t S_t · Param^t over the first `upto_rounds` rounds (all if unset).
inline CommunicationCost communication_cost(const CommLedger& ledger,
                                            std::optional<std::size_t> upto_rounds = std::nullopt) {
  const std::size_t n = std::min(ledger.rounds.size(), upto_rounds.value_or(ledger.rounds.size()));
  std::uint64_t total = 0;
  for (std::size_t t = 0; t < n; ++t) {
    total += 2ULL * ledger.rounds[t].clients * ledger.rounds[t].parameters;
  }
  return {total, static_cast<double>(total) * ledger.bytes_per_parameter / (1024.0 * 1024.0)};
}

// ---------------------------------------------------------------------------
// Weight distance
// ---------------------------------------------------------------------------

/// Frobenius norm of a − b over all layers.
inline double weight_distance(const DenseDelta& a, const DenseDelta& b) {
  if (a.size() != b.size()) throw ShapeError("weight_distance: layer count mismatch");
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    if (!a.layers[j].same_shape(b.layers[j])) throw ShapeError("weight_distance: layer shape mismatch");
    for (std::size_t i = 0; i < a.layers[j].size(); ++i) {
      const double d = a.layers[j].values()[i] - b.layers[j].values()[i];
      s += d * d;
    }
  }
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// HSIC / CKA
// ---------------------------------------------------------------------------

inline Matrix center_columns(const Matrix& z) {
  Matrix out = z;
  const auto mean = column_means(z);
  for (std::size_t i = 0; i < z.rows(); ++i)
    for (std::size_t j = 0; j < z.cols(); ++j) out(i, j) -= mean[j];
  return out;
}

/// ‖Ẑ₁ᵀẐ₂‖²_F / (n − 1)² with column-centered Ẑ.
inline double linear_hsic(const Matrix& z1, const Matrix& z2) {
  if (z1.rows() != z2.rows()) throw ShapeError("linear_hsic: sample counts differ");
  if (z1.rows() < 2) throw InputError("linear_hsic: need at least two samples");
  const Matrix cross = matmul_tn(center_columns(z1), center_columns(z2));
  const double denom = static_cast<double>(z1.rows() - 1);
  return sum_of_squares(cross.values()) / (denom * denom);
}

namespace detail {
inline bool is_constant(const Matrix& z) {
  for (std::size_t i = 1; i < z.rows(); ++i)
    if (!std::equal(z.row(i).begin(), z.row(i).end(), z.row(0).begin())) return false;
  return true;
}
}  // namespace detail

inline double cka(const Matrix& z1, const Matrix& z2) {
  if (detail::is_constant(z1) || detail::is_constant(z2)) {
    throw UndefinedMetricError("cka: constant representation");
  }
  const double self1 = linear_hsic(z1, z1);
  const double self2 = linear_hsic(z2, z2);
  const double value = linear_hsic(z1, z2) / (std::sqrt(self1) * std::sqrt(self2));
  return std::clamp(value, 0.0, 1.0);
}

/// Mean CKA over corresponding layers.
inline double layer_averaged_cka(std::span<const Matrix> local, std::span<const Matrix> anchor) {
  if (local.size() != anchor.size() || local.empty()) {
    throw ShapeError("layer_averaged_cka: layer counts differ or are empty");
  }
  double s = 0.0;
  for (std::size_t j = 0; j < local.size(); ++j) s += cka(local[j], anchor[j]);
  return s / static_cast<double>(local.size());
}

struct StabilityPlasticityCka {
  std::optional<double> stability;
  double plasticity = 0.0;
};

/// Stability against the accumulated-anchor model (absent in the first
/// phase), plasticity against the current global model.
inline StabilityPlasticityCka layer_averaged_cka(std::span<const Matrix> local,
                                                 const std::optional<std::vector<Matrix>>& stability_anchor,
                                                 std::span<const Matrix> plasticity_anchor) {
  StabilityPlasticityCka out;
  if (stability_anchor) out.stability = layer_averaged_cka(local, *stability_anchor);
  out.plasticity = layer_averaged_cka(local, plasticity_anchor);
  return out;
}

}  // namespace spdcfl
