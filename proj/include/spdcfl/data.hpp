#pragma once

// Synthetic classification data, labeled-CSV ingestion, label-skew client
// partitioning and the mean pairwise KS statistic used to grade the skew.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "spdcfl/error.hpp"
#include "spdcfl/model.hpp"
#include "spdcfl/numerics.hpp"

namespace spdcfl {

enum class Split { kTrain, kVal, kTest };

/// Samples with class labels and split tags. In multi-label mode `targets`
/// holds the 0/1 label matrix and `labels` a stratum (the label with the
/// largest ground-truth logit) used for stratified splits and partitioning.
struct Dataset {
  Matrix features;
  std::vector<int> labels;
  Matrix targets;
  std::vector<Split> splits;
  std::size_t classes = 0;

  std::size_t size() const noexcept { return features.rows(); }
  bool multi_label() const noexcept { return !targets.empty(); }

  std::vector<std::size_t> indices(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < splits.size(); ++i)
      if (splits[i] == split) out.push_back(i);
    return out;
  }

  Batch batch(std::span<const std::size_t> rows) const {
    Batch b{Matrix(rows.size(), features.cols()), {}, {}};
    b.labels.reserve(rows.size());
    if (multi_label()) b.targets = Matrix(rows.size(), targets.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::copy_n(features.row(rows[i]).begin(), features.cols(), b.features.row(i).begin());
      b.labels.push_back(labels[rows[i]]);
      if (multi_label()) std::copy_n(targets.row(rows[i]).begin(), targets.cols(), b.targets.row(i).begin());
    }
    return b;
  }

  Batch batch(Split split) const {
    const auto rows = indices(split);
    return batch(rows);
  }
};

struct SyntheticSpec {
  std::size_t classes = 6;
  std::size_t dim = 16;
  std::size_t n_per_class = 100;
  double separation = 4.0;
  /// Class means live in a signal subspace of this dimension (0 = dim). The
  /// subspace is shared by every task drawn from the same domain stream.
  std::size_t signal_dim = 0;
  bool multi_label = false;
};

namespace detail {

// Orthonormal columns spanning a random k-dimensional subspace of R^d.
inline Matrix random_basis(std::size_t d, std::size_t k, Rng& rng) {
  Matrix q(d, k);
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<double> v(d);
    for (;;) {
      for (double& x : v) x = rng.normal();
      for (std::size_t p = 0; p < c; ++p) {
        double dot = 0.0;
        for (std::size_t i = 0; i < d; ++i) dot += v[i] * q(i, p);
        for (std::size_t i = 0; i < d; ++i) v[i] -= dot * q(i, p);
      }
      const double norm = std::sqrt(sum_of_squares(v));
      if (norm > 1e-8) {
        for (std::size_t i = 0; i < d; ++i) q(i, c) = v[i] / norm;
        break;
      }
    }
  }
  return q;
}

inline std::vector<double> random_unit(std::size_t k, Rng& rng) {
  std::vector<double> u(k);
  double norm = 0.0;
  while (norm < 1e-8) {
    for (double& x : u) x = rng.normal();
    norm = std::sqrt(sum_of_squares(u));
  }
  for (double& x : u) x /= norm;
  return u;
}

// 70/15/15 per stratum, after a seeded shuffle within the stratum.
inline std::vector<Split> stratified_splits(std::span<const int> strata, std::size_t classes, Rng rng) {
  std::vector<Split> splits(strata.size(), Split::kTrain);
  for (std::size_t c = 0; c < classes; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < strata.size(); ++i)
      if (strata[i] == static_cast<int>(c)) members.push_back(i);
    rng.shuffle(std::span<std::size_t>(members));
    const std::size_t n = members.size();
    const std::size_t n_train = (n * 70) / 100;
    const std::size_t n_val = (n * 15) / 100;
    for (std::size_t k = 0; k < n; ++k) {
      splits[members[k]] = k < n_train ? Split::kTrain : (k < n_train + n_val ? Split::kVal : Split::kTest);
    }
  }
  return splits;
}

}  // namespace detail

/// Gaussian class clusters with unit covariance. Means are `separation`
/// times random unit directions inside a signal subspace drawn from
/// `domain_rng`; the directions themselves come from `task_rng`. Two tasks
/// from one domain share the subspace but not the class geometry.
///
/// Multi-label mode draws x from the same mixture and labels each of the
/// `classes` outputs independently with P(y=1) = σ(separation·wᵀx̂ + b).
inline Dataset generate_synthetic(const SyntheticSpec& spec, const Rng& task_rng, const Rng& domain_rng) {
  if (spec.classes < 2) throw ParameterError("generate_synthetic: need at least 2 classes");
  if (spec.dim < 2) throw ParameterError("generate_synthetic: need at least 2 features");
  if (spec.n_per_class < 1) throw ParameterError("generate_synthetic: n_per_class must be >= 1");
  if (spec.separation < 0.0) throw ParameterError("generate_synthetic: separation must be >= 0");
  const std::size_t k = spec.signal_dim == 0 ? spec.dim : spec.signal_dim;
  if (k > spec.dim) throw ParameterError("generate_synthetic: signal_dim exceeds dim");

  Rng basis_rng = domain_rng.derive({0xd0});
  const Matrix basis = detail::random_basis(spec.dim, k, basis_rng);
  Rng mean_rng = task_rng.derive({0x3e});
  std::vector<std::vector<double>> means(spec.classes, std::vector<double>(spec.dim, 0.0));
  for (auto& mean : means) {
    const auto u = detail::random_unit(k, mean_rng);
    for (std::size_t i = 0; i < spec.dim; ++i)
      for (std::size_t p = 0; p < k; ++p) mean[i] += spec.separation * basis(i, p) * u[p];
  }

  Dataset ds;
  ds.classes = spec.classes;
  const std::size_t n = spec.classes * spec.n_per_class;
  ds.features = Matrix(n, spec.dim);
  ds.labels.resize(n);
  Rng noise_rng = task_rng.derive({0x5a});
  for (std::size_t c = 0; c < spec.classes; ++c) {
    for (std::size_t s = 0; s < spec.n_per_class; ++s) {
      const std::size_t row = c * spec.n_per_class + s;
      ds.labels[row] = static_cast<int>(c);
      for (std::size_t i = 0; i < spec.dim; ++i) ds.features(row, i) = means[c][i] + noise_rng.normal();
    }
  }

  if (spec.multi_label) {
    Rng label_rng = task_rng.derive({0x1b});
    Matrix w(spec.classes, spec.dim);
    std::vector<double> bias(spec.classes);
    for (std::size_t l = 0; l < spec.classes; ++l) {
      const auto u = detail::random_unit(k, label_rng);
      for (std::size_t i = 0; i < spec.dim; ++i)
        for (std::size_t p = 0; p < k; ++p) w(l, i) += basis(i, p) * u[p];
      bias[l] = 0.5 * label_rng.normal();
    }
    const double scale = spec.separation / std::max(1.0, spec.separation);
    ds.targets = Matrix(n, spec.classes);
    for (std::size_t row = 0; row < n; ++row) {
      int stratum = 0;
      double best = -1e300;
      for (std::size_t l = 0; l < spec.classes; ++l) {
        double z = bias[l];
        for (std::size_t i = 0; i < spec.dim; ++i) z += w(l, i) * ds.features(row, i);
        z *= scale;
        ds.targets(row, l) = label_rng.uniform() < 1.0 / (1.0 + std::exp(-z)) ? 1.0 : 0.0;
        if (z > best) {
          best = z;
          stratum = static_cast<int>(l);
        }
      }
      ds.labels[row] = stratum;
    }
  }
  ds.splits = detail::stratified_splits(ds.labels, ds.classes, task_rng.derive({0x59}));
  return ds;
}

inline Dataset generate_synthetic(std::size_t classes, std::size_t dim, std::size_t n_per_class,
                                  double class_separation, const Rng& rng) {
  SyntheticSpec spec;
  spec.classes = classes;
  spec.dim = dim;
  spec.n_per_class = n_per_class;
  spec.separation = class_separation;
  return generate_synthetic(spec, rng, rng.derive({0xd0a1}));
}

/// Labeled CSV: a header row, one integer label column (named by
/// `label_column`), every other column a float feature. Splits are assigned
/// 70/15/15 per class with `rng`.
inline Dataset load_labeled_csv(std::istream& in, const Rng& rng, const std::string& label_column = "label") {
  auto split_line = [](const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      const auto b = cell.find_first_not_of(" \t\r");
      const auto e = cell.find_last_not_of(" \t\r");
      cells.push_back(b == std::string::npos ? "" : cell.substr(b, e - b + 1));
    }
    return cells;
  };
  std::string line;
  if (!std::getline(in, line)) throw FormatError("csv: missing header row");
  const auto header = split_line(line);
  const auto label_it = std::find(header.begin(), header.end(), label_column);
  if (label_it == header.end()) throw FormatError("csv: no '" + label_column + "' column");
  const auto label_idx = static_cast<std::size_t>(label_it - header.begin());

  std::vector<double> values;
  std::vector<int> labels;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = split_line(line);
    if (cells.size() != header.size()) {
      throw FormatError("csv line " + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                        " cells");
    }
    for (std::size_t c = 0; c < cells.size(); ++c) {
      try {
        std::size_t used = 0;
        if (c == label_idx) {
          const int y = std::stoi(cells[c], &used);
          if (y < 0) throw FormatError("csv line " + std::to_string(line_no) + ": negative label");
          labels.push_back(y);
        } else {
          values.push_back(std::stod(cells[c], &used));
        }
        if (used != cells[c].size()) throw std::invalid_argument(cells[c]);
      } catch (const std::logic_error&) {
        throw FormatError("csv line " + std::to_string(line_no) + ": bad number '" + cells[c] + "'");
      }
    }
  }
  if (labels.empty()) throw FormatError("csv: no data rows");
  Dataset ds;
  const std::size_t dim = header.size() - 1;
  ds.features = Matrix(labels.size(), dim, std::move(values));
  ds.labels = std::move(labels);
  ds.classes = static_cast<std::size_t>(*std::max_element(ds.labels.begin(), ds.labels.end())) + 1;
  ds.splits = detail::stratified_splits(ds.labels, ds.classes, rng.derive({0x59}));
  return ds;
}

inline Dataset load_labeled_csv(const std::string& path, const Rng& rng, const std::string& label_column = "label") {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path);
  return load_labeled_csv(in, rng, label_column);
}

// ---------------------------------------------------------------------------
// KS statistic and partitioning
// ---------------------------------------------------------------------------

/// max over class prefixes of |CDF_p − CDF_q| for two label histograms.
inline double ks_statistic(std::span<const double> hist_p, std::span<const double> hist_q) {
  if (hist_p.size() != hist_q.size()) throw ShapeError("ks_statistic: histogram lengths differ");
  const double np = std::accumulate(hist_p.begin(), hist_p.end(), 0.0);
  const double nq = std::accumulate(hist_q.begin(), hist_q.end(), 0.0);
  if (!(np > 0.0) || !(nq > 0.0)) throw InputError("ks_statistic: empty histogram");
  double cp = 0.0, cq = 0.0, ks = 0.0;
  for (std::size_t c = 0; c < hist_p.size(); ++c) {
    cp += hist_p[c];
    cq += hist_q[c];
    ks = std::max(ks, std::abs(cp / np - cq / nq));
  }
  return std::min(ks, 1.0);
}

struct PartitionScheme {
  enum class Kind { kIid, kOverlap, kDisjoint };
  Kind kind = Kind::kIid;
  std::size_t classes_per_client = 4;  // overlap only
  std::size_t shared_classes = 2;      // overlap only

  static PartitionScheme iid() { return {Kind::kIid, 0, 0}; }
  static PartitionScheme disjoint() { return {Kind::kDisjoint, 0, 0}; }
  static PartitionScheme overlap(std::size_t per_client, std::size_t shared) {
    return {Kind::kOverlap, per_client, shared};
  }
};

inline std::string to_string(const PartitionScheme& s) {
  switch (s.kind) {
    case PartitionScheme::Kind::kIid: return "iid";
    case PartitionScheme::Kind::kDisjoint: return "disjoint";
    case PartitionScheme::Kind::kOverlap:
      return "overlap(" + std::to_string(s.classes_per_client) + "," + std::to_string(s.shared_classes) + ")";
  }
  return "iid";
}

struct PartitionPlan {
  std::vector<std::vector<std::size_t>> shards;        // dataset row indices per client
  std::vector<std::vector<std::size_t>> histograms;    // per-client label counts
  double mean_ks = 0.0;
};

inline double mean_pairwise_ks(const std::vector<std::vector<std::size_t>>& histograms) {
  if (histograms.size() < 2) return 0.0;
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < histograms.size(); ++a) {
    for (std::size_t b = a + 1; b < histograms.size(); ++b) {
      std::vector<double> p(histograms[a].begin(), histograms[a].end());
      std::vector<double> q(histograms[b].begin(), histograms[b].end());
      total += ks_statistic(p, q);
      ++pairs;
    }
  }
  return total / static_cast<double>(pairs);
}

/// Splits the train rows over `clients` shards.
///  - iid: per class, shuffled rows are dealt round-robin with one cursor
///    carried across classes, so histograms differ by at most one per prefix.
///  - disjoint: contiguous class blocks, one per client (KS = 1 pairwise).
///  - overlap(k, m): client s owns k−m classes and additionally samples the
///    first m classes owned by client s+1; each class is split evenly among
///    the clients holding it. Requires clients·(k−m) == classes.
inline PartitionPlan partition(const Dataset& ds, std::size_t clients, const PartitionScheme& scheme, const Rng& rng) {
  const std::size_t C = ds.classes;
  if (clients < 1) throw ParameterError("partition: need at least one client");

  // holders[c] = clients that receive samples of class c
  std::vector<std::vector<std::size_t>> holders(C);
  switch (scheme.kind) {
    case PartitionScheme::Kind::kIid:
      break;
    case PartitionScheme::Kind::kDisjoint: {
      if (C < clients) throw ParameterError("partition: disjoint needs classes >= clients");
      for (std::size_t s = 0; s < clients; ++s)
        for (std::size_t c = s * C / clients; c < (s + 1) * C / clients; ++c) holders[c].push_back(s);
      break;
    }
    case PartitionScheme::Kind::kOverlap: {
      const std::size_t k = scheme.classes_per_client;
      const std::size_t m = scheme.shared_classes;
      if (m < 1 || m >= k) throw ParameterError("partition: overlap needs 1 <= shared < classes_per_client");
      const std::size_t own = k - m;
      if (clients < 2 || clients * own != C) {
        throw ParameterError("partition: overlap(" + std::to_string(k) + "," + std::to_string(m) +
                             ") needs clients*(k-m) == classes and at least 2 clients");
      }
      for (std::size_t s = 0; s < clients; ++s) {
        for (std::size_t c = s * own; c < (s + 1) * own; ++c) holders[c].push_back(s);
        for (std::size_t i = 0; i < m; ++i) {
          const std::size_t c = ((s + 1) * own + i) % C;
          if (std::find(holders[c].begin(), holders[c].end(), s) == holders[c].end()) holders[c].push_back(s);
        }
      }
      for (auto& h : holders) std::sort(h.begin(), h.end());
      break;
    }
  }

  PartitionPlan plan;
  plan.shards.resize(clients);
  plan.histograms.assign(clients, std::vector<std::size_t>(C, 0));
  const auto train = ds.indices(Split::kTrain);
  std::size_t cursor = 0;
  for (std::size_t c = 0; c < C; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i : train)
      if (ds.labels[i] == static_cast<int>(c)) members.push_back(i);
    Rng class_rng = rng.derive({c});
    class_rng.shuffle(std::span<std::size_t>(members));
    for (std::size_t i = 0; i < members.size(); ++i) {
      std::size_t s;
      if (scheme.kind == PartitionScheme::Kind::kIid) {
        s = cursor++ % clients;
      } else {
        const auto& h = holders[c];
        if (h.empty()) throw ParameterError("partition: class " + std::to_string(c) + " has no holder");
        s = h[i % h.size()];
      }
      plan.shards[s].push_back(members[i]);
      ++plan.histograms[s][c];
    }
  }
  for (std::size_t s = 0; s < clients; ++s) {
    if (plan.shards[s].empty()) throw ParameterError("partition: client " + std::to_string(s) + " got no data");
    std::sort(plan.shards[s].begin(), plan.shards[s].end());
  }
  plan.mean_ks = mean_pairwise_ks(plan.histograms);
  return plan;
}

/// Text manifest: header lines then one "client <id> <count>: idx..." line
/// per client.
inline void write_manifest(std::ostream& os, const PartitionPlan& plan, const PartitionScheme& scheme) {
  os << "spdcfl-partition 1\n";
  os << "scheme " << to_string(scheme) << "\n";
  os << "clients " << plan.shards.size() << "\n";
  std::ostringstream ks;
  ks.precision(17);
  ks << plan.mean_ks;
  os << "mean_ks " << ks.str() << "\n";
  for (std::size_t s = 0; s < plan.shards.size(); ++s) {
    os << "client " << s << " " << plan.shards[s].size() << ":";
    for (std::size_t i : plan.shards[s]) os << " " << i;
    os << "\n";
  }
}

}  // namespace spdcfl
