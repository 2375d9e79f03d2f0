#pragma once

// Frozen-base MLP classifier with per-layer LoRA adapters. Gradients are
// analytic and flow to the adapter factors only; the base is read-only.
//
// Layer j computes  Z_j = X_j·(W_j + ΔW_j)ᵀ + b_j,  X_{j+1} = act(Z_j),
// with the last layer linear. Batches are row-major (one sample per row).
//
// Two task modes share the code: multiclass (softmax cross-entropy over
// integer labels) and multi-label (independent sigmoid cross-entropy over a
// 0/1 target matrix). A batch is multi-label iff its target matrix is
// non-empty.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spdcfl/error.hpp"
#include "spdcfl/lora.hpp"
#include "spdcfl/numerics.hpp"

namespace spdcfl {

enum class Activation { kTanh, kRelu, kIdentity };

struct DenseLayer {
  Matrix weight;             // out x in
  std::vector<double> bias;  // out
};

struct FrozenBase {
  std::vector<DenseLayer> layers;
  Activation hidden = Activation::kTanh;

  std::size_t input_dim() const noexcept { return layers.empty() ? 0 : layers.front().weight.cols(); }
  std::size_t output_dim() const noexcept { return layers.empty() ? 0 : layers.back().weight.rows(); }

  std::vector<LayerShape> shapes() const {
    std::vector<LayerShape> out;
    for (const auto& l : layers) out.push_back({l.weight.rows(), l.weight.cols()});
    return out;
  }

  /// Σ (h1·h2 + h1): parameters exchanged when the whole base is trained.
  std::size_t parameter_count() const noexcept {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }

  /// FNV-1a over the bit patterns of every weight and bias.
  std::uint64_t checksum() const noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](double v) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) {
        h ^= (bits >> (8 * i)) & 0xff;
        h *= 0x100000001b3ULL;
      }
    };
    for (const auto& l : layers) {
      for (double v : l.weight.values()) feed(v);
      for (double v : l.bias) feed(v);
    }
    return h;
  }
};

/// widths = {input, hidden..., outputs}. Weights ~ N(0, 1/fan_in), zero bias.
inline FrozenBase make_base(std::span<const std::size_t> widths, Activation hidden, const Rng& rng) {
  if (widths.size() < 2) throw ParameterError("make_base: need at least input and output widths");
  FrozenBase base;
  base.hidden = hidden;
  for (std::size_t j = 0; j + 1 < widths.size(); ++j) {
    if (widths[j] == 0 || widths[j + 1] == 0) throw ParameterError("make_base: zero width");
    Rng layer_rng = rng.derive({j});
    base.layers.push_back(
        {gaussian_matrix(widths[j + 1], widths[j], 1.0 / std::sqrt(static_cast<double>(widths[j])),
                         layer_rng),
         std::vector<double>(widths[j + 1], 0.0)});
  }
  return base;
}

struct Batch {
  Matrix features;          // n x d
  std::vector<int> labels;  // multiclass labels, n entries
  Matrix targets;           // multi-label 0/1 targets (n x L); empty for multiclass

  std::size_t size() const noexcept { return features.rows(); }
  bool multi_label() const noexcept { return !targets.empty(); }
};

struct CLConfig {
  enum class Method { kNone, kEWC, kMAS, kLwF };
  Method method = Method::kNone;
  double mu1 = 0.0;  // stability strength
  double mu2 = 0.0;  // plasticity strength
  double temperature = 1.0;  // LwF only
};

inline std::string to_string(CLConfig::Method m) {
  switch (m) {
    case CLConfig::Method::kNone: return "none";
    case CLConfig::Method::kEWC: return "ewc";
    case CLConfig::Method::kMAS: return "mas";
    case CLConfig::Method::kLwF: return "lwf";
  }
  return "none";
}

inline CLConfig::Method parse_cl_method(const std::string& s) {
  if (s == "none") return CLConfig::Method::kNone;
  if (s == "ewc") return CLConfig::Method::kEWC;
  if (s == "mas") return CLConfig::Method::kMAS;
  if (s == "lwf") return CLConfig::Method::kLwF;
  throw ParameterError("unknown cl method '" + s + "' (expected none|ewc|mas|lwf)");
}

/// Per-layer non-negative weights over dense-delta entries (diagonal FIM for
/// EWC, output-sensitivity magnitudes for MAS).
struct ImportanceEstimate {
  std::vector<Matrix> layers;
  std::uint64_t anchor_tag = 0;
};

struct AdapterGrad {
  Matrix b;
  Matrix a;
};
using AdapterGrads = std::vector<AdapterGrad>;

struct LossAndAdapterGrads {
  double loss = 0.0;
  AdapterGrads grads;
};

inline AdapterGrads zero_grads(const AdapterSet& adapters) {
  AdapterGrads g;
  for (const auto& l : adapters.layers) g.push_back({Matrix(l.b.rows(), l.b.cols()), Matrix(l.a.rows(), l.a.cols())});
  return g;
}

inline void add_into(AdapterGrads& into, const AdapterGrads& other) {
  if (into.size() != other.size()) throw ShapeError("gradient layer count mismatch");
  for (std::size_t j = 0; j < into.size(); ++j) {
    into[j].b += other[j].b;
    into[j].a += other[j].a;
  }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

struct ForwardPass {
  Matrix logits;
  std::vector<Matrix> inputs;     // X_j
  std::vector<Matrix> projected;  // X_j·A_jᵀ (factored path only)
  std::vector<Matrix> outputs;    // post-activation per layer; last == logits

  /// Per-layer representations used for CKA.
  const std::vector<Matrix>& representations() const noexcept { return outputs; }
};

namespace detail {

inline void apply_activation(Matrix& z, Activation act) {
  switch (act) {
    case Activation::kTanh:
      for (double& v : z.values()) v = std::tanh(v);
      break;
    case Activation::kRelu:
      for (double& v : z.values()) v = v > 0.0 ? v : 0.0;
      break;
    case Activation::kIdentity:
      break;
  }
}

// dL/dZ from dL/dY given Y = act(Z).
inline void activation_backward(Matrix& grad, const Matrix& y, Activation act) {
  switch (act) {
    case Activation::kTanh:
      for (std::size_t i = 0; i < grad.size(); ++i) grad.values()[i] *= 1.0 - y.values()[i] * y.values()[i];
      break;
    case Activation::kRelu:
      for (std::size_t i = 0; i < grad.size(); ++i)
        if (!(y.values()[i] > 0.0)) grad.values()[i] = 0.0;
      break;
    case Activation::kIdentity:
      break;
  }
}

inline void add_bias(Matrix& z, const std::vector<double>& bias) {
  for (std::size_t i = 0; i < z.rows(); ++i)
    for (std::size_t c = 0; c < z.cols(); ++c) z(i, c) += bias[c];
}

inline ForwardPass forward_impl(const FrozenBase& base, const AdapterSet* adapters,
                                const DenseDelta* delta, const Matrix& x) {
  if (x.cols() != base.input_dim()) {
    throw ShapeError("forward: input has " + std::to_string(x.cols()) + " features, base expects " +
                     std::to_string(base.input_dim()));
  }
  const std::size_t depth = base.layers.size();
  if (adapters && adapters->size() != depth) throw ShapeError("forward: adapter count != layer count");
  if (delta && delta->size() != depth) throw ShapeError("forward: delta count != layer count");

  ForwardPass pass;
  Matrix current = x;
  for (std::size_t j = 0; j < depth; ++j) {
    const DenseLayer& layer = base.layers[j];
    Matrix z;
    if (delta) {
      z = matmul_nt(current, layer.weight + delta->layers[j]);
    } else {
      z = matmul_nt(current, layer.weight);
      if (adapters) {
        const LoRAAdapter& ad = adapters->layers[j];
        if (ad.shape() != LayerShape{layer.weight.rows(), layer.weight.cols()}) {
          throw ShapeError("forward: adapter " + std::to_string(j) + " does not match its layer");
        }
        Matrix proj = matmul_nt(current, ad.a);
        z += matmul_nt(proj, ad.b);
        pass.projected.push_back(std::move(proj));
      }
    }
    add_bias(z, layer.bias);
    if (j + 1 < depth) apply_activation(z, base.hidden);
    pass.inputs.push_back(std::move(current));
    pass.outputs.push_back(z);
    current = std::move(z);
  }
  pass.logits = std::move(current);
  return pass;
}

// Gradients w.r.t. each layer's pre-activation Z_j, last layer first
// filled from grad_logits. Rows stay independent per sample.
inline std::vector<Matrix> backprop_deltas(const FrozenBase& base, const AdapterSet* adapters,
                                           const DenseDelta* delta, const ForwardPass& pass,
                                           const Matrix& grad_logits) {
  const std::size_t depth = base.layers.size();
  std::vector<Matrix> deltas(depth);
  deltas[depth - 1] = grad_logits;
  for (std::size_t j = depth - 1; j > 0; --j) {
    const Matrix& d = deltas[j];
    Matrix dx;
    if (delta) {
      dx = matmul(d, base.layers[j].weight + delta->layers[j]);
    } else {
      dx = matmul(d, base.layers[j].weight);
      if (adapters) dx += matmul(matmul(d, adapters->layers[j].b), adapters->layers[j].a);
    }
    activation_backward(dx, pass.outputs[j - 1], base.hidden);
    deltas[j - 1] = std::move(dx);
  }
  return deltas;
}

}  // namespace detail

inline ForwardPass forward(const FrozenBase& base, const Matrix& x) {
  return detail::forward_impl(base, nullptr, nullptr, x);
}

inline ForwardPass forward(const FrozenBase& base, const AdapterSet& adapters, const Matrix& x) {
  return detail::forward_impl(base, &adapters, nullptr, x);
}

/// Dense path: every layer uses W + ΔW materialized.
inline ForwardPass forward(const FrozenBase& base, const DenseDelta& delta, const Matrix& x) {
  return detail::forward_impl(base, nullptr, &delta, x);
}

/// Chain rule from dL/dlogits to the adapter factors of a factored pass.
inline AdapterGrads backward_adapters(const FrozenBase& base, const AdapterSet& adapters,
                                      const ForwardPass& pass, const Matrix& grad_logits) {
  const auto deltas = detail::backprop_deltas(base, &adapters, nullptr, pass, grad_logits);
  AdapterGrads grads;
  grads.reserve(deltas.size());
  for (std::size_t j = 0; j < deltas.size(); ++j) {
    const LoRAAdapter& ad = adapters.layers[j];
    Matrix d_b = matmul_tn(deltas[j], pass.projected[j]);
    Matrix d_a = matmul_tn(matmul(deltas[j], ad.b), pass.inputs[j]);
    grads.push_back({std::move(d_b), std::move(d_a)});
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Supervised loss
// ---------------------------------------------------------------------------

/// Mean sigmoid cross-entropy over the batch (summed over labels) and its
/// gradient (σ(z) − y)/batch.
inline LossAndGrad sigmoid_cross_entropy(const Matrix& logits, const Matrix& targets) {
  if (!logits.same_shape(targets)) {
    throw ShapeError("sigmoid_cross_entropy: " + logits.shape_string() + " vs " + targets.shape_string());
  }
  if (logits.rows() == 0) throw InputError("sigmoid_cross_entropy: empty batch");
  const double inv = 1.0 / static_cast<double>(logits.rows());
  LossAndGrad out{0.0, Matrix(logits.rows(), logits.cols())};
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = logits.values()[i];
    const double y = targets.values()[i];
    // log(1 + e^z) − y·z, stable for both signs.
    const double softplus = z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
    out.loss += (softplus - y * z) * inv;
    out.grad.values()[i] = (1.0 / (1.0 + std::exp(-z)) - y) * inv;
  }
  return out;
}

inline LossAndGrad supervised_loss(const Matrix& logits, const Batch& batch) {
  return batch.multi_label() ? sigmoid_cross_entropy(logits, batch.targets)
                             : softmax_cross_entropy(logits, batch.labels);
}

inline LossAndAdapterGrads supervised_loss_and_grads(const FrozenBase& base, const AdapterSet& adapters,
                                                     const Batch& batch) {
  if (batch.size() == 0) throw InputError("supervised loss: empty batch");
  const ForwardPass pass = forward(base, adapters, batch.features);
  LossAndGrad lg = supervised_loss(pass.logits, batch);
  return {lg.loss, backward_adapters(base, adapters, pass, lg.grad)};
}

// ---------------------------------------------------------------------------
// Quadratic anchor penalties (EWC / MAS)
// ---------------------------------------------------------------------------

/// (μ/2)·Σ_j Σ importance ⊙ (B_j·A_j − anchor_j)², differentiated through
/// the product into B and A.
inline LossAndAdapterGrads quadratic_anchor_penalty(const AdapterSet& adapters, const DenseDelta& anchor,
                                                    const ImportanceEstimate& importance, double mu) {
  if (anchor.size() != adapters.size() || importance.layers.size() != adapters.size()) {
    throw ShapeError("anchor penalty: layer count mismatch");
  }
  LossAndAdapterGrads out{0.0, {}};
  for (std::size_t j = 0; j < adapters.size(); ++j) {
    const LoRAAdapter& ad = adapters.layers[j];
    const Matrix& weight = importance.layers[j];
    Matrix diff = dense(ad) - anchor.layers[j];
    if (!weight.same_shape(diff)) throw ShapeError("anchor penalty: importance shape mismatch");
    Matrix g(diff.rows(), diff.cols());
    for (std::size_t i = 0; i < diff.size(); ++i) {
      const double f = weight.values()[i];
      if (f < 0.0) throw InvariantError("anchor penalty: negative importance entry");
      const double d = diff.values()[i];
      out.loss += 0.5 * mu * f * d * d;
      g.values()[i] = mu * f * d;
    }
    out.grads.push_back({matmul_nt(g, ad.a), matmul_tn(ad.b, g)});
  }
  return out;
}

/// (μ/2)·Σ_j F_j (ΔW_j − ΔW_j*)² with F the diagonal Fisher estimate.
inline LossAndAdapterGrads ewc_penalty(const AdapterSet& adapters, const DenseDelta& anchor,
                                       const ImportanceEstimate& fisher, double mu) {
  return quadratic_anchor_penalty(adapters, anchor, fisher, mu);
}

/// (μ/2)·Σ_j M_j (ΔW_j − ΔW_j*)² with M the MAS importance.
inline LossAndAdapterGrads mas_penalty(const AdapterSet& adapters, const DenseDelta& anchor,
                                       const ImportanceEstimate& mas, double mu) {
  return quadratic_anchor_penalty(adapters, anchor, mas, mu);
}

// ---------------------------------------------------------------------------
// Importance estimation
// ---------------------------------------------------------------------------

namespace detail {

// Per-sample dense gradients are outer products δ_i ⊗ x_i, so their squares
// (or absolute values) average to (1/n)·Σ_i (δ_i∘δ_i)ᵀ(x_i∘x_i).
template <typename Elementwise>
ImportanceEstimate per_sample_importance(const FrozenBase& base, const AdapterSet& anchor,
                                         const ForwardPass& pass, const Matrix& per_sample_grad_logits,
                                         Elementwise f) {
  const auto deltas = detail::backprop_deltas(base, &anchor, nullptr, pass, per_sample_grad_logits);
  ImportanceEstimate est;
  const double inv = 1.0 / static_cast<double>(per_sample_grad_logits.rows());
  for (std::size_t j = 0; j < deltas.size(); ++j) {
    Matrix d = deltas[j];
    Matrix x = pass.inputs[j];
    for (double& v : d.values()) v = f(v);
    for (double& v : x.values()) v = f(v);
    est.layers.push_back(matmul_tn(d, x) * inv);
  }
  std::uint64_t tag = 0x84222325cbf29ce4ULL;
  for (const auto& l : anchor.layers)
    for (double v : l.a.values()) tag = (tag ^ std::bit_cast<std::uint64_t>(v)) * 0x100000001b3ULL;
  for (const auto& l : anchor.layers)
    for (double v : l.b.values()) tag = (tag ^ std::bit_cast<std::uint64_t>(v)) * 0x100000001b3ULL;
  est.anchor_tag = tag;
  return est;
}

}  // namespace detail

/// Diagonal Fisher information over dense-delta entries: mean over the shard
/// of the squared per-sample gradient of the supervised loss.
inline ImportanceEstimate estimate_fim(const FrozenBase& base, const AdapterSet& anchor, const Batch& shard) {
  if (shard.size() == 0) throw InputError("estimate_fim: empty shard");
  const ForwardPass pass = forward(base, anchor, shard.features);
  // Per-sample losses: undo the 1/n of the batch-mean gradient.
  Matrix g = supervised_loss(pass.logits, shard).grad * static_cast<double>(shard.size());
  return detail::per_sample_importance(base, anchor, pass, g, [](double v) { return v * v; });
}

/// MAS importance: mean over the shard of |∂‖logits‖²/∂ΔW| per entry.
inline ImportanceEstimate estimate_mas_importance(const FrozenBase& base, const AdapterSet& anchor,
                                                  const Batch& shard) {
  if (shard.size() == 0) throw InputError("estimate_mas_importance: empty shard");
  const ForwardPass pass = forward(base, anchor, shard.features);
  Matrix g = pass.logits * 2.0;
  return detail::per_sample_importance(base, anchor, pass, g, [](double v) { return std::abs(v); });
}

// ---------------------------------------------------------------------------
// LwF distillation
// ---------------------------------------------------------------------------

/// μ × batch mean of the cross-entropy from teacher to student outputs
/// (softmax at the given temperature, or per-label sigmoids for multi-label
/// batches). The teacher is a constant; gradients reach the student only.
inline LossAndAdapterGrads lwf_penalty(const FrozenBase& base, const AdapterSet& student,
                                       const Matrix& teacher_logits, const Batch& batch, double mu,
                                       double temperature = 1.0) {
  if (!(temperature > 0.0)) throw ParameterError("lwf_penalty: temperature must be > 0");
  const ForwardPass pass = forward(base, student, batch.features);
  if (!pass.logits.same_shape(teacher_logits)) {
    throw ShapeError("lwf_penalty: teacher logits " + teacher_logits.shape_string() + " vs student " +
                     pass.logits.shape_string());
  }
  if (mu == 0.0) return {0.0, zero_grads(student)};
  Matrix grad(pass.logits.rows(), pass.logits.cols());
  double loss = 0.0;
  const double inv = 1.0 / static_cast<double>(batch.size());
  if (batch.multi_label()) {
    for (std::size_t i = 0; i < grad.size(); ++i) {
      const double zs = pass.logits.values()[i] / temperature;
      const double pt = 1.0 / (1.0 + std::exp(-teacher_logits.values()[i] / temperature));
      const double softplus = zs > 0.0 ? zs + std::log1p(std::exp(-zs)) : std::log1p(std::exp(zs));
      loss += (softplus - pt * zs) * inv;
      grad.values()[i] = mu * (1.0 / (1.0 + std::exp(-zs)) - pt) * inv / temperature;
    }
  } else {
    const Matrix pt = softmax_rows(teacher_logits, temperature);
    const Matrix ps = softmax_rows(pass.logits, temperature);
    for (std::size_t i = 0; i < grad.rows(); ++i) {
      const auto row = pass.logits.row(i);
      double mx = row[0] / temperature;
      for (double v : row) mx = std::max(mx, v / temperature);
      double z = 0.0;
      for (double v : row) z += std::exp(v / temperature - mx);
      const double log_z = std::log(z) + mx;
      for (std::size_t c = 0; c < grad.cols(); ++c) {
        loss += -pt(i, c) * (row[c] / temperature - log_z) * inv;
        grad(i, c) = mu * (ps(i, c) - pt(i, c)) * inv / temperature;
      }
    }
  }
  return {mu * loss, backward_adapters(base, student, pass, grad)};
}

inline LossAndAdapterGrads lwf_penalty(const FrozenBase& base, const AdapterSet& student,
                                       const AdapterSet& teacher, const Batch& batch, double mu,
                                       double temperature = 1.0) {
  return lwf_penalty(base, student, forward(base, teacher, batch.features).logits, batch, mu, temperature);
}

inline LossAndAdapterGrads lwf_penalty(const FrozenBase& base, const AdapterSet& student,
                                       const DenseDelta& teacher, const Batch& batch, double mu,
                                       double temperature = 1.0) {
  return lwf_penalty(base, student, forward(base, teacher, batch.features).logits, batch, mu, temperature);
}

// ---------------------------------------------------------------------------
// Total local objective and the update
// ---------------------------------------------------------------------------

struct LocalLoss {
  double total = 0.0;
  double supervised = 0.0;
  double stability = 0.0;
  double plasticity = 0.0;
  AdapterGrads grads;
};

/// L_sup + Θ(·; stability anchor, μ1) + Θ(·; plasticity anchor, μ2), with Θ
/// chosen by cl.method. An absent anchor contributes zero. EWC and MAS read
/// their weights from `importance`.
inline LocalLoss total_local_loss(const FrozenBase& base, const AdapterSet& adapters, const Batch& batch,
                                  const std::optional<DenseDelta>& stability_anchor,
                                  const std::optional<DenseDelta>& plasticity_anchor,
                                  const std::optional<ImportanceEstimate>& importance, const CLConfig& cl) {
  using Method = CLConfig::Method;
  LossAndAdapterGrads sup = supervised_loss_and_grads(base, adapters, batch);
  LocalLoss out{sup.loss, sup.loss, 0.0, 0.0, std::move(sup.grads)};
  if (cl.method == Method::kNone) return out;

  auto term = [&](const std::optional<DenseDelta>& anchor, double mu) -> std::optional<LossAndAdapterGrads> {
    if (!anchor || mu == 0.0) return std::nullopt;
    switch (cl.method) {
      case Method::kEWC:
      case Method::kMAS:
        if (!importance) throw InputError("total_local_loss: EWC/MAS need an importance estimate");
        return quadratic_anchor_penalty(adapters, *anchor, *importance, mu);
      case Method::kLwF:
        return lwf_penalty(base, adapters, *anchor, batch, mu, cl.temperature);
      case Method::kNone:
        break;
    }
    return std::nullopt;
  };

  if (auto sta = term(stability_anchor, cl.mu1)) {
    out.stability = sta->loss;
    add_into(out.grads, sta->grads);
  }
  if (auto pla = term(plasticity_anchor, cl.mu2)) {
    out.plasticity = pla->loss;
    add_into(out.grads, pla->grads);
  }
  out.total = out.supervised + out.stability + out.plasticity;
  return out;
}

/// B ← B − η·∂L/∂B, A ← A − η·∂L/∂A.
inline AdapterSet sgd_step(AdapterSet adapters, const AdapterGrads& grads, double eta) {
  if (!(eta >= 0.0)) throw ParameterError("sgd_step: learning rate must be >= 0");
  if (grads.size() != adapters.size()) throw ShapeError("sgd_step: gradient layer count mismatch");
  for (std::size_t j = 0; j < grads.size(); ++j) {
    if (!grads[j].b.all_finite() || !grads[j].a.all_finite()) {
      throw NumericError("sgd_step: non-finite gradient in layer " + std::to_string(j));
    }
    adapters.layers[j].b.add_scaled(grads[j].b, -eta);
    adapters.layers[j].a.add_scaled(grads[j].a, -eta);
  }
  return adapters;
}

// ---------------------------------------------------------------------------
// Full-weight training (FedAvg baseline)
// ---------------------------------------------------------------------------

struct LayerGrad {
  Matrix weight;
  std::vector<double> bias;
};

struct LossAndBaseGrads {
  double loss = 0.0;
  std::vector<LayerGrad> grads;
};

inline LossAndBaseGrads full_loss_and_grads(const FrozenBase& model, const Batch& batch) {
  if (batch.size() == 0) throw InputError("full loss: empty batch");
  const ForwardPass pass = forward(model, batch.features);
  LossAndGrad lg = supervised_loss(pass.logits, batch);
  const auto deltas = detail::backprop_deltas(model, nullptr, nullptr, pass, lg.grad);
  LossAndBaseGrads out{lg.loss, {}};
  for (std::size_t j = 0; j < deltas.size(); ++j) {
    std::vector<double> bias(deltas[j].cols(), 0.0);
    for (std::size_t i = 0; i < deltas[j].rows(); ++i)
      for (std::size_t c = 0; c < deltas[j].cols(); ++c) bias[c] += deltas[j](i, c);
    out.grads.push_back({matmul_tn(deltas[j], pass.inputs[j]), std::move(bias)});
  }
  return out;
}

inline FrozenBase full_sgd_step(FrozenBase model, const std::vector<LayerGrad>& grads, double eta) {
  for (std::size_t j = 0; j < grads.size(); ++j) {
    if (!grads[j].weight.all_finite()) throw NumericError("full_sgd_step: non-finite gradient");
    model.layers[j].weight.add_scaled(grads[j].weight, -eta);
    for (std::size_t c = 0; c < grads[j].bias.size(); ++c) model.layers[j].bias[c] -= eta * grads[j].bias[c];
  }
  return model;
}

}  // namespace spdcfl
