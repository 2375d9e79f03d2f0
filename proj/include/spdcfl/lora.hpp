#pragma once

// LoRA adapters: ΔW = B·A with B (h1 x r) zero-initialized and A (r x h2)
// Gaussian. Also the accumulated dense delta kept across rank drops and the
// binary checkpoint format.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "spdcfl/error.hpp"
#include "spdcfl/numerics.hpp"

namespace spdcfl {

/// Output x input dimensions of one adapted linear layer (h1 x h2).
struct LayerShape {
  std::size_t out = 0;
  std::size_t in = 0;
  bool operator==(const LayerShape&) const = default;
};

struct LoRAAdapter {
  std::size_t layer_id = 0;
  Matrix b;  // h1 x r
  Matrix a;  // r x h2

  std::size_t rank() const noexcept { return a.rows(); }
  LayerShape shape() const noexcept { return {b.rows(), a.cols()}; }
  std::size_t parameter_count() const noexcept { return b.size() + a.size(); }
};

/// One adapter per adapted layer, all at the same rank.
struct AdapterSet {
  std::vector<LoRAAdapter> layers;

  std::size_t size() const noexcept { return layers.size(); }

  std::size_t rank() const {
    if (layers.empty()) return 0;
    const std::size_t r = layers.front().rank();
    for (const auto& layer : layers) {
      if (layer.rank() != r || layer.b.cols() != r) {
        throw InvariantError("adapter set has mixed ranks");
      }
    }
    return r;
  }

  std::vector<LayerShape> shapes() const {
    std::vector<LayerShape> out;
    out.reserve(layers.size());
    for (const auto& layer : layers) out.push_back(layer.shape());
    return out;
  }

  /// Σ r·(h1 + h2): what one client sends (or receives) per round.
  std::size_t parameter_count() const noexcept {
    std::size_t n = 0;
    for (const auto& layer : layers) n += layer.parameter_count();
    return n;
  }

  bool operator==(const AdapterSet& other) const {
    if (layers.size() != other.layers.size()) return false;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].layer_id != other.layers[i].layer_id || !(layers[i].b == other.layers[i].b) ||
          !(layers[i].a == other.layers[i].a)) {
        return false;
      }
    }
    return true;
  }
};

/// Rank-free per-layer dense matrices (h1 x h2).
struct DenseDelta {
  std::vector<Matrix> layers;

  std::size_t size() const noexcept { return layers.size(); }
};

inline double frobenius_norm(const DenseDelta& d) noexcept {
  double s = 0.0;
  for (const auto& m : d.layers) s += sum_of_squares(m.values());
  return std::sqrt(s);
}

inline DenseDelta operator-(const DenseDelta& a, const DenseDelta& b) {
  if (a.size() != b.size()) throw ShapeError("dense delta layer count mismatch");
  DenseDelta out;
  out.layers.reserve(a.size());
  for (std::size_t j = 0; j < a.size(); ++j) out.layers.push_back(a.layers[j] - b.layers[j]);
  return out;
}

/// r_k = max(r_1 − (k−1)·δ, r_min) for phase k ≥ 1.
struct RankSchedule {
  std::size_t r_initial = 8;
  std::size_t r_min = 2;
  std::size_t delta = 2;
  std::size_t phase = 1;

  void validate() const {
    if (r_min < 1 || r_initial < r_min) {
      throw ParameterError("rank schedule needs r_initial >= r_min >= 1");
    }
    if (delta < 1) throw ParameterError("rank schedule needs delta >= 1");
    if (phase < 1) throw ParameterError("rank schedule phase starts at 1");
  }

  std::size_t current_rank() const noexcept {
    const std::size_t step = (phase - 1) * delta;
    if (step >= r_initial) return r_min;
    return std::max(r_initial - step, r_min);
  }

  /// Whether one more subtraction stays at or above the floor.
  bool can_drop() const noexcept { return current_rank() >= r_min + delta; }
};

inline void check_rank_fits(std::size_t h1, std::size_t h2, std::size_t r) {
  // The rank may exceed min(h1, h2) (e.g. a narrow classifier head sharing the
  // set-wide rank); it only has to be bounded by the wider side.
  if (r < 1 || r > std::max(h1, h2)) {
    throw ParameterError("adapter rank " + std::to_string(r) + " outside [1, " +
                         std::to_string(std::max(h1, h2)) + "] for a " + std::to_string(h1) +
                         "x" + std::to_string(h2) + " layer");
  }
}

inline LoRAAdapter init_adapter(std::size_t h1, std::size_t h2, std::size_t r, double sigma,
                                Rng& rng, std::size_t layer_id = 0) {
  check_rank_fits(h1, h2, r);
  return LoRAAdapter{layer_id, Matrix(h1, r), gaussian_matrix(r, h2, sigma, rng)};
}

/// Fresh adapters for every layer; each layer draws from its own sub-stream.
inline AdapterSet init_adapter_set(std::span<const LayerShape> shapes, std::size_t r,
                                   double sigma, const Rng& rng) {
  AdapterSet set;
  for (std::size_t j = 0; j < shapes.size(); ++j) {
    Rng layer_rng = rng.derive({j});
    set.layers.push_back(init_adapter(shapes[j].out, shapes[j].in, r, sigma, layer_rng, j));
  }
  return set;
}

inline Matrix dense(const LoRAAdapter& adapter) { return matmul(adapter.b, adapter.a); }

inline DenseDelta dense(const AdapterSet& set) {
  DenseDelta out;
  out.layers.reserve(set.size());
  for (const auto& layer : set.layers) out.layers.push_back(dense(layer));
  return out;
}

/// Adapter branch for a row-major batch x (batch x h2): x·Aᵀ·Bᵀ.
inline Matrix forward_contribution(const LoRAAdapter& adapter, const Matrix& x) {
  if (x.cols() != adapter.a.cols()) {
    throw ShapeError("forward_contribution: input " + x.shape_string() + " vs A " +
                     adapter.a.shape_string());
  }
  return matmul_nt(matmul_nt(x, adapter.a), adapter.b);
}

/// Balanced SVD factorization of one dense layer at rank r:
/// B = U·√S, A = √S·Vᵀ. Ranks above min(h1, h2) are padded with zero
/// columns of B / rows of A, which contribute nothing to B·A.
inline LoRAAdapter factorize(const Matrix& delta, std::size_t r, std::size_t layer_id) {
  check_rank_fits(delta.rows(), delta.cols(), r);
  const std::size_t kept = std::min({r, delta.rows(), delta.cols()});
  const TruncatedSvd svd = svd_truncate(delta, kept);
  LoRAAdapter out{layer_id, Matrix(delta.rows(), r), Matrix(r, delta.cols())};
  for (std::size_t k = 0; k < kept; ++k) {
    const double root = std::sqrt(svd.sigma[k]);
    for (std::size_t i = 0; i < delta.rows(); ++i) out.b(i, k) = svd.u(i, k) * root;
    for (std::size_t i = 0; i < delta.cols(); ++i) out.a(k, i) = svd.v(i, k) * root;
  }
  return out;
}

/// New adapters at rank r_new whose products are the best rank-r_new
/// approximations of the accumulated delta.
inline AdapterSet reinit_at_rank(const DenseDelta& acc, std::size_t r_new) {
  if (r_new < 1) throw ParameterError("reinit_at_rank: rank must be >= 1");
  AdapterSet set;
  for (std::size_t j = 0; j < acc.size(); ++j) set.layers.push_back(factorize(acc.layers[j], r_new, j));
  return set;
}

/// acc ← λ·acc + (1−λ)·dense(phase_final); the first call just adopts
/// dense(phase_final).
inline DenseDelta accumulate(const std::optional<DenseDelta>& acc, const AdapterSet& phase_final,
                             double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw ParameterError("accumulate: lambda must lie in [0, 1]");
  }
  DenseDelta current = dense(phase_final);
  if (!acc) return current;
  if (acc->size() != current.size()) throw ShapeError("accumulate: layer count mismatch");
  DenseDelta out;
  out.layers.reserve(current.size());
  for (std::size_t j = 0; j < current.size(); ++j) {
    if (!acc->layers[j].same_shape(current.layers[j])) {
      throw ShapeError("accumulate: layer " + std::to_string(j) + " shape mismatch");
    }
    Matrix m = acc->layers[j] * lambda;
    m.add_scaled(current.layers[j], 1.0 - lambda);
    out.layers.push_back(std::move(m));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint: "SPDL", u32 version, u32 layer count, per layer u32 h1/h2/r,
// then per layer B and A as row-major little-endian f64.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff),
                              static_cast<char>((v >> 24) & 0xff)};
  os.write(b.data(), 4);
}

inline void put_f64(std::ostream& os, double d) {
  const auto bits = std::bit_cast<std::uint64_t>(d);
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
  os.write(b.data(), 8);
}

inline std::uint32_t get_u32(std::istream& is) {
  std::array<unsigned char, 4> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 4)) throw FormatError("checkpoint truncated");
  return std::uint32_t{b[0]} | (std::uint32_t{b[1]} << 8) | (std::uint32_t{b[2]} << 16) |
         (std::uint32_t{b[3]} << 24);
}

inline double get_f64(std::istream& is) {
  std::array<unsigned char, 8> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 8)) throw FormatError("checkpoint truncated");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= std::uint64_t{b[i]} << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const AdapterSet& set) {
  os.write("SPDL", 4);
  detail::put_u32(os, kCheckpointVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(set.size()));
  for (const auto& layer : set.layers) {
    detail::put_u32(os, static_cast<std::uint32_t>(layer.b.rows()));
    detail::put_u32(os, static_cast<std::uint32_t>(layer.a.cols()));
    detail::put_u32(os, static_cast<std::uint32_t>(layer.rank()));
  }
  for (const auto& layer : set.layers) {
    for (double v : layer.b.values()) detail::put_f64(os, v);
    for (double v : layer.a.values()) detail::put_f64(os, v);
  }
  if (!os) throw FormatError("failed writing checkpoint");
}

inline AdapterSet read_checkpoint(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || std::memcmp(magic.data(), "SPDL", 4) != 0) {
    throw FormatError("not an adapter checkpoint (bad magic)");
  }
  const std::uint32_t version = detail::get_u32(is);
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t count = detail::get_u32(is);
  std::vector<std::array<std::uint32_t, 3>> dims(count);
  for (auto& d : dims) {
    for (auto& v : d) v = detail::get_u32(is);
    if (d[0] == 0 || d[1] == 0 || d[2] == 0) throw FormatError("checkpoint has an empty layer");
  }
  AdapterSet set;
  for (std::uint32_t j = 0; j < count; ++j) {
    const auto [h1, h2, r] = dims[j];
    LoRAAdapter layer{j, Matrix(h1, r), Matrix(r, h2)};
    for (double& v : layer.b.values()) v = detail::get_f64(is);
    for (double& v : layer.a.values()) v = detail::get_f64(is);
    set.layers.push_back(std::move(layer));
  }
  return set;
}

inline void save_checkpoint(const std::string& path, const AdapterSet& set) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  write_checkpoint(os, set);
}

inline AdapterSet load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  return read_checkpoint(is);
}

}  // namespace spdcfl
