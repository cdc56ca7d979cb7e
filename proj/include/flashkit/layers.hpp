#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "flashkit/tensor.hpp"

namespace flashkit {

/// Ordered registry of named trainable tensors.
///
/// Each tensor drawn from the store is initialized from a generator seeded by
/// the store seed mixed with a hash of the parameter name, so a parameter's
/// initial value depends only on (seed, name) and not on creation order.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor value;
  };

  explicit ParamStore(std::uint64_t seed = 0) : seed_(seed) {}

  Tensor normal(const std::string& name, Shape shape, double stddev = 0.02);
  Tensor constant(const std::string& name, Shape shape, double value);
  /// Registers an externally built tensor (it becomes a requires_grad leaf).
  Tensor adopt(const std::string& name, Tensor value);

  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::vector<Tensor> tensors() const;
  /// Throws ContractError for an unknown name.
  Tensor find(const std::string& name) const;
  bool contains(const std::string& name) const;
  std::size_t total_count() const;
  std::size_t count_with_prefix(const std::string& prefix) const;
  std::uint64_t seed() const noexcept { return seed_; }

 private:
  std::uint64_t seed_;
  std::vector<Entry> entries_;
};

/// Seed for the parameter called `name` in a model seeded with `seed`.
std::uint64_t param_seed(std::uint64_t seed, std::string_view name);

// ---------------------------------------------------------------------------

struct DenseParams {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
};

DenseParams make_dense(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out);
/// y = x·W + b over the last axis of `x`.
Tensor dense(const Tensor& x, const DenseParams& p);

enum class NormKind { layer, scale };

NormKind parse_norm_kind(std::string_view name);
std::string_view norm_kind_name(NormKind kind);

struct NormParams {
  NormKind kind = NormKind::layer;
  Tensor gamma;   // [d], layer norm only
  Tensor beta;    // [d], layer norm only
  Tensor scalar;  // rank 0, scale norm only
  double eps = 1e-5;
};

NormParams make_norm(ParamStore& store, const std::string& prefix, NormKind kind, std::size_t d);
Tensor layer_norm(const Tensor& x, const NormParams& p);
Tensor scale_norm(const Tensor& x, const NormParams& p);
/// Dispatches on `p.kind`.
Tensor apply_norm(const Tensor& x, const NormParams& p);

enum class Activation { relu2, silu, gelu, softmax_rows };
Tensor activation(const Tensor& x, Activation kind);

struct ScaleOffsetParams {
  Tensor gamma;  // [heads, s]
  Tensor beta;   // [heads, s]
  std::size_t heads() const { return gamma.dim(0); }
  std::size_t width() const { return gamma.dim(1); }
};

ScaleOffsetParams make_scale_offset(ParamStore& store, const std::string& prefix, std::size_t heads,
                                    std::size_t s);
/// z·gamma[head] + beta[head] over the last axis.
Tensor scale_offset(const Tensor& z, const ScaleOffsetParams& p, std::size_t head);
/// Every head at once: [..., s] -> [..., heads, s].
Tensor scale_offset_heads(const Tensor& z, const ScaleOffsetParams& p);

/// 10000^(-k/half) for k in [0, half).
std::vector<double> inverse_frequencies(std::size_t half);

/// Sinusoidal absolute positions [length, d] multiplied by a learnable
/// rank-0 `scalar`. The first d/2 columns hold sines, the last d/2 cosines.
Tensor scaled_sin(std::size_t length, std::size_t d, const Tensor& scalar);
/// The learnable scalar of `scaled_sin`, initialized to 1/sqrt(d).
Tensor make_scaled_sin_scalar(ParamStore& store, const std::string& name, std::size_t d);

/// Rotary position embedding over the last axis of `x`.
///
/// `axes` must be increasing and contiguous and exclude the last axis; the
/// position of an element is the row-major index over those axes plus
/// `offset`. Axes between the position axes and the last axis share the
/// position. `inverse` rotates by the negated angle.
Tensor rope(const Tensor& x, const std::vector<std::size_t>& axes, std::size_t offset = 0,
            bool inverse = false);

/// Lengths at or above this use the factorized bias.
inline constexpr std::size_t kFactorizedBiasThreshold = 512;
/// Width of the two factor vectors of the factorized bias.
inline constexpr std::size_t kFactorizedBiasWidth = 128;

struct RelBiasParams {
  std::size_t length = 0;
  Tensor weight;  // [2n-1], direct path
  Tensor a;       // [128], factorized path
  Tensor b;       // [128], factorized path
  bool factorized() const { return length >= kFactorizedBiasThreshold; }
};

RelBiasParams make_rel_bias(ParamStore& store, const std::string& prefix, std::size_t length);
/// Toeplitz [n, n] additive attention bias, n = p.length.
Tensor rel_pos_bias(const RelBiasParams& p);

std::size_t rel_bias_param_count(std::size_t length);

}  // namespace flashkit
