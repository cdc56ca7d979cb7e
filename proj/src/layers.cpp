#include "flashkit/layers.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "flashkit/ops.hpp"

namespace flashkit {

namespace {

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Labels for an einsum over the leading axes of a rank-`rank` operand.
std::string leading_labels(std::size_t rank) {
  static constexpr std::string_view kLabels = "abcdefghijklmnopqrstuv";
  if (rank > kLabels.size()) throw DimensionError("rank " + std::to_string(rank) + " is too large");
  return std::string(kLabels.substr(0, rank));
}

}  // namespace

std::uint64_t param_seed(std::uint64_t seed, std::string_view name) {
  return splitmix(fnv1a(name) ^ splitmix(seed));
}

Tensor ParamStore::normal(const std::string& name, Shape shape, double stddev) {
  std::mt19937_64 rng(param_seed(seed_, name));
  return adopt(name, Tensor::randn(std::move(shape), rng, stddev));
}

Tensor ParamStore::constant(const std::string& name, Shape shape, double value) {
  return adopt(name, Tensor::full(std::move(shape), value));
}

Tensor ParamStore::adopt(const std::string& name, Tensor value) {
  if (contains(name)) throw ContractError("parameter '" + name + "' registered twice");
  if (!value.is_leaf()) value = value.detach();
  value.set_requires_grad(true);
  entries_.push_back({name, value});
  return value;
}

std::vector<Tensor> ParamStore::tensors() const {
  std::vector<Tensor> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.value);
  return out;
}

Tensor ParamStore::find(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e.value;
  }
  throw ContractError("no parameter named '" + name + "'");
}

bool ParamStore::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.name == name; });
}

std::size_t ParamStore::total_count() const { return count_with_prefix(""); }

std::size_t ParamStore::count_with_prefix(const std::string& prefix) const {
  std::size_t n = 0;
  for (const auto& e : entries_) {
    if (e.name.starts_with(prefix)) n += e.value.numel();
  }
  return n;
}

// ---------------------------------------------------------------------------

DenseParams make_dense(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out) {
  return {store.normal(prefix + ".weight", {in, out}), store.constant(prefix + ".bias", {out}, 0.0)};
}

Tensor dense(const Tensor& x, const DenseParams& p) {
  if (p.weight.rank() != 2) throw DimensionError("dense weight must be [in, out]");
  if (x.rank() == 0 || x.shape().back() != p.weight.dim(0)) {
    throw DimensionError("dense input " + to_string(x.shape()) + " does not match weight " +
                         to_string(p.weight.shape()));
  }
  const std::string lead = leading_labels(x.rank() - 1);
  const auto y = ops::contract(x, p.weight, lead + "y," + "yz->" + lead + "z");
  return p.bias.defined() ? ops::add(y, p.bias) : y;
}

NormKind parse_norm_kind(std::string_view name) {
  if (name == "layer") return NormKind::layer;
  if (name == "scale") return NormKind::scale;
  throw ContractError("unknown norm kind '" + std::string(name) + "' (expected layer or scale)");
}

std::string_view norm_kind_name(NormKind kind) { return kind == NormKind::layer ? "layer" : "scale"; }

NormParams make_norm(ParamStore& store, const std::string& prefix, NormKind kind, std::size_t d) {
  NormParams p;
  p.kind = kind;
  if (kind == NormKind::layer) {
    p.gamma = store.constant(prefix + ".gamma", {d}, 1.0);
    p.beta = store.constant(prefix + ".beta", {d}, 0.0);
  } else {
    p.scalar = store.constant(prefix + ".scalar", {}, 1.0);
  }
  return p;
}

Tensor layer_norm(const Tensor& x, const NormParams& p) {
  const auto centred = ops::sub(x, ops::reduce(x, {-1}, ops::Reduce::mean, true));
  const auto var = ops::reduce(ops::map(centred, ops::Unary::square), {-1}, ops::Reduce::mean, true);
  const auto normalized = ops::mul(centred, ops::map(ops::shift(var, p.eps), ops::Unary::rsqrt));
  return ops::add(ops::mul(normalized, p.gamma), p.beta);
}

Tensor scale_norm(const Tensor& x, const NormParams& p) {
  const auto mean_square = ops::reduce(ops::map(x, ops::Unary::square), {-1}, ops::Reduce::mean, true);
  const auto normalized = ops::mul(x, ops::map(ops::shift(mean_square, p.eps), ops::Unary::rsqrt));
  return ops::mul(normalized, p.scalar);
}

Tensor apply_norm(const Tensor& x, const NormParams& p) {
  return p.kind == NormKind::layer ? layer_norm(x, p) : scale_norm(x, p);
}

Tensor activation(const Tensor& x, Activation kind) {
  switch (kind) {
    case Activation::relu2: return ops::map(x, ops::Unary::relu2);
    case Activation::silu: return ops::map(x, ops::Unary::silu);
    case Activation::gelu: return ops::map(x, ops::Unary::gelu);
    case Activation::softmax_rows: return ops::softmax_rows(x);
  }
  throw ContractError("unknown activation");
}

ScaleOffsetParams make_scale_offset(ParamStore& store, const std::string& prefix, std::size_t heads,
                                    std::size_t s) {
  return {store.normal(prefix + ".gamma", {heads, s}), store.constant(prefix + ".beta", {heads, s}, 0.0)};
}

Tensor scale_offset(const Tensor& z, const ScaleOffsetParams& p, std::size_t head) {
  if (head >= p.heads()) {
    throw ContractError("scale/offset head " + std::to_string(head) + " out of range (heads = " +
                        std::to_string(p.heads()) + ")");
  }
  if (z.rank() == 0 || z.shape().back() != p.width()) {
    throw DimensionError("scale/offset input " + to_string(z.shape()) + " needs last extent " +
                         std::to_string(p.width()));
  }
  const auto gamma = ops::reshape(ops::slice(p.gamma, 0, head, head + 1), {p.width()});
  const auto beta = ops::reshape(ops::slice(p.beta, 0, head, head + 1), {p.width()});
  return ops::add(ops::mul(z, gamma), beta);
}

Tensor scale_offset_heads(const Tensor& z, const ScaleOffsetParams& p) {
  if (z.rank() == 0 || z.shape().back() != p.width()) {
    throw DimensionError("scale/offset input " + to_string(z.shape()) + " needs last extent " +
                         std::to_string(p.width()));
  }
  Shape expanded = z.shape();
  expanded.insert(expanded.end() - 1, 1);
  return ops::add(ops::mul(ops::reshape(z, expanded), p.gamma), p.beta);
}

std::vector<double> inverse_frequencies(std::size_t half) {
  std::vector<double> f(half);
  for (std::size_t k = 0; k < half; ++k) {
    f[k] = std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(half));
  }
  return f;
}

Tensor scaled_sin(std::size_t length, std::size_t d, const Tensor& scalar) {
  if (d % 2 != 0) throw DimensionError("scaled sinusoid width must be even, got " + std::to_string(d));
  const std::size_t half = d / 2;
  const auto freq = inverse_frequencies(half);
  std::vector<double> table(length * d);
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t k = 0; k < half; ++k) {
      const double angle = static_cast<double>(pos) * freq[k];
      table[pos * d + k] = std::sin(angle);
      table[pos * d + half + k] = std::cos(angle);
    }
  }
  return ops::mul(Tensor({length, d}, std::move(table)), scalar);
}

Tensor make_scaled_sin_scalar(ParamStore& store, const std::string& name, std::size_t d) {
  return store.constant(name, {}, 1.0 / std::sqrt(static_cast<double>(d)));
}

Tensor rope(const Tensor& x, const std::vector<std::size_t>& axes, std::size_t offset, bool inverse) {
  const std::size_t rank = x.rank();
  if (rank == 0 || x.shape().back() % 2 != 0) {
    throw DimensionError("rope needs an even last extent, got " + to_string(x.shape()));
  }
  if (axes.empty()) throw ContractError("rope needs at least one position axis");
  for (std::size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] + 1 >= rank || (i > 0 && axes[i] != axes[i - 1] + 1)) {
      throw ContractError("rope position axes must be contiguous, increasing and precede the last axis");
    }
  }
  const Shape& shape = x.shape();
  const std::size_t width = shape.back();
  const std::size_t half = width / 2;
  std::size_t outer = 1, span = 1, inner = 1;
  for (std::size_t i = 0; i < axes.front(); ++i) outer *= shape[i];
  for (std::size_t ax : axes) span *= shape[ax];
  for (std::size_t i = axes.back() + 1; i + 1 < rank; ++i) inner *= shape[i];

  // Angle table per position; sin sign carries the direction.
  const auto freq = inverse_frequencies(half);
  std::vector<double> cos_t(span * half), sin_t(span * half);
  const double dir = inverse ? -1.0 : 1.0;
  for (std::size_t pos = 0; pos < span; ++pos) {
    for (std::size_t k = 0; k < half; ++k) {
      const double angle = static_cast<double>(pos + offset) * freq[k];
      cos_t[pos * half + k] = std::cos(angle);
      sin_t[pos * half + k] = dir * std::sin(angle);
    }
  }

  // Rotates rows of `src` into `dst`; sign = -1 applies the transpose.
  auto rotate = [=](std::span<const double> src, double* dst, double sign, bool accumulate) {
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t pos = 0; pos < span; ++pos) {
        const double* c = cos_t.data() + pos * half;
        const double* sn = sin_t.data() + pos * half;
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = ((o * span + pos) * inner + in) * width;
          const double* x1 = src.data() + base;
          const double* x2 = x1 + half;
          double* y1 = dst + base;
          double* y2 = y1 + half;
          for (std::size_t k = 0; k < half; ++k) {
            const double s = sign * sn[k];
            const double a = x1[k] * c[k] - x2[k] * s;
            const double b = x2[k] * c[k] + x1[k] * s;
            if (accumulate) {
              y1[k] += a;
              y2[k] += b;
            } else {
              y1[k] = a;
              y2[k] = b;
            }
          }
        }
      }
    }
  };

  std::vector<double> y(x.numel());
  rotate(x.data(), y.data(), 1.0, false);
  Tensor out(shape, std::move(y));
  if (auto* tape = recording_tape({&x})) {
    mark_differentiable(out);
    tape->record("rope", {x}, out, [x, rotate](std::span<const double> g) {
      rotate(g, grad_slot(x).data(), -1.0, true);
    });
  }
  return out;
}

RelBiasParams make_rel_bias(ParamStore& store, const std::string& prefix, std::size_t length) {
  if (length == 0) throw ContractError("relative bias length must be positive");
  RelBiasParams p;
  p.length = length;
  if (p.factorized()) {
    p.a = store.normal(prefix + ".a", {kFactorizedBiasWidth});
    p.b = store.normal(prefix + ".b", {kFactorizedBiasWidth});
  } else {
    p.weight = store.normal(prefix + ".w", {2 * length - 1});
  }
  return p;
}

Tensor rel_pos_bias(const RelBiasParams& p) {
  const std::size_t n = p.length;
  if (n == 0) throw ContractError("relative bias length must be positive");
  if (!p.factorized()) {
    if (p.weight.numel() != 2 * n - 1) {
      throw DimensionError("relative bias weight for length " + std::to_string(n) + " needs " +
                           std::to_string(2 * n - 1) + " entries");
    }
    // Pad by n zeros and lay n copies end to end; dropping the last n values
    // and folding into rows of 3n-2 shifts each row left by one, so row i
    // column (n-1)+j reads w[(n-1) + j - i].
    auto t = ops::tile(ops::pad(p.weight, 0, 0, n), 0, n);
    t = ops::slice(t, 0, 0, t.numel() - n);
    t = ops::reshape(t, {n, 3 * n - 2});
    const std::size_t r = (2 * n - 1) / 2;
    return ops::slice(t, 1, r, 3 * n - 2 - r);
  }
  const auto a = rope(ops::tile(ops::reshape(p.a, {1, kFactorizedBiasWidth}), 0, n), {0});
  const auto b = rope(ops::tile(ops::reshape(p.b, {1, kFactorizedBiasWidth}), 0, n), {0});
  return ops::contract(a, b, "mk,nk->mn");
}

std::size_t rel_bias_param_count(std::size_t length) {
  return length >= kFactorizedBiasThreshold ? 2 * kFactorizedBiasWidth : 2 * length - 1;
}

}  // namespace flashkit
