#include "flashkit/decode.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <string>

#include "flashkit/ops.hpp"

namespace flashkit {

ChunkFold::ChunkFold(std::size_t key_width, std::size_t value_width, Aggregation mode)
    : key_width_(key_width), value_width_(value_width), mode_(mode), sum_(key_width * value_width, 0.0) {}

void ChunkFold::fold(std::span<const double> keys, std::span<const double> values, std::size_t rows) {
  if (rows == 0 || keys.size() < rows * key_width_ || values.size() < rows * value_width_) {
    throw DimensionError("chunk fold needs [rows, s] keys and [rows, e] values");
  }
  const double scale = mode_ == Aggregation::mean ? 1.0 / static_cast<double>(rows) : 1.0;
  std::vector<double> summary(sum_.size(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* k = keys.data() + r * key_width_;
    const double* v = values.data() + r * value_width_;
    for (std::size_t i = 0; i < key_width_; ++i) {
      double* row = summary.data() + i * value_width_;
      for (std::size_t j = 0; j < value_width_; ++j) row[j] += k[i] * v[j];
    }
  }
  for (std::size_t i = 0; i < sum_.size(); ++i) sum_[i] += summary[i] * scale;
  ++folded_;
}

void ChunkFold::fold_summary(std::span<const double> summary) {
  if (summary.size() != sum_.size()) throw DimensionError("chunk summary must be [s, e]");
  for (std::size_t i = 0; i < sum_.size(); ++i) sum_[i] += summary[i];
  ++folded_;
}

void ChunkFold::read(std::span<const double> query, std::span<double> out) const {
  std::fill(out.begin(), out.end(), 0.0);
  if (folded_ == 0) return;
  const double w = mode_ == Aggregation::mean ? 1.0 / static_cast<double>(folded_) : 1.0;
  for (std::size_t i = 0; i < key_width_; ++i) {
    const double qi = query[i] * w;
    const double* row = sum_.data() + i * value_width_;
    for (std::size_t j = 0; j < value_width_; ++j) out[j] += qi * row[j];
  }
}

std::vector<double> ChunkFold::normalized() const {
  std::vector<double> out = sum_;
  if (mode_ == Aggregation::mean && folded_ > 0) {
    for (double& x : out) x /= static_cast<double>(folded_);
  }
  return out;
}

std::size_t DecodeCache::footprint() const {
  std::size_t n = 0;
  for (const auto& l : layers) {
    n += l.quad_keys.size() + l.lin_keys.size() + l.values.size();
    if (!l.lin_keys.empty()) n += l.fold.sum().size();
  }
  return n;
}

std::size_t flash_cache_size(const ModelConfig& config) {
  const auto c = config.resolved();
  return c.layers * (c.s * c.e + c.chunk * (2 * c.s + c.e));
}

DecodeCache init_cache(const Model& model) {
  const auto& cfg = model.config();
  if (!cfg.causal) throw ContractError("incremental decoding needs a causal model");
  if (cfg.kind != ModelKind::flash && cfg.kind != ModelKind::flash_quad) {
    throw ContractError("incremental decoding supports the flash and flash_quad kinds, not " +
                        std::string(model_kind_name(cfg.kind)));
  }
  const bool mixed = cfg.kind == ModelKind::flash;
  DecodeCache cache;
  cache.max_length = cfg.length;
  NoGradScope no_grad;
  for (const auto& unit : model.units()) {
    LayerCache layer{ChunkFold(cfg.s, cfg.e, cfg.aggregation), {}, {}, {}, 0, {}};
    if (mixed) {
      layer.quad_keys.assign(cfg.chunk * cfg.s, 0.0);
      layer.lin_keys.assign(cfg.chunk * cfg.s, 0.0);
      layer.values.assign(cfg.chunk * cfg.e, 0.0);
    }
    const auto bias = rel_pos_bias(unit.bias);
    layer.bias.assign(bias.data().begin(), bias.data().end());
    cache.layers.push_back(std::move(layer));
  }
  return cache;
}

namespace {

struct UnitProjection {
  Tensor u, v;
  std::vector<Tensor> heads;  // each [1, s]
};

// Same front half as the parallel unit, for one token at a global position.
UnitProjection project_token(const Tensor& h, const GauParams& p, std::size_t position) {
  const std::size_t e = p.expanded_width(), s = p.shared_width();
  const auto uv = ops::map(dense(apply_norm(h, p.norm), p.uv), ops::Unary::silu);
  auto parts = ops::split(uv, -1, {e, e, s});
  const auto base = rope(scale_offset_heads(parts[2], p.qk), {0}, position);
  return {parts[0], parts[1], ops::unstack(base, -2)};
}

double dot(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

// Weights of the current query row over `rows` cached keys, matching the
// parallel kernel: relu(q.k / span + bias)^2, or a softmax of q.k/sqrt(s) + bias.
std::vector<double> row_weights(const double* query, const std::vector<double>& keys, std::size_t rows,
                                std::size_t s, const double* bias_row, double span, KernelKind kind) {
  std::vector<double> w(rows);
  if (kind == KernelKind::relu2) {
    for (std::size_t j = 0; j < rows; ++j) {
      const double r = std::max(0.0, dot(query, keys.data() + j * s, s) / span + bias_row[j]);
      w[j] = r * r;
    }
    return w;
  }
  const double inv_sqrt_s = 1.0 / std::sqrt(static_cast<double>(s));
  double mx = -INFINITY;
  for (std::size_t j = 0; j < rows; ++j) {
    w[j] = dot(query, keys.data() + j * s, s) * inv_sqrt_s + bias_row[j];
    mx = std::max(mx, w[j]);
  }
  double total = 0.0;
  for (double& x : w) total += (x = std::exp(x - mx));
  for (double& x : w) x /= total;
  return w;
}

}  // namespace

std::vector<double> decode_step(const Model& model, DecodeCache& cache, std::int32_t token) {
  const auto& cfg = model.config();
  if (cache.position >= cache.max_length) {
    throw ContractError("decode position " + std::to_string(cache.position) + " exceeds the context length " +
                        std::to_string(cache.max_length));
  }
  if (token < 0 || static_cast<std::size_t>(token) >= cfg.vocab) {
    throw ContractError("token " + std::to_string(token) + " outside the vocabulary");
  }
  if (cache.layers.size() != model.units().size()) throw ContractError("decode cache was built for another model");
  NoGradScope no_grad;
  const std::size_t d = cfg.d, s = cfg.s, e = cfg.e;
  const std::size_t position = cache.position;
  const bool mixed = cfg.kind == ModelKind::flash;

  // Token embedding plus the scaled sinusoid row for this position.
  std::vector<double> x(d);
  {
    const auto table = model.embedding().data();
    const double scalar = model.position_scalar().item();
    const std::size_t half = d / 2;
    const auto freq = inverse_frequencies(half);
    for (std::size_t k = 0; k < half; ++k) {
      const double angle = static_cast<double>(position) * freq[k];
      x[k] = table[static_cast<std::size_t>(token) * d + k] + std::sin(angle) * scalar;
      x[half + k] = table[static_cast<std::size_t>(token) * d + half + k] + std::cos(angle) * scalar;
    }
  }
  Tensor h({1, d}, std::move(x));

  for (std::size_t l = 0; l < model.units().size(); ++l) {
    const auto& unit = model.units()[l];
    auto& layer = cache.layers[l];
    const auto proj = project_token(h, unit, position);
    const double* quad_q = proj.heads[0].data().data();
    const double* quad_k = proj.heads[1].data().data();
    const auto value = proj.v.data();

    const std::size_t row = layer.rows;
    if (mixed) {
      std::copy_n(quad_k, s, layer.quad_keys.begin() + static_cast<long>(row * s));
      std::copy_n(proj.heads[3].data().data(), s, layer.lin_keys.begin() + static_cast<long>(row * s));
      std::copy_n(value.data(), e, layer.values.begin() + static_cast<long>(row * e));
    } else {
      layer.quad_keys.insert(layer.quad_keys.end(), quad_k, quad_k + s);
      layer.values.insert(layer.values.end(), value.begin(), value.end());
    }
    layer.rows = row + 1;

    // Local (or full-history) quadratic part; the bias row is the current
    // position within the span, restricted to the visible prefix.
    const std::size_t n = mixed ? cfg.chunk : cfg.length;
    const auto weights = row_weights(quad_q, layer.quad_keys, layer.rows, s, layer.bias.data() + row * n,
                                     static_cast<double>(n), cfg.kernel);
    std::vector<double> attended(e, 0.0);
    for (std::size_t j = 0; j < layer.rows; ++j) {
      const double* vj = layer.values.data() + j * e;
      for (std::size_t c = 0; c < e; ++c) attended[c] += weights[j] * vj[c];
    }
    if (mixed) {
      std::vector<double> linear(e);
      layer.fold.read(proj.heads[2].data(), linear);
      for (std::size_t c = 0; c < e; ++c) attended[c] += linear[c];
      if (layer.rows == cfg.chunk) {
        layer.fold.fold(layer.lin_keys, layer.values, cfg.chunk);
        layer.rows = 0;
      }
    }
    const Tensor gated = ops::mul(proj.u, Tensor({1, e}, std::move(attended)));
    h = ops::add(dense(gated, unit.out), h);
  }
  ++cache.position;
  const auto logits = model.project_out(apply_norm(h, model.final_norm()));
  return logits.to_vector();
}

std::int32_t greedy_token(std::span<const double> logits) {
  if (logits.empty()) throw ContractError("greedy choice over empty logits");
  return static_cast<std::int32_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

std::int32_t sample_token(std::span<const double> logits, std::mt19937_64& rng, double temperature) {
  if (logits.empty()) throw ContractError("sampling from empty logits");
  if (!(temperature > 0.0)) throw ContractError("sampling temperature must be positive");
  const double top = *std::max_element(logits.begin(), logits.end());
  std::vector<double> weights(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) weights[i] = std::exp((logits[i] - top) / temperature);
  std::discrete_distribution<std::int32_t> pick(weights.begin(), weights.end());
  return pick(rng);
}

Generation generate(const Model& model, std::span<const std::int32_t> prompt, std::size_t max_new,
                    const TokenChooser& choose) {
  if (prompt.empty()) throw ContractError("decoding needs at least one prompt token");
  if (prompt.size() > model.config().length) {
    throw ContractError("prompt of " + std::to_string(prompt.size()) + " tokens exceeds the context length " +
                        std::to_string(model.config().length));
  }
  auto cache = init_cache(model);
  Generation result;
  std::vector<double> logits;
  auto timed_step = [&](std::int32_t token) {
    const auto start = std::chrono::steady_clock::now();
    logits = decode_step(model, cache, token);
    result.step_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  };
  for (auto token : prompt) timed_step(token);
  while (result.tokens.size() < max_new) {
    const auto next = choose(logits);
    result.tokens.push_back(next);
    if (result.tokens.size() == max_new || cache.position >= cache.max_length) break;
    timed_step(next);
  }
  return result;
}

Generation greedy_decode(const Model& model, std::span<const std::int32_t> prompt, std::size_t max_new) {
  return generate(model, prompt, max_new, [](std::span<const double> logits) { return greedy_token(logits); });
}

}  // namespace flashkit
