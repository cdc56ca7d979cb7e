#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "flashkit/attention.hpp"
#include "flashkit/model.hpp"

namespace flashkit {

/// Running aggregate of chunk summaries K_h^T V_h (divided by the chunk size
/// in mean mode). `read` applies the same normalization as the parallel
/// chunk aggregation: the average over folded chunks in mean mode, the plain
/// sum otherwise.
class ChunkFold {
 public:
  ChunkFold(std::size_t key_width, std::size_t value_width, Aggregation mode);

  /// Folds one full chunk: keys [rows, s], values [rows, e].
  void fold(std::span<const double> keys, std::span<const double> values, std::size_t rows);
  /// Folds a precomputed [s, e] summary.
  void fold_summary(std::span<const double> summary);
  /// out[e] = query[s] . aggregate; zero while nothing is folded.
  void read(std::span<const double> query, std::span<double> out) const;
  /// Aggregate as the parallel path sees it ([s, e], normalized).
  std::vector<double> normalized() const;

  std::size_t folded() const noexcept { return folded_; }
  std::span<const double> sum() const noexcept { return sum_; }

 private:
  std::size_t key_width_, value_width_;
  Aggregation mode_;
  std::vector<double> sum_;
  std::size_t folded_ = 0;
};

/// Incremental decoding state of one gated-unit layer.
///
/// Mixed chunk layers hold a fixed [C, ·] buffer for the chunk in progress
/// plus the folded aggregate, so their size never depends on how many tokens
/// were emitted. Quadratic layers keep the full key/value history instead.
struct LayerCache {
  ChunkFold fold;
  std::vector<double> quad_keys;  // [capacity, s]
  std::vector<double> lin_keys;   // [capacity, s]; empty for quadratic layers
  std::vector<double> values;     // [capacity, e]
  std::size_t rows = 0;           // rows of the buffers in use
  std::vector<double> bias;       // [n, n] relative bias, derived from parameters
};

struct DecodeCache {
  std::vector<LayerCache> layers;
  std::size_t position = 0;
  std::size_t max_length = 0;

  /// Numbers of state held across steps: aggregates plus key/value buffers
  /// (the parameter-derived bias tables are not state).
  std::size_t footprint() const;
};

/// Closed-form state size of a mixed chunk model's decode cache:
/// layers * (s*e + C*(2s + e)).
std::size_t flash_cache_size(const ModelConfig& cfg);

/// Fresh cache for `model`. Throws ContractError unless the model is causal
/// and of the flash or flash_quad kind.
DecodeCache init_cache(const Model& model);

/// Consumes `token` at the cache's position and returns next-token logits
/// [vocab]. Throws ContractError once the configured length is used up.
std::vector<double> decode_step(const Model& model, DecodeCache& cache, std::int32_t token);

std::int32_t greedy_token(std::span<const double> logits);

/// Draws a token from softmax(logits / temperature). Throws ContractError
/// for a non-positive temperature or empty logits.
std::int32_t sample_token(std::span<const double> logits, std::mt19937_64& rng, double temperature = 1.0);

struct Generation {
  std::vector<std::int32_t> tokens;   // generated tokens only
  std::vector<double> step_seconds;   // wall time of every decode_step, prompt included
};

using TokenChooser = std::function<std::int32_t(std::span<const double> logits)>;

/// Feeds `prompt`, then appends `choose(logits)` until `max_new` tokens were
/// produced or the context is full.
Generation generate(const Model& model, std::span<const std::int32_t> prompt, std::size_t max_new,
                    const TokenChooser& choose);
Generation greedy_decode(const Model& model, std::span<const std::int32_t> prompt, std::size_t max_new);

}  // namespace flashkit
