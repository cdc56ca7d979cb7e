#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flashkit/attention.hpp"
#include "flashkit/layers.hpp"
#include "flashkit/tensor.hpp"

namespace flashkit {

/// Block stack of a model. `linear` uses token-level causal linear attention
/// inside the gated unit and serves as the slow recurrent baseline.
enum class ModelKind { flash_quad, flash, linear, transformer_pp, mhsa_mlp };

ModelKind parse_model_kind(std::string_view name);
std::string_view model_kind_name(ModelKind kind);

/// Byte vocabulary plus one reserved mask id for masked language modeling.
inline constexpr std::size_t kByteVocab = 256;
inline constexpr std::int32_t kMaskToken = 256;

struct ModelConfig {
  ModelKind kind = ModelKind::flash;
  std::size_t d = 128;
  /// Expanded width; 0 picks 2d for gated units and 4d for transformer
  /// feed-forward layers.
  std::size_t e = 0;
  /// Shared query/key width; 0 picks min(128, d).
  std::size_t s = 0;
  /// Gated-unit count; transformer kinds use layers/2 attention+FFN blocks.
  std::size_t layers = 4;
  std::size_t length = 256;
  std::size_t chunk = 64;
  /// Attention heads of the transformer baselines; 0 picks max(1, d/64).
  std::size_t heads = 0;
  KernelKind kernel = KernelKind::relu2;
  Aggregation aggregation = Aggregation::mean;
  /// Evaluation of the `linear` kind's causal attention.
  LinearForm linear_form = LinearForm::cumsum;
  NormKind norm = NormKind::layer;
  bool causal = true;
  bool tied_embeddings = true;
  std::size_t vocab = kByteVocab;

  /// Copy with every 0 ("automatic") field resolved.
  ModelConfig resolved() const;
  /// Throws ContractError describing the first violated constraint.
  void validate() const;
};

/// JSON object with every config field. `config_from_json` starts from
/// `base` and overrides the keys present; unknown keys throw ContractError.
std::string config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(std::string_view text, ModelConfig base = {});

/// Closed-form parameter count of a model built from `cfg`.
std::size_t expected_param_count(const ModelConfig& cfg);

/// A language model: token embedding plus scaled sinusoid, a block stack,
/// final norm and an output projection (tied to the embedding by default).
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);

  /// Logits [B, T, vocab] for tokens [B, T]. `segment_ids` (same layout)
  /// only affects the chunk-level attention of the mixed kind.
  Tensor logits(std::span<const std::int32_t> tokens, std::size_t batch,
                std::span<const std::int32_t> segment_ids = {}) const;
  /// Token embedding plus positions, [B, T, d].
  Tensor embed(std::span<const std::int32_t> tokens, std::size_t batch) const;
  /// Logits from embedded inputs [B, T, d].
  Tensor logits_from_embedded(const Tensor& x, std::span<const std::int32_t> segment_ids = {}) const;

  const ModelConfig& config() const noexcept { return cfg_; }
  ParamStore& params() noexcept { return store_; }
  const ParamStore& params() const noexcept { return store_; }
  std::uint64_t seed() const noexcept { return seed_; }

  // Components, for incremental decoding.
  struct TransformerBlock {
    NormParams attn_norm;
    MhsaParams attn;
    std::optional<GluParams> glu;
    std::optional<MlpParams> mlp;
  };
  const std::vector<GauParams>& units() const noexcept { return units_; }
  const std::vector<TransformerBlock>& transformer_blocks() const noexcept { return blocks_; }
  const Tensor& embedding() const noexcept { return embedding_; }
  const Tensor& position_scalar() const noexcept { return position_scalar_; }
  const NormParams& final_norm() const noexcept { return final_norm_; }
  /// Projects final hidden states [..., d] to logits [..., vocab].
  Tensor project_out(const Tensor& hidden) const;

 private:
  ModelConfig cfg_;
  std::uint64_t seed_;
  ParamStore store_;
  Tensor embedding_;
  Tensor position_scalar_;
  std::vector<GauParams> units_;
  std::vector<TransformerBlock> blocks_;
  NormParams final_norm_;
  std::optional<DenseParams> head_;
};

/// Mean next-token cross-entropy (nats) over the first T-1 positions.
/// Throws ContractError for a non-causal model.
Tensor lm_loss(const Model& model, std::span<const std::int32_t> tokens, std::size_t batch,
               std::span<const std::int32_t> segment_ids = {});

/// Corruption plan for masked language modeling.
struct MlmMask {
  std::vector<std::int32_t> inputs;   // corrupted tokens
  std::vector<std::int32_t> targets;  // original tokens
  std::vector<double> weights;        // 1 at selected positions, else 0
  std::size_t selected = 0;
};

/// Selects each position with probability `rate`; a selected position becomes
/// the mask id (80%), a random byte (10%) or stays (10%). Draws again until
/// at least one position is selected.
MlmMask make_mlm_mask(std::span<const std::int32_t> tokens, std::mt19937_64& rng, double rate = 0.15);

/// Mean cross-entropy over the selected positions only.
/// Throws ContractError for a causal model or a plan without selections.
Tensor mlm_loss(const Model& model, const MlmMask& mask, std::size_t batch,
                std::span<const std::int32_t> segment_ids = {});

}  // namespace flashkit
