#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flashkit/layers.hpp"
#include "flashkit/tensor.hpp"

namespace flashkit {

/// Attention weight function: squared relu of the length-scaled scores, or
/// a row softmax of the 1/sqrt(s)-scaled scores (ablation).
enum class KernelKind { relu2, softmax };

KernelKind parse_kernel_kind(std::string_view name);
std::string_view kernel_kind_name(KernelKind kind);

/// How per-chunk key/value summaries are combined across chunks. `mean`
/// divides each summary by the chunk length and averages over the visible
/// chunks; `sum` adds the raw summaries.
enum class Aggregation { mean, sum };

Aggregation parse_aggregation(std::string_view name);
std::string_view aggregation_name(Aggregation mode);

/// How causal token-level linear attention is evaluated. `cumsum`
/// materializes every prefix state [B, T, s, e] with an exclusive cumulative
/// sum; `scan` walks the sequence once, holding one [s, e] state.
enum class LinearForm { cumsum, scan };

LinearForm parse_linear_form(std::string_view name);
std::string_view linear_form_name(LinearForm form);

/// Document ids laid out as [batch, chunks, chunk]. Ids must not decrease
/// along a row. An empty id list means one document per row.
struct ChunkedSegments {
  std::size_t batch = 0;
  std::size_t chunks = 0;
  std::size_t chunk = 0;
  std::vector<std::int32_t> ids;

  static ChunkedSegments single(std::size_t batch, std::size_t chunks, std::size_t chunk);
  /// Regroups [batch, chunks * chunk] ids; throws if not non-decreasing.
  static ChunkedSegments from_rows(std::span<const std::int32_t> ids, std::size_t batch, std::size_t chunks,
                                   std::size_t chunk);
};

/// [B, G, G] chunk visibility: weight > 0 iff the chunks share a document
/// (and h < g when causal); rows are normalized to sum 1, empty rows stay 0.
Tensor segment_ids_to_mask(const ChunkedSegments& segments, bool causal);

/// Attention weights [..., n, n] from q, k [..., n, s] and bias [n, n].
/// The relu2 kernel divides scores by `length_scale` and zeroes the upper
/// triangle when causal.
Tensor quad_kernel(const Tensor& q, const Tensor& k, const Tensor& bias, double length_scale, bool causal,
                   KernelKind kind);

/// Per-chunk quadratic attention over [B, G, C, s] queries/keys and
/// [B, G, C, e] values with a [C, C] bias shared by every chunk.
Tensor local_quadratic_attn(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& bias, bool causal,
                            KernelKind kind);

/// Sums per-chunk summaries [B, G, s, e] over the chunks visible to each
/// chunk as a single prefix scan. `steps`, when given, receives the number of
/// dependent accumulation steps taken per example.
Tensor aggregate_chunks(const Tensor& summaries, const ChunkedSegments& segments, bool causal, Aggregation mode,
                        std::size_t* steps = nullptr);

/// Chunk-level linear attention: per-chunk K_hᵀV_h summaries aggregated
/// across visible chunks, then read out with the chunk's queries.
Tensor global_linear_attn(const Tensor& lin_q, const Tensor& lin_k, const Tensor& v,
                          const ChunkedSegments& segments, bool causal, Aggregation mode,
                          std::size_t* steps = nullptr);

/// The same aggregation expressed as a contraction against the dense
/// segment mask. Mean mode only.
Tensor global_linear_attn_masked(const Tensor& lin_q, const Tensor& lin_k, const Tensor& v,
                                 const ChunkedSegments& segments, bool causal);

/// Token-level linear attention over [B, T, ·]: non-causal Q(KᵀV); causal
/// out_t = Q_t·M_{t-1} with M_t = M_{t-1} + K_tV_tᵀ (exclusive of t).
Tensor token_linear_attention(const Tensor& q, const Tensor& k, const Tensor& v, bool causal,
                              LinearForm form = LinearForm::cumsum);

// ---------------------------------------------------------------------------

/// Parameters of one gated attention unit. `heads` is 2 (query, key) for the
/// quadratic block and 4 (quadratic and linear query/key) for the mixed one.
struct GauParams {
  NormParams norm;
  DenseParams uv;  // d -> 2e + s, split [e, e, s]
  ScaleOffsetParams qk;
  RelBiasParams bias;
  DenseParams out;  // e -> d

  std::size_t model_width() const { return uv.weight.dim(0); }
  std::size_t expanded_width() const { return out.weight.dim(0); }
  std::size_t shared_width() const { return qk.width(); }
};

GauParams make_gau_params(ParamStore& store, const std::string& prefix, std::size_t d, std::size_t e, std::size_t s,
                          std::size_t heads, std::size_t bias_length, NormKind norm);

/// Gated unit on [B, T, d] whose attention is token-level linear attention
/// scaled by 1/T. Uses the two scale/offset heads of `p` and ignores its
/// relative bias. The slow recurrent baseline.
Tensor linear_unit_forward(const Tensor& x, const GauParams& p, bool causal, LinearForm form = LinearForm::cumsum);

struct GauOptions {
  bool causal = true;
  KernelKind kernel = KernelKind::relu2;
  /// Replaces the attention matrix with the identity (test hook).
  bool identity_attention = false;
};

/// Quadratic gated attention unit over [B, T, d].
class GauBlock {
 public:
  GauBlock(GauParams params, GauOptions options);
  Tensor forward(const Tensor& x) const;
  const GauParams& params() const noexcept { return params_; }
  const GauOptions& options() const noexcept { return options_; }

 private:
  GauParams params_;
  GauOptions options_;
};

struct FlashOptions {
  bool causal = true;
  KernelKind kernel = KernelKind::relu2;
  Aggregation aggregation = Aggregation::mean;
};

/// Mixed chunk attention unit over [B, G, C, d].
class FlashBlock {
 public:
  FlashBlock(GauParams params, FlashOptions options);
  /// `segments` may be null for one document per row.
  Tensor forward(const Tensor& x, const ChunkedSegments* segments = nullptr) const;
  const GauParams& params() const noexcept { return params_; }
  const FlashOptions& options() const noexcept { return options_; }

 private:
  GauParams params_;
  FlashOptions options_;
};

/// Gated feed-forward layer (U ⊙ V)W_o with the activation applied to both
/// branches of the fused projection.
struct GluParams {
  NormParams norm;
  DenseParams uv;  // d -> 2e
  DenseParams out;
};

GluParams make_glu_params(ParamStore& store, const std::string& prefix, std::size_t d, std::size_t e,
                          NormKind norm);
/// Residual GLU block: x + ((U ⊙ V) W_o) with U, V from norm(x).
Tensor glu_forward(const Tensor& x, const GluParams& p, Activation act);

/// Two-layer perceptron act(x W_1) W_2 with pre-norm and residual.
struct MlpParams {
  NormParams norm;
  DenseParams hidden;
  DenseParams out;
};

MlpParams make_mlp_params(ParamStore& store, const std::string& prefix, std::size_t d, std::size_t hidden,
                          NormKind norm);
Tensor mlp_forward(const Tensor& x, const MlpParams& p, Activation act);

/// Multi-head softmax self-attention with rotary positions on queries and
/// keys: 4 d×d projections with biases.
struct MhsaParams {
  DenseParams query, key, value, out;
  std::size_t heads = 1;
};

MhsaParams make_mhsa_params(ParamStore& store, const std::string& prefix, std::size_t d, std::size_t heads);
/// Attention output [B, T, d] (no residual).
Tensor mhsa_forward(const Tensor& x, const MhsaParams& p, bool causal);

}  // namespace flashkit
