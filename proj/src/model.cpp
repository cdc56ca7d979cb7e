#include "flashkit/model.hpp"

#include <algorithm>
#include <array>
#include <string>
#include <utility>

#include <json.hpp>

#include "flashkit/ops.hpp"

namespace flashkit {

namespace {

constexpr std::array<std::pair<ModelKind, std::string_view>, 5> kKindNames{{
    {ModelKind::flash_quad, "flash_quad"},
    {ModelKind::flash, "flash"},
    {ModelKind::linear, "linear"},
    {ModelKind::transformer_pp, "transformer_pp"},
    {ModelKind::mhsa_mlp, "mhsa_mlp"},
}};

bool is_transformer(ModelKind kind) { return kind == ModelKind::transformer_pp || kind == ModelKind::mhsa_mlp; }

std::size_t norm_count(NormKind kind, std::size_t d) { return kind == NormKind::layer ? 2 * d : 1; }

std::size_t dense_count(std::size_t in, std::size_t out) { return in * out + out; }

std::size_t unit_heads(ModelKind kind) { return kind == ModelKind::flash ? 4 : 2; }

std::size_t unit_bias_length(const ModelConfig& cfg) {
  switch (cfg.kind) {
    case ModelKind::flash_quad: return cfg.length;
    case ModelKind::flash: return cfg.chunk;
    default: return 1;  // the linear unit carries an unused one-entry bias
  }
}

std::string layer_prefix(std::size_t i) { return "layers." + std::to_string(i); }

}  // namespace

ModelKind parse_model_kind(std::string_view name) {
  for (const auto& [kind, text] : kKindNames) {
    if (text == name) return kind;
  }
  throw ContractError("unknown model kind '" + std::string(name) +
                      "' (expected flash_quad, flash, linear, transformer_pp or mhsa_mlp)");
}

std::string_view model_kind_name(ModelKind kind) {
  for (const auto& [k, text] : kKindNames) {
    if (k == kind) return text;
  }
  return "?";
}

ModelConfig ModelConfig::resolved() const {
  ModelConfig r = *this;
  if (r.e == 0) r.e = is_transformer(kind) ? 4 * d : 2 * d;
  if (r.s == 0) r.s = std::min<std::size_t>(128, d);
  if (r.heads == 0) r.heads = std::max<std::size_t>(1, d / 64);
  return r;
}

void ModelConfig::validate() const {
  const ModelConfig r = resolved();
  auto fail = [](const std::string& what) { throw ContractError("invalid model config: " + what); };
  if (r.d == 0 || r.d % 2 != 0) fail("model width d=" + std::to_string(r.d) + " must be positive and even");
  if (r.layers == 0) fail("layers must be positive");
  if (r.length == 0) fail("context length must be positive");
  if (r.vocab < kByteVocab) fail("vocabulary must hold all 256 bytes");
  if (is_transformer(r.kind)) {
    if (r.layers % 2 != 0) {
      fail("transformer kinds pair two layers per block; layers=" + std::to_string(r.layers) + " is odd");
    }
    if (r.d % r.heads != 0) fail("d=" + std::to_string(r.d) + " is not divisible by heads=" + std::to_string(r.heads));
    if ((r.d / r.heads) % 2 != 0) fail("head width must be even for rotary positions");
  } else {
    if (r.s % 2 != 0) fail("shared width s=" + std::to_string(r.s) + " must be even for rotary positions");
  }
  if (r.kind == ModelKind::flash) {
    if (r.chunk == 0 || r.length % r.chunk != 0) {
      fail("chunk size " + std::to_string(r.chunk) + " does not divide context length " + std::to_string(r.length));
    }
  }
}

std::string config_to_json(const ModelConfig& cfg) {
  nlohmann::ordered_json j;
  j["kind"] = std::string(model_kind_name(cfg.kind));
  j["d"] = cfg.d;
  j["e"] = cfg.e;
  j["s"] = cfg.s;
  j["layers"] = cfg.layers;
  j["length"] = cfg.length;
  j["chunk"] = cfg.chunk;
  j["heads"] = cfg.heads;
  j["kernel"] = std::string(kernel_kind_name(cfg.kernel));
  j["aggregation"] = std::string(aggregation_name(cfg.aggregation));
  j["linear_form"] = std::string(linear_form_name(cfg.linear_form));
  j["norm"] = std::string(norm_kind_name(cfg.norm));
  j["causal"] = cfg.causal;
  j["tied_embeddings"] = cfg.tied_embeddings;
  j["vocab"] = cfg.vocab;
  return j.dump();
}

ModelConfig config_from_json(std::string_view text, ModelConfig base) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ContractError(std::string("model config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ContractError("model config must be a JSON object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "kind") base.kind = parse_model_kind(value.get<std::string>());
      else if (key == "d") base.d = value.get<std::size_t>();
      else if (key == "e") base.e = value.get<std::size_t>();
      else if (key == "s") base.s = value.get<std::size_t>();
      else if (key == "layers") base.layers = value.get<std::size_t>();
      else if (key == "length") base.length = value.get<std::size_t>();
      else if (key == "chunk") base.chunk = value.get<std::size_t>();
      else if (key == "heads") base.heads = value.get<std::size_t>();
      else if (key == "kernel") base.kernel = parse_kernel_kind(value.get<std::string>());
      else if (key == "aggregation") base.aggregation = parse_aggregation(value.get<std::string>());
      else if (key == "linear_form") base.linear_form = parse_linear_form(value.get<std::string>());
      else if (key == "norm") base.norm = parse_norm_kind(value.get<std::string>());
      else if (key == "causal") base.causal = value.get<bool>();
      else if (key == "tied_embeddings") base.tied_embeddings = value.get<bool>();
      else if (key == "vocab") base.vocab = value.get<std::size_t>();
      else throw ContractError("unknown model config key '" + key + "'");
    }
  } catch (const nlohmann::json::type_error& e) {
    throw ContractError(std::string("model config has a value of the wrong type: ") + e.what());
  }
  return base;
}

std::size_t expected_param_count(const ModelConfig& config) {
  const ModelConfig c = config.resolved();
  const std::size_t d = c.d, e = c.e, s = c.s;
  std::size_t total = c.vocab * d + 1 + norm_count(c.norm, d);
  if (!c.tied_embeddings) total += dense_count(d, c.vocab);
  if (is_transformer(c.kind)) {
    const std::size_t attention = norm_count(c.norm, d) + 4 * dense_count(d, d);
    const std::size_t ffn = c.kind == ModelKind::transformer_pp
                                ? norm_count(c.norm, d) + dense_count(d, 2 * e) + dense_count(e, d)
                                : norm_count(c.norm, d) + dense_count(d, e) + dense_count(e, d);
    total += c.layers / 2 * (attention + ffn);
  } else {
    const std::size_t unit = norm_count(c.norm, d) + dense_count(d, 2 * e + s) + 2 * unit_heads(c.kind) * s +
                             rel_bias_param_count(unit_bias_length(c)) + dense_count(e, d);
    total += c.layers * unit;
  }
  return total;
}

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg.resolved()), seed_(seed), store_(seed) {
  cfg_.validate();
  const std::size_t d = cfg_.d;
  embedding_ = store_.normal("embed", {cfg_.vocab, d});
  position_scalar_ = make_scaled_sin_scalar(store_, "pos.scalar", d);
  if (is_transformer(cfg_.kind)) {
    for (std::size_t i = 0; i < cfg_.layers / 2; ++i) {
      const std::string prefix = layer_prefix(i);
      TransformerBlock block{make_norm(store_, prefix + ".attn_norm", cfg_.norm, d),
                             make_mhsa_params(store_, prefix + ".attn", d, cfg_.heads), std::nullopt, std::nullopt};
      if (cfg_.kind == ModelKind::transformer_pp) {
        block.glu = make_glu_params(store_, prefix + ".ffn", d, cfg_.e, cfg_.norm);
      } else {
        block.mlp = make_mlp_params(store_, prefix + ".ffn", d, cfg_.e, cfg_.norm);
      }
      blocks_.push_back(std::move(block));
    }
  } else {
    for (std::size_t i = 0; i < cfg_.layers; ++i) {
      units_.push_back(make_gau_params(store_, layer_prefix(i), d, cfg_.e, cfg_.s, unit_heads(cfg_.kind),
                                       unit_bias_length(cfg_), cfg_.norm));
    }
  }
  final_norm_ = make_norm(store_, "final_norm", cfg_.norm, d);
  if (!cfg_.tied_embeddings) head_ = make_dense(store_, "head", d, cfg_.vocab);
}

Tensor Model::embed(std::span<const std::int32_t> tokens, std::size_t batch) const {
  if (batch == 0 || tokens.empty() || tokens.size() % batch != 0) {
    throw DimensionError(std::to_string(tokens.size()) + " tokens do not form " + std::to_string(batch) + " rows");
  }
  const std::size_t length = tokens.size() / batch;
  const auto looked_up = ops::gather_rows(embedding_, tokens, {batch, length});
  return ops::add(looked_up, scaled_sin(length, cfg_.d, position_scalar_));
}

Tensor Model::logits(std::span<const std::int32_t> tokens, std::size_t batch,
                     std::span<const std::int32_t> segment_ids) const {
  return logits_from_embedded(embed(tokens, batch), segment_ids);
}

Tensor Model::logits_from_embedded(const Tensor& x, std::span<const std::int32_t> segment_ids) const {
  if (x.rank() != 3 || x.dim(2) != cfg_.d) {
    throw DimensionError("model input must be [B, T, " + std::to_string(cfg_.d) + "], got " + to_string(x.shape()));
  }
  const std::size_t batch = x.dim(0), length = x.dim(1);
  if (!segment_ids.empty() && segment_ids.size() != batch * length) {
    throw DimensionError("segment ids must match the [B, T] token layout");
  }
  Tensor h = x;
  switch (cfg_.kind) {
    case ModelKind::flash_quad:
      for (const auto& unit : units_) h = GauBlock(unit, {cfg_.causal, cfg_.kernel, false}).forward(h);
      break;
    case ModelKind::flash: {
      if (length % cfg_.chunk != 0) {
        throw DimensionError("length " + std::to_string(length) + " is not a multiple of chunk " +
                             std::to_string(cfg_.chunk));
      }
      const std::size_t chunks = length / cfg_.chunk;
      const auto segments = segment_ids.empty() ? ChunkedSegments::single(batch, chunks, cfg_.chunk)
                                                : ChunkedSegments::from_rows(segment_ids, batch, chunks, cfg_.chunk);
      h = ops::reshape(h, {batch, chunks, cfg_.chunk, cfg_.d});
      for (const auto& unit : units_) {
        h = FlashBlock(unit, {cfg_.causal, cfg_.kernel, cfg_.aggregation}).forward(h, &segments);
      }
      h = ops::reshape(h, {batch, length, cfg_.d});
      break;
    }
    case ModelKind::linear:
      for (const auto& unit : units_) h = linear_unit_forward(h, unit, cfg_.causal, cfg_.linear_form);
      break;
    case ModelKind::transformer_pp:
    case ModelKind::mhsa_mlp:
      for (const auto& block : blocks_) {
        h = ops::add(h, mhsa_forward(apply_norm(h, block.attn_norm), block.attn, cfg_.causal));
        h = block.glu ? glu_forward(h, *block.glu, Activation::gelu) : mlp_forward(h, *block.mlp, Activation::gelu);
      }
      break;
  }
  return project_out(apply_norm(h, final_norm_));
}

Tensor Model::project_out(const Tensor& hidden) const {
  if (hidden.rank() == 0 || hidden.shape().back() != cfg_.d) {
    throw DimensionError("hidden states " + to_string(hidden.shape()) + " do not end in width " +
                         std::to_string(cfg_.d));
  }
  if (head_) return dense(hidden, *head_);
  Shape out_shape = hidden.shape();
  out_shape.back() = cfg_.vocab;
  const auto rows = ops::reshape(hidden, {hidden.numel() / cfg_.d, cfg_.d});
  return ops::reshape(ops::contract(rows, embedding_, "nd,vd->nv"), std::move(out_shape));
}

Tensor lm_loss(const Model& model, std::span<const std::int32_t> tokens, std::size_t batch,
               std::span<const std::int32_t> segment_ids) {
  if (!model.config().causal) throw ContractError("next-token loss needs a causal model");
  const auto logits = model.logits(tokens, batch, segment_ids);
  const std::size_t length = logits.dim(1), vocab = logits.dim(2);
  if (length < 2) throw DimensionError("next-token loss needs at least two positions");
  std::vector<std::int32_t> targets(tokens.size(), 0);
  std::vector<double> weights(tokens.size(), 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t + 1 < length; ++t) {
      targets[b * length + t] = tokens[b * length + t + 1];
      weights[b * length + t] = 1.0;
    }
  }
  return ops::cross_entropy(ops::reshape(logits, {batch * length, vocab}), targets, weights);
}

MlmMask make_mlm_mask(std::span<const std::int32_t> tokens, std::mt19937_64& rng, double rate) {
  if (tokens.empty()) throw ContractError("cannot mask an empty token sequence");
  if (!(rate > 0.0 && rate <= 1.0)) throw ContractError("masking rate must be in (0, 1]");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::int32_t> byte(0, static_cast<std::int32_t>(kByteVocab) - 1);
  MlmMask mask;
  mask.targets.assign(tokens.begin(), tokens.end());
  while (mask.selected == 0) {
    mask.inputs.assign(tokens.begin(), tokens.end());
    mask.weights.assign(tokens.size(), 0.0);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (unit(rng) >= rate) continue;
      ++mask.selected;
      mask.weights[i] = 1.0;
      const double action = unit(rng);
      if (action < 0.8) {
        mask.inputs[i] = kMaskToken;
      } else if (action < 0.9) {
        mask.inputs[i] = byte(rng);
      }
    }
  }
  return mask;
}

Tensor mlm_loss(const Model& model, const MlmMask& mask, std::size_t batch,
                std::span<const std::int32_t> segment_ids) {
  if (model.config().causal) throw ContractError("masked-token loss needs a non-causal model");
  if (model.config().vocab <= static_cast<std::size_t>(kMaskToken)) {
    throw ContractError("masked-token loss needs a vocabulary with the mask id");
  }
  if (mask.selected == 0) throw ContractError("masking plan selects no positions");
  const auto logits = model.logits(mask.inputs, batch, segment_ids);
  const std::size_t rows = logits.dim(0) * logits.dim(1);
  return ops::cross_entropy(ops::reshape(logits, {rows, logits.dim(2)}), mask.targets, mask.weights);
}

}  // namespace flashkit
