#include "flashkit/attention.hpp"

#include <algorithm>
#include <cmath>

#include "flashkit/ops.hpp"

namespace flashkit {

namespace {

std::string leading(std::size_t rank) {
  static constexpr std::string_view kLabels = "abcdefgh";
  if (rank > kLabels.size()) throw DimensionError("attention operands have too many leading axes");
  return std::string(kLabels.substr(0, rank));
}

// relu(scores·scale + bias)² with the strict upper triangle zeroed when
// causal. Scores are [..., n, n]; bias is [n, n].
Tensor relu2_weights(const Tensor& scores, const Tensor& bias, double scale, bool causal) {
  const std::size_t n = bias.dim(0);
  const std::size_t block = n * n;
  const std::size_t mats = scores.numel() / std::max<std::size_t>(block, 1);
  const auto ss = scores.data();
  const auto bs = bias.data();
  std::vector<double> y(scores.numel(), 0.0);
  for (std::size_t m = 0; m < mats; ++m) {
    const double* sm = ss.data() + m * block;
    double* ym = y.data() + m * block;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t limit = causal ? i + 1 : n;
      for (std::size_t j = 0; j < limit; ++j) {
        const double r = std::max(0.0, sm[i * n + j] * scale + bs[i * n + j]);
        ym[i * n + j] = r * r;
      }
    }
  }
  Tensor out(scores.shape(), std::move(y));
  if (auto* tape = recording_tape({&scores, &bias})) {
    mark_differentiable(out);
    tape->record("relu2_weights", {scores, bias}, out, [scores, bias, out, scale, n, mats](std::span<const double> g) {
      const auto ys = out.data();
      const auto gs = grad_slot(scores);
      const auto gb = grad_slot(bias);
      const std::size_t block = n * n;
      for (std::size_t m = 0; m < mats; ++m) {
        for (std::size_t idx = 0; idx < block; ++idx) {
          const double y = ys[m * block + idx];
          if (y == 0.0) continue;
          const double slope = g[m * block + idx] * 2.0 * std::sqrt(y);
          if (!gs.empty()) gs[m * block + idx] += slope * scale;
          if (!gb.empty()) gb[idx] += slope;
        }
      }
    });
  }
  return out;
}

struct ChunkRange {
  std::size_t lo = 0;
  std::size_t hi = 0;  // exclusive
};

// Visible chunk range per (example, chunk). With non-decreasing ids the
// chunks sharing a document with chunk g form one contiguous run.
std::vector<ChunkRange> visible_ranges(const ChunkedSegments& segments, std::size_t batch, std::size_t chunks,
                                       bool causal) {
  std::vector<ChunkRange> ranges(batch * chunks);
  const bool single = segments.ids.empty();
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<std::int32_t> lo_id(chunks), hi_id(chunks);
    for (std::size_t g = 0; g < chunks; ++g) {
      if (single) {
        lo_id[g] = hi_id[g] = 0;
        continue;
      }
      const auto* row = segments.ids.data() + (b * chunks + g) * segments.chunk;
      lo_id[g] = *std::min_element(row, row + segments.chunk);
      hi_id[g] = *std::max_element(row, row + segments.chunk);
    }
    for (std::size_t g = 0; g < chunks; ++g) {
      // First chunk whose ids reach this chunk's smallest id, and one past
      // the last chunk whose ids start at or before its largest id.
      const std::size_t lo =
          static_cast<std::size_t>(std::lower_bound(hi_id.begin(), hi_id.end(), lo_id[g]) - hi_id.begin());
      std::size_t hi =
          static_cast<std::size_t>(std::upper_bound(lo_id.begin(), lo_id.end(), hi_id[g]) - lo_id.begin());
      if (causal) hi = std::min(hi, g);
      ranges[b * chunks + g] = {lo, std::max(lo, hi)};
    }
  }
  return ranges;
}

void check_segments(const ChunkedSegments& segments, std::size_t batch, std::size_t chunks) {
  if (segments.ids.empty()) return;
  if (segments.batch != batch || segments.chunks != chunks) {
    throw DimensionError("segment ids cover [" + std::to_string(segments.batch) + ", " +
                         std::to_string(segments.chunks) + "] chunks but the input has [" + std::to_string(batch) +
                         ", " + std::to_string(chunks) + "]");
  }
}

void check_chunked(const Tensor& t, const char* what) {
  if (t.rank() != 4) throw DimensionError(std::string(what) + " must be [B, G, C, ·], got " + to_string(t.shape()));
}

// Shared front half of both units: pre-norm, fused SiLU projection, split,
// per-head scale/offset and rotary positions over `rope_axes`.
struct Projected {
  Tensor u, v;
  std::vector<Tensor> heads;
};

Projected project(const Tensor& x, const GauParams& p, const std::vector<std::size_t>& rope_axes) {
  const std::size_t e = p.expanded_width();
  const std::size_t s = p.shared_width();
  if (x.rank() == 0 || x.shape().back() != p.model_width()) {
    throw DimensionError("attention unit input " + to_string(x.shape()) + " does not match width " +
                         std::to_string(p.model_width()));
  }
  const auto uv = ops::map(dense(apply_norm(x, p.norm), p.uv), ops::Unary::silu);
  auto parts = ops::split(uv, -1, {e, e, s});
  const auto base = rope(scale_offset_heads(parts[2], p.qk), rope_axes);
  return {parts[0], parts[1], ops::unstack(base, -2)};
}


// Token-by-token recurrence out[t] = q[t] . S_t with S_t = sum_{u<t} k[u] v[u]^T.
// Only the running [s, e] state is kept; the backward pass rebuilds each S_t
// by peeling k[t] v[t]^T off the final state while accumulating the
// q[t] gout[t]^T sum that the keys and values see.
Tensor causal_linear_scan(const Tensor& q, const Tensor& k, const Tensor& v) {
  const std::size_t batch = q.dim(0), length = q.dim(1), s = q.dim(2), e = v.dim(2);
  const auto qd = q.data(), kd = k.data(), vd = v.data();
  std::vector<double> out(batch * length * e, 0.0);
  std::vector<double> state(s * e);
  for (std::size_t b = 0; b < batch; ++b) {
    std::fill(state.begin(), state.end(), 0.0);
    for (std::size_t t = 0; t < length; ++t) {
      const double* qt = qd.data() + (b * length + t) * s;
      const double* kt = kd.data() + (b * length + t) * s;
      const double* vt = vd.data() + (b * length + t) * e;
      double* ot = out.data() + (b * length + t) * e;
      for (std::size_t i = 0; i < s; ++i) {
        const double* row = state.data() + i * e;
        for (std::size_t j = 0; j < e; ++j) ot[j] += qt[i] * row[j];
      }
      for (std::size_t i = 0; i < s; ++i) {
        double* row = state.data() + i * e;
        for (std::size_t j = 0; j < e; ++j) row[j] += kt[i] * vt[j];
      }
    }
  }
  Tensor result({batch, length, e}, std::move(out));
  if (auto* tape = recording_tape({&q, &k, &v})) {
    mark_differentiable(result);
    tape->record("causal_linear_scan", {q, k, v}, result, [q, k, v, batch, length, s, e](std::span<const double> g) {
      const auto qd = q.data(), kd = k.data(), vd = v.data();
      auto gq = grad_slot(q), gk = grad_slot(k), gv = grad_slot(v);
      std::vector<double> state(s * e), carried(s * e);
      for (std::size_t b = 0; b < batch; ++b) {
        std::fill(state.begin(), state.end(), 0.0);
        std::fill(carried.begin(), carried.end(), 0.0);
        for (std::size_t t = 0; t < length; ++t) {
          const double* kt = kd.data() + (b * length + t) * s;
          const double* vt = vd.data() + (b * length + t) * e;
          for (std::size_t i = 0; i < s; ++i) {
            for (std::size_t j = 0; j < e; ++j) state[i * e + j] += kt[i] * vt[j];
          }
        }
        for (std::size_t t = length; t-- > 0;) {
          const std::size_t row = b * length + t;
          const double* qt = qd.data() + row * s;
          const double* kt = kd.data() + row * s;
          const double* vt = vd.data() + row * e;
          const double* gt = g.data() + row * e;
          for (std::size_t i = 0; i < s; ++i) {
            for (std::size_t j = 0; j < e; ++j) state[i * e + j] -= kt[i] * vt[j];
          }
          if (!gq.empty()) {
            for (std::size_t i = 0; i < s; ++i) {
              double acc = 0.0;
              for (std::size_t j = 0; j < e; ++j) acc += state[i * e + j] * gt[j];
              gq[row * s + i] += acc;
            }
          }
          if (!gk.empty()) {
            for (std::size_t i = 0; i < s; ++i) {
              double acc = 0.0;
              for (std::size_t j = 0; j < e; ++j) acc += carried[i * e + j] * vt[j];
              gk[row * s + i] += acc;
            }
          }
          if (!gv.empty()) {
            for (std::size_t i = 0; i < s; ++i) {
              for (std::size_t j = 0; j < e; ++j) gv[row * e + j] += carried[i * e + j] * kt[i];
            }
          }
          for (std::size_t i = 0; i < s; ++i) {
            for (std::size_t j = 0; j < e; ++j) carried[i * e + j] += qt[i] * gt[j];
          }
        }
      }
    });
  }
  return result;
}

}  // namespace

KernelKind parse_kernel_kind(std::string_view name) {
  if (name == "relu2") return KernelKind::relu2;
  if (name == "softmax") return KernelKind::softmax;
  throw ContractError("unknown attention kernel '" + std::string(name) + "' (expected relu2 or softmax)");
}

std::string_view kernel_kind_name(KernelKind kind) { return kind == KernelKind::relu2 ? "relu2" : "softmax"; }

Aggregation parse_aggregation(std::string_view name) {
  if (name == "mean") return Aggregation::mean;
  if (name == "sum") return Aggregation::sum;
  throw ContractError("unknown chunk aggregation '" + std::string(name) + "' (expected mean or sum)");
}

std::string_view aggregation_name(Aggregation mode) { return mode == Aggregation::mean ? "mean" : "sum"; }

LinearForm parse_linear_form(std::string_view name) {
  if (name == "cumsum") return LinearForm::cumsum;
  if (name == "scan") return LinearForm::scan;
  throw ContractError("unknown linear attention form '" + std::string(name) + "' (expected cumsum or scan)");
}

std::string_view linear_form_name(LinearForm form) { return form == LinearForm::cumsum ? "cumsum" : "scan"; }

ChunkedSegments ChunkedSegments::single(std::size_t batch, std::size_t chunks, std::size_t chunk) {
  return {batch, chunks, chunk, {}};
}

ChunkedSegments ChunkedSegments::from_rows(std::span<const std::int32_t> ids, std::size_t batch,
                                           std::size_t chunks, std::size_t chunk) {
  const std::size_t row = chunks * chunk;
  if (ids.size() != batch * row) {
    throw DimensionError("segment ids hold " + std::to_string(ids.size()) + " entries, expected " +
                         std::to_string(batch * row));
  }
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 1; t < row; ++t) {
      if (ids[b * row + t] < ids[b * row + t - 1]) {
        throw ContractError("segment ids must not decrease along a row (row " + std::to_string(b) +
                            ", position " + std::to_string(t) + ")");
      }
    }
  }
  return {batch, chunks, chunk, {ids.begin(), ids.end()}};
}

Tensor segment_ids_to_mask(const ChunkedSegments& segments, bool causal) {
  const std::size_t batch = segments.batch, chunks = segments.chunks, chunk = segments.chunk;
  std::vector<double> mask(batch * chunks * chunks, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<std::int32_t> lo(chunks, 0), hi(chunks, 0);
    if (!segments.ids.empty()) {
      for (std::size_t g = 0; g < chunks; ++g) {
        const auto* row = segments.ids.data() + (b * chunks + g) * chunk;
        lo[g] = *std::min_element(row, row + chunk);
        hi[g] = *std::max_element(row, row + chunk);
      }
    }
    for (std::size_t g = 0; g < chunks; ++g) {
      double* out = mask.data() + (b * chunks + g) * chunks;
      double total = 0.0;
      for (std::size_t h = 0; h < chunks; ++h) {
        const bool overlap = lo[g] <= hi[h] && hi[g] >= lo[h];
        const bool visible = overlap && (!causal || h < g);
        out[h] = visible ? 1.0 : 0.0;
        total += out[h];
      }
      if (total > 0.0) {
        for (std::size_t h = 0; h < chunks; ++h) out[h] /= total;
      }
    }
  }
  return Tensor({batch, chunks, chunks}, std::move(mask));
}

Tensor quad_kernel(const Tensor& q, const Tensor& k, const Tensor& bias, double length_scale, bool causal,
                   KernelKind kind) {
  if (q.rank() < 2 || q.shape() != k.shape()) {
    throw DimensionError("query " + to_string(q.shape()) + " and key " + to_string(k.shape()) +
                         " must share a [..., n, s] shape");
  }
  const std::size_t n = q.dim(-2);
  if (bias.shape() != Shape{n, n}) {
    throw DimensionError("attention bias " + to_string(bias.shape()) + " does not match length " + std::to_string(n));
  }
  const std::string lead = leading(q.rank() - 2);
  const auto scores = ops::contract(q, k, lead + "xz," + lead + "yz->" + lead + "xy");
  if (kind == KernelKind::relu2) return relu2_weights(scores, bias, 1.0 / length_scale, causal);
  const double inv_sqrt_s = 1.0 / std::sqrt(static_cast<double>(q.shape().back()));
  return ops::softmax_rows(ops::add(ops::scale(scores, inv_sqrt_s), bias), causal);
}

Tensor local_quadratic_attn(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& bias, bool causal,
                            KernelKind kind) {
  check_chunked(q, "local queries");
  check_chunked(v, "local values");
  const auto weights = quad_kernel(q, k, bias, static_cast<double>(q.dim(2)), causal, kind);
  return ops::contract(weights, v, "bgnm,bgme->bgne");
}

Tensor aggregate_chunks(const Tensor& summaries, const ChunkedSegments& segments, bool causal, Aggregation mode,
                        std::size_t* steps) {
  check_chunked(summaries, "chunk summaries");
  const std::size_t batch = summaries.dim(0), chunks = summaries.dim(1);
  const std::size_t width = summaries.dim(2) * summaries.dim(3);
  check_segments(segments, batch, chunks);
  const auto ranges = visible_ranges(segments, batch, chunks, causal);
  std::vector<double> weight(ranges.size(), 0.0);
  for (std::size_t i = 0; i < ranges.size(); ++i) {
    const std::size_t count = ranges[i].hi - ranges[i].lo;
    if (count > 0) weight[i] = mode == Aggregation::mean ? 1.0 / static_cast<double>(count) : 1.0;
  }

  const auto src = summaries.data();
  std::vector<double> out(summaries.numel(), 0.0);
  std::vector<double> prefix((chunks + 1) * width);
  std::size_t dependent_steps = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    // prefix[h] holds the sum of summaries of chunks [0, h).
    std::fill_n(prefix.begin(), width, 0.0);
    dependent_steps = 0;
    for (std::size_t h = 0; h < chunks; ++h) {
      const double* prev = prefix.data() + h * width;
      const double* add = src.data() + (b * chunks + h) * width;
      double* next = prefix.data() + (h + 1) * width;
      for (std::size_t i = 0; i < width; ++i) next[i] = prev[i] + add[i];
      ++dependent_steps;
    }
    for (std::size_t g = 0; g < chunks; ++g) {
      const auto [lo, hi] = ranges[b * chunks + g];
      if (hi == lo) continue;
      const double w = weight[b * chunks + g];
      const double* upper = prefix.data() + hi * width;
      const double* lower = prefix.data() + lo * width;
      double* dst = out.data() + (b * chunks + g) * width;
      for (std::size_t i = 0; i < width; ++i) dst[i] = (upper[i] - lower[i]) * w;
    }
  }
  if (steps != nullptr) *steps = dependent_steps;

  Tensor result(summaries.shape(), std::move(out));
  if (auto* tape = recording_tape({&summaries})) {
    mark_differentiable(result);
    tape->record("aggregate_chunks", {summaries}, result,
                 [summaries, ranges, weight, batch, chunks, width](std::span<const double> g) {
                   const auto gs = grad_slot(summaries);
                   // Visible ranges move monotonically with the output chunk,
                   // so the outputs reading input chunk h form a contiguous
                   // run [first, last) and its gradient is a difference of
                   // prefix sums. Runs past the last nonzero output gradient
                   // only add exact zeros, which keeps unread chunks at
                   // exactly zero.
                   std::vector<double> prefix((chunks + 1) * width);
                   std::vector<std::size_t> lo(chunks), hi(chunks);
                   for (std::size_t b = 0; b < batch; ++b) {
                     std::fill_n(prefix.begin(), width, 0.0);
                     for (std::size_t c = 0; c < chunks; ++c) {
                       lo[c] = ranges[b * chunks + c].lo;
                       hi[c] = ranges[b * chunks + c].hi;
                       const double w = hi[c] > lo[c] ? weight[b * chunks + c] : 0.0;
                       const double* gc = g.data() + (b * chunks + c) * width;
                       const double* prev = prefix.data() + c * width;
                       double* next = prefix.data() + (c + 1) * width;
                       for (std::size_t i = 0; i < width; ++i) next[i] = prev[i] + w * gc[i];
                     }
                     for (std::size_t h = 0; h < chunks; ++h) {
                       const auto first =
                           static_cast<std::size_t>(std::upper_bound(hi.begin(), hi.end(), h) - hi.begin());
                       const auto last =
                           static_cast<std::size_t>(std::upper_bound(lo.begin(), lo.end(), h) - lo.begin());
                       if (last <= first) continue;
                       const double* upper = prefix.data() + last * width;
                       const double* lower = prefix.data() + first * width;
                       double* dst = gs.data() + (b * chunks + h) * width;
                       for (std::size_t i = 0; i < width; ++i) dst[i] += upper[i] - lower[i];
                     }
                   }
                 });
  }
  return result;
}

Tensor global_linear_attn(const Tensor& lin_q, const Tensor& lin_k, const Tensor& v, const ChunkedSegments& segments,
                          bool causal, Aggregation mode, std::size_t* steps) {
  check_chunked(lin_q, "linear queries");
  check_chunked(lin_k, "linear keys");
  check_chunked(v, "linear values");
  auto summaries = ops::contract(lin_k, v, "bgnk,bgne->bgke");
  if (mode == Aggregation::mean) summaries = ops::scale(summaries, 1.0 / static_cast<double>(lin_k.dim(2)));
  const auto aggregated = aggregate_chunks(summaries, segments, causal, mode, steps);
  return ops::contract(lin_q, aggregated, "bgnk,bgke->bgne");
}

Tensor global_linear_attn_masked(const Tensor& lin_q, const Tensor& lin_k, const Tensor& v,
                                 const ChunkedSegments& segments, bool causal) {
  check_chunked(lin_q, "linear queries");
  const std::size_t batch = lin_q.dim(0), chunks = lin_q.dim(1), chunk = lin_q.dim(2);
  const auto summaries =
      ops::scale(ops::contract(lin_k, v, "bgnk,bgne->bgke"), 1.0 / static_cast<double>(lin_k.dim(2)));
  const auto mask = segment_ids_to_mask(
      segments.ids.empty() ? ChunkedSegments::single(batch, chunks, chunk) : segments, causal);
  const auto aggregated = ops::contract(summaries, mask, "bhke,bgh->bgke");
  return ops::contract(lin_q, aggregated, "bgnk,bgke->bgne");
}

Tensor token_linear_attention(const Tensor& q, const Tensor& k, const Tensor& v, bool causal, LinearForm form) {
  if (q.rank() != 3 || k.shape() != q.shape() || v.rank() != 3 || v.dim(1) != q.dim(1)) {
    throw DimensionError("token linear attention needs q, k [B, T, s] and v [B, T, e]");
  }
  if (!causal) return ops::contract(q, ops::contract(k, v, "btk,bte->bke"), "btk,bke->bte");
  if (form == LinearForm::scan) return causal_linear_scan(q, k, v);
  const auto states = ops::cumsum(ops::contract(k, v, "btk,bte->btke"), 1, true);
  return ops::contract(q, states, "btk,btke->bte");
}

// ---------------------------------------------------------------------------

GauParams make_gau_params(ParamStore& store, const std::string& prefix, std::size_t d, std::size_t e, std::size_t s,
                          std::size_t heads, std::size_t bias_length, NormKind norm) {
  GauParams p;
  p.norm = make_norm(store, prefix + ".norm", norm, d);
  p.uv = make_dense(store, prefix + ".uv", d, 2 * e + s);
  p.qk = make_scale_offset(store, prefix + ".qk", heads, s);
  p.bias = make_rel_bias(store, prefix + ".rel_bias", bias_length);
  p.out = make_dense(store, prefix + ".out", e, d);
  return p;
}

GauBlock::GauBlock(GauParams params, GauOptions options) : params_(std::move(params)), options_(options) {
  if (params_.qk.heads() != 2) throw ContractError("the quadratic unit needs 2 scale/offset heads");
}

Tensor GauBlock::forward(const Tensor& x) const {
  if (x.rank() != 3) throw DimensionError("unit input must be [B, T, d], got " + to_string(x.shape()));
  const std::size_t length = x.dim(1);
  const auto proj = project(x, params_, {1});
  Tensor attended;
  if (options_.identity_attention) {
    std::vector<double> eye(length * length, 0.0);
    for (std::size_t i = 0; i < length; ++i) eye[i * length + i] = 1.0;
    attended = ops::contract(Tensor({length, length}, std::move(eye)), proj.v, "nm,bme->bne");
  } else {
    if (params_.bias.length != length) {
      throw DimensionError("sequence length " + std::to_string(length) + " does not match bias length " +
                           std::to_string(params_.bias.length));
    }
    const auto weights = quad_kernel(proj.heads[0], proj.heads[1], rel_pos_bias(params_.bias),
                                     static_cast<double>(length), options_.causal, options_.kernel);
    attended = ops::contract(weights, proj.v, "bnm,bme->bne");
  }
  return ops::add(dense(ops::mul(proj.u, attended), params_.out), x);
}

Tensor linear_unit_forward(const Tensor& x, const GauParams& p, bool causal, LinearForm form) {
  if (x.rank() != 3) throw DimensionError("unit input must be [B, T, d], got " + to_string(x.shape()));
  if (p.qk.heads() != 2) throw ContractError("the linear unit needs 2 scale/offset heads");
  const auto proj = project(x, p, {1});
  const auto attended = ops::scale(token_linear_attention(proj.heads[0], proj.heads[1], proj.v, causal, form),
                                   1.0 / static_cast<double>(x.dim(1)));
  return ops::add(dense(ops::mul(proj.u, attended), p.out), x);
}

FlashBlock::FlashBlock(GauParams params, FlashOptions options) : params_(std::move(params)), options_(options) {
  if (params_.qk.heads() != 4) throw ContractError("the mixed chunk unit needs 4 scale/offset heads");
}

Tensor FlashBlock::forward(const Tensor& x, const ChunkedSegments* segments) const {
  if (x.rank() != 4) throw DimensionError("mixed chunk input must be [B, G, C, d], got " + to_string(x.shape()));
  const std::size_t batch = x.dim(0), chunks = x.dim(1), chunk = x.dim(2);
  if (params_.bias.length != chunk) {
    throw DimensionError("chunk size " + std::to_string(chunk) + " does not match bias length " +
                         std::to_string(params_.bias.length));
  }
  const auto proj = project(x, params_, {1, 2});
  const auto quadratic = local_quadratic_attn(proj.heads[0], proj.heads[1], proj.v, rel_pos_bias(params_.bias),
                                              options_.causal, options_.kernel);
  const auto one_doc = ChunkedSegments::single(batch, chunks, chunk);
  const auto linear = global_linear_attn(proj.heads[2], proj.heads[3], proj.v,
                                         segments != nullptr ? *segments : one_doc, options_.causal,
                                         options_.aggregation);
  return ops::add(dense(ops::mul(proj.u, ops::add(quadratic, linear)), params_.out), x);
}

GluParams make_glu_params(ParamStore& store, const std::string& prefix, std::size_t d, std::size_t e,
                          NormKind norm) {
  return {make_norm(store, prefix + ".norm", norm, d), make_dense(store, prefix + ".uv", d, 2 * e),
          make_dense(store, prefix + ".out", e, d)};
}

Tensor glu_forward(const Tensor& x, const GluParams& p, Activation act) {
  const std::size_t e = p.out.weight.dim(0);
  const auto parts = ops::split(activation(dense(apply_norm(x, p.norm), p.uv), act), -1, {e, e});
  return ops::add(dense(ops::mul(parts[0], parts[1]), p.out), x);
}

MlpParams make_mlp_params(ParamStore& store, const std::string& prefix, std::size_t d, std::size_t hidden,
                          NormKind norm) {
  return {make_norm(store, prefix + ".norm", norm, d), make_dense(store, prefix + ".hidden", d, hidden),
          make_dense(store, prefix + ".out", hidden, d)};
}

Tensor mlp_forward(const Tensor& x, const MlpParams& p, Activation act) {
  return ops::add(dense(activation(dense(apply_norm(x, p.norm), p.hidden), act), p.out), x);
}

MhsaParams make_mhsa_params(ParamStore& store, const std::string& prefix, std::size_t d, std::size_t heads) {
  if (heads == 0 || d % heads != 0) {
    throw ContractError("model width " + std::to_string(d) + " is not divisible by " + std::to_string(heads) +
                        " heads");
  }
  MhsaParams p;
  p.query = make_dense(store, prefix + ".query", d, d);
  p.key = make_dense(store, prefix + ".key", d, d);
  p.value = make_dense(store, prefix + ".value", d, d);
  p.out = make_dense(store, prefix + ".out", d, d);
  p.heads = heads;
  return p;
}

Tensor mhsa_forward(const Tensor& x, const MhsaParams& p, bool causal) {
  if (x.rank() != 3) throw DimensionError("attention input must be [B, T, d], got " + to_string(x.shape()));
  const std::size_t batch = x.dim(0), length = x.dim(1), d = x.dim(2);
  if (p.heads == 0 || d % p.heads != 0) {
    throw ContractError("model width " + std::to_string(d) + " is not divisible by " + std::to_string(p.heads) +
                        " heads");
  }
  const std::size_t head_dim = d / p.heads;
  if (head_dim % 2 != 0) throw DimensionError("rotary positions need an even head width");
  const Shape split_heads{batch, length, p.heads, head_dim};
  const auto q = rope(ops::reshape(dense(x, p.query), split_heads), {1});
  const auto k = rope(ops::reshape(dense(x, p.key), split_heads), {1});
  const auto v = ops::reshape(dense(x, p.value), split_heads);
  const auto scores = ops::scale(ops::contract(q, k, "bnhd,bmhd->bhnm"), 1.0 / std::sqrt(static_cast<double>(head_dim)));
  const auto weights = ops::softmax_rows(scores, causal);
  const auto mixed = ops::contract(weights, v, "bhnm,bmhd->bnhd");
  return dense(ops::reshape(mixed, {batch, length, d}), p.out);
}

}  // namespace flashkit
