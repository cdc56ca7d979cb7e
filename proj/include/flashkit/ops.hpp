#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "flashkit/tensor.hpp"

// Differentiable tensor operations. Every op records itself on the active
// tape when one of its inputs requires a gradient; otherwise it runs
// forward-only.
namespace flashkit::ops {

// ---------------------------------------------------------------------------
// Contraction

/// Batched tensor contraction in einsum notation, e.g. "bns,bms->bnm".
///
/// Labels shared by both operands and the output are batch axes, labels
/// shared by both operands but absent from the output are summed, and the
/// remaining labels are free axes of one operand. A label may not repeat
/// within one operand, and every label of an operand must reach the output
/// or the other operand.
Tensor contract(const Tensor& a, const Tensor& b, std::string_view spec);

/// Shorthand for contract over the last axis of `a` and first axis of `b`.
Tensor matmul(const Tensor& a, const Tensor& b);

// ---------------------------------------------------------------------------
// Elementwise

enum class Unary { neg, relu, relu2, silu, gelu, sigmoid, exp, log, square, sqrt, rsqrt, tanh };
enum class Binary { add, sub, mul, div };

/// Broadcast shape of `a` and `b`. Axes align at the trailing end; an axis of
/// extent 1, or an axis missing from the shorter operand, stretches.
Shape broadcast_shape(const Shape& a, const Shape& b);

Tensor map(const Tensor& x, Unary fn);
Tensor combine(const Tensor& x, const Tensor& y, Binary fn);

inline Tensor add(const Tensor& x, const Tensor& y) { return combine(x, y, Binary::add); }
inline Tensor sub(const Tensor& x, const Tensor& y) { return combine(x, y, Binary::sub); }
inline Tensor mul(const Tensor& x, const Tensor& y) { return combine(x, y, Binary::mul); }
inline Tensor div(const Tensor& x, const Tensor& y) { return combine(x, y, Binary::div); }

/// x * factor.
Tensor scale(const Tensor& x, double factor);
/// x + offset.
Tensor shift(const Tensor& x, double offset);

// ---------------------------------------------------------------------------
// Reductions and scans

enum class Reduce { sum, mean, max };

Tensor reduce(const Tensor& x, std::vector<long> axes, Reduce kind, bool keepdims = false);
inline Tensor sum(const Tensor& x) { return reduce(x, {}, Reduce::sum); }
inline Tensor mean(const Tensor& x) { return reduce(x, {}, Reduce::mean); }

/// Inclusive: out[i] = sum_{j<=i} x[j]. Exclusive: out[0] = 0, out[i] = sum_{j<i} x[j].
Tensor cumsum(const Tensor& x, long axis, bool exclusive = false);

/// Softmax over the last axis. With `causal`, entries whose last-axis index
/// exceeds their second-to-last index are excluded (weight exactly zero).
Tensor softmax_rows(const Tensor& x, bool causal = false);

// ---------------------------------------------------------------------------
// Data movement

Tensor reshape(const Tensor& x, Shape shape);
/// Permutes axes: out.shape[i] = x.shape[perm[i]].
Tensor transpose(const Tensor& x, std::vector<std::size_t> perm);
std::vector<Tensor> split(const Tensor& x, long axis, const std::vector<std::size_t>& sizes);
Tensor concat(const std::vector<Tensor>& xs, long axis);
/// Half-open range [begin, end) along `axis`.
Tensor slice(const Tensor& x, long axis, std::size_t begin, std::size_t end);
Tensor pad(const Tensor& x, long axis, std::size_t before, std::size_t after, double value = 0.0);
/// Repeats `x` `reps` times along `axis`.
Tensor tile(const Tensor& x, long axis, std::size_t reps);
/// Slices of `x` along `axis` with that axis removed.
std::vector<Tensor> unstack(const Tensor& x, long axis);

// ---------------------------------------------------------------------------
// Lookup and loss

/// Rows of `table` [V, d] selected by `ids`; result shape is `ids_shape + [d]`.
Tensor gather_rows(const Tensor& table, std::span<const std::int32_t> ids, const Shape& ids_shape);

/// Weighted mean cross-entropy of `logits` [N, V] against `targets` [N].
/// Positions with weight 0 contribute nothing; the mean divides by the sum
/// of weights.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                     std::span<const double> weights);

/// Upper bound on worker threads of the matrix kernels (at least 1).
void set_thread_limit(std::size_t threads);

}  // namespace flashkit::ops
