#include "flashkit/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace flashkit::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

// Adds `g` into the region [offset, offset + g.size()) of `t`'s gradient.
void accumulate_region(const Tensor& t, std::size_t offset, std::span<const double> g) {
  if (!t.requires_grad()) return;
  auto& impl = *t.impl();
  impl.ensure_grad();
  double* dst = impl.grad.data() + offset;
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

double* grad_buffer(const Tensor& t) {
  auto& impl = *t.impl();
  impl.ensure_grad();
  return impl.grad.data();
}

// Copies `src` (row-major, `shape`) into a buffer laid out as
// out.shape[i] = shape[perm[i]].
std::vector<double> permute_data(std::span<const double> src, const Shape& shape,
                                 const std::vector<std::size_t>& perm) {
  const std::size_t rank = shape.size();
  const std::size_t n = src.size();
  std::vector<double> out(n);
  if (n == 0) return out;
  if (rank == 0) {
    out[0] = src[0];
    return out;
  }
  const auto in_strides = strides_of(shape);
  Shape out_shape(rank);
  std::vector<std::size_t> step(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = shape[perm[i]];
    step[i] = in_strides[perm[i]];
  }
  const std::size_t inner = out_shape[rank - 1];
  const std::size_t inner_step = step[rank - 1];
  std::vector<std::size_t> counter(rank, 0);
  std::size_t src_off = 0;
  for (std::size_t o = 0; o < n; o += inner) {
    double* dst = out.data() + o;
    if (inner_step == 1) {
      std::copy_n(src.data() + src_off, inner, dst);
    } else {
      const double* s = src.data() + src_off;
      for (std::size_t j = 0; j < inner; ++j) dst[j] = s[j * inner_step];
    }
    for (std::size_t ax = rank - 1; ax-- > 0;) {
      if (++counter[ax] < out_shape[ax]) {
        src_off += step[ax];
        break;
      }
      src_off -= step[ax] * (out_shape[ax] - 1);
      counter[ax] = 0;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Contraction

struct ContractPlan {
  std::string a, b, out;
  std::string batch, afree, bfree, contr;
  std::array<std::size_t, 128> extent{};
};

ContractPlan make_plan(std::string_view spec, const Shape& as, const Shape& bs) {
  std::string s;
  for (char c : spec) {
    if (c != ' ') s.push_back(c);
  }
  const auto arrow = s.find("->");
  const auto comma = s.find(',');
  if (arrow == std::string::npos || comma == std::string::npos || comma > arrow) {
    throw ContractError("contraction spec '" + std::string(spec) + "' must look like 'ab,bc->ac'");
  }
  ContractPlan p;
  p.a = s.substr(0, comma);
  p.b = s.substr(comma + 1, arrow - comma - 1);
  p.out = s.substr(arrow + 2);

  auto check_labels = [&](const std::string& labels, const char* what) {
    std::array<bool, 128> seen{};
    for (char c : labels) {
      if (!std::isalpha(static_cast<unsigned char>(c))) {
        throw ContractError(std::string("invalid label '") + c + "' in contraction spec " + s);
      }
      if (seen[static_cast<unsigned char>(c)]) {
        throw ContractError(std::string("label '") + c + "' repeats in " + what + " of " + s);
      }
      seen[static_cast<unsigned char>(c)] = true;
    }
  };
  check_labels(p.a, "first operand");
  check_labels(p.b, "second operand");
  check_labels(p.out, "output");

  if (p.a.size() != as.size()) {
    throw DimensionError("contraction " + s + ": first operand has rank " + std::to_string(as.size()) +
                         ", labels '" + p.a + "'");
  }
  if (p.b.size() != bs.size()) {
    throw DimensionError("contraction " + s + ": second operand has rank " +
                         std::to_string(bs.size()) + ", labels '" + p.b + "'");
  }
  std::array<bool, 128> known{};
  for (std::size_t i = 0; i < p.a.size(); ++i) {
    const auto c = static_cast<unsigned char>(p.a[i]);
    p.extent[c] = as[i];
    known[c] = true;
  }
  for (std::size_t i = 0; i < p.b.size(); ++i) {
    const auto c = static_cast<unsigned char>(p.b[i]);
    if (known[c] && p.extent[c] != bs[i]) {
      throw DimensionError("contraction " + s + ": label '" + p.b[i] + "' has extent " +
                           std::to_string(p.extent[c]) + " in first operand but " +
                           std::to_string(bs[i]) + " in second");
    }
    p.extent[c] = bs[i];
    known[c] = true;
  }
  auto in = [](const std::string& labels, char c) { return labels.find(c) != std::string::npos; };
  for (char c : p.out) {
    if (!known[static_cast<unsigned char>(c)]) {
      throw ContractError(std::string("output label '") + c + "' not found in operands of " + s);
    }
    const bool ia = in(p.a, c);
    const bool ib = in(p.b, c);
    if (ia && ib) {
      p.batch.push_back(c);
    } else if (ia) {
      p.afree.push_back(c);
    } else {
      p.bfree.push_back(c);
    }
  }
  for (char c : p.a) {
    if (!in(p.out, c)) {
      if (!in(p.b, c)) {
        throw ContractError(std::string("label '") + c + "' of first operand is neither contracted nor kept in " + s);
      }
      p.contr.push_back(c);
    }
  }
  for (char c : p.b) {
    if (!in(p.out, c) && !in(p.a, c)) {
      throw ContractError(std::string("label '") + c + "' of second operand is neither contracted nor kept in " + s);
    }
  }
  return p;
}

std::size_t extent_product(const ContractPlan& p, const std::string& labels) {
  std::size_t n = 1;
  for (char c : labels) n *= p.extent[static_cast<unsigned char>(c)];
  return n;
}

std::vector<std::size_t> perm_to(const std::string& from, const std::string& to) {
  std::vector<std::size_t> perm(to.size());
  for (std::size_t i = 0; i < to.size(); ++i) perm[i] = from.find(to[i]);
  return perm;
}

Shape shape_of(const ContractPlan& p, const std::string& labels) {
  Shape s;
  for (char c : labels) s.push_back(p.extent[static_cast<unsigned char>(c)]);
  return s;
}

// Evaluates a planned contraction on raw buffers.
std::vector<double> run_contract(const ContractPlan& p, std::span<const double> a, std::span<const double> b) {
  const std::size_t nb = extent_product(p, p.batch);
  const std::size_t m = extent_product(p, p.afree);
  const std::size_t n = extent_product(p, p.bfree);
  const std::size_t k = extent_product(p, p.contr);
  std::vector<double> out(nb * m * n, 0.0);
  if (out.empty() || k == 0) return out;

  // Operand A as [batch, M, K] (or stored [batch, K, M] when transposed).
  std::vector<double> a_buf;
  const double* a_ptr = a.data();
  bool a_trans = false;
  if (p.a == p.batch + p.afree + p.contr) {
  } else if (p.a == p.batch + p.contr + p.afree) {
    a_trans = true;
  } else {
    a_buf = permute_data(a, shape_of(p, p.a), perm_to(p.a, p.batch + p.afree + p.contr));
    a_ptr = a_buf.data();
  }
  std::vector<double> b_buf;
  const double* b_ptr = b.data();
  bool b_trans = false;
  if (p.b == p.batch + p.contr + p.bfree) {
  } else if (p.b == p.batch + p.bfree + p.contr) {
    b_trans = true;
  } else {
    b_buf = permute_data(b, shape_of(p, p.b), perm_to(p.b, p.batch + p.contr + p.bfree));
    b_ptr = b_buf.data();
  }

  const std::string natural = p.batch + p.afree + p.bfree;
  const std::string flipped = p.batch + p.bfree + p.afree;
  const bool direct = p.out == natural;
  const bool flip = !direct && p.out == flipped;
  std::vector<double> tmp;
  double* c_ptr = out.data();
  if (!direct && !flip) {
    tmp.assign(out.size(), 0.0);
    c_ptr = tmp.data();
  }

  for (std::size_t bi = 0; bi < nb; ++bi) {
    const double* ab = a_ptr + bi * m * k;
    const double* bb = b_ptr + bi * k * n;
    double* cb = c_ptr + bi * m * n;
    auto run = [&](auto&& lhs, auto&& rhs) {
      if (flip) {
        MutMap c(cb, static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m));
        c.noalias() = rhs.transpose() * lhs.transpose();
      } else {
        MutMap c(cb, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
        c.noalias() = lhs * rhs;
      }
    };
    const auto M = static_cast<Eigen::Index>(m);
    const auto N = static_cast<Eigen::Index>(n);
    const auto K = static_cast<Eigen::Index>(k);
    if (!a_trans && !b_trans) {
      run(ConstMap(ab, M, K), ConstMap(bb, K, N));
    } else if (a_trans && !b_trans) {
      run(ConstMap(ab, K, M).transpose(), ConstMap(bb, K, N));
    } else if (!a_trans && b_trans) {
      run(ConstMap(ab, M, K), ConstMap(bb, N, K).transpose());
    } else {
      run(ConstMap(ab, K, M).transpose(), ConstMap(bb, N, K).transpose());
    }
  }
  if (!direct && !flip) out = permute_data(tmp, shape_of(p, natural), perm_to(natural, p.out));
  return out;
}

// ---------------------------------------------------------------------------
// Broadcasting

// Flat index into `in` for every flat index of `out`; empty when in == out.
std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
  if (in == out) return {};
  const std::size_t n = numel(out);
  std::vector<std::size_t> idx(n);
  const std::size_t in_n = numel(in);
  // Trailing-suffix case: in == out[rank-k:], possibly after leading ones.
  Shape trimmed = in;
  while (!trimmed.empty() && trimmed.front() == 1 && trimmed.size() > 0) trimmed.erase(trimmed.begin());
  if (trimmed.size() <= out.size() &&
      std::equal(trimmed.begin(), trimmed.end(), out.end() - static_cast<long>(trimmed.size()))) {
    for (std::size_t i = 0; i < n; ++i) idx[i] = in_n == 0 ? 0 : i % in_n;
    return idx;
  }
  const std::size_t rank = out.size();
  const std::size_t offset = rank - in.size();
  const auto in_strides = strides_of(in);
  std::vector<std::size_t> step(rank, 0);
  for (std::size_t i = 0; i < in.size(); ++i) step[offset + i] = in[i] == 1 ? 0 : in_strides[i];
  std::vector<std::size_t> counter(rank, 0);
  std::size_t off = 0;
  for (std::size_t o = 0; o < n; ++o) {
    idx[o] = off;
    for (std::size_t ax = rank; ax-- > 0;) {
      if (++counter[ax] < out[ax]) {
        off += step[ax];
        break;
      }
      off -= step[ax] * (out[ax] - 1);
      counter[ax] = 0;
    }
  }
  return idx;
}

double unary_value(Unary fn, double x) {
  switch (fn) {
    case Unary::neg: return -x;
    case Unary::relu: return x > 0.0 ? x : 0.0;
    case Unary::relu2: return x > 0.0 ? x * x : 0.0;
    case Unary::silu: return x / (1.0 + std::exp(-x));
    case Unary::gelu: return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
    case Unary::sigmoid: return 1.0 / (1.0 + std::exp(-x));
    case Unary::exp: return std::exp(x);
    case Unary::log: return std::log(x);
    case Unary::square: return x * x;
    case Unary::sqrt: return std::sqrt(x);
    case Unary::rsqrt: return 1.0 / std::sqrt(x);
    case Unary::tanh: return std::tanh(x);
  }
  return x;
}

// d(fn)/dx given the input x and the output y.
double unary_slope(Unary fn, double x, double y) {
  switch (fn) {
    case Unary::neg: return -1.0;
    case Unary::relu: return x > 0.0 ? 1.0 : 0.0;
    case Unary::relu2: return x > 0.0 ? 2.0 * x : 0.0;
    case Unary::silu: {
      const double s = 1.0 / (1.0 + std::exp(-x));
      return s * (1.0 + x * (1.0 - s));
    }
    case Unary::gelu: return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
    case Unary::sigmoid: return y * (1.0 - y);
    case Unary::exp: return y;
    case Unary::log: return 1.0 / x;
    case Unary::square: return 2.0 * x;
    case Unary::sqrt: return 0.5 / y;
    case Unary::rsqrt: return -0.5 * y * y * y;
    case Unary::tanh: return 1.0 - y * y;
  }
  return 0.0;
}

const char* unary_name(Unary fn) {
  switch (fn) {
    case Unary::neg: return "neg";
    case Unary::relu: return "relu";
    case Unary::relu2: return "relu2";
    case Unary::silu: return "silu";
    case Unary::gelu: return "gelu";
    case Unary::sigmoid: return "sigmoid";
    case Unary::exp: return "exp";
    case Unary::log: return "log";
    case Unary::square: return "square";
    case Unary::sqrt: return "sqrt";
    case Unary::rsqrt: return "rsqrt";
    case Unary::tanh: return "tanh";
  }
  return "unary";
}

// Splits `shape` around `axis` into outer * extent * inner.
struct AxisView {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisView axis_view(const Shape& shape, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------

Tensor contract(const Tensor& a, const Tensor& b, std::string_view spec) {
  const auto plan = make_plan(spec, a.shape(), b.shape());
  Tensor out(shape_of(plan, plan.out), run_contract(plan, a.data(), b.data()));
  if (auto* tape = recording_tape({&a, &b})) {
    mark_differentiable(out);
    tape->record("contract", {a, b}, out, [a, b, plan](std::span<const double> g) {
      if (a.requires_grad()) {
        ContractPlan pa = make_plan(plan.out + "," + plan.b + "->" + plan.a, shape_of(plan, plan.out), b.shape());
        accumulate_grad(a, run_contract(pa, g, b.data()));
      }
      if (b.requires_grad()) {
        ContractPlan pb = make_plan(plan.a + "," + plan.out + "->" + plan.b, a.shape(), shape_of(plan, plan.out));
        accumulate_grad(b, run_contract(pb, a.data(), g));
      }
    });
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 1 || b.rank() != 2) throw DimensionError("matmul needs a rank>=1 lhs and a matrix rhs");
  static constexpr char kLabels[] = "abcdefghijklm";
  if (a.rank() > 12) throw DimensionError("matmul lhs rank too large");
  std::string la(kLabels, a.rank());
  std::string spec = la + "," + la.back() + "z->" + la.substr(0, la.size() - 1) + "z";
  return contract(a, b, spec);
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw DimensionError("cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
    out[i] = ea == 1 ? eb : ea;
  }
  return out;
}

Tensor map(const Tensor& x, Unary fn) {
  const auto xs = x.data();
  std::vector<double> y(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) y[i] = unary_value(fn, xs[i]);
  Tensor out(x.shape(), std::move(y));
  if (auto* tape = recording_tape({&x})) {
    mark_differentiable(out);
    tape->record(unary_name(fn), {x}, out, [x, out, fn](std::span<const double> g) {
      const auto xs = x.data();
      const auto ys = out.data();
      double* gx = grad_buffer(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * unary_slope(fn, xs[i], ys[i]);
    });
  }
  return out;
}

namespace {

// Walks the flat indices of a broadcast operand without a division per
// element: `period` covers the same-shape and trailing-suffix cases, `table`
// the general one.
struct BroadcastWalk {
  std::vector<std::size_t> table;
  std::size_t period = 0;

  BroadcastWalk(const Shape& in, const Shape& out) {
    const std::size_t in_n = numel(in);
    Shape trimmed = in;
    while (!trimmed.empty() && trimmed.front() == 1) trimmed.erase(trimmed.begin());
    if (in == out || (trimmed.size() <= out.size() && in_n > 0 &&
                      std::equal(trimmed.begin(), trimmed.end(), out.end() - static_cast<long>(trimmed.size())))) {
      period = in_n;
    } else {
      table = broadcast_index(in, out);
    }
  }
};

template <typename F>
void for_each_broadcast(std::size_t n, const BroadcastWalk& wx, const BroadcastWalk& wy, F&& f) {
  std::size_t px = 0, py = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t xi = wx.period != 0 ? px : wx.table[i];
    const std::size_t yi = wy.period != 0 ? py : wy.table[i];
    f(i, xi, yi);
    if (wx.period != 0 && ++px == wx.period) px = 0;
    if (wy.period != 0 && ++py == wy.period) py = 0;
  }
}

}  // namespace

Tensor combine(const Tensor& x, const Tensor& y, Binary fn) {
  const Shape out_shape = broadcast_shape(x.shape(), y.shape());
  const BroadcastWalk wx(x.shape(), out_shape);
  const BroadcastWalk wy(y.shape(), out_shape);
  const std::size_t n = numel(out_shape);
  const double* xs = x.data().data();
  const double* ys = y.data().data();
  std::vector<double> z(n);
  double* zs = z.data();
  switch (fn) {
    case Binary::add: for_each_broadcast(n, wx, wy, [&](std::size_t i, std::size_t a, std::size_t b) { zs[i] = xs[a] + ys[b]; }); break;
    case Binary::sub: for_each_broadcast(n, wx, wy, [&](std::size_t i, std::size_t a, std::size_t b) { zs[i] = xs[a] - ys[b]; }); break;
    case Binary::mul: for_each_broadcast(n, wx, wy, [&](std::size_t i, std::size_t a, std::size_t b) { zs[i] = xs[a] * ys[b]; }); break;
    case Binary::div: for_each_broadcast(n, wx, wy, [&](std::size_t i, std::size_t a, std::size_t b) { zs[i] = xs[a] / ys[b]; }); break;
  }
  Tensor out(out_shape, std::move(z));
  if (auto* tape = recording_tape({&x, &y})) {
    mark_differentiable(out);
    tape->record("combine", {x, y}, out, [x, y, fn, wx, wy](std::span<const double> g) {
      const double* xs = x.data().data();
      const double* ys = y.data().data();
      const std::size_t n = g.size();
      if (x.requires_grad()) {
        double* gx = grad_buffer(x);
        switch (fn) {
          case Binary::add:
          case Binary::sub: for_each_broadcast(n, wx, wy, [&](std::size_t i, std::size_t a, std::size_t) { gx[a] += g[i]; }); break;
          case Binary::mul: for_each_broadcast(n, wx, wy, [&](std::size_t i, std::size_t a, std::size_t b) { gx[a] += g[i] * ys[b]; }); break;
          case Binary::div: for_each_broadcast(n, wx, wy, [&](std::size_t i, std::size_t a, std::size_t b) { gx[a] += g[i] / ys[b]; }); break;
        }
      }
      if (y.requires_grad()) {
        double* gy = grad_buffer(y);
        switch (fn) {
          case Binary::add: for_each_broadcast(n, wx, wy, [&](std::size_t i, std::size_t, std::size_t b) { gy[b] += g[i]; }); break;
          case Binary::sub: for_each_broadcast(n, wx, wy, [&](std::size_t i, std::size_t, std::size_t b) { gy[b] -= g[i]; }); break;
          case Binary::mul: for_each_broadcast(n, wx, wy, [&](std::size_t i, std::size_t a, std::size_t b) { gy[b] += g[i] * xs[a]; }); break;
          case Binary::div:
            for_each_broadcast(n, wx, wy, [&](std::size_t i, std::size_t a, std::size_t b) {
              gy[b] -= g[i] * xs[a] / (ys[b] * ys[b]);
            });
            break;
        }
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, double factor) {
  const auto xs = x.data();
  std::vector<double> y(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) y[i] = xs[i] * factor;
  Tensor out(x.shape(), std::move(y));
  if (auto* tape = recording_tape({&x})) {
    mark_differentiable(out);
    tape->record("scale", {x}, out, [x, factor](std::span<const double> g) {
      double* gx = grad_buffer(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
    });
  }
  return out;
}

Tensor shift(const Tensor& x, double offset) {
  const auto xs = x.data();
  std::vector<double> y(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) y[i] = xs[i] + offset;
  Tensor out(x.shape(), std::move(y));
  if (auto* tape = recording_tape({&x})) {
    mark_differentiable(out);
    tape->record("shift", {x}, out, [x](std::span<const double> g) { accumulate_grad(x, g); });
  }
  return out;
}

// ---------------------------------------------------------------------------

Tensor reduce(const Tensor& x, std::vector<long> axes, Reduce kind, bool keepdims) {
  const std::size_t rank = x.rank();
  std::vector<bool> reduced(rank, axes.empty());
  for (long a : axes) reduced[normalize_axis(a, rank)] = true;

  Shape kept_shape(rank);
  Shape out_shape;
  std::size_t count = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    kept_shape[i] = reduced[i] ? 1 : x.shape()[i];
    if (reduced[i]) {
      count *= x.shape()[i];
      if (keepdims) out_shape.push_back(1);
    } else {
      out_shape.push_back(x.shape()[i]);
    }
  }
  if (count == 0 && kind != Reduce::sum) {
    throw ContractError("mean/max over an empty extent is undefined");
  }
  // Every input element maps to exactly one output element.
  const auto idx = broadcast_index(kept_shape, x.shape());
  const std::size_t out_n = numel(kept_shape);
  const auto xs = x.data();
  std::vector<double> y(out_n, kind == Reduce::max ? -std::numeric_limits<double>::infinity() : 0.0);
  std::vector<std::size_t> argmax;
  if (kind == Reduce::max) argmax.assign(out_n, 0);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const std::size_t o = idx.empty() ? i : idx[i];
    if (kind == Reduce::max) {
      if (xs[i] > y[o]) {
        y[o] = xs[i];
        argmax[o] = i;
      }
    } else {
      y[o] += xs[i];
    }
  }
  if (kind == Reduce::mean) {
    for (auto& v : y) v /= static_cast<double>(count);
  }
  Tensor out(out_shape, std::move(y));
  if (auto* tape = recording_tape({&x})) {
    mark_differentiable(out);
    tape->record("reduce", {x}, out, [x, idx, kind, count, argmax](std::span<const double> g) {
      double* gx = grad_buffer(x);
      if (kind == Reduce::max) {
        for (std::size_t o = 0; o < g.size(); ++o) gx[argmax[o]] += g[o];
        return;
      }
      const double f = kind == Reduce::mean ? 1.0 / static_cast<double>(count) : 1.0;
      for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += f * g[idx.empty() ? i : idx[i]];
    });
  }
  return out;
}

Tensor cumsum(const Tensor& x, long axis, bool exclusive) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const auto v = axis_view(x.shape(), ax);
  const auto xs = x.data();
  std::vector<double> y(xs.size());
  for (std::size_t o = 0; o < v.outer; ++o) {
    const std::size_t base = o * v.extent * v.inner;
    for (std::size_t in = 0; in < v.inner; ++in) {
      double acc = 0.0;
      for (std::size_t i = 0; i < v.extent; ++i) {
        const std::size_t p = base + i * v.inner + in;
        if (exclusive) {
          y[p] = acc;
          acc += xs[p];
        } else {
          acc += xs[p];
          y[p] = acc;
        }
      }
    }
  }
  Tensor out(x.shape(), std::move(y));
  if (auto* tape = recording_tape({&x})) {
    mark_differentiable(out);
    tape->record("cumsum", {x}, out, [x, v, exclusive](std::span<const double> g) {
      double* gx = grad_buffer(x);
      for (std::size_t o = 0; o < v.outer; ++o) {
        const std::size_t base = o * v.extent * v.inner;
        for (std::size_t in = 0; in < v.inner; ++in) {
          double acc = 0.0;
          for (std::size_t i = v.extent; i-- > 0;) {
            const std::size_t p = base + i * v.inner + in;
            if (exclusive) {
              gx[p] += acc;
              acc += g[p];
            } else {
              acc += g[p];
              gx[p] += acc;
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor softmax_rows(const Tensor& x, bool causal) {
  if (x.rank() < 1) throw DimensionError("softmax_rows needs rank >= 1");
  if (causal && x.rank() < 2) throw DimensionError("causal softmax needs rank >= 2");
  const std::size_t m = x.shape().back();
  const std::size_t n_rows_per_mat = causal ? x.shape()[x.rank() - 2] : 1;
  const auto xs = x.data();
  std::vector<double> y(xs.size(), 0.0);
  const std::size_t rows = m == 0 ? 0 : xs.size() / m;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t limit = causal ? std::min(m, (r % n_rows_per_mat) + 1) : m;
    const double* xr = xs.data() + r * m;
    double* yr = y.data() + r * m;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < limit; ++j) mx = std::max(mx, xr[j]);
    double total = 0.0;
    for (std::size_t j = 0; j < limit; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      total += yr[j];
    }
    for (std::size_t j = 0; j < limit; ++j) yr[j] /= total;
  }
  Tensor out(x.shape(), std::move(y));
  if (auto* tape = recording_tape({&x})) {
    mark_differentiable(out);
    tape->record("softmax_rows", {x}, out, [x, out, m](std::span<const double> g) {
      const auto ys = out.data();
      double* gx = grad_buffer(x);
      const std::size_t rows = m == 0 ? 0 : ys.size() / m;
      for (std::size_t r = 0; r < rows; ++r) {
        const double* yr = ys.data() + r * m;
        const double* gr = g.data() + r * m;
        double dot = 0.0;
        for (std::size_t j = 0; j < m; ++j) dot += gr[j] * yr[j];
        double* gxr = gx + r * m;
        for (std::size_t j = 0; j < m; ++j) gxr[j] += yr[j] * (gr[j] - dot);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError("cannot reshape " + to_string(x.shape()) + " (" + std::to_string(x.numel()) +
                         " elements) to " + to_string(shape));
  }
  Tensor out(std::move(shape), x.to_vector());
  if (auto* tape = recording_tape({&x})) {
    mark_differentiable(out);
    tape->record("reshape", {x}, out, [x](std::span<const double> g) { accumulate_grad(x, g); });
  }
  return out;
}

Tensor transpose(const Tensor& x, std::vector<std::size_t> perm) {
  const std::size_t rank = x.rank();
  if (perm.size() != rank) throw DimensionError("transpose permutation rank mismatch");
  std::vector<bool> seen(rank, false);
  for (auto p : perm) {
    if (p >= rank || seen[p]) throw DimensionError("transpose permutation is not a permutation");
    seen[p] = true;
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = x.shape()[perm[i]];
  Tensor out(out_shape, permute_data(x.data(), x.shape(), perm));
  if (auto* tape = recording_tape({&x})) {
    mark_differentiable(out);
    tape->record("transpose", {x}, out, [x, perm, out_shape](std::span<const double> g) {
      std::vector<std::size_t> inverse(perm.size());
      for (std::size_t i = 0; i < perm.size(); ++i) inverse[perm[i]] = i;
      accumulate_grad(x, permute_data(g, out_shape, inverse));
    });
  }
  return out;
}

Tensor slice(const Tensor& x, long axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const auto v = axis_view(x.shape(), ax);
  if (begin > end || end > v.extent) {
    throw DimensionError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of range for extent " +
                         std::to_string(v.extent));
  }
  Shape out_shape = x.shape();
  out_shape[ax] = end - begin;
  const std::size_t block = (end - begin) * v.inner;
  const auto xs = x.data();
  std::vector<double> y(v.outer * block);
  for (std::size_t o = 0; o < v.outer; ++o) {
    std::copy_n(xs.data() + o * v.extent * v.inner + begin * v.inner, block, y.data() + o * block);
  }
  Tensor out(out_shape, std::move(y));
  if (auto* tape = recording_tape({&x})) {
    mark_differentiable(out);
    tape->record("slice", {x}, out, [x, v, begin, block](std::span<const double> g) {
      for (std::size_t o = 0; o < v.outer; ++o) {
        accumulate_region(x, o * v.extent * v.inner + begin * v.inner, g.subspan(o * block, block));
      }
    });
  }
  return out;
}

std::vector<Tensor> split(const Tensor& x, long axis, const std::vector<std::size_t>& sizes) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  if (total != x.shape()[ax]) {
    throw DimensionError("split sizes sum to " + std::to_string(total) + " but axis extent is " +
                         std::to_string(x.shape()[ax]));
  }
  std::vector<Tensor> parts;
  std::size_t begin = 0;
  for (auto s : sizes) {
    parts.push_back(slice(x, static_cast<long>(ax), begin, begin + s));
    begin += s;
  }
  return parts;
}

Tensor concat(const std::vector<Tensor>& xs, long axis) {
  if (xs.empty()) throw ContractError("concat of zero tensors");
  const std::size_t ax = normalize_axis(axis, xs.front().rank());
  Shape out_shape = xs.front().shape();
  out_shape[ax] = 0;
  for (const auto& t : xs) {
    Shape s = t.shape();
    if (s.size() != out_shape.size()) throw DimensionError("concat rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != ax && s[i] != out_shape[i]) {
        throw DimensionError("concat extent mismatch: " + to_string(s) + " vs " + to_string(xs.front().shape()));
      }
    }
    out_shape[ax] += s[ax];
  }
  const auto v = axis_view(out_shape, ax);
  std::vector<double> y(numel(out_shape));
  std::size_t begin = 0;
  for (const auto& t : xs) {
    const std::size_t block = t.shape()[ax] * v.inner;
    const auto ts = t.data();
    for (std::size_t o = 0; o < v.outer; ++o) {
      std::copy_n(ts.data() + o * block, block, y.data() + o * v.extent * v.inner + begin * v.inner);
    }
    begin += t.shape()[ax];
  }
  Tensor out(out_shape, std::move(y));
  if (auto* tape = recording_tape(xs)) {
    mark_differentiable(out);
    tape->record("concat", xs, out, [xs, v, ax](std::span<const double> g) {
      std::size_t begin = 0;
      for (const auto& t : xs) {
        const std::size_t block = t.shape()[ax] * v.inner;
        if (t.requires_grad()) {
          double* gt = grad_buffer(t);
          for (std::size_t o = 0; o < v.outer; ++o) {
            const double* src = g.data() + o * v.extent * v.inner + begin * v.inner;
            for (std::size_t i = 0; i < block; ++i) gt[o * block + i] += src[i];
          }
        }
        begin += t.shape()[ax];
      }
    });
  }
  return out;
}

Tensor pad(const Tensor& x, long axis, std::size_t before, std::size_t after, double value) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const auto v = axis_view(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape[ax] = v.extent + before + after;
  const std::size_t out_extent = out_shape[ax];
  const std::size_t block = v.extent * v.inner;
  std::vector<double> y(numel(out_shape), value);
  const auto xs = x.data();
  for (std::size_t o = 0; o < v.outer; ++o) {
    std::copy_n(xs.data() + o * block, block, y.data() + o * out_extent * v.inner + before * v.inner);
  }
  Tensor out(out_shape, std::move(y));
  if (auto* tape = recording_tape({&x})) {
    mark_differentiable(out);
    tape->record("pad", {x}, out, [x, v, before, out_extent, block](std::span<const double> g) {
      for (std::size_t o = 0; o < v.outer; ++o) {
        accumulate_region(x, o * block, g.subspan(o * out_extent * v.inner + before * v.inner, block));
      }
    });
  }
  return out;
}

Tensor tile(const Tensor& x, long axis, std::size_t reps) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const auto v = axis_view(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape[ax] = v.extent * reps;
  const std::size_t block = v.extent * v.inner;
  std::vector<double> y(numel(out_shape));
  const auto xs = x.data();
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t r = 0; r < reps; ++r) {
      std::copy_n(xs.data() + o * block, block, y.data() + (o * reps + r) * block);
    }
  }
  Tensor out(out_shape, std::move(y));
  if (auto* tape = recording_tape({&x})) {
    mark_differentiable(out);
    tape->record("tile", {x}, out, [x, v, reps, block](std::span<const double> g) {
      double* gx = grad_buffer(x);
      for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t r = 0; r < reps; ++r) {
          const double* src = g.data() + (o * reps + r) * block;
          for (std::size_t i = 0; i < block; ++i) gx[o * block + i] += src[i];
        }
      }
    });
  }
  return out;
}

std::vector<Tensor> unstack(const Tensor& x, long axis) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  Shape squeezed = x.shape();
  squeezed.erase(squeezed.begin() + static_cast<long>(ax));
  std::vector<Tensor> parts;
  for (std::size_t i = 0; i < x.shape()[ax]; ++i) {
    parts.push_back(reshape(slice(x, static_cast<long>(ax), i, i + 1), squeezed));
  }
  return parts;
}

// ---------------------------------------------------------------------------

Tensor gather_rows(const Tensor& table, std::span<const std::int32_t> ids, const Shape& ids_shape) {
  if (table.rank() != 2) throw DimensionError("gather_rows needs a [V, d] table");
  if (numel(ids_shape) != ids.size()) throw DimensionError("gather_rows ids do not match ids_shape");
  const std::size_t vocab = table.shape()[0];
  const std::size_t d = table.shape()[1];
  const auto ts = table.data();
  std::vector<double> y(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw DimensionError("token id " + std::to_string(ids[i]) + " outside vocabulary of " + std::to_string(vocab));
    }
    std::copy_n(ts.data() + static_cast<std::size_t>(ids[i]) * d, d, y.data() + i * d);
  }
  Shape out_shape = ids_shape;
  out_shape.push_back(d);
  Tensor out(out_shape, std::move(y));
  if (auto* tape = recording_tape({&table})) {
    mark_differentiable(out);
    std::vector<std::int32_t> id_copy(ids.begin(), ids.end());
    tape->record("gather_rows", {table}, out, [table, id_copy, d](std::span<const double> g) {
      double* gt = grad_buffer(table);
      for (std::size_t i = 0; i < id_copy.size(); ++i) {
        double* row = gt + static_cast<std::size_t>(id_copy[i]) * d;
        for (std::size_t j = 0; j < d; ++j) row[j] += g[i * d + j];
      }
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets, std::span<const double> weights) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy needs [N, V] logits");
  const std::size_t n = logits.shape()[0];
  const std::size_t vocab = logits.shape()[1];
  if (targets.size() != n || weights.size() != n) throw DimensionError("cross_entropy targets/weights length mismatch");
  double wsum = 0.0;
  for (double w : weights) wsum += w;
  if (!(wsum > 0.0)) throw ContractError("cross_entropy with zero total weight");
  const auto ls = logits.data();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (weights[i] == 0.0) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= vocab) {
      throw DimensionError("target id " + std::to_string(targets[i]) + " outside vocabulary");
    }
    const double* row = ls.data() + i * vocab;
    const double mx = *std::max_element(row, row + vocab);
    double total = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) total += std::exp(row[j] - mx);
    loss += weights[i] * (mx + std::log(total) - row[targets[i]]);
  }
  Tensor out = Tensor::scalar(loss / wsum);
  if (auto* tape = recording_tape({&logits})) {
    mark_differentiable(out);
    std::vector<std::int32_t> t(targets.begin(), targets.end());
    std::vector<double> w(weights.begin(), weights.end());
    tape->record("cross_entropy", {logits}, out, [logits, t, w, wsum, vocab](std::span<const double> g) {
      const auto ls = logits.data();
      double* gl = grad_buffer(logits);
      for (std::size_t i = 0; i < t.size(); ++i) {
        if (w[i] == 0.0) continue;
        const double* row = ls.data() + i * vocab;
        const double mx = *std::max_element(row, row + vocab);
        double total = 0.0;
        for (std::size_t j = 0; j < vocab; ++j) total += std::exp(row[j] - mx);
        const double f = g[0] * w[i] / wsum;
        double* gr = gl + i * vocab;
        for (std::size_t j = 0; j < vocab; ++j) gr[j] += f * std::exp(row[j] - mx) / total;
        gr[t[i]] -= f;
      }
    });
  }
  return out;
}

void set_thread_limit(std::size_t threads) {
  if (threads == 0) throw ContractError("thread limit must be at least 1");
  Eigen::setNbThreads(static_cast<int>(threads));
}

}  // namespace flashkit::ops
