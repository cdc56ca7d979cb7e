#include <doctest.h>

#include <cmath>
#include <functional>

#include "flashkit/attention.hpp"
#include "flashkit/gradcheck.hpp"
#include "flashkit/ops.hpp"
#include "test_util.hpp"

using namespace flashkit;
using flashkit::testing::max_abs;
using flashkit::testing::max_abs_diff;
using flashkit::testing::probe_sum;
using flashkit::testing::random_tensor;
using flashkit::testing::randomize;

namespace {

double fd_error(const std::function<Tensor()>& f, const std::vector<Tensor>& params) {
  const auto report = finite_difference_check(f, params);
  CHECK(report.checked > 0);
  INFO("worst ", report.worst, " analytic ", report.worst_analytic, " numeric ", report.worst_numeric,
       " skipped ", report.skipped);
  CHECK(report.max_rel_error < 1e-5);
  return report.max_rel_error;
}

// Non-decreasing ids for `batch` rows of `length` tokens with a new
// document starting with probability 1/8 at each position.
std::vector<std::int32_t> random_segments(std::size_t batch, std::size_t length, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::int32_t> ids(batch * length);
  for (std::size_t b = 0; b < batch; ++b) {
    std::int32_t id = 0;
    for (std::size_t t = 0; t < length; ++t) {
      if (t > 0 && rng() % 8 == 0) ++id;
      ids[b * length + t] = id;
    }
  }
  return ids;
}

// Chunk-visibility by the definition "the chunks hold a common document id".
bool share_document(const ChunkedSegments& s, std::size_t b, std::size_t g, std::size_t h) {
  if (s.ids.empty()) return true;
  for (std::size_t i = 0; i < s.chunk; ++i)
    for (std::size_t j = 0; j < s.chunk; ++j)
      if (s.ids[(b * s.chunks + g) * s.chunk + i] == s.ids[(b * s.chunks + h) * s.chunk + j]) return true;
  return false;
}

// Reference for the chunk-level linear attention written as plain loops over
// (g, h) pairs, including the 1/C summary scaling and visible-count average.
std::vector<double> linear_loop_oracle(const Tensor& q, const Tensor& k, const Tensor& v, const ChunkedSegments& seg,
                                       bool causal, Aggregation mode) {
  const std::size_t B = q.dim(0), G = q.dim(1), C = q.dim(2), S = q.dim(3), E = v.dim(3);
  std::vector<double> out(B * G * C * E, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t g = 0; g < G; ++g) {
      std::vector<double> agg(S * E, 0.0);
      std::size_t count = 0;
      for (std::size_t h = 0; h < G; ++h) {
        if (causal && h >= g) continue;
        if (!share_document(seg, b, g, h)) continue;
        ++count;
        for (std::size_t s = 0; s < S; ++s)
          for (std::size_t e = 0; e < E; ++e) {
            double acc = 0.0;
            for (std::size_t c = 0; c < C; ++c) acc += k.at({b, h, c, s}) * v.at({b, h, c, e});
            agg[s * E + e] += mode == Aggregation::mean ? acc / static_cast<double>(C) : acc;
          }
      }
      if (count == 0) continue;
      const double w = mode == Aggregation::mean ? 1.0 / static_cast<double>(count) : 1.0;
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t e = 0; e < E; ++e) {
          double acc = 0.0;
          for (std::size_t s = 0; s < S; ++s) acc += q.at({b, g, c, s}) * agg[s * E + e];
          out[((b * G + g) * C + c) * E + e] = acc * w;
        }
    }
  return out;
}

double at_flat(const Tensor& t, std::size_t i) { return t.data()[i]; }

struct SmallUnit {
  static constexpr std::size_t d = 8, e = 12, s = 6;
};

}  // namespace

TEST_SUITE("segment_mask") {
  TEST_CASE("single document, non-causal, four chunks") {
    const auto m = segment_ids_to_mask(ChunkedSegments::from_rows(std::vector<std::int32_t>(8, 3), 1, 4, 2), false);
    CHECK(m.shape() == Shape{1, 4, 4});
    for (double w : m.data()) CHECK(w == 0.25);
  }

  TEST_CASE("causal first row is empty and later rows average the prefix") {
    const auto m = segment_ids_to_mask(ChunkedSegments::single(1, 5, 3), true);
    for (std::size_t h = 0; h < 5; ++h) CHECK(m.at({0, 0, h}) == 0.0);
    for (std::size_t g = 1; g < 5; ++g)
      for (std::size_t h = 0; h < 5; ++h) CHECK(m.at({0, g, h}) == (h < g ? 1.0 / static_cast<double>(g) : 0.0));
  }

  TEST_CASE("documents split at a chunk boundary do not mix") {
    const std::vector<std::int32_t> ids{0, 0, 0, 0, 1, 1, 1, 1};
    const auto seg = ChunkedSegments::from_rows(ids, 1, 4, 2);
    for (bool causal : {false, true}) {
      const auto m = segment_ids_to_mask(seg, causal);
      for (std::size_t g = 0; g < 4; ++g)
        for (std::size_t h = 0; h < 4; ++h)
          if ((g < 2) != (h < 2)) CHECK(m.at({0, g, h}) == 0.0);
    }
  }

  TEST_CASE("random ids agree with the shared-document definition") {
    const auto ids = random_segments(3, 40, 5);
    const auto seg = ChunkedSegments::from_rows(ids, 3, 10, 4);
    for (bool causal : {false, true}) {
      const auto m = segment_ids_to_mask(seg, causal);
      for (std::size_t b = 0; b < 3; ++b)
        for (std::size_t g = 0; g < 10; ++g) {
          double total = 0.0;
          std::size_t visible = 0;
          for (std::size_t h = 0; h < 10; ++h) {
            const bool expect = share_document(seg, b, g, h) && (!causal || h < g);
            CHECK((m.at({b, g, h}) > 0.0) == expect);
            total += m.at({b, g, h});
            visible += expect ? 1 : 0;
          }
          CHECK(total == doctest::Approx(visible > 0 ? 1.0 : 0.0).epsilon(1e-14));
        }
    }
  }

  TEST_CASE("decreasing ids are rejected") {
    const std::vector<std::int32_t> ids{0, 1, 0, 1};
    CHECK_THROWS_AS(ChunkedSegments::from_rows(ids, 1, 2, 2), ContractError);
    CHECK_THROWS_AS(ChunkedSegments::from_rows(ids, 1, 3, 2), DimensionError);
  }
}

TEST_SUITE("quad_kernel") {
  TEST_CASE("zero queries and keys give the squared relu bias, masked") {
    const auto bias = random_tensor({4, 4}, 1);
    const auto a = quad_kernel(Tensor::zeros({1, 4, 3}), Tensor::zeros({1, 4, 3}), bias, 4.0, true, KernelKind::relu2);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) {
        const double r = std::max(0.0, bias.at({i, j}));
        CHECK(a.at({0, i, j}) == (j > i ? 0.0 : r * r));
      }
  }

  TEST_CASE("causal weights vanish above the diagonal for both kernels") {
    const auto q = random_tensor({2, 6, 4}, 2, 3.0);
    const auto k = random_tensor({2, 6, 4}, 3, 3.0);
    const auto bias = random_tensor({6, 6}, 4);
    for (auto kind : {KernelKind::relu2, KernelKind::softmax}) {
      const auto a = quad_kernel(q, k, bias, 6.0, true, kind);
      for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t i = 0; i < 6; ++i)
          for (std::size_t j = i + 1; j < 6; ++j) CHECK(a.at({b, i, j}) == 0.0);
    }
  }

  TEST_CASE("random inputs match scalar loops") {
    const auto q = random_tensor({2, 5, 3}, 5);
    const auto k = random_tensor({2, 5, 3}, 6);
    const auto bias = random_tensor({5, 5}, 7, 0.5);
    const auto relu = quad_kernel(q, k, bias, 5.0, false, KernelKind::relu2);
    const auto soft = quad_kernel(q, k, bias, 5.0, true, KernelKind::softmax);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t i = 0; i < 5; ++i) {
        std::vector<double> logits(i + 1);
        double mx = -1e300;
        for (std::size_t j = 0; j < 5; ++j) {
          double dot = 0.0;
          for (std::size_t c = 0; c < 3; ++c) dot += q.at({b, i, c}) * k.at({b, j, c});
          const double r = std::max(0.0, dot / 5.0 + bias.at({i, j}));
          CHECK(relu.at({b, i, j}) == doctest::Approx(r * r).epsilon(1e-13));
          if (j <= i) {
            logits[j] = dot / std::sqrt(3.0) + bias.at({i, j});
            mx = std::max(mx, logits[j]);
          }
        }
        double z = 0.0;
        for (double l : logits) z += std::exp(l - mx);
        for (std::size_t j = 0; j <= i; ++j)
          CHECK(soft.at({b, i, j}) == doctest::Approx(std::exp(logits[j] - mx) / z).epsilon(1e-13));
      }
  }

  TEST_CASE("bias shape must match the length") {
    CHECK_THROWS_AS(quad_kernel(Tensor::zeros({1, 4, 2}), Tensor::zeros({1, 4, 2}), Tensor::zeros({3, 3}), 4.0, true,
                                KernelKind::relu2),
                    DimensionError);
  }

  TEST_CASE("gradients match finite differences") {
    auto q = random_tensor({1, 5, 3}, 8, 1.0, true);
    auto k = random_tensor({1, 5, 3}, 9, 1.0, true);
    auto bias = random_tensor({5, 5}, 10, 0.5, true);
    for (auto kind : {KernelKind::relu2, KernelKind::softmax})
      for (bool causal : {false, true}) {
        CHECK(fd_error([&] { return probe_sum(quad_kernel(q, k, bias, 5.0, causal, kind), 11); }, {q, k, bias}) <
              1e-6);
      }
  }
}

TEST_SUITE("local_quadratic") {
  TEST_CASE("chunks do not exchange information") {
    const auto q = random_tensor({1, 3, 4, 2}, 1);
    const auto k = random_tensor({1, 3, 4, 2}, 2);
    const auto v = random_tensor({1, 3, 4, 5}, 3);
    const auto bias = random_tensor({4, 4}, 4);
    const auto base = local_quadratic_attn(q, k, v, bias, true, KernelKind::relu2);
    // Perturb every token of chunk 1.
    auto q2 = q.to_vector(), k2 = k.to_vector(), v2 = v.to_vector();
    for (std::size_t i = 8; i < 16; ++i) q2[i] += 1.0, k2[i] -= 0.5;
    for (std::size_t i = 20; i < 40; ++i) v2[i] += 2.0;
    const auto moved = local_quadratic_attn(Tensor(q.shape(), q2), Tensor(k.shape(), k2), Tensor(v.shape(), v2), bias,
                                            true, KernelKind::relu2);
    for (std::size_t i = 0; i < base.numel(); ++i) {
      const std::size_t chunk = i / 20;
      if (chunk != 1) CHECK(at_flat(base, i) == at_flat(moved, i));
    }
  }

  TEST_CASE("one chunk is the whole-sequence kernel") {
    const auto q = random_tensor({2, 1, 6, 3}, 5);
    const auto k = random_tensor({2, 1, 6, 3}, 6);
    const auto v = random_tensor({2, 1, 6, 4}, 7);
    const auto bias = random_tensor({6, 6}, 8);
    const auto local = local_quadratic_attn(q, k, v, bias, true, KernelKind::relu2);
    const auto a = quad_kernel(ops::reshape(q, {2, 6, 3}), ops::reshape(k, {2, 6, 3}), bias, 6.0, true,
                               KernelKind::relu2);
    const auto whole = ops::contract(a, ops::reshape(v, {2, 6, 4}), "bnm,bme->bne");
    CHECK(max_abs_diff(local.data(), whole.data()) < 1e-14);
  }

  TEST_CASE("random case matches a per-chunk loop") {
    const auto q = random_tensor({2, 3, 4, 2}, 9);
    const auto k = random_tensor({2, 3, 4, 2}, 10);
    const auto v = random_tensor({2, 3, 4, 3}, 11);
    const auto bias = random_tensor({4, 4}, 12);
    const auto y = local_quadratic_attn(q, k, v, bias, true, KernelKind::relu2);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t g = 0; g < 3; ++g)
        for (std::size_t n = 0; n < 4; ++n)
          for (std::size_t e = 0; e < 3; ++e) {
            double acc = 0.0;
            for (std::size_t m = 0; m <= n; ++m) {
              double dot = 0.0;
              for (std::size_t s = 0; s < 2; ++s) dot += q.at({b, g, n, s}) * k.at({b, g, m, s});
              const double r = std::max(0.0, dot / 4.0 + bias.at({n, m}));
              acc += r * r * v.at({b, g, m, e});
            }
            CHECK(y.at({b, g, n, e}) == doctest::Approx(acc).epsilon(1e-12));
          }
  }
}

TEST_SUITE("global_linear") {
  TEST_CASE("causal first chunk receives nothing") {
    const auto q = random_tensor({2, 4, 3, 2}, 1);
    const auto k = random_tensor({2, 4, 3, 2}, 2);
    const auto v = random_tensor({2, 4, 3, 5}, 3);
    const auto y = global_linear_attn(q, k, v, ChunkedSegments::single(2, 4, 3), true, Aggregation::mean);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t e = 0; e < 5; ++e) CHECK(y.at({b, 0, c, e}) == 0.0);
  }

  TEST_CASE("non-causal single document equals token-level Q(KᵀV)/T") {
    const std::size_t B = 2, G = 4, C = 8, S = 3, E = 5, T = G * C;
    const auto q = random_tensor({B, G, C, S}, 4);
    const auto k = random_tensor({B, G, C, S}, 5);
    const auto v = random_tensor({B, G, C, E}, 6);
    const auto tok = token_linear_attention(ops::reshape(q, {B, T, S}), ops::reshape(k, {B, T, S}),
                                            ops::reshape(v, {B, T, E}), false);
    const auto mean = global_linear_attn(q, k, v, ChunkedSegments::single(B, G, C), false, Aggregation::mean);
    const auto sum = global_linear_attn(q, k, v, ChunkedSegments::single(B, G, C), false, Aggregation::sum);
    CHECK(max_abs_diff(mean.data(), ops::scale(tok, 1.0 / T).data()) < 1e-6);
    CHECK(max_abs_diff(sum.data(), tok.data()) < 1e-6);
  }

  TEST_CASE("causal aggregation equals the explicit chunk-pair loop") {
    const auto q = random_tensor({2, 6, 3, 2}, 7);
    const auto k = random_tensor({2, 6, 3, 2}, 8);
    const auto v = random_tensor({2, 6, 3, 4}, 9);
    const auto seg = ChunkedSegments::single(2, 6, 3);
    for (auto mode : {Aggregation::mean, Aggregation::sum}) {
      const auto y = global_linear_attn(q, k, v, seg, true, mode);
      CHECK(max_abs_diff(y.data(), linear_loop_oracle(q, k, v, seg, true, mode)) < 1e-10);
    }
  }

  TEST_CASE("documents restrict aggregation in both directions") {
    const auto ids = random_segments(3, 48, 12);
    const auto seg = ChunkedSegments::from_rows(ids, 3, 12, 4);
    const auto q = random_tensor({3, 12, 4, 2}, 10);
    const auto k = random_tensor({3, 12, 4, 2}, 11);
    const auto v = random_tensor({3, 12, 4, 3}, 12);
    for (bool causal : {false, true})
      for (auto mode : {Aggregation::mean, Aggregation::sum}) {
        const auto y = global_linear_attn(q, k, v, seg, causal, mode);
        CHECK(max_abs_diff(y.data(), linear_loop_oracle(q, k, v, seg, causal, mode)) < 1e-10);
      }
  }

  TEST_CASE("prefix scan agrees with the dense segment-mask contraction") {
    const auto ids = random_segments(2, 64, 13);
    const auto seg = ChunkedSegments::from_rows(ids, 2, 8, 8);
    const auto q = random_tensor({2, 8, 8, 3}, 14);
    const auto k = random_tensor({2, 8, 8, 3}, 15);
    const auto v = random_tensor({2, 8, 8, 4}, 16);
    for (bool causal : {false, true}) {
      const auto scan = global_linear_attn(q, k, v, seg, causal, Aggregation::mean);
      const auto dense_mask = global_linear_attn_masked(q, k, v, seg, causal);
      CHECK(max_abs_diff(scan.data(), dense_mask.data()) < 1e-12);
    }
  }

  TEST_CASE("the scan takes one dependent step per chunk") {
    for (std::size_t G : {1u, 4u, 16u}) {
      const auto q = random_tensor({1, G, 2, 2}, 17);
      std::size_t steps = 0;
      global_linear_attn(q, q, q, ChunkedSegments::single(1, G, 2), true, Aggregation::mean, &steps);
      CHECK(steps == G);
    }
  }

  TEST_CASE("gradients match finite differences") {
    const auto ids = random_segments(2, 12, 3);
    const auto seg = ChunkedSegments::from_rows(ids, 2, 4, 3);
    auto q = random_tensor({2, 4, 3, 2}, 18, 1.0, true);
    auto k = random_tensor({2, 4, 3, 2}, 19, 1.0, true);
    auto v = random_tensor({2, 4, 3, 3}, 20, 1.0, true);
    for (bool causal : {false, true})
      for (auto mode : {Aggregation::mean, Aggregation::sum}) {
        CHECK(fd_error([&] { return probe_sum(global_linear_attn(q, k, v, seg, causal, mode), 21); }, {q, k, v}) <
              1e-6);
      }
  }
}

TEST_SUITE("token_linear") {
  TEST_CASE("one causal token sees nothing") {
    for (auto form : {LinearForm::cumsum, LinearForm::scan}) {
      const auto y = token_linear_attention(random_tensor({2, 1, 3}, 1), random_tensor({2, 1, 3}, 2),
                                            random_tensor({2, 1, 4}, 3), true, form);
      for (double x : y.data()) CHECK(x == 0.0);
    }
  }

  TEST_CASE("non-causal association orders agree") {
    const auto q = random_tensor({2, 7, 3}, 4);
    const auto k = random_tensor({2, 7, 3}, 5);
    const auto v = random_tensor({2, 7, 4}, 6);
    const auto right = token_linear_attention(q, k, v, false);
    const auto left = ops::contract(ops::contract(q, k, "bnk,bmk->bnm"), v, "bnm,bme->bne");
    CHECK(max_abs_diff(right.data(), left.data()) < 1e-8);
  }

  TEST_CASE("gradients match finite differences") {
    auto q = random_tensor({2, 9, 3}, 31, 1.0, true);
    auto k = random_tensor({2, 9, 3}, 32, 1.0, true);
    auto v = random_tensor({2, 9, 4}, 33, 1.0, true);
    for (bool causal : {false, true})
      for (auto form : {LinearForm::cumsum, LinearForm::scan}) {
        CHECK(fd_error([&] { return probe_sum(token_linear_attention(q, k, v, causal, form), 34); }, {q, k, v}) <
              1e-6);
      }
  }

  TEST_CASE("causal backward with only some inputs differentiable") {
    const auto q = random_tensor({1, 5, 2}, 35);
    auto k = random_tensor({1, 5, 2}, 36, 1.0, true);
    const auto v = random_tensor({1, 5, 3}, 37);
    for (auto form : {LinearForm::cumsum, LinearForm::scan}) {
      CHECK(fd_error([&] { return probe_sum(token_linear_attention(q, k, v, true, form), 38); }, {k}) < 1e-6);
    }
  }

  TEST_CASE("causal form matches the running-state loop") {
    const auto q = random_tensor({2, 6, 3}, 7);
    const auto k = random_tensor({2, 6, 3}, 8);
    const auto v = random_tensor({2, 6, 4}, 9);
    for (auto form : {LinearForm::cumsum, LinearForm::scan}) {
      const auto y = token_linear_attention(q, k, v, true, form);
      for (std::size_t b = 0; b < 2; ++b) {
        std::vector<double> state(3 * 4, 0.0);
        for (std::size_t t = 0; t < 6; ++t) {
          for (std::size_t e = 0; e < 4; ++e) {
            double acc = 0.0;
            for (std::size_t s = 0; s < 3; ++s) acc += q.at({b, t, s}) * state[s * 4 + e];
            CHECK(y.at({b, t, e}) == doctest::Approx(acc).epsilon(1e-12));
          }
          for (std::size_t s = 0; s < 3; ++s)
            for (std::size_t e = 0; e < 4; ++e) state[s * 4 + e] += k.at({b, t, s}) * v.at({b, t, e});
        }
      }
    }
  }

  TEST_CASE("cumsum and scan forms agree") {
    const auto q = random_tensor({3, 11, 4}, 14);
    const auto k = random_tensor({3, 11, 4}, 15);
    const auto v = random_tensor({3, 11, 5}, 16);
    const auto a = token_linear_attention(q, k, v, true, LinearForm::cumsum);
    const auto b = token_linear_attention(q, k, v, true, LinearForm::scan);
    CHECK(max_abs_diff(a.data(), b.data()) < 1e-12);
  }

  TEST_CASE("form names round trip") {
    for (auto form : {LinearForm::cumsum, LinearForm::scan}) CHECK(parse_linear_form(linear_form_name(form)) == form);
    CHECK_THROWS_AS(parse_linear_form("fft"), ContractError);
  }
}

TEST_SUITE("gau") {
  TEST_CASE("identity attention reduces to the gated linear unit") {
    constexpr std::size_t d = 16, e = 32, s = 8, T = 10;
    ParamStore store(3);
    auto params = make_gau_params(store, "gau", d, e, s, 2, T, NormKind::layer);
    randomize(store, 4, 0.3);
    const auto x = random_tensor({2, T, d}, 5);
    const auto y = GauBlock(params, {true, KernelKind::relu2, true}).forward(x);
    // The gating-only computation written directly from the same weights.
    const auto h = ops::map(dense(layer_norm(x, params.norm), params.uv), ops::Unary::silu);
    const auto parts = ops::split(h, -1, {e, e, s});
    const auto glu = ops::add(dense(ops::mul(parts[0], parts[1]), params.out), x);
    CHECK(max_abs_diff(y.data(), glu.data()) == 0.0);
  }

  TEST_CASE("output shape is preserved and length is checked") {
    ParamStore store(1);
    const GauBlock block(make_gau_params(store, "gau", 8, 16, 4, 2, 6, NormKind::scale), {});
    CHECK(block.forward(random_tensor({3, 6, 8}, 1)).shape() == Shape{3, 6, 8});
    CHECK_THROWS_AS(block.forward(random_tensor({3, 5, 8}, 1)), DimensionError);
    CHECK_THROWS_AS(GauBlock(make_gau_params(store, "bad", 8, 16, 4, 4, 6, NormKind::scale), {}), ContractError);
  }

  TEST_CASE("parameter surplus over the gating-only layer") {
    for (auto [d, s] : {std::pair<std::size_t, std::size_t>{128, 128}, {64, 32}, {768, 128}}) {
      const std::size_t e = 2 * d, T = 64;
      ParamStore gau_store, glu_store;
      make_gau_params(gau_store, "gau", d, e, s, 2, T, NormKind::layer);
      make_glu_params(glu_store, "glu", d, e, NormKind::layer);
      const std::size_t rel_bias = gau_store.count_with_prefix("gau.rel_bias.");
      CHECK(rel_bias == rel_bias_param_count(T));
      CHECK(gau_store.total_count() - rel_bias - glu_store.total_count() == d * s + s + 4 * s);
    }
  }

  TEST_CASE("causal outputs ignore later tokens") {
    constexpr std::size_t d = 8, T = 9;
    ParamStore store(7);
    auto params = make_gau_params(store, "gau", d, 16, 4, 2, T, NormKind::layer);
    randomize(store, 8, 0.4);
    for (auto kind : {KernelKind::relu2, KernelKind::softmax}) {
      const GauBlock block(params, {true, kind, false});
      const auto x = random_tensor({1, T, d}, 9);
      const auto base = block.forward(x);
      for (std::size_t j : {0u, 4u, 8u}) {
        auto moved = x.to_vector();
        for (std::size_t c = 0; c < d; ++c) moved[j * d + c] += 1.5;
        const auto y = block.forward(Tensor(x.shape(), moved));
        for (std::size_t i = 0; i < j * d; ++i) CHECK(at_flat(y, i) == at_flat(base, i));
        CHECK(max_abs_diff(y.data(), base.data()) > 0.0);
      }
    }
  }

  TEST_CASE("gradients match finite differences") {
    ParamStore store(11);
    auto params = make_gau_params(store, "gau", SmallUnit::d, SmallUnit::e, SmallUnit::s, 2, 5, NormKind::layer);
    randomize(store, 12, 0.5);
    auto x = random_tensor({2, 5, SmallUnit::d}, 13, 1.0, true);
    for (auto kind : {KernelKind::relu2, KernelKind::softmax}) {
      const GauBlock block(params, {true, kind, false});
      auto all = store.tensors();
      all.push_back(x);
      CHECK(fd_error([&] { return probe_sum(block.forward(x), 14); }, all) < 1e-5);
    }
  }
}

TEST_SUITE("flash") {
  TEST_CASE("a single chunk matches the quadratic unit") {
    constexpr std::size_t d = 16, e = 32, s = 8, T = 12;
    ParamStore store(21);
    auto flash = make_gau_params(store, "flash", d, e, s, 4, T, NormKind::layer);
    randomize(store, 22, 0.3);
    // Same weights, keeping only the quadratic query/key heads.
    GauParams quad = flash;
    quad.qk.gamma = ops::slice(flash.qk.gamma, 0, 0, 2);
    quad.qk.beta = ops::slice(flash.qk.beta, 0, 0, 2);
    const auto x = random_tensor({2, T, d}, 23);
    const auto y_flash = FlashBlock(flash, {true}).forward(ops::reshape(x, {2, 1, T, d}));
    const auto y_quad = GauBlock(quad, {true}).forward(x);
    CHECK(max_abs_diff(y_flash.data(), y_quad.data()) < 1e-6);
  }

  TEST_CASE("causal outputs ignore later tokens across chunks") {
    constexpr std::size_t d = 8, G = 4, C = 3;
    ParamStore store(31);
    auto params = make_gau_params(store, "flash", d, 16, 4, 4, C, NormKind::layer);
    randomize(store, 32, 0.4);
    const FlashBlock block(params, {true});
    const auto x = random_tensor({1, G, C, d}, 33);
    const auto base = block.forward(x);
    for (std::size_t j : {1u, 3u, 7u, 11u}) {
      auto moved = x.to_vector();
      for (std::size_t c = 0; c < d; ++c) moved[j * d + c] -= 2.0;
      const auto y = block.forward(Tensor(x.shape(), moved));
      double before = 0.0;
      for (std::size_t i = 0; i < j * d; ++i) before = std::max(before, std::abs(at_flat(y, i) - at_flat(base, i)));
      CHECK(before <= 1e-12);
      CHECK(max_abs_diff(y.data(), base.data()) > 0.0);
    }
  }

  TEST_CASE("output shape, width checks and head count") {
    ParamStore store(1);
    const auto params = make_gau_params(store, "flash", 8, 16, 4, 4, 3, NormKind::scale);
    const FlashBlock block(params, {false});
    CHECK(block.forward(random_tensor({2, 5, 3, 8}, 1)).shape() == Shape{2, 5, 3, 8});
    CHECK_THROWS_AS(block.forward(random_tensor({2, 5, 4, 8}, 1)), DimensionError);
    CHECK_THROWS_AS(block.forward(random_tensor({2, 15, 8}, 1)), DimensionError);
    CHECK_THROWS_AS(FlashBlock(make_gau_params(store, "bad", 8, 16, 4, 2, 3, NormKind::scale), {}), ContractError);
  }

  TEST_CASE("parameter surplus over the quadratic unit is two head pairs") {
    for (auto [d, s] : {std::pair<std::size_t, std::size_t>{128, 128}, {64, 32}}) {
      ParamStore gau_store, flash_store;
      make_gau_params(gau_store, "gau", d, 2 * d, s, 2, 256, NormKind::layer);
      make_gau_params(flash_store, "flash", d, 2 * d, s, 4, 64, NormKind::layer);
      const std::size_t gau = gau_store.total_count() - gau_store.count_with_prefix("gau.rel_bias.");
      const std::size_t flash = flash_store.total_count() - flash_store.count_with_prefix("flash.rel_bias.");
      CHECK(flash - gau == 4 * s);
      CHECK(flash_store.count_with_prefix("flash.qk.") - gau_store.count_with_prefix("gau.qk.") == 4 * s);
    }
  }

  TEST_CASE("gradients match finite differences with documents") {
    ParamStore store(41);
    auto params = make_gau_params(store, "flash", SmallUnit::d, SmallUnit::e, SmallUnit::s, 4, 3, NormKind::layer);
    randomize(store, 42, 0.5);
    auto x = random_tensor({2, 3, 3, SmallUnit::d}, 43, 1.0, true);
    const auto seg = ChunkedSegments::from_rows(random_segments(2, 9, 44), 2, 3, 3);
    for (bool causal : {false, true}) {
      const FlashBlock block(params, {causal});
      auto all = store.tensors();
      all.push_back(x);
      CHECK(fd_error([&] { return probe_sum(block.forward(x, &seg), 45); }, all) < 1e-5);
    }
  }
}

TEST_SUITE("baselines") {
  TEST_CASE("attention rows sum to one per head") {
    constexpr std::size_t d = 8, T = 5;
    ParamStore store(1);
    auto p = make_mhsa_params(store, "mhsa", d, 2);
    randomize(store, 2, 0.5);
    // With a zero value weight every head outputs (row sum)·b_v, so the
    // result reads b_v W_o + b_o exactly when rows sum to one.
    for (double& w : p.value.weight.mutable_data()) w = 0.0;
    const auto y = mhsa_forward(random_tensor({2, T, d}, 3), p, true);
    const auto expected = dense(ops::reshape(p.value.bias, {1, d}), p.out);
    for (std::size_t i = 0; i < 2 * T; ++i)
      for (std::size_t c = 0; c < d; ++c)
        CHECK(y.data()[i * d + c] == doctest::Approx(expected.data()[c]).epsilon(1e-12));
  }

  TEST_CASE("causal masking is exact") {
    constexpr std::size_t d = 8, T = 6;
    ParamStore store(4);
    const auto p = make_mhsa_params(store, "mhsa", d, 4);
    randomize(store, 5, 0.5);
    const auto x = random_tensor({1, T, d}, 6);
    const auto base = mhsa_forward(x, p, true);
    auto moved = x.to_vector();
    for (std::size_t c = 0; c < d; ++c) moved[3 * d + c] += 1.0;
    const auto y = mhsa_forward(Tensor(x.shape(), moved), p, true);
    for (std::size_t i = 0; i < 3 * d; ++i) CHECK(at_flat(y, i) == at_flat(base, i));
  }

  TEST_CASE("single head matches a loop oracle") {
    constexpr std::size_t d = 4, T = 5;
    ParamStore store(7);
    const auto p = make_mhsa_params(store, "mhsa", d, 1);
    randomize(store, 8, 0.5);
    const auto x = random_tensor({1, T, d}, 9);
    const auto y = mhsa_forward(x, p, true);
    auto project = [&](const DenseParams& w) {
      std::vector<double> out(T * d);
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t o = 0; o < d; ++o) {
          double acc = w.bias.at({o});
          for (std::size_t i = 0; i < d; ++i) acc += x.at({0, t, i}) * w.weight.at({i, o});
          out[t * d + o] = acc;
        }
      return out;
    };
    auto rotate = [&](std::vector<double> m) {
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t k = 0; k < d / 2; ++k) {
          const double angle = static_cast<double>(t) * std::pow(10000.0, -static_cast<double>(k) / (d / 2.0));
          const double a = m[t * d + k], b = m[t * d + d / 2 + k];
          m[t * d + k] = a * std::cos(angle) - b * std::sin(angle);
          m[t * d + d / 2 + k] = b * std::cos(angle) + a * std::sin(angle);
        }
      return m;
    };
    const auto q = rotate(project(p.query)), k = rotate(project(p.key)), v = project(p.value);
    for (std::size_t i = 0; i < T; ++i) {
      std::vector<double> w(i + 1);
      double mx = -1e300, z = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < d; ++c) dot += q[i * d + c] * k[j * d + c];
        w[j] = dot / 2.0;
        mx = std::max(mx, w[j]);
      }
      for (auto& wj : w) z += (wj = std::exp(wj - mx));
      std::vector<double> mixed(d, 0.0);
      for (std::size_t j = 0; j <= i; ++j)
        for (std::size_t c = 0; c < d; ++c) mixed[c] += w[j] / z * v[j * d + c];
      for (std::size_t o = 0; o < d; ++o) {
        double acc = p.out.bias.at({o});
        for (std::size_t c = 0; c < d; ++c) acc += mixed[c] * p.out.weight.at({c, o});
        CHECK(y.at({0, i, o}) == doctest::Approx(acc).epsilon(1e-12));
      }
    }
  }

  TEST_CASE("parameter counts") {
    for (std::size_t d : {8u, 128u, 768u}) {
      ParamStore store;
      make_mhsa_params(store, "mhsa", d, 4);
      CHECK(store.total_count() == 4 * d * d + 4 * d);
    }
    ParamStore store;
    CHECK_THROWS_AS(make_mhsa_params(store, "mhsa", 10, 4), ContractError);
  }

  TEST_CASE("feed-forward layers match direct evaluation") {
    constexpr std::size_t d = 6, e = 10;
    ParamStore store(3);
    const auto glu = make_glu_params(store, "glu", d, e, NormKind::scale);
    const auto mlp = make_mlp_params(store, "mlp", d, e, NormKind::layer);
    randomize(store, 4, 0.5);
    const auto x = random_tensor({2, 3, d}, 5);
    const auto h = ops::map(dense(scale_norm(x, glu.norm), glu.uv), ops::Unary::gelu);
    const auto parts = ops::split(h, -1, {e, e});
    const auto expect_glu = ops::add(dense(ops::mul(parts[0], parts[1]), glu.out), x);
    CHECK(max_abs_diff(glu_forward(x, glu, Activation::gelu).data(), expect_glu.data()) == 0.0);
    const auto expect_mlp =
        ops::add(dense(ops::map(dense(layer_norm(x, mlp.norm), mlp.hidden), ops::Unary::gelu), mlp.out), x);
    CHECK(max_abs_diff(mlp_forward(x, mlp, Activation::gelu).data(), expect_mlp.data()) == 0.0);
  }

  TEST_CASE("gradients match finite differences") {
    ParamStore store(9);
    const auto p = make_mhsa_params(store, "mhsa", 8, 2);
    const auto glu = make_glu_params(store, "glu", 8, 6, NormKind::layer);
    randomize(store, 10, 0.5);
    auto x = random_tensor({1, 4, 8}, 11, 1.0, true);
    auto all = store.tensors();
    all.push_back(x);
    CHECK(fd_error([&] { return probe_sum(glu_forward(ops::add(x, mhsa_forward(x, p, true)), glu, Activation::gelu), 12); },
                   all) < 1e-5);
  }
}
