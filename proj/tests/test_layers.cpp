#include <doctest.h>

#include <cmath>
#include <numeric>

#include "flashkit/gradcheck.hpp"
#include "flashkit/layers.hpp"
#include "flashkit/ops.hpp"
#include "test_util.hpp"

using namespace flashkit;
using flashkit::testing::max_abs_diff;
using flashkit::testing::probe_sum;
using flashkit::testing::random_tensor;

namespace {

double fd_error(const std::function<Tensor()>& f, const std::vector<Tensor>& params) {
  const auto report = finite_difference_check(f, params);
  CHECK(report.checked > 0);
  return report.max_rel_error;
}

Tensor param(Shape shape, std::uint64_t seed, double stddev = 1.0) {
  return random_tensor(std::move(shape), seed, stddev, true);
}

// Reference sinusoid angle, written independently of the library tables.
double angle_of(std::size_t pos, std::size_t k, std::size_t half) {
  return static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(k) / static_cast<double>(half));
}

}  // namespace

TEST_SUITE("dense") {
  TEST_CASE("zero input gives the bias") {
    DenseParams p{random_tensor({3, 4}, 1), random_tensor({4}, 2)};
    const auto y = dense(Tensor::zeros({2, 3}), p);
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 4; ++j) CHECK(y.at({i, j}) == p.bias.at({j}));
  }

  TEST_CASE("identity weight and zero bias pass input through") {
    std::vector<double> eye(9, 0.0);
    eye[0] = eye[4] = eye[8] = 1.0;
    DenseParams p{Tensor({3, 3}, eye), Tensor::zeros({3})};
    const auto x = random_tensor({2, 5, 3}, 3);
    CHECK(max_abs_diff(dense(x, p).data(), x.data()) == 0.0);
  }

  TEST_CASE("random case matches loop matmul") {
    DenseParams p{random_tensor({4, 6}, 4), random_tensor({6}, 5)};
    const auto x = random_tensor({2, 3, 4}, 6);
    const auto y = dense(x, p);
    CHECK(y.shape() == Shape{2, 3, 6});
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t o = 0; o < 6; ++o) {
          double acc = p.bias.at({o});
          for (std::size_t i = 0; i < 4; ++i) acc += x.at({b, t, i}) * p.weight.at({i, o});
          CHECK(y.at({b, t, o}) == doctest::Approx(acc).epsilon(1e-13));
        }
  }

  TEST_CASE("extent mismatch is rejected") {
    DenseParams p{random_tensor({4, 6}, 4), random_tensor({6}, 5)};
    CHECK_THROWS_AS(dense(random_tensor({2, 5}, 1), p), DimensionError);
  }

  TEST_CASE("initialization scheme") {
    ParamStore store(11);
    const auto p = make_dense(store, "proj", 64, 128);
    double sum = 0.0, sq = 0.0;
    for (double w : p.weight.data()) {
      sum += w;
      sq += w * w;
    }
    const double n = static_cast<double>(p.weight.numel());
    CHECK(std::abs(sum / n) < 0.002);
    CHECK(std::sqrt(sq / n) == doctest::Approx(0.02).epsilon(0.03));
    for (double b : p.bias.data()) CHECK(b == 0.0);
    CHECK(store.total_count() == 64 * 128 + 128);
  }

  TEST_CASE("gradients match finite differences") {
    DenseParams p{param({4, 3}, 7), param({3}, 8)};
    auto x = param({2, 4}, 9);
    CHECK(fd_error([&] { return probe_sum(dense(x, p), 1); }, {x, p.weight, p.bias}) < 1e-6);
  }
}

TEST_SUITE("norms") {
  TEST_CASE("defaults") {
    ParamStore store(1);
    const auto ln = make_norm(store, "ln", NormKind::layer, 4);
    const auto sn = make_norm(store, "sn", NormKind::scale, 4);
    for (double g : ln.gamma.data()) CHECK(g == 1.0);
    for (double b : ln.beta.data()) CHECK(b == 0.0);
    CHECK(sn.scalar.item() == 1.0);
    CHECK(ln.eps == 1e-5);
    CHECK(store.count_with_prefix("ln.") == 8);
    CHECK(store.count_with_prefix("sn.") == 1);
    CHECK(parse_norm_kind("scale") == NormKind::scale);
    CHECK_THROWS_AS(parse_norm_kind("batch"), ContractError);
  }

  TEST_CASE("constant row gives beta") {
    NormParams p{NormKind::layer, random_tensor({5}, 2), random_tensor({5}, 3), {}, 1e-5};
    const auto y = layer_norm(Tensor::full({2, 5}, 3.25), p);
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 5; ++j) CHECK(y.at({i, j}) == p.beta.at({j}));
  }

  TEST_CASE("normalized rows have zero mean and unit variance") {
    NormParams p{NormKind::layer, Tensor::ones({16}), Tensor::zeros({16}), {}, 1e-5};
    const auto x = random_tensor({6, 16}, 4, 3.0);
    const auto y = layer_norm(x, p);
    for (std::size_t r = 0; r < 6; ++r) {
      // Two-pass moments of the input row, then of the output row.
      double mu = 0.0;
      for (std::size_t j = 0; j < 16; ++j) mu += x.at({r, j});
      mu /= 16;
      double var = 0.0;
      for (std::size_t j = 0; j < 16; ++j) var += (x.at({r, j}) - mu) * (x.at({r, j}) - mu);
      var /= 16;
      double out_mu = 0.0, out_var = 0.0;
      for (std::size_t j = 0; j < 16; ++j) out_mu += y.at({r, j});
      out_mu /= 16;
      for (std::size_t j = 0; j < 16; ++j) out_var += (y.at({r, j}) - out_mu) * (y.at({r, j}) - out_mu);
      out_var /= 16;
      CHECK(std::abs(out_mu) < 1e-12);
      CHECK(out_var == doctest::Approx(var / (var + 1e-5)).epsilon(1e-12));
      CHECK(std::abs(out_var - 1.0) < 1e-5);
    }
  }

  TEST_CASE("standardized input is preserved up to the eps effect") {
    NormParams p{NormKind::layer, Tensor::ones({4}), Tensor::zeros({4}), {}, 1e-5};
    // Zero mean, unit (population) variance.
    const double a = std::sqrt(2.0 / 2.5), b = 3.0 * a;
    const double rs = std::sqrt((a * a + b * b) / 2.0);
    Tensor x({1, 4}, {-b / rs, -a / rs, a / rs, b / rs});
    const auto y = layer_norm(x, p);
    const double shrink = 1.0 / std::sqrt(1.0 + 1e-5);
    for (std::size_t j = 0; j < 4; ++j) {
      CHECK(y.at({0, j}) == doctest::Approx(x.at({0, j}) * shrink).epsilon(1e-12));
      CHECK(std::abs(y.at({0, j}) - x.at({0, j})) <= 0.5e-5 * std::abs(x.at({0, j})) + 1e-12);
    }
  }

  TEST_CASE("scale norm matches a loop evaluation") {
    NormParams p{NormKind::scale, {}, {}, Tensor::scalar(1.7), 1e-5};
    const auto x = random_tensor({3, 7}, 5);
    const auto y = scale_norm(x, p);
    for (std::size_t r = 0; r < 3; ++r) {
      double ms = 0.0;
      for (std::size_t j = 0; j < 7; ++j) ms += x.at({r, j}) * x.at({r, j});
      ms /= 7;
      for (std::size_t j = 0; j < 7; ++j) {
        CHECK(y.at({r, j}) == doctest::Approx(x.at({r, j}) / std::sqrt(ms + 1e-5) * 1.7).epsilon(1e-13));
      }
    }
  }

  TEST_CASE("scale norm of a unit mean-square row is x times the scalar") {
    NormParams p{NormKind::scale, {}, {}, Tensor::scalar(0.5), 1e-5};
    Tensor x({1, 4}, {1, -1, 1, -1});
    const auto y = scale_norm(x, p);
    for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(y.at({0, j}) - 0.5 * x.at({0, j})) < 1e-5);
  }

  TEST_CASE("scale norm is invariant to positive rescaling") {
    // Rows with mean square far above eps, where eps no longer matters.
    NormParams p{NormKind::scale, {}, {}, Tensor::scalar(1.0), 1e-5};
    const auto x = random_tensor({4, 32}, 6, 30.0);
    for (double c : {0.5, 3.0, 40.0}) {
      CHECK(max_abs_diff(scale_norm(ops::scale(x, c), p).data(), scale_norm(x, p).data()) < 1e-6);
    }
  }

  TEST_CASE("layer norm is invariant to positive rescaling and shifting") {
    NormParams p{NormKind::layer, random_tensor({32}, 1), random_tensor({32}, 2), {}, 1e-5};
    const auto x = random_tensor({4, 32}, 7, 30.0);
    const auto moved = ops::shift(ops::scale(x, 5.0), -3.0);
    CHECK(max_abs_diff(layer_norm(moved, p).data(), layer_norm(x, p).data()) < 1e-6);
  }

  TEST_CASE("gradients match finite differences") {
    NormParams ln{NormKind::layer, param({6}, 1), param({6}, 2), {}, 1e-5};
    auto x = param({3, 6}, 3);
    CHECK(fd_error([&] { return probe_sum(layer_norm(x, ln), 4); }, {x, ln.gamma, ln.beta}) < 1e-6);
    NormParams sn{NormKind::scale, {}, {}, Tensor::scalar(0.8, true), 1e-5};
    CHECK(fd_error([&] { return probe_sum(scale_norm(x, sn), 5); }, {x, sn.scalar}) < 1e-6);
  }
}

TEST_SUITE("activations") {
  TEST_CASE("values") {
    const auto r = activation(Tensor({2}, {-2, 3}), Activation::relu2);
    CHECK(r.data()[0] == 0.0);
    CHECK(r.data()[1] == 9.0);
    CHECK(activation(Tensor::scalar(0.0), Activation::silu).item() == 0.0);
    const auto s = activation(Tensor::zeros({1, 3}), Activation::softmax_rows);
    for (double v : s.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    const auto x = random_tensor({5}, 1);
    const auto si = activation(x, Activation::silu);
    const auto ge = activation(x, Activation::gelu);
    for (std::size_t i = 0; i < 5; ++i) {
      const double v = x.at({i});
      CHECK(si.at({i}) == doctest::Approx(v / (1.0 + std::exp(-v))).epsilon(1e-14));
      CHECK(ge.at({i}) == doctest::Approx(0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)))).epsilon(1e-14));
    }
  }

  TEST_CASE("softmax rows sum to one") {
    const auto s = activation(random_tensor({4, 9}, 2, 3.0), Activation::softmax_rows);
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0.0;
      for (std::size_t j = 0; j < 9; ++j) total += s.at({r, j});
      CHECK(total == doctest::Approx(1.0).epsilon(1e-14));
    }
  }

  TEST_CASE("gradients match finite differences") {
    auto x = param({3, 5}, 3);
    for (auto kind : {Activation::relu2, Activation::silu, Activation::gelu, Activation::softmax_rows}) {
      CHECK(fd_error([&] { return probe_sum(activation(x, kind), 6); }, {x}) < 1e-6);
    }
  }
}

TEST_SUITE("scale_offset") {
  TEST_CASE("unit scale and zero offset leave z unchanged") {
    ScaleOffsetParams p{Tensor::ones({2, 5}), Tensor::zeros({2, 5})};
    const auto z = random_tensor({3, 5}, 1);
    CHECK(max_abs_diff(scale_offset(z, p, 1).data(), z.data()) == 0.0);
  }

  TEST_CASE("two heads give the query/key pair of the expanded form") {
    ScaleOffsetParams p{random_tensor({2, 6}, 2), random_tensor({2, 6}, 3)};
    const auto z = random_tensor({2, 4, 6}, 4);
    const auto heads = ops::unstack(scale_offset_heads(z, p), -2);
    REQUIRE(heads.size() == 2);
    CHECK(max_abs_diff(heads[0].data(), scale_offset(z, p, 0).data()) == 0.0);
    CHECK(max_abs_diff(heads[1].data(), scale_offset(z, p, 1).data()) == 0.0);
  }

  TEST_CASE("random affine matches an elementwise loop") {
    ScaleOffsetParams p{random_tensor({4, 3}, 5), random_tensor({4, 3}, 6)};
    const auto z = random_tensor({5, 3}, 7);
    for (std::size_t h = 0; h < 4; ++h) {
      const auto y = scale_offset(z, p, h);
      for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 3; ++j)
          CHECK(y.at({i, j}) == z.at({i, j}) * p.gamma.at({h, j}) + p.beta.at({h, j}));
    }
  }

  TEST_CASE("head out of range") {
    ScaleOffsetParams p{random_tensor({2, 3}, 5), random_tensor({2, 3}, 6)};
    CHECK_THROWS_AS(scale_offset(random_tensor({1, 3}, 1), p, 2), ContractError);
  }

  TEST_CASE("initialization scheme") {
    ParamStore store(3);
    const auto p = make_scale_offset(store, "qk", 4, 16);
    CHECK(p.heads() == 4);
    CHECK(p.width() == 16);
    for (double b : p.beta.data()) CHECK(b == 0.0);
    CHECK(flashkit::testing::max_abs(p.gamma.data()) > 0.0);
    CHECK(flashkit::testing::max_abs(p.gamma.data()) < 0.2);
  }

  TEST_CASE("gradients match finite differences") {
    ScaleOffsetParams p{param({2, 4}, 1), param({2, 4}, 2)};
    auto z = param({3, 4}, 3);
    CHECK(fd_error([&] { return probe_sum(scale_offset_heads(z, p), 7); }, {z, p.gamma, p.beta}) < 1e-6);
  }
}

TEST_SUITE("positions") {
  TEST_CASE("scaled sinusoid at position zero") {
    const auto t = scaled_sin(5, 8, Tensor::scalar(0.25));
    for (std::size_t k = 0; k < 4; ++k) {
      CHECK(t.at({0, k}) == 0.0);
      CHECK(t.at({0, 4 + k}) == 0.25);
    }
  }

  TEST_CASE("scaled sinusoid scalar starts at 1/sqrt(d)") {
    ParamStore store;
    CHECK(make_scaled_sin_scalar(store, "pos.scalar", 64).item() == 0.125);
  }

  TEST_CASE("inverse frequencies for d = 8") {
    const auto f = inverse_frequencies(4);
    REQUIRE(f.size() == 4);
    for (std::size_t k = 0; k < 4; ++k) CHECK(f[k] == doctest::Approx(std::pow(10.0, -static_cast<double>(k))).epsilon(1e-14));
    // A geometric sequence with ratio 10000^(-1/4) = 0.1.
    for (std::size_t k = 1; k < 4; ++k) CHECK(f[k] / f[k - 1] == doctest::Approx(0.1).epsilon(1e-14));
  }

  TEST_CASE("scaled sinusoid matches the direct formula") {
    const auto t = scaled_sin(6, 10, Tensor::scalar(1.5));
    for (std::size_t p = 0; p < 6; ++p)
      for (std::size_t k = 0; k < 5; ++k) {
        CHECK(t.at({p, k}) == doctest::Approx(1.5 * std::sin(angle_of(p, k, 5))).epsilon(1e-14));
        CHECK(t.at({p, 5 + k}) == doctest::Approx(1.5 * std::cos(angle_of(p, k, 5))).epsilon(1e-14));
      }
    CHECK_THROWS_AS(scaled_sin(4, 7, Tensor::scalar(1.0)), DimensionError);
  }

  TEST_CASE("rope at position zero is the identity") {
    const auto x = random_tensor({1, 6}, 1);
    CHECK(max_abs_diff(rope(x, {0}).data(), x.data()) == 0.0);
  }

  TEST_CASE("rope matches a direct rotation") {
    const auto x = random_tensor({2, 5, 3, 8}, 2);
    const auto y = rope(x, {1});
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t p = 0; p < 5; ++p)
        for (std::size_t h = 0; h < 3; ++h)
          for (std::size_t k = 0; k < 4; ++k) {
            const double a = angle_of(p, k, 4);
            const double x1 = x.at({b, p, h, k}), x2 = x.at({b, p, h, 4 + k});
            CHECK(y.at({b, p, h, k}) == doctest::Approx(x1 * std::cos(a) - x2 * std::sin(a)).epsilon(1e-13));
            CHECK(y.at({b, p, h, 4 + k}) == doctest::Approx(x2 * std::cos(a) + x1 * std::sin(a)).epsilon(1e-13));
          }
  }

  TEST_CASE("rope preserves the norm of every rotated pair") {
    const auto x = random_tensor({7, 10}, 3);
    const auto y = rope(x, {0});
    for (std::size_t p = 0; p < 7; ++p)
      for (std::size_t k = 0; k < 5; ++k) {
        const double before = std::hypot(x.at({p, k}), x.at({p, 5 + k}));
        const double after = std::hypot(y.at({p, k}), y.at({p, 5 + k}));
        CHECK(after == doctest::Approx(before).epsilon(1e-14));
      }
  }

  TEST_CASE("rope inner products depend only on the offset") {
    const auto q = random_tensor({1, 16}, 4);
    const auto k = random_tensor({1, 16}, 5);
    auto dot_at = [&](std::size_t m, std::size_t n) {
      const auto qm = rope(q, {0}, m);
      const auto kn = rope(k, {0}, n);
      double acc = 0.0;
      for (std::size_t i = 0; i < 16; ++i) acc += qm.data()[i] * kn.data()[i];
      return acc;
    };
    for (auto [m, n] : {std::pair<std::size_t, std::size_t>{3, 1}, {10, 4}, {0, 7}, {100, 250}}) {
      for (std::size_t delta : {1u, 13u, 500u}) {
        CHECK(std::abs(dot_at(m + delta, n + delta) - dot_at(m, n)) < 1e-6);
      }
    }
  }

  TEST_CASE("rope with negated angles restores the input") {
    const auto x = random_tensor({3, 9, 12}, 6);
    const auto back = rope(rope(x, {1}, 5), {1}, 5, true);
    CHECK(max_abs_diff(back.data(), x.data()) < 1e-10);
  }

  TEST_CASE("rope over two axes enumerates the flattened grid") {
    const auto x = random_tensor({2, 3, 4, 2, 6}, 7);
    const auto grid = rope(x, {1, 2});
    const auto flat = rope(ops::reshape(x, {2, 12, 2, 6}), {1});
    CHECK(max_abs_diff(grid.data(), flat.data()) == 0.0);
    // An offset continues the same enumeration.
    const auto tail = rope(ops::slice(ops::reshape(x, {2, 12, 2, 6}), 1, 8, 12), {1}, 8);
    CHECK(max_abs_diff(tail.data(), ops::slice(flat, 1, 8, 12).data()) == 0.0);
  }

  TEST_CASE("rope rejects odd widths and bad axes") {
    CHECK_THROWS_AS(rope(random_tensor({3, 5}, 1), {0}), DimensionError);
    CHECK_THROWS_AS(rope(random_tensor({3, 4}, 1), {1}), ContractError);
    CHECK_THROWS_AS(rope(random_tensor({2, 3, 4}, 1), {0, 2}), ContractError);
  }

  TEST_CASE("rope and scaled sinusoid gradients match finite differences") {
    auto x = param({2, 3, 2, 6}, 8);
    CHECK(fd_error([&] { return probe_sum(rope(x, {1, 2}, 3), 9); }, {x}) < 1e-6);
    auto scalar = Tensor::scalar(0.3, true);
    CHECK(fd_error([&] { return probe_sum(scaled_sin(4, 6, scalar), 10); }, {scalar}) < 1e-6);
  }
}

TEST_SUITE("rel_pos_bias") {
  TEST_CASE("length one holds w[0]") {
    ParamStore store(1);
    const auto p = make_rel_bias(store, "bias", 1);
    const auto t = rel_pos_bias(p);
    CHECK(t.shape() == Shape{1, 1});
    CHECK(t.item() == p.weight.at({0}));
  }

  TEST_CASE("direct path equals indexing by the offset") {
    for (std::size_t n : {1u, 2u, 7u, 33u, 511u}) {
      ParamStore store(n);
      const auto p = make_rel_bias(store, "bias", n);
      CHECK_FALSE(p.factorized());
      CHECK(p.weight.numel() == 2 * n - 1);
      CHECK_FALSE(p.a.defined());
      const auto t = rel_pos_bias(p);
      REQUIRE(t.shape() == Shape{n, n});
      bool exact = true;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) exact = exact && t.at({i, j}) == p.weight.at({n - 1 + j - i});
      CHECK(exact);
    }
  }

  TEST_CASE("factorized path is Toeplitz") {
    ParamStore store(9);
    const auto p = make_rel_bias(store, "bias", 600);
    CHECK(p.factorized());
    CHECK_FALSE(p.weight.defined());
    CHECK(p.a.numel() == 128);
    CHECK(p.b.numel() == 128);
    const auto t = rel_pos_bias(p);
    REQUIRE(t.shape() == Shape{600, 600});
    double worst = 0.0;
    for (std::size_t i = 1; i < 600; ++i)
      for (std::size_t j = 1; j < 600; ++j) worst = std::max(worst, std::abs(t.at({i, j}) - t.at({i - 1, j - 1})));
    CHECK(worst < 1e-6);
    // The diagonal is the plain inner product of the two factors.
    double dot = 0.0;
    for (std::size_t k = 0; k < 128; ++k) dot += p.a.at({k}) * p.b.at({k});
    CHECK(t.at({0, 0}) == doctest::Approx(dot).epsilon(1e-12));
  }

  TEST_CASE("parameter counts per path") {
    CHECK(rel_bias_param_count(1) == 1);
    CHECK(rel_bias_param_count(64) == 127);
    CHECK(rel_bias_param_count(511) == 1021);
    CHECK(rel_bias_param_count(512) == 256);
    ParamStore store;
    make_rel_bias(store, "small", 64);
    make_rel_bias(store, "large", 1024);
    CHECK(store.count_with_prefix("small.") == 127);
    CHECK(store.count_with_prefix("large.") == 256);
  }

  TEST_CASE("gradients match finite differences") {
    RelBiasParams small{5, param({9}, 1), {}, {}};
    CHECK(fd_error([&] { return probe_sum(rel_pos_bias(small), 11); }, {small.weight}) < 1e-6);
  }
}

TEST_SUITE("param_store") {
  TEST_CASE("initial values depend only on seed and name") {
    ParamStore first(5), second(5), other(6);
    const auto a = first.normal("x.weight", {3, 4});
    second.normal("unrelated", {7});
    const auto b = second.normal("x.weight", {3, 4});
    const auto c = other.normal("x.weight", {3, 4});
    CHECK(max_abs_diff(a.data(), b.data()) == 0.0);
    CHECK(max_abs_diff(a.data(), c.data()) > 0.0);
    CHECK(a.requires_grad());
    CHECK(a.is_leaf());
  }

  TEST_CASE("lookup and duplicate names") {
    ParamStore store;
    store.constant("a", {2}, 1.0);
    CHECK(store.contains("a"));
    CHECK_THROWS_AS(store.constant("a", {2}, 1.0), ContractError);
    CHECK_THROWS_AS(store.find("b"), ContractError);
  }
}
