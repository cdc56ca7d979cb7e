#include "flashkit/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <new>
#include <random>
#include <set>

#include "flashkit/ops.hpp"

namespace flashkit {

std::pair<double, double> median_p90(std::vector<double> samples) {
  if (samples.empty()) throw ContractError("median of no samples");
  std::sort(samples.begin(), samples.end());
  const std::size_t n = samples.size();
  const double median = n % 2 == 1 ? samples[n / 2] : 0.5 * (samples[n / 2 - 1] + samples[n / 2]);
  const auto rank = static_cast<std::size_t>(std::ceil(0.9 * static_cast<double>(n)));
  return {median, samples[std::max<std::size_t>(rank, 1) - 1]};
}

std::vector<double> time_step(const std::function<void()>& step, std::size_t warmups, std::size_t repeats) {
  for (std::size_t i = 0; i < warmups; ++i) step();
  std::vector<double> ms;
  ms.reserve(repeats);
  for (std::size_t i = 0; i < repeats; ++i) {
    const auto start = std::chrono::steady_clock::now();
    step();
    ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count());
  }
  return ms;
}

namespace {

bool is_chunked(ModelKind kind) { return kind == ModelKind::flash; }

BenchRecord measure(ModelKind kind, std::size_t length, const BenchOptions& options) {
  ModelConfig cfg = options.model;
  cfg.kind = kind;
  cfg.length = length;
  cfg = cfg.resolved();
  cfg.validate();
  const std::size_t batch = std::max<std::size_t>(1, options.tokens_per_step / length);

  std::mt19937_64 rng(options.seed);
  std::vector<std::int32_t> tokens(batch * length);
  for (auto& t : tokens) t = static_cast<std::int32_t>(rng() % kByteVocab);

  Model model(cfg, options.seed);
  auto params = model.params().tensors();
  std::function<void()> step;
  if (options.forward_only) {
    step = [&] {
      NoGradScope no_grad;
      const auto logits = model.logits(tokens, batch);
      (void)logits;
    };
  } else {
    step = [&] {
      for (auto& p : params) p.zero_grad();
      Tape tape;
      Tensor loss;
      {
        TapeScope scope(tape);
        loss = cfg.causal ? lm_loss(model, tokens, batch) : ops::mean(model.logits(tokens, batch));
      }
      tape.backward(loss);
    };
  }
  const auto ms = time_step(step, options.warmups, options.repeats);
  const auto [median, p90] = median_p90(ms);
  return {std::string(model_kind_name(kind)), length, is_chunked(kind) ? cfg.chunk : length, cfg.d, cfg.layers,
          batch, ms.size(), options.warmups, median, p90, "f64"};
}

}  // namespace

BenchReport bench_latency(ModelKind kind, std::span<const std::size_t> lengths, const BenchOptions& options) {
  if (options.repeats < 5) throw ContractError("benchmark needs at least 5 timed repeats");
  if (options.warmups < 2) throw ContractError("benchmark needs at least 2 warmup iterations");
  if (options.tokens_per_step == 0) throw ContractError("tokens per step must be positive");
  for (auto length : lengths) {
    if (is_chunked(kind) && (options.model.chunk == 0 || length % options.model.chunk != 0)) {
      throw ContractError("chunk size " + std::to_string(options.model.chunk) + " does not divide length " +
                          std::to_string(length));
    }
  }
  BenchReport report;
  for (auto length : lengths) {
    try {
      report.records.push_back(measure(kind, length, options));
    } catch (const std::bad_alloc&) {
      report.skipped.push_back({std::string(model_kind_name(kind)), length, "out of memory"});
    } catch (const std::length_error&) {
      report.skipped.push_back({std::string(model_kind_name(kind)), length, "out of memory"});
    }
  }
  return report;
}

ExponentFit fit_exponent(std::span<const std::pair<double, double>> points) {
  std::set<double> distinct;
  for (const auto& [t, y] : points) {
    if (!(t > 0.0) || !(y > 0.0)) throw ContractError("exponent fit needs positive lengths and times");
    distinct.insert(t);
  }
  if (distinct.size() < 3) throw ContractError("exponent fit needs at least 3 distinct lengths");
  const double n = static_cast<double>(points.size());
  double mx = 0.0, my = 0.0;
  for (const auto& [t, y] : points) {
    mx += std::log(t);
    my += std::log(y);
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (const auto& [t, y] : points) {
    const double dx = std::log(t) - mx, dy = std::log(y) - my;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  ExponentFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  fit.r2 = syy > 0.0 ? (sxy * sxy) / (sxx * syy) : 1.0;
  return fit;
}

ExponentFit fit_exponent(std::span<const BenchRecord> records) {
  std::vector<std::pair<double, double>> points;
  points.reserve(records.size());
  for (const auto& r : records) points.emplace_back(static_cast<double>(r.length), r.median_ms);
  return fit_exponent(points);
}

void write_bench_csv(std::ostream& out, std::span<const BenchRecord> records) {
  out << kBenchCsvHeader << '\n';
  const auto flags = out.flags();
  const auto precision = out.precision();
  out << std::fixed << std::setprecision(3);
  for (const auto& r : records) {
    out << r.kind << ',' << r.length << ',' << r.chunk << ',' << r.d << ',' << r.layers << ',' << r.batch << ','
        << r.repeats << ',' << r.median_ms << ',' << r.p90_ms << ',' << r.precision << '\n';
  }
  out.flags(flags);
  out.precision(precision);
}

}  // namespace flashkit
