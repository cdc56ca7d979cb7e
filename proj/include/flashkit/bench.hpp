#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flashkit/model.hpp"

namespace flashkit {

/// One latency measurement of a training (or forward-only) step.
struct BenchRecord {
  std::string kind;
  std::size_t length = 0;
  std::size_t chunk = 0;
  std::size_t d = 0;
  std::size_t layers = 0;
  std::size_t batch = 0;
  std::size_t repeats = 0;
  std::size_t warmups = 0;
  double median_ms = 0.0;
  double p90_ms = 0.0;
  std::string precision = "f64";
};

/// A length that could not be measured, with the reason.
struct BenchSkip {
  std::string kind;
  std::size_t length = 0;
  std::string reason;
};

struct BenchReport {
  std::vector<BenchRecord> records;
  std::vector<BenchSkip> skipped;
};

struct BenchOptions {
  /// Template for every measured model; kind and length are overridden.
  ModelConfig model;
  /// Tokens per step; the batch is tokens / T (at least 1).
  std::size_t tokens_per_step = 4096;
  std::size_t repeats = 5;
  std::size_t warmups = 2;
  bool forward_only = false;
  std::uint64_t seed = 0;
};

/// Median and nearest-rank 90th percentile of `samples` (non-empty).
std::pair<double, double> median_p90(std::vector<double> samples);

/// Times `repeats` calls of `step` after `warmups` discarded calls, in ms.
std::vector<double> time_step(const std::function<void()>& step, std::size_t warmups, std::size_t repeats);

/// Per-step latency of `kind` at each context length. Lengths whose model or
/// batch cannot be allocated are reported in `skipped` and the sweep goes on.
/// Throws ContractError for repeats < 5, warmups < 2 or a chunk that does not
/// divide a length of a chunked kind.
BenchReport bench_latency(ModelKind kind, std::span<const std::size_t> lengths, const BenchOptions& options);

struct ExponentFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};

/// Least-squares line through (log T, log time). Needs at least 3 distinct
/// lengths and positive values; throws ContractError otherwise.
ExponentFit fit_exponent(std::span<const std::pair<double, double>> points);
ExponentFit fit_exponent(std::span<const BenchRecord> records);

inline constexpr const char* kBenchCsvHeader = "kind,T,C,d,layers,batch,repeats,median_ms,p90_ms,precision";

void write_bench_csv(std::ostream& out, std::span<const BenchRecord> records);

}  // namespace flashkit
