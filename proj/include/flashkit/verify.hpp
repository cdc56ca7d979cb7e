#pragma once

#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace flashkit {

/// Outcome of one acceptance criterion.
struct CheckResult {
  int criterion = 0;
  std::string name;
  bool passed = false;
  /// Measured quantities next to their thresholds, one line.
  std::string detail;
  double seconds = 0.0;
};

struct VerifyOptions {
  /// Receives progress lines of the long checks; may be null.
  std::ostream* log = nullptr;
  /// Receives the benchmark CSV of the scaling check; may be null.
  std::ostream* bench_csv = nullptr;
  /// Corpus of the trainability check.
  std::string corpus_path;
  /// Training steps and batch of the trainability check.
  std::size_t train_steps = 2000;
  std::size_t train_batch = 4;
  std::uint64_t seed = 0;
};

/// Criteria that finish in seconds; 6 (latency scaling) and 7 (training)
/// take minutes.
inline constexpr int kQuickCriteria[] = {1, 2, 3, 4, 5, 8, 9};
inline constexpr int kAllCriteria[] = {1, 2, 3, 4, 5, 6, 7, 8, 9};

/// Runs one criterion (1 to 9). Throws ContractError for other numbers.
CheckResult run_criterion(int criterion, const VerifyOptions& options);

/// "criterion N [PASS|FAIL] name: detail (seconds)".
std::string format_result(const CheckResult& result);

}  // namespace flashkit
