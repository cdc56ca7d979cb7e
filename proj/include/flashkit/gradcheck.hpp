#pragma once

#include <functional>
#include <string>
#include <vector>

#include "flashkit/tensor.hpp"

namespace flashkit {

struct GradCheckOptions {
  /// Outer step of the Richardson-extrapolated central difference (the inner
  /// step is eps/2).
  double eps = 1e-3;
  /// Floor of the relative-error denominator; keeps 0/0 out of the ratio.
  double floor = 1e-8;
  /// An element whose analytic and central-difference slopes disagree by
  /// more than `smooth_agreement`, and whose one-sided slopes differ by more
  /// than `kink_tolerance` (relative), straddles a non-differentiable point
  /// such as a relu kink. It is counted as skipped instead of scored.
  double smooth_agreement = 1e-6;
  double kink_tolerance = 0.5;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  /// "param[index]" of the worst element, for diagnostics.
  std::string worst;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares reverse-mode gradients of `loss_fn` against extrapolated central
/// finite differences for every element of every tensor in `params`.
///
/// `loss_fn` must rebuild the scalar loss from the current parameter values
/// on each call and be deterministic. `params` must be leaves with
/// requires_grad set; their values are restored afterwards. Throws
/// ContractError if the loss turns non-finite.
GradCheckReport finite_difference_check(const std::function<Tensor()>& loss_fn, const std::vector<Tensor>& params,
                                        const GradCheckOptions& options = {});

}  // namespace flashkit
