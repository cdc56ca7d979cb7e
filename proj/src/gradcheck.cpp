#include "flashkit/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace flashkit {

namespace {

double evaluate(const std::function<Tensor()>& loss_fn) {
  NoGradScope no_grad;
  const double v = loss_fn().item();
  if (!std::isfinite(v)) throw ContractError("finite-difference check aborted: loss is not finite");
  return v;
}

}  // namespace

GradCheckReport finite_difference_check(const std::function<Tensor()>& loss_fn, const std::vector<Tensor>& params,
                                        const GradCheckOptions& options) {
  if (!(options.eps > 0.0)) throw ContractError("finite-difference eps must be positive");
  std::vector<Tensor> ps = params;
  for (auto& p : ps) {
    if (!p.requires_grad()) throw ContractError("finite-difference check needs requires_grad leaves");
    p.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = loss_fn();
    }
    if (!std::isfinite(loss.item())) throw ContractError("finite-difference check aborted: loss is not finite");
    tape.backward(loss);
    for (auto& p : ps) {
      const auto g = p.grad();
      analytic.emplace_back(g.begin(), g.end());
    }
  }

  GradCheckReport report;
  const double h = options.eps;
  const double centre = evaluate(loss_fn);
  for (std::size_t pi = 0; pi < ps.size(); ++pi) {
    auto values = ps[pi].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      auto at = [&](double offset) {
        values[i] = saved + offset;
        const double v = evaluate(loss_fn);
        values[i] = saved;
        return v;
      };
      const double up = at(h), down = at(-h);
      const double up_half = at(0.5 * h), down_half = at(-0.5 * h);
      // Richardson combination of the central differences at h and h/2
      // cancels the h² error term.
      const double wide = (up - down) / (2.0 * h);
      const double narrow = (up_half - down_half) / h;
      const double cd = (4.0 * narrow - wide) / 3.0;
      const double a = analytic[pi][i];
      const double err = std::abs(a - cd) / std::max({std::abs(a), std::abs(cd), options.floor});
      if (err > options.smooth_agreement) {
        // One-sided slopes that disagree mark a kink inside the stencil.
        const double right = (up - centre) / h;
        const double left = (centre - down) / h;
        const double spread = std::abs(right - left) / std::max({std::abs(right), std::abs(left), options.floor});
        if (spread > options.kink_tolerance) {
          ++report.skipped;
          continue;
        }
      }
      ++report.checked;
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst = "param" + std::to_string(pi) + "[" + std::to_string(i) + "]";
        report.worst_analytic = a;
        report.worst_numeric = cd;
      }
    }
  }
  return report;
}

}  // namespace flashkit
