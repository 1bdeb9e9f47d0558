#include "a3net/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "a3net/rng.hpp"

namespace a3net {

namespace {

struct Eval {
  double value;
  std::uint64_t pattern;
};

Eval evaluate(const std::function<Tensor()>& loss) {
  NoGradGuard no_grad;
  ActivationProbe probe;
  const double v = loss().item();
  return {v, probe.fingerprint()};
}

std::vector<std::size_t> pick_coords(std::size_t n, std::size_t cap, Rng& rng) {
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  if (cap == 0 || n <= cap) return all;
  // Partial Fisher-Yates: the first `cap` slots become a uniform sample.
  for (std::size_t i = 0; i < cap; ++i) std::swap(all[i], all[i + rng.below(n - i)]);
  all.resize(cap);
  std::sort(all.begin(), all.end());
  return all;
}

}  // namespace

GradCheckReport check_gradients(const std::function<Tensor()>& loss, const std::vector<NamedTensor>& params,
                                const GradCheckOptions& options) {
  GradCheckReport report;
  for (auto p : params) p.tensor.zero_grad();

  std::uint64_t base_pattern = 0;
  {
    ActivationProbe probe;
    Tensor out = loss();
    if (!std::isfinite(out.item())) {
      report.diagnostic = "loss is not finite at the base point";
      return report;
    }
    out.backward();
    base_pattern = probe.fingerprint();
  }

  Rng rng(options.seed);
  for (auto p : params) {
    Tensor t = p.tensor;
    const std::vector<double> analytic = t.grad().empty() ? std::vector<double>(t.numel(), 0.0)
                                                          : std::vector<double>(t.grad().begin(), t.grad().end());
    auto values = t.mutable_data();
    for (std::size_t i : pick_coords(t.numel(), options.max_coords_per_tensor, rng)) {
      const double x0 = values[i];
      values[i] = x0 + options.eps;
      const Eval plus = evaluate(loss);
      values[i] = x0 - options.eps;
      const Eval minus = evaluate(loss);
      values[i] = x0;
      if (!std::isfinite(plus.value) || !std::isfinite(minus.value)) {
        report.diagnostic = "loss is not finite near " + p.name + "[" + std::to_string(i) + "]";
        report.passed = false;
        return report;
      }
      if (plus.pattern != base_pattern || minus.pattern != base_pattern) {
        ++report.skipped_kinks;
        continue;
      }
      const double numeric = (plus.value - minus.value) / (2.0 * options.eps);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), options.abs_floor});
      const double err = std::abs(analytic[i] - numeric) / denom;
      ++report.checked;
      if (err > report.max_rel_error || report.worst.empty()) {
        report.max_rel_error = std::max(report.max_rel_error, err);
        if (err >= report.max_rel_error) {
          std::ostringstream os;
          os.precision(10);
          os << p.name << "[" << i << "]: analytic=" << analytic[i] << " numeric=" << numeric;
          report.worst = os.str();
        }
      }
    }
  }
  report.passed = report.checked > 0 && report.max_rel_error < options.tol;
  if (report.checked == 0) report.diagnostic = "no coordinate could be checked";
  return report;
}

}  // namespace a3net
