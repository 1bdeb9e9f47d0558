#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "a3net/tensor.hpp"

namespace a3net {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  /// Gradients smaller than this are compared in absolute rather than relative terms.
  double abs_floor = 1e-6;
  /// Tensors with more coordinates than this are checked on a seeded subsample of that size.
  std::size_t max_coords_per_tensor = 64;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  /// Coordinates where the perturbation crossed a ReLU kink (f not differentiable there).
  std::size_t skipped_kinks = 0;
  bool passed = false;
  std::string worst;       // "<tensor>[<index>]: analytic=.. numeric=.."
  std::string diagnostic;  // set when the check could not be carried out
};

/// Compares reverse-mode gradients of `loss` with central differences
/// (f(x+eps) - f(x-eps)) / (2 eps) coordinate by coordinate.
///
/// The error per coordinate is |analytic - numeric| / max(|analytic|, |numeric|, abs_floor).
/// Coordinates whose two perturbed evaluations land in a different ReLU
/// activation pattern than the base point are skipped and counted.
GradCheckReport check_gradients(const std::function<Tensor()>& loss, const std::vector<NamedTensor>& params,
                                const GradCheckOptions& options = {});

}  // namespace a3net
