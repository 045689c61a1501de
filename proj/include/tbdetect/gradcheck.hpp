#pragma once

#include <functional>
#include <string>
#include <vector>

#include "tbdetect/tensor.hpp"

namespace tb {

// Scalar function of a list of tensors. When `grads` is non-null the call
// must also produce analytic gradients, one tensor per input, zero-filled for
// inputs the function ignores.
using ScalarFn =
    std::function<double(const std::vector<Tensor<double>>&, std::vector<Tensor<double>>*)>;

struct GradCheckResult {
  double max_rel_err = 0.0;
  double tolerance = 1e-4;
  std::size_t coords_checked = 0;
  bool passed = false;
};

// Compares analytic gradients against central finite differences at 64-bit
// precision. Relative error per coordinate is |a-n| / max(|a|, |n|, 1e-2),
// and the report carries the maximum over all checked coordinates. When
// max_coords_per_tensor > 0, large inputs are subsampled deterministically
// from coord_seed instead of sweeping every coordinate.
GradCheckResult grad_check(const ScalarFn& f, std::vector<Tensor<double>> point, double step,
                           double tolerance, std::size_t max_coords_per_tensor = 0,
                           std::uint64_t coord_seed = 0);

struct GradCheckCase {
  std::string name;
  GradCheckResult result;
};

// Finite-difference verification of every differentiable primitive plus both
// full models at reduced size, repeated across `num_seeds` deterministic
// seeds. Used by the `gradcheck` CLI command and the acceptance suite.
std::vector<GradCheckCase> run_gradcheck_suite(std::size_t num_seeds = 20,
                                               double tolerance = 1e-4);

bool all_passed(const std::vector<GradCheckCase>& cases);

}  // namespace tb
