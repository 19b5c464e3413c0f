#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "pbad/tensor.hpp"

namespace pbad {

struct GradCheckOptions {
  double step = 1e-5;
  /// 0 checks every coordinate; otherwise a seeded sample of this many.
  std::size_t max_coordinates = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_relative_error = 0;
  std::size_t coordinates = 0;
};

/// Compares analytic gradients of `loss` w.r.t. `params` against central
/// differences in float64. Per coordinate the error is
/// |a - n| / max(|a|, |n|, 1e-3 * g_max, 1e-12), with g_max the largest
/// gradient magnitude seen, so coordinates far below the gradient scale are
/// judged against that scale rather than against round-off.
GradCheckResult grad_check(const std::function<Tensor64()>& loss, std::vector<Tensor64> params,
                           const GradCheckOptions& options = {});

}  // namespace pbad
