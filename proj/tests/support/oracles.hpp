#pragma once

// Independent reference implementations used by the unit tests and the
// acceptance runner. None of these share code with the library paths they
// check.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "pbad/image.hpp"
#include "pbad/rng.hpp"

namespace oracle {

std::vector<double> random_vector(std::size_t n, pbad::Rng& rng, double lo = -1, double hi = 1);

/// Direct six-loop convolution, B×C×H×W input, F×C×kh×kw weight.
std::vector<double> naive_conv2d(std::span<const double> x, std::size_t B, std::size_t C, std::size_t H, std::size_t W,
                                 std::span<const double> w, std::size_t F, std::size_t kh, std::size_t kw,
                                 std::span<const double> bias, std::size_t sh, std::size_t sw);

/// Probability that a random positive outscores a random negative, ties ½.
double mann_whitney_auc(std::span<const float> scores, std::span<const std::uint8_t> labels);

/// Component label per pixel (0 = background, 1.. in raster order of first
/// pixel), 8-connectivity, via union-find.
std::vector<std::size_t> union_find_labels(const pbad::GroundTruthMask& mask, std::size_t* count);

/// Normalized area of the per-region-overlap curve up to `limit`, evaluated
/// at every distinct score (plus +inf) by direct pixel counting.
double exhaustive_pro_area(std::span<const std::vector<float>> maps, std::span<const pbad::GroundTruthMask> masks,
                           double limit);

/// Area of a piecewise-linear curve from (x, y) points, truncated at `limit`
/// and divided by it.
double trapezoid_area(std::span<const double> x, std::span<const double> y, double limit);

/// min ½ αᵀKα, Σα = 1, 0 ≤ α ≤ C by projected gradient in float64; returns
/// the objective value.
double dense_ocsvm_objective(std::span<const double> kernel, std::size_t n, double C, std::size_t iterations = 20000);

/// log Σ exp(x) in long double.
long double logsumexp(std::span<const double> x);

/// Pixels at distance ≤ radius from an integer center.
std::size_t disk_pixel_count(double radius);

}  // namespace oracle
