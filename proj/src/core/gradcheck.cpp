#include "pbad/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "pbad/rng.hpp"

namespace pbad {

GradCheckResult grad_check(const std::function<Tensor64()>& loss, std::vector<Tensor64> params,
                           const GradCheckOptions& options) {
  for (auto& p : params) p.zero_grad();
  loss().backward();

  struct Coord {
    std::size_t param, index;
  };
  std::vector<Coord> coords;
  for (std::size_t p = 0; p < params.size(); ++p)
    for (std::size_t i = 0; i < params[p].numel(); ++i) coords.push_back({p, i});
  if (options.max_coordinates && coords.size() > options.max_coordinates) {
    Rng rng(options.seed, 0x6763);
    rng.shuffle(std::span<Coord>(coords));
    coords.resize(options.max_coordinates);
  }

  std::vector<double> analytic, numeric;
  NoGradGuard no_grad;
  for (const auto& c : coords) {
    auto values = params[c.param].mutable_data();
    const double saved = values[c.index];
    values[c.index] = saved + options.step;
    const double up = loss().item();
    values[c.index] = saved - options.step;
    const double down = loss().item();
    values[c.index] = saved;
    numeric.push_back((up - down) / (2 * options.step));
    analytic.push_back(params[c.param].has_grad() ? params[c.param].grad()[c.index] : 0.0);
  }

  double scale = 0;
  for (std::size_t i = 0; i < coords.size(); ++i) scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  GradCheckResult result;
  result.coordinates = coords.size();
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), 1e-3 * scale, 1e-12});
    result.max_relative_error = std::max(result.max_relative_error, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return result;
}

}  // namespace pbad
