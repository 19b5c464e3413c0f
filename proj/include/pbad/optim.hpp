#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pbad/tensor.hpp"

namespace pbad {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamState {
  AdamOptions options;
  std::uint64_t step = 0;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
};

/// Bias-corrected Adam update of every parameter from its accumulated
/// gradient. Moment buffers are created on the first call.
template <class T>
void adam_step(std::span<BasicTensor<T>> params, AdamState<T>& state);

extern template void adam_step<float>(std::span<BasicTensor<float>>, AdamState<float>&);
extern template void adam_step<double>(std::span<BasicTensor<double>>, AdamState<double>&);

}  // namespace pbad
