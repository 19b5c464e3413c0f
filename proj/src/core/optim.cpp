#include "pbad/optim.hpp"

#include <cmath>
#include <string>

#include "pbad/error.hpp"

namespace pbad {

template <class T>
void adam_step(std::span<BasicTensor<T>> params, AdamState<T>& state) {
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.numel(), T(0));
      state.second_moment.emplace_back(p.numel(), T(0));
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw UsageError("adam_step: state tracks " + std::to_string(state.first_moment.size()) + " parameters, got " +
                     std::to_string(params.size()));
  }
  ++state.step;
  const auto& o = state.options;
  const double t = static_cast<double>(state.step);
  const T b1 = static_cast<T>(o.beta1), b2 = static_cast<T>(o.beta2);
  const T c1 = static_cast<T>(1.0 / (1.0 - std::pow(o.beta1, t)));
  const T c2 = static_cast<T>(1.0 / (1.0 - std::pow(o.beta2, t)));
  const T lr = static_cast<T>(o.lr), eps = static_cast<T>(o.eps);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    if (m.size() != p.numel()) throw UsageError("adam_step: moment buffer does not match parameter " + std::to_string(k));
    auto w = p.mutable_data();
    const bool has = p.has_grad();
    auto g = p.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const T gi = has ? g[i] : T(0);
      m[i] = b1 * m[i] + (T(1) - b1) * gi;
      v[i] = b2 * v[i] + (T(1) - b2) * gi * gi;
      const T mhat = m[i] * c1;
      const T vhat = v[i] * c2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

template void adam_step<float>(std::span<BasicTensor<float>>, AdamState<float>&);
template void adam_step<double>(std::span<BasicTensor<double>>, AdamState<double>&);

}  // namespace pbad
