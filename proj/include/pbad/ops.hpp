#pragma once

// Differentiable operators used by the autoencoders and the latent prior.
// All are instantiated for float (training, inference) and double
// (finite-difference checks).

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "pbad/tensor.hpp"

namespace pbad {

struct Stride2 {
  std::size_t rows = 1;
  std::size_t cols = 1;
};

enum class Mode { train, infer };

template <class T>
struct RunningStats {
  std::vector<T> mean;
  std::vector<T> var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  explicit RunningStats(std::size_t channels = 0) : mean(channels, T(0)), var(channels, T(1)) {}
};

// Elementwise and reductions.
template <class T> BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T> BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T> BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T> BasicTensor<T> scale(const BasicTensor<T>& a, T factor);
/// a + b where b is repeated over a's leading elements (b.numel() divides a.numel()).
template <class T> BasicTensor<T> add_tiled(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T> BasicTensor<T> sum(const BasicTensor<T>& a);
template <class T> BasicTensor<T> mean(const BasicTensor<T>& a);
/// Sum of squared differences, a scalar.
template <class T> BasicTensor<T> sse(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T> BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape);

// Convolutions (no padding).
template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, Stride2 stride);
/// Adjoint of conv2d. weight is in_channels × out_channels × kh × kw, so the
/// same tensor used by conv2d (F × C × kh × kw) maps F channels back to C.
template <class T>
BasicTensor<T> conv2d_transpose(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                                const BasicTensor<T>& bias, Stride2 stride);

std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride);
std::size_t conv_transpose_output_size(std::size_t in, std::size_t kernel, std::size_t stride);

template <class T>
BasicTensor<T> batch_norm(const BasicTensor<T>& input, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, RunningStats<T>& stats, Mode mode);
/// Fixed per-channel (x - shift) / scale; differentiable w.r.t. input only.
template <class T>
BasicTensor<T> channel_standardize(const BasicTensor<T>& input, std::span<const T> shift,
                                   std::span<const T> scale);

template <class T> BasicTensor<T> gelu(const BasicTensor<T>& a);
template <class T> BasicTensor<T> sigmoid(const BasicTensor<T>& a);

// Sequence-model operators.
/// x: [..., in], weight: out × in, bias: out (may be undefined).
template <class T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias);
/// Normalizes over the last dimension.
template <class T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                          T eps = T(1e-5));
/// q, k, v: B × T × D split into `heads` heads. Causal visibility: query t
/// sees keys 0..t only.
template <class T>
BasicTensor<T> attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                         std::size_t heads, bool causal);
/// Rows of `table` selected by `indices`: N × D.
template <class T>
BasicTensor<T> gather_rows(const BasicTensor<T>& table, std::span<const std::int32_t> indices);
/// Mean negative log-likelihood of `targets` under softmax(logits), logits N × K.
template <class T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const std::int32_t> targets);

// Layout and quantization helpers.
/// B × C × H × W → (B·H·W) × C.
template <class T> BasicTensor<T> channels_last(const BasicTensor<T>& x);
/// (B·H·W) × C → B × C × H × W.
template <class T>
BasicTensor<T> channels_first(const BasicTensor<T>& x, std::size_t batch, std::size_t height, std::size_t width);
/// Value of `quantized` with the gradient copied verbatim onto `z`.
template <class T>
BasicTensor<T> straight_through(const BasicTensor<T>& z, const BasicTensor<T>& quantized);

// Non-differentiable inspection helpers.
/// Attention probabilities, B × heads × T × T (zeros above the diagonal when causal).
template <class T>
std::vector<T> attention_weights(const BasicTensor<T>& q, const BasicTensor<T>& k, std::size_t heads, bool causal);
template <class T> void softmax_inplace(std::span<T> row);

}  // namespace pbad
