#include "pbad/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "kernels.hpp"
#include "pbad/error.hpp"

namespace pbad {

using kernels::axpy;
using kernels::dot;

namespace {

template <class T>
using NodeT = detail::Node<T>;

template <class T>
bool needs_grad(std::initializer_list<const BasicTensor<T>*> inputs) {
  if (!grad_enabled()) return false;
  for (const auto* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

// Builds the output node; history is recorded only when some input needs it.
template <class T>
BasicTensor<T> make_result(Shape shape, std::vector<T> value, std::initializer_list<const BasicTensor<T>*> inputs,
                           std::function<void(NodeT<T>&)> backward) {
  auto node = std::make_shared<NodeT<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (needs_grad<T>(inputs)) {
    node->requires_grad = true;
    for (const auto* t : inputs) {
      if (t && t->defined() && t->requires_grad()) node->parents.push_back(t->node());
    }
    node->backward = std::move(backward);
  }
  return BasicTensor<T>::from_node(std::move(node));
}

// Gradient buffer of an input, or nullptr when it does not take gradients.
template <class T>
T* grad_buffer(const BasicTensor<T>& t) {
  if (!t.defined() || !t.requires_grad()) return nullptr;
  t.node()->ensure_grad();
  return t.node()->grad.data();
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw UsageError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

void require_rank(const Shape& s, std::size_t rank, const char* op, const char* what) {
  if (s.size() != rank) {
    throw UsageError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " +
                     shape_str(s));
  }
}

}  // namespace

std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride) {
  if (stride == 0 || in < kernel) return 0;
  return (in - kernel) / stride + 1;
}

std::size_t conv_transpose_output_size(std::size_t in, std::size_t kernel, std::size_t stride) {
  if (in == 0) return 0;
  return (in - 1) * stride + kernel;
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.numel());
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [a, b](NodeT<T>& self) {
    if (T* ga = grad_buffer(a)) axpy(T(1), self.grad.data(), ga, self.grad.size());
    if (T* gb = grad_buffer(b)) axpy(T(1), self.grad.data(), gb, self.grad.size());
  });
}

template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.numel());
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [a, b](NodeT<T>& self) {
    if (T* ga = grad_buffer(a)) axpy(T(1), self.grad.data(), ga, self.grad.size());
    if (T* gb = grad_buffer(b)) axpy(T(-1), self.grad.data(), gb, self.grad.size());
  });
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.numel());
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [a, b](NodeT<T>& self) {
    const auto& g = self.grad;
    if (T* ga = grad_buffer(a)) {
      auto bd = b.data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bd[i];
    }
    if (T* gb = grad_buffer(b)) {
      auto ad = a.data();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ad[i];
    }
  });
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return make_result<T>(a.shape(), std::move(out), {&a}, [a, factor](NodeT<T>& self) {
    if (T* ga = grad_buffer(a)) axpy(factor, self.grad.data(), ga, self.grad.size());
  });
}

template <class T>
BasicTensor<T> add_tiled(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const std::size_t n = a.numel(), m = b.numel();
  if (m == 0 || n % m != 0) {
    throw UsageError("add_tiled: " + shape_str(b.shape()) + " does not tile " + shape_str(a.shape()));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (std::size_t i = 0; i < n; i += m) axpy(T(1), bd.data(), out.data() + i, m);
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [a, b, n, m](NodeT<T>& self) {
    if (T* ga = grad_buffer(a)) axpy(T(1), self.grad.data(), ga, n);
    if (T* gb = grad_buffer(b)) {
      for (std::size_t i = 0; i < n; i += m) axpy(T(1), self.grad.data() + i, gb, m);
    }
  });
}

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  T s = 0;
  for (T v : a.data()) s += v;
  return make_result<T>(Shape{}, {s}, {&a}, [a](NodeT<T>& self) {
    if (T* ga = grad_buffer(a)) {
      const T g = self.grad[0];
      for (std::size_t i = 0; i < a.numel(); ++i) ga[i] += g;
    }
  });
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <class T>
BasicTensor<T> sse(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sse");
  auto ad = a.data();
  auto bd = b.data();
  double s = 0;
  for (std::size_t i = 0; i < ad.size(); ++i) {
    const double d = static_cast<double>(ad[i]) - static_cast<double>(bd[i]);
    s += d * d;
  }
  return make_result<T>(Shape{}, {static_cast<T>(s)}, {&a, &b}, [a, b](NodeT<T>& self) {
    const T g = self.grad[0];
    auto ad = a.data();
    auto bd = b.data();
    T* ga = grad_buffer(a);
    T* gb = grad_buffer(b);
    for (std::size_t i = 0; i < ad.size(); ++i) {
      const T d = T(2) * g * (ad[i] - bd[i]);
      if (ga) ga[i] += d;
      if (gb) gb[i] -= d;
    }
  });
}

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw UsageError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  return make_result<T>(std::move(shape), std::move(out), {&a}, [a](NodeT<T>& self) {
    if (T* ga = grad_buffer(a)) axpy(T(1), self.grad.data(), ga, self.grad.size());
  });
}

// ---------------------------------------------------------------------------
// Convolutions

template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                      Stride2 stride) {
  require_rank(input.shape(), 4, "conv2d", "input");
  require_rank(weight.shape(), 4, "conv2d", "weight");
  const std::size_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t F = weight.dim(0), KH = weight.dim(2), KW = weight.dim(3);
  const std::size_t SH = stride.rows, SW = stride.cols;
  if (weight.dim(1) != C) {
    throw UsageError("conv2d: input channels (dim 1) = " + std::to_string(C) + " but weight expects " +
                     std::to_string(weight.dim(1)));
  }
  if (SH == 0 || SW == 0) throw UsageError("conv2d: stride must be positive");
  if (H < KH) throw UsageError("conv2d: input height (dim 2) " + std::to_string(H) + " < kernel " + std::to_string(KH));
  if (W < KW) throw UsageError("conv2d: input width (dim 3) " + std::to_string(W) + " < kernel " + std::to_string(KW));
  if (bias.defined() && bias.numel() != F) {
    throw UsageError("conv2d: bias length " + std::to_string(bias.numel()) + " != filters " + std::to_string(F));
  }
  const std::size_t OH = conv_output_size(H, KH, SH), OW = conv_output_size(W, KW, SW);

  std::vector<T> out(B * F * OH * OW, T(0));
  auto x = input.data();
  auto w = weight.data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t f = 0; f < F; ++f) {
      T* o = out.data() + (b * F + f) * OH * OW;
      if (bias.defined()) std::fill(o, o + OH * OW, bias.data()[f]);
      for (std::size_t c = 0; c < C; ++c) {
        const T* xc = x.data() + (b * C + c) * H * W;
        for (std::size_t ky = 0; ky < KH; ++ky) {
          for (std::size_t kx = 0; kx < KW; ++kx) {
            const T wv = w[((f * C + c) * KH + ky) * KW + kx];
            for (std::size_t oy = 0; oy < OH; ++oy) {
              const T* row = xc + (oy * SH + ky) * W + kx;
              T* orow = o + oy * OW;
              if (SW == 1) {
                for (std::size_t ox = 0; ox < OW; ++ox) orow[ox] += wv * row[ox];
              } else {
                for (std::size_t ox = 0; ox < OW; ++ox) orow[ox] += wv * row[ox * SW];
              }
            }
          }
        }
      }
    }
  }

  return make_result<T>(
      Shape{B, F, OH, OW}, std::move(out), {&input, &weight, &bias},
      [input, weight, bias, B, C, H, W, F, KH, KW, SH, SW, OH, OW](NodeT<T>& self) {
        const T* g = self.grad.data();
        auto x = input.data();
        auto w = weight.data();
        T* gx = grad_buffer(input);
        T* gw = grad_buffer(weight);
        T* gb = grad_buffer(bias);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t f = 0; f < F; ++f) {
            const T* go = g + (b * F + f) * OH * OW;
            if (gb) {
              T s = 0;
              for (std::size_t i = 0; i < OH * OW; ++i) s += go[i];
              gb[f] += s;
            }
            for (std::size_t c = 0; c < C; ++c) {
              const T* xc = x.data() + (b * C + c) * H * W;
              T* gxc = gx ? gx + (b * C + c) * H * W : nullptr;
              for (std::size_t ky = 0; ky < KH; ++ky) {
                for (std::size_t kx = 0; kx < KW; ++kx) {
                  const std::size_t widx = ((f * C + c) * KH + ky) * KW + kx;
                  const T wv = w[widx];
                  T acc = 0;
                  for (std::size_t oy = 0; oy < OH; ++oy) {
                    const std::size_t off = (oy * SH + ky) * W + kx;
                    const T* grow = go + oy * OW;
                    if (gw) {
                      const T* row = xc + off;
                      if (SW == 1) {
                        acc += dot(grow, row, OW);
                      } else {
                        for (std::size_t ox = 0; ox < OW; ++ox) acc += grow[ox] * row[ox * SW];
                      }
                    }
                    if (gxc) {
                      T* grow_x = gxc + off;
                      if (SW == 1) {
                        for (std::size_t ox = 0; ox < OW; ++ox) grow_x[ox] += wv * grow[ox];
                      } else {
                        for (std::size_t ox = 0; ox < OW; ++ox) grow_x[ox * SW] += wv * grow[ox];
                      }
                    }
                  }
                  if (gw) gw[widx] += acc;
                }
              }
            }
          }
        }
      });
}

template <class T>
BasicTensor<T> conv2d_transpose(const BasicTensor<T>& input, const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                                Stride2 stride) {
  require_rank(input.shape(), 4, "conv2d_transpose", "input");
  require_rank(weight.shape(), 4, "conv2d_transpose", "weight");
  const std::size_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t F = weight.dim(1), KH = weight.dim(2), KW = weight.dim(3);
  const std::size_t SH = stride.rows, SW = stride.cols;
  if (weight.dim(0) != C) {
    throw UsageError("conv2d_transpose: input channels (dim 1) = " + std::to_string(C) + " but weight expects " +
                     std::to_string(weight.dim(0)));
  }
  if (SH == 0 || SW == 0) throw UsageError("conv2d_transpose: stride must be positive");
  if (H == 0 || W == 0) throw UsageError("conv2d_transpose: empty spatial input");
  if (bias.defined() && bias.numel() != F) {
    throw UsageError("conv2d_transpose: bias length " + std::to_string(bias.numel()) + " != output channels " +
                     std::to_string(F));
  }
  const std::size_t OH = conv_transpose_output_size(H, KH, SH), OW = conv_transpose_output_size(W, KW, SW);

  std::vector<T> out(B * F * OH * OW, T(0));
  auto x = input.data();
  auto w = weight.data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t f = 0; f < F; ++f) {
      T* o = out.data() + (b * F + f) * OH * OW;
      if (bias.defined()) std::fill(o, o + OH * OW, bias.data()[f]);
      for (std::size_t c = 0; c < C; ++c) {
        const T* xc = x.data() + (b * C + c) * H * W;
        for (std::size_t ky = 0; ky < KH; ++ky) {
          for (std::size_t kx = 0; kx < KW; ++kx) {
            const T wv = w[((c * F + f) * KH + ky) * KW + kx];
            for (std::size_t iy = 0; iy < H; ++iy) {
              const T* row = xc + iy * W;
              T* orow = o + (iy * SH + ky) * OW + kx;
              if (SW == 1) {
                for (std::size_t ix = 0; ix < W; ++ix) orow[ix] += wv * row[ix];
              } else {
                for (std::size_t ix = 0; ix < W; ++ix) orow[ix * SW] += wv * row[ix];
              }
            }
          }
        }
      }
    }
  }

  return make_result<T>(
      Shape{B, F, OH, OW}, std::move(out), {&input, &weight, &bias},
      [input, weight, bias, B, C, H, W, F, KH, KW, SH, SW, OH, OW](NodeT<T>& self) {
        const T* g = self.grad.data();
        auto x = input.data();
        auto w = weight.data();
        T* gx = grad_buffer(input);
        T* gw = grad_buffer(weight);
        T* gb = grad_buffer(bias);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t f = 0; f < F; ++f) {
            const T* go = g + (b * F + f) * OH * OW;
            if (gb) {
              T s = 0;
              for (std::size_t i = 0; i < OH * OW; ++i) s += go[i];
              gb[f] += s;
            }
            for (std::size_t c = 0; c < C; ++c) {
              const T* xc = x.data() + (b * C + c) * H * W;
              T* gxc = gx ? gx + (b * C + c) * H * W : nullptr;
              for (std::size_t ky = 0; ky < KH; ++ky) {
                for (std::size_t kx = 0; kx < KW; ++kx) {
                  const std::size_t widx = ((c * F + f) * KH + ky) * KW + kx;
                  const T wv = w[widx];
                  T acc = 0;
                  for (std::size_t iy = 0; iy < H; ++iy) {
                    const T* grow = go + (iy * SH + ky) * OW + kx;
                    const T* row = xc + iy * W;
                    if (SW == 1) {
                      if (gw) acc += dot(grow, row, W);
                      if (gxc) axpy(wv, grow, gxc + iy * W, W);
                    } else {
                      for (std::size_t ix = 0; ix < W; ++ix) {
                        if (gw) acc += grow[ix * SW] * row[ix];
                        if (gxc) gxc[iy * W + ix] += wv * grow[ix * SW];
                      }
                    }
                  }
                  if (gw) gw[widx] += acc;
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Normalization and activations

template <class T>
BasicTensor<T> batch_norm(const BasicTensor<T>& input, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                          RunningStats<T>& stats, Mode mode) {
  require_rank(input.shape(), 4, "batch_norm", "input");
  const std::size_t B = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  if (gamma.numel() != C || beta.numel() != C || stats.mean.size() != C || stats.var.size() != C) {
    throw UsageError("batch_norm: parameters do not match " + std::to_string(C) + " channels (dim 1)");
  }
  const std::size_t N = B * HW;
  if (mode == Mode::train && N < 2) {
    throw UsageError("batch_norm: train mode needs at least 2 values per channel, got " + std::to_string(N));
  }
  auto x = input.data();
  auto gm = gamma.data();
  auto bt = beta.data();
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(C);
  std::vector<T> out(x.size());
  for (std::size_t c = 0; c < C; ++c) {
    T mu, var;
    if (mode == Mode::train) {
      double s = 0, s2 = 0;
      for (std::size_t b = 0; b < B; ++b) {
        const T* p = x.data() + (b * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) s += p[i];
      }
      const double m = s / static_cast<double>(N);
      for (std::size_t b = 0; b < B; ++b) {
        const T* p = x.data() + (b * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) {
          const double d = p[i] - m;
          s2 += d * d;
        }
      }
      const double v = s2 / static_cast<double>(N);
      mu = static_cast<T>(m);
      var = static_cast<T>(v);
      const T unbiased = static_cast<T>(v * static_cast<double>(N) / static_cast<double>(N - 1));
      stats.mean[c] = (T(1) - stats.momentum) * stats.mean[c] + stats.momentum * mu;
      stats.var[c] = (T(1) - stats.momentum) * stats.var[c] + stats.momentum * unbiased;
    } else {
      mu = stats.mean[c];
      var = stats.var[c];
    }
    const T is = T(1) / std::sqrt(var + stats.eps);
    inv_std[c] = is;
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t off = (b * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        const T h = (x[off + i] - mu) * is;
        xhat[off + i] = h;
        out[off + i] = gm[c] * h + bt[c];
      }
    }
  }

  return make_result<T>(
      input.shape(), std::move(out), {&input, &gamma, &beta},
      [input, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), B, C, HW, N,
       mode](NodeT<T>& self) {
        const T* g = self.grad.data();
        T* gx = grad_buffer(input);
        T* gg = grad_buffer(gamma);
        T* gbt = grad_buffer(beta);
        auto gm = gamma.data();
        for (std::size_t c = 0; c < C; ++c) {
          double sg = 0, sgx = 0;
          for (std::size_t b = 0; b < B; ++b) {
            const std::size_t off = (b * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
              sg += g[off + i];
              sgx += static_cast<double>(g[off + i]) * xhat[off + i];
            }
          }
          if (gg) gg[c] += static_cast<T>(sgx);
          if (gbt) gbt[c] += static_cast<T>(sg);
          if (!gx) continue;
          const T k = gm[c] * inv_std[c];
          if (mode == Mode::train) {
            const T mg = static_cast<T>(sg / static_cast<double>(N));
            const T mgx = static_cast<T>(sgx / static_cast<double>(N));
            for (std::size_t b = 0; b < B; ++b) {
              const std::size_t off = (b * C + c) * HW;
              for (std::size_t i = 0; i < HW; ++i) gx[off + i] += k * (g[off + i] - mg - xhat[off + i] * mgx);
            }
          } else {
            for (std::size_t b = 0; b < B; ++b) {
              const std::size_t off = (b * C + c) * HW;
              for (std::size_t i = 0; i < HW; ++i) gx[off + i] += k * g[off + i];
            }
          }
        }
      });
}

template <class T>
BasicTensor<T> channel_standardize(const BasicTensor<T>& input, std::span<const T> shift, std::span<const T> scale) {
  require_rank(input.shape(), 4, "channel_standardize", "input");
  const std::size_t B = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  if (shift.size() != C || scale.size() != C) {
    throw UsageError("channel_standardize: expected " + std::to_string(C) + " channel statistics");
  }
  std::vector<T> inv(C);
  for (std::size_t c = 0; c < C; ++c) inv[c] = T(1) / scale[c];
  std::vector<T> out(input.numel());
  auto x = input.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i) {
        const std::size_t k = (b * C + c) * HW + i;
        out[k] = (x[k] - shift[c]) * inv[c];
      }
  return make_result<T>(input.shape(), std::move(out), {&input}, [input, inv, B, C, HW](NodeT<T>& self) {
    T* gx = grad_buffer(input);
    if (!gx) return;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < HW; ++i) {
          const std::size_t k = (b * C + c) * HW + i;
          gx[k] += self.grad[k] * inv[c];
        }
  });
}

template <class T>
BasicTensor<T> gelu(const BasicTensor<T>& a) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  auto x = a.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * T(0.5) * (T(1) + std::erf(x[i] * inv_sqrt2));
  return make_result<T>(a.shape(), std::move(out), {&a}, [a](NodeT<T>& self) {
    constexpr T inv_sqrt2 = T(0.70710678118654752440);
    constexpr T inv_sqrt_2pi = T(0.39894228040143267794);
    T* ga = grad_buffer(a);
    if (!ga) return;
    auto x = a.data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const T cdf = T(0.5) * (T(1) + std::erf(x[i] * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x[i] * x[i]);
      ga[i] += self.grad[i] * (cdf + x[i] * pdf);
    }
  });
}

template <class T>
BasicTensor<T> sigmoid(const BasicTensor<T>& a) {
  auto x = a.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] >= 0) {
      out[i] = T(1) / (T(1) + std::exp(-x[i]));
    } else {
      const T e = std::exp(x[i]);
      out[i] = e / (T(1) + e);
    }
  }
  auto y = std::make_shared<std::vector<T>>(out);
  return make_result<T>(a.shape(), std::move(out), {&a}, [a, y](NodeT<T>& self) {
    T* ga = grad_buffer(a);
    if (!ga) return;
    for (std::size_t i = 0; i < y->size(); ++i) ga[i] += self.grad[i] * (*y)[i] * (T(1) - (*y)[i]);
  });
}

// ---------------------------------------------------------------------------
// Sequence-model operators

template <class T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
  require_rank(weight.shape(), 2, "linear", "weight");
  const std::size_t out_dim = weight.dim(0), in_dim = weight.dim(1);
  if (x.rank() == 0 || x.shape().back() != in_dim) {
    throw UsageError("linear: input " + shape_str(x.shape()) + " last dim != weight in-features " +
                     std::to_string(in_dim));
  }
  if (bias.defined() && bias.numel() != out_dim) {
    throw UsageError("linear: bias length " + std::to_string(bias.numel()) + " != out-features " +
                     std::to_string(out_dim));
  }
  const std::size_t N = x.numel() / in_dim;
  Shape shape = x.shape();
  shape.back() = out_dim;
  std::vector<T> out(N * out_dim);
  auto xd = x.data();
  auto wd = weight.data();
  for (std::size_t n = 0; n < N; ++n) {
    const T* xr = xd.data() + n * in_dim;
    T* yr = out.data() + n * out_dim;
    for (std::size_t o = 0; o < out_dim; ++o) {
      yr[o] = dot(xr, wd.data() + o * in_dim, in_dim) + (bias.defined() ? bias.data()[o] : T(0));
    }
  }
  return make_result<T>(std::move(shape), std::move(out), {&x, &weight, &bias},
                        [x, weight, bias, N, in_dim, out_dim](NodeT<T>& self) {
                          const T* g = self.grad.data();
                          T* gx = grad_buffer(x);
                          T* gw = grad_buffer(weight);
                          T* gb = grad_buffer(bias);
                          auto xd = x.data();
                          auto wd = weight.data();
                          for (std::size_t n = 0; n < N; ++n) {
                            const T* gr = g + n * out_dim;
                            const T* xr = xd.data() + n * in_dim;
                            for (std::size_t o = 0; o < out_dim; ++o) {
                              const T go = gr[o];
                              if (gb) gb[o] += go;
                              if (gw) axpy(go, xr, gw + o * in_dim, in_dim);
                              if (gx) axpy(go, wd.data() + o * in_dim, gx + n * in_dim, in_dim);
                            }
                          }
                        });
}

template <class T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta, T eps) {
  if (x.rank() == 0) throw UsageError("layer_norm: scalar input");
  const std::size_t D = x.shape().back();
  if (gamma.numel() != D || beta.numel() != D) {
    throw UsageError("layer_norm: parameters do not match feature size " + std::to_string(D));
  }
  const std::size_t N = x.numel() / D;
  auto xd = x.data();
  auto gm = gamma.data();
  auto bt = beta.data();
  std::vector<T> xhat(x.numel()), rstd(N), out(x.numel());
  for (std::size_t n = 0; n < N; ++n) {
    const T* r = xd.data() + n * D;
    T m = 0;
    for (std::size_t i = 0; i < D; ++i) m += r[i];
    m /= static_cast<T>(D);
    T v = 0;
    for (std::size_t i = 0; i < D; ++i) v += (r[i] - m) * (r[i] - m);
    v /= static_cast<T>(D);
    const T is = T(1) / std::sqrt(v + eps);
    rstd[n] = is;
    for (std::size_t i = 0; i < D; ++i) {
      const T h = (r[i] - m) * is;
      xhat[n * D + i] = h;
      out[n * D + i] = gm[i] * h + bt[i];
    }
  }
  return make_result<T>(x.shape(), std::move(out), {&x, &gamma, &beta},
                        [x, gamma, beta, xhat = std::move(xhat), rstd = std::move(rstd), N, D](NodeT<T>& self) {
                          const T* g = self.grad.data();
                          T* gx = grad_buffer(x);
                          T* gg = grad_buffer(gamma);
                          T* gb = grad_buffer(beta);
                          auto gm = gamma.data();
                          std::vector<T> dh(D);
                          for (std::size_t n = 0; n < N; ++n) {
                            const T* gr = g + n * D;
                            const T* hr = xhat.data() + n * D;
                            T s1 = 0, s2 = 0;
                            for (std::size_t i = 0; i < D; ++i) {
                              if (gg) gg[i] += gr[i] * hr[i];
                              if (gb) gb[i] += gr[i];
                              dh[i] = gr[i] * gm[i];
                              s1 += dh[i];
                              s2 += dh[i] * hr[i];
                            }
                            if (!gx) continue;
                            s1 /= static_cast<T>(D);
                            s2 /= static_cast<T>(D);
                            for (std::size_t i = 0; i < D; ++i) gx[n * D + i] += rstd[n] * (dh[i] - s1 - hr[i] * s2);
                          }
                        });
}

template <class T>
void softmax_inplace(std::span<T> row) {
  if (row.empty()) return;
  const T mx = *std::max_element(row.begin(), row.end());
  T s = 0;
  for (auto& v : row) {
    v = std::exp(v - mx);
    s += v;
  }
  for (auto& v : row) v /= s;
}

namespace {

template <class T>
void check_attention_inputs(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>* v,
                            std::size_t heads) {
  require_rank(q.shape(), 3, "attention", "queries");
  require_same_shape(q.shape(), k.shape(), "attention");
  if (v) require_same_shape(q.shape(), v->shape(), "attention");
  if (heads == 0 || q.dim(2) % heads != 0) {
    throw UsageError("attention: model width " + std::to_string(q.dim(2)) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
}

// probs: B × heads × T × T.
template <class T>
std::vector<T> attention_probs(const BasicTensor<T>& q, const BasicTensor<T>& k, std::size_t heads, bool causal) {
  const std::size_t B = q.dim(0), L = q.dim(1), D = q.dim(2), dh = D / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  auto qd = q.data();
  auto kd = k.data();
  std::vector<T> probs(B * heads * L * L, T(0));
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < L; ++t) {
        T* p = probs.data() + ((b * heads + h) * L + t) * L;
        const std::size_t visible = causal ? t + 1 : L;
        const T* qr = qd.data() + (b * L + t) * D + h * dh;
        for (std::size_t s = 0; s < visible; ++s) p[s] = dot(qr, kd.data() + (b * L + s) * D + h * dh, dh) * scale;
        softmax_inplace(std::span<T>(p, visible));
      }
  return probs;
}

}  // namespace

template <class T>
std::vector<T> attention_weights(const BasicTensor<T>& q, const BasicTensor<T>& k, std::size_t heads, bool causal) {
  check_attention_inputs(q, k, static_cast<const BasicTensor<T>*>(nullptr), heads);
  return attention_probs(q, k, heads, causal);
}

template <class T>
BasicTensor<T> attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v, std::size_t heads,
                         bool causal) {
  check_attention_inputs(q, k, &v, heads);
  const std::size_t B = q.dim(0), L = q.dim(1), D = q.dim(2), dh = D / heads;
  auto probs = std::make_shared<std::vector<T>>(attention_probs(q, k, heads, causal));
  auto vd = v.data();
  std::vector<T> out(q.numel(), T(0));
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < L; ++t) {
        const T* p = probs->data() + ((b * heads + h) * L + t) * L;
        T* o = out.data() + (b * L + t) * D + h * dh;
        const std::size_t visible = causal ? t + 1 : L;
        for (std::size_t s = 0; s < visible; ++s) axpy(p[s], vd.data() + (b * L + s) * D + h * dh, o, dh);
      }
  return make_result<T>(
      q.shape(), std::move(out), {&q, &k, &v}, [q, k, v, probs, heads, causal, B, L, D, dh](NodeT<T>& self) {
        const T scale = T(1) / std::sqrt(static_cast<T>(dh));
        const T* g = self.grad.data();
        T* gq = grad_buffer(q);
        T* gk = grad_buffer(k);
        T* gv = grad_buffer(v);
        auto qd = q.data();
        auto kd = k.data();
        auto vd = v.data();
        std::vector<T> dp(L);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t t = 0; t < L; ++t) {
              const T* p = probs->data() + ((b * heads + h) * L + t) * L;
              const T* go = g + (b * L + t) * D + h * dh;
              const std::size_t visible = causal ? t + 1 : L;
              T pdp = 0;
              for (std::size_t s = 0; s < visible; ++s) {
                dp[s] = dot(go, vd.data() + (b * L + s) * D + h * dh, dh);
                pdp += p[s] * dp[s];
                if (gv) axpy(p[s], go, gv + (b * L + s) * D + h * dh, dh);
              }
              const T* qr = qd.data() + (b * L + t) * D + h * dh;
              for (std::size_t s = 0; s < visible; ++s) {
                const T ds = p[s] * (dp[s] - pdp) * scale;
                if (gq) axpy(ds, kd.data() + (b * L + s) * D + h * dh, gq + (b * L + t) * D + h * dh, dh);
                if (gk) axpy(ds, qr, gk + (b * L + s) * D + h * dh, dh);
              }
            }
      });
}

template <class T>
BasicTensor<T> gather_rows(const BasicTensor<T>& table, std::span<const std::int32_t> indices) {
  require_rank(table.shape(), 2, "gather_rows", "table");
  const std::size_t V = table.dim(0), D = table.dim(1);
  std::vector<T> out(indices.size() * D);
  auto td = table.data();
  for (std::size_t n = 0; n < indices.size(); ++n) {
    const auto idx = indices[n];
    if (idx < 0 || static_cast<std::size_t>(idx) >= V) {
      throw UsageError("gather_rows: index " + std::to_string(idx) + " outside [0, " + std::to_string(V) + ")");
    }
    std::copy_n(td.data() + static_cast<std::size_t>(idx) * D, D, out.data() + n * D);
  }
  std::vector<std::int32_t> idx(indices.begin(), indices.end());
  return make_result<T>(Shape{indices.size(), D}, std::move(out), {&table},
                        [table, idx = std::move(idx), D](NodeT<T>& self) {
                          T* gt = grad_buffer(table);
                          if (!gt) return;
                          for (std::size_t n = 0; n < idx.size(); ++n) {
                            axpy(T(1), self.grad.data() + n * D, gt + static_cast<std::size_t>(idx[n]) * D, D);
                          }
                        });
}

template <class T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const std::int32_t> targets) {
  require_rank(logits.shape(), 2, "softmax_cross_entropy", "logits");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  if (targets.size() != N) {
    throw UsageError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(N) + " rows");
  }
  for (auto t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= K) {
      throw UsageError("softmax_cross_entropy: target " + std::to_string(t) + " outside [0, " + std::to_string(K) +
                       ")");
    }
  }
  auto ld = logits.data();
  auto probs = std::make_shared<std::vector<T>>(N * K);
  double total = 0;
  for (std::size_t n = 0; n < N; ++n) {
    const T* r = ld.data() + n * K;
    const double mx = *std::max_element(r, r + K);
    double s = 0;
    for (std::size_t j = 0; j < K; ++j) s += std::exp(static_cast<double>(r[j]) - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < K; ++j) (*probs)[n * K + j] = static_cast<T>(std::exp(static_cast<double>(r[j]) - lse));
    total += lse - static_cast<double>(r[targets[n]]);
  }
  std::vector<std::int32_t> tg(targets.begin(), targets.end());
  return make_result<T>(Shape{}, {static_cast<T>(total / static_cast<double>(N))}, {&logits},
                        [logits, probs, tg = std::move(tg), N, K](NodeT<T>& self) {
                          T* gl = grad_buffer(logits);
                          if (!gl) return;
                          const T g = self.grad[0] / static_cast<T>(N);
                          for (std::size_t n = 0; n < N; ++n) {
                            for (std::size_t j = 0; j < K; ++j) gl[n * K + j] += g * (*probs)[n * K + j];
                            gl[n * K + static_cast<std::size_t>(tg[n])] -= g;
                          }
                        });
}

// ---------------------------------------------------------------------------
// Layout helpers

template <class T>
BasicTensor<T> channels_last(const BasicTensor<T>& x) {
  require_rank(x.shape(), 4, "channels_last", "input");
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  auto xd = x.data();
  std::vector<T> out(x.numel());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i) out[(b * HW + i) * C + c] = xd[(b * C + c) * HW + i];
  return make_result<T>(Shape{B * HW, C}, std::move(out), {&x}, [x, B, C, HW](NodeT<T>& self) {
    T* gx = grad_buffer(x);
    if (!gx) return;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < HW; ++i) gx[(b * C + c) * HW + i] += self.grad[(b * HW + i) * C + c];
  });
}

template <class T>
BasicTensor<T> channels_first(const BasicTensor<T>& x, std::size_t batch, std::size_t height, std::size_t width) {
  require_rank(x.shape(), 2, "channels_first", "input");
  const std::size_t HW = height * width, C = x.dim(1);
  if (x.dim(0) != batch * HW) {
    throw UsageError("channels_first: " + std::to_string(x.dim(0)) + " rows do not match " + std::to_string(batch) +
                     "x" + std::to_string(height) + "x" + std::to_string(width));
  }
  auto xd = x.data();
  std::vector<T> out(x.numel());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i) out[(b * C + c) * HW + i] = xd[(b * HW + i) * C + c];
  return make_result<T>(Shape{batch, C, height, width}, std::move(out), {&x}, [x, batch, C, HW](NodeT<T>& self) {
    T* gx = grad_buffer(x);
    if (!gx) return;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < HW; ++i) gx[(b * HW + i) * C + c] += self.grad[(b * C + c) * HW + i];
  });
}

template <class T>
BasicTensor<T> straight_through(const BasicTensor<T>& z, const BasicTensor<T>& quantized) {
  require_same_shape(z.shape(), quantized.shape(), "straight_through");
  std::vector<T> out(quantized.data().begin(), quantized.data().end());
  return make_result<T>(z.shape(), std::move(out), {&z}, [z](NodeT<T>& self) {
    if (T* gz = grad_buffer(z)) axpy(T(1), self.grad.data(), gz, self.grad.size());
  });
}

// ---------------------------------------------------------------------------

#define PBAD_INSTANTIATE_OPS(T)                                                                                     \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                                        \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                                        \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                                        \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                                          \
  template BasicTensor<T> add_tiled(const BasicTensor<T>&, const BasicTensor<T>&);                                  \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                                               \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                                              \
  template BasicTensor<T> sse(const BasicTensor<T>&, const BasicTensor<T>&);                                        \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                                    \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, Stride2);     \
  template BasicTensor<T> conv2d_transpose(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,     \
                                           Stride2);                                                                \
  template BasicTensor<T> batch_norm(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,           \
                                     RunningStats<T>&, Mode);                                                       \
  template BasicTensor<T> channel_standardize(const BasicTensor<T>&, std::span<const T>, std::span<const T>);       \
  template BasicTensor<T> gelu(const BasicTensor<T>&);                                                              \
  template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                                           \
  template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);              \
  template BasicTensor<T> layer_norm(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, T);       \
  template BasicTensor<T> attention(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,            \
                                    std::size_t, bool);                                                             \
  template BasicTensor<T> gather_rows(const BasicTensor<T>&, std::span<const std::int32_t>);                        \
  template BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>&, std::span<const std::int32_t>);              \
  template BasicTensor<T> channels_last(const BasicTensor<T>&);                                                     \
  template BasicTensor<T> channels_first(const BasicTensor<T>&, std::size_t, std::size_t, std::size_t);             \
  template BasicTensor<T> straight_through(const BasicTensor<T>&, const BasicTensor<T>&);                           \
  template std::vector<T> attention_weights(const BasicTensor<T>&, const BasicTensor<T>&, std::size_t, bool);       \
  template void softmax_inplace(std::span<T>);

PBAD_INSTANTIATE_OPS(float)
PBAD_INSTANTIATE_OPS(double)

}  // namespace pbad
