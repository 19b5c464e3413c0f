#include "gradsuite.hpp"

#include <functional>
#include <span>

#include "pbad/gradcheck.hpp"
#include "pbad/ops.hpp"
#include "pbad/prior.hpp"
#include "pbad/rng.hpp"

namespace gradsuite {

using namespace pbad;

namespace {

Tensor64 rand_t(Shape shape, Rng& rng, bool grad = true, double lo = -1, double hi = 1) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor64::from_data(std::move(shape), std::move(v), grad);
}

}  // namespace

std::vector<OperatorResult> run(std::uint64_t seed) {
  const std::vector<std::int32_t> rows{2, 0, 2, 1};
  const std::vector<std::int32_t> targets{1, 4, 0};
  std::vector<OperatorResult> out;
  Rng rng(1000 + seed);
  auto a = rand_t({2, 3, 4, 4}, rng), b = rand_t({2, 3, 4, 4}, rng);
  const std::uint64_t wseed = 5000 + seed;
  auto check = [&](const char* name, const std::function<Tensor64()>& f, std::vector<Tensor64> params) {
    out.push_back({name, grad_check(f, std::move(params)).max_relative_error});
  };
  // Random weighted sum, so every output element carries a distinct weight.
  auto weighted = [wseed](const Tensor64& t) {
    Rng r(wseed);
    return sum(mul(t, rand_t(t.shape(), r, false)));
  };
  check("add", [&] { return weighted(add(a, b)); }, {a, b});
  check("sub", [&] { return weighted(sub(a, b)); }, {a, b});
  check("mul", [&] { return weighted(mul(a, b)); }, {a, b});
  check("scale", [&] { return weighted(scale(a, -1.7)); }, {a});
  auto tile = rand_t({4, 4}, rng);
  check("add_tiled", [&] { return weighted(add_tiled(a, tile)); }, {a, tile});
  check("mean", [&] { return mean(mul(a, a)); }, {a});
  check("sse", [&] { return sse(a, b); }, {a, b});
  check("reshape", [&] { return weighted(reshape(a, {6, 16})); }, {a});
  auto w = rand_t({2, 3, 3, 3}, rng), bias = rand_t({2}, rng);
  check("conv2d", [&] { return weighted(conv2d(a, w, bias, {1, 1})); }, {a, w, bias});
  auto wt = rand_t({3, 2, 2, 2}, rng), bt = rand_t({2}, rng);
  check("conv2d_transpose", [&] { return weighted(conv2d_transpose(a, wt, bt, {2, 2})); }, {a, wt, bt});
  auto gamma = rand_t({3}, rng, true, 0.5, 1.5), beta = rand_t({3}, rng);
  check("batch_norm train",
        [&] {
          RunningStats<double> st(3);
          return weighted(batch_norm(a, gamma, beta, st, Mode::train));
        },
        {a, gamma, beta});
  check("batch_norm infer",
        [&] {
          RunningStats<double> st(3);
          st.mean = {0.1, -0.2, 0.3};
          st.var = {0.5, 1.5, 2.0};
          return weighted(batch_norm(a, gamma, beta, st, Mode::infer));
        },
        {a, gamma, beta});
  const std::vector<double> shift{0.1, 0.2, 0.3}, spread{0.5, 2.0, 1.5};
  check("channel_standardize", [&] { return weighted(channel_standardize(a, std::span(shift), std::span(spread))); },
        {a});
  check("gelu", [&] { return weighted(gelu(a)); }, {a});
  check("sigmoid", [&] { return weighted(sigmoid(a)); }, {a});
  auto x = rand_t({2, 5, 8}, rng), lw = rand_t({6, 8}, rng), lb = rand_t({6}, rng);
  check("linear", [&] { return weighted(linear(x, lw, lb)); }, {x, lw, lb});
  auto lg = rand_t({8}, rng, true, 0.5, 1.5), lbeta = rand_t({8}, rng);
  check("layer_norm", [&] { return weighted(layer_norm(x, lg, lbeta)); }, {x, lg, lbeta});
  auto q = rand_t({2, 5, 8}, rng), k = rand_t({2, 5, 8}, rng), v = rand_t({2, 5, 8}, rng);
  check("attention", [&] { return weighted(attention(q, k, v, 2, true)); }, {q, k, v});
  auto table = rand_t({3, 5}, rng);
  check("gather_rows", [&] { return weighted(gather_rows(table, std::span<const std::int32_t>(rows))); }, {table});
  auto logits = rand_t({3, 6}, rng, true, -2, 2);
  check("softmax_cross_entropy",
        [&] { return softmax_cross_entropy(logits, std::span<const std::int32_t>(targets)); }, {logits});
  check("channels_last", [&] { return weighted(channels_last(a)); }, {a});
  auto rowsb = rand_t({32, 3}, rng);
  check("channels_first", [&] { return weighted(channels_first(rowsb, 2, 4, 4)); }, {rowsb});
  Rng brng(2000 + seed);
  auto block = init_block<double>(8, 12, brng);
  check("attention_block",
        [&] { return weighted(attention_block(x, block, 2)); },
        {x, block.ln1_gamma, block.wq, block.bk, block.wv, block.wo, block.ln2_beta, block.w1, block.b2});
  return out;
}

}  // namespace gradsuite
