#include <doctest.h>

#include <cmath>
#include <numeric>

#include "gradsuite.hpp"
#include "oracles.hpp"
#include "pbad/error.hpp"
#include "pbad/gradcheck.hpp"
#include "pbad/ops.hpp"
#include "pbad/optim.hpp"
#include "pbad/prior.hpp"
#include "pbad/rng.hpp"
#include "pbad/tensor.hpp"

using namespace pbad;

namespace {

template <class T = double>
BasicTensor<T> rand_t(Shape shape, Rng& rng, bool grad = true, double lo = -1, double hi = 1) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return BasicTensor<T>::from_data(std::move(shape), std::move(v), grad);
}

template <class T>
std::vector<double> as_double(const BasicTensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

constexpr double kGradTol = 1e-4;

}  // namespace

TEST_SUITE("rng") {
  TEST_CASE("identical seed and stream give identical draws") {
    Rng a(42, 7), b(42, 7), c(42, 8);
    bool differs = false;
    for (int i = 0; i < 100; ++i) {
      const auto x = a.next_u64();
      CHECK(x == b.next_u64());
      differs = differs || x != c.next_u64();
    }
    CHECK(differs);
  }

  TEST_CASE("uniform and below stay in range") {
    Rng r(1);
    for (int i = 0; i < 10000; ++i) {
      const double u = r.uniform();
      CHECK((u >= 0 && u < 1));
      CHECK(r.below(7) < 7);
    }
  }
}

TEST_SUITE("conv2d") {
  TEST_CASE("constant field") {
    const auto x = Tensor::full({1, 1, 3, 3}, 1.0f);
    const auto w = Tensor::full({1, 1, 2, 2}, 1.0f);
    const auto y = conv2d(x, w, Tensor::zeros({1}), {1, 1});
    CHECK(y.shape() == Shape{1, 1, 2, 2});
    for (float v : y.data()) CHECK(v == 4.0f);
  }

  TEST_CASE("encoder spatial chain 63 -> 59 -> 57 -> 19 -> 17") {
    const std::size_t kernels[] = {5, 3, 3, 3}, strides[] = {1, 1, 3, 1}, expect[] = {59, 57, 19, 17};
    auto x = Tensor::zeros({1, 1, 63, 63});
    for (int i = 0; i < 4; ++i) {
      x = conv2d(x, Tensor::zeros({1, 1, kernels[i], kernels[i]}), Tensor::zeros({1}), {strides[i], strides[i]});
      CHECK(x.dim(2) == expect[i]);
      CHECK(x.dim(3) == expect[i]);
    }
  }

  TEST_CASE("matches the six-loop oracle") {
    Rng rng(3);
    const auto x = rand_t<float>({2, 3, 8, 8}, rng, false);
    const auto w = rand_t<float>({4, 3, 3, 3}, rng, false);
    const auto b = rand_t<float>({4}, rng, false);
    for (std::size_t s : {1, 2}) {
      const auto y = conv2d(x, w, b, {s, s});
      const auto ref = oracle::naive_conv2d(as_double(x), 2, 3, 8, 8, as_double(w), 4, 3, 3, as_double(b), s, s);
      REQUIRE(y.numel() == ref.size());
      CHECK(max_abs_diff(as_double(y), ref) <= 1e-5);
    }
  }

  TEST_CASE("shape mismatch names the dimension") {
    const auto x = Tensor::zeros({1, 2, 5, 5});
    try {
      conv2d(x, Tensor::zeros({1, 3, 3, 3}), Tensor::zeros({1}), {1, 1});
      FAIL("expected a shape error");
    } catch (const UsageError& e) {
      CHECK(std::string(e.what()).find("channels (dim 1)") != std::string::npos);
    }
    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 3, 3}), Tensor::zeros({1}), {1, 1}),
                    UsageError);
  }
}

TEST_SUITE("conv2d_transpose") {
  TEST_CASE("decoder spatial chain 17 -> 19 -> 57 -> 59 -> 63") {
    const std::size_t kernels[] = {3, 3, 3, 5}, strides[] = {1, 3, 1, 1}, expect[] = {19, 57, 59, 63};
    auto x = Tensor::zeros({1, 1, 17, 17});
    for (int i = 0; i < 4; ++i) {
      x = conv2d_transpose(x, Tensor::zeros({1, 1, kernels[i], kernels[i]}), Tensor::zeros({1}),
                           {strides[i], strides[i]});
      CHECK(x.dim(2) == expect[i]);
      CHECK(conv_transpose_output_size(i == 0 ? 17 : expect[i - 1], kernels[i], strides[i]) == expect[i]);
    }
  }

  TEST_CASE("single value spreads over the kernel") {
    const auto y = conv2d_transpose(Tensor::full({1, 1, 1, 1}, 2.5f), Tensor::full({1, 1, 2, 2}, 1.0f),
                                    Tensor::zeros({1}), {1, 1});
    CHECK(y.shape() == Shape{1, 1, 2, 2});
    for (float v : y.data()) CHECK(v == 2.5f);
  }

  TEST_CASE("adjoint of conv2d") {
    Rng rng(11);
    for (std::size_t s : {1, 2}) {
      const auto a = rand_t<float>({1, 2, 5, 5}, rng, false);
      const auto w = rand_t<float>({3, 2, 3, 3}, rng, false);
      const auto ya = conv2d(a, w, Tensor::zeros({3}), {s, s});
      const auto b = rand_t<float>(ya.shape(), rng, false);
      const auto tb = conv2d_transpose(b, w, Tensor::zeros({2}), {s, s});
      REQUIRE(tb.shape() == a.shape());
      double lhs = 0, rhs = 0;
      for (std::size_t i = 0; i < ya.numel(); ++i) lhs += double(ya.data()[i]) * b.data()[i];
      for (std::size_t i = 0; i < a.numel(); ++i) rhs += double(a.data()[i]) * tb.data()[i];
      CHECK(std::abs(lhs - rhs) <= 1e-5);
    }
  }
}

TEST_SUITE("batch_norm") {
  TEST_CASE("constant channel normalizes to zero") {
    RunningStats<float> stats(1);
    const auto y = batch_norm(Tensor::full({2, 1, 3, 3}, 0.7f), Tensor::full({1}, 1.0f), Tensor::zeros({1}), stats,
                              Mode::train);
    for (float v : y.data()) CHECK(v == 0.0f);
  }

  TEST_CASE("standardized input passes through") {
    Rng rng(5);
    std::vector<double> v(2 * 8 * 8);
    for (auto& x : v) x = rng.normal();
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
    double var = 0;
    for (double x : v) var += (x - m) * (x - m);
    var /= v.size();
    for (auto& x : v) x = (x - m) / std::sqrt(var);
    const auto x = Tensor64::from_data({2, 1, 8, 8}, v);
    RunningStats<double> stats(1);
    const auto y = batch_norm(x, Tensor64::full({1}, 1.0), Tensor64::zeros({1}), stats, Mode::train);
    CHECK(max_abs_diff(as_double(y), v) <= 1e-3);
  }

  TEST_CASE("infer mode uses running statistics") {
    RunningStats<double> stats(1);
    stats.mean = {2.0};
    stats.var = {4.0};
    const auto y = batch_norm(Tensor64::full({1, 1, 1, 1}, 4.0), Tensor64::full({1}, 1.0), Tensor64::zeros({1}),
                              stats, Mode::infer);
    CHECK(y.item() == doctest::Approx(2.0 / std::sqrt(4.0 + 1e-5)).epsilon(1e-12));
    CHECK(y.item() == doctest::Approx(1.0).epsilon(1e-5));
  }

  TEST_CASE("train mode moves running mean by the momentum") {
    RunningStats<double> stats(1);
    batch_norm(Tensor64::full({1, 1, 2, 2}, 3.0), Tensor64::full({1}, 1.0), Tensor64::zeros({1}), stats, Mode::train);
    CHECK(stats.mean[0] == doctest::Approx(0.3).epsilon(1e-12));
  }
}

TEST_SUITE("gelu") {
  TEST_CASE("reference values") {
    const auto y = gelu(Tensor64::from_data({3}, {0.0, 10.0, 1.0}));
    CHECK(y.data()[0] == 0.0);
    CHECK(std::abs(y.data()[1] - 10.0) <= 1e-6);
    CHECK(std::abs(y.data()[2] - 0.841345) <= 1e-5);
  }
}

TEST_SUITE("attention_block") {
  TEST_CASE("outputs up to t ignore permutations of later positions") {
    Rng rng(21);
    const std::size_t B = 1, T = 6, D = 8;
    const auto block = init_block<double>(D, 16, rng);
    const auto x = rand_t({B, T, D}, rng, false);
    auto permuted = as_double(x);
    // swap positions 4 and 5, keep 0..3
    for (std::size_t d = 0; d < D; ++d) std::swap(permuted[4 * D + d], permuted[5 * D + d]);
    const auto y1 = attention_block(x, block, 2);
    const auto y2 = attention_block(Tensor64::from_data({B, T, D}, permuted), block, 2);
    for (std::size_t i = 0; i < 4 * D; ++i) CHECK(y1.data()[i] == y2.data()[i]);
  }

  TEST_CASE("single position attends to itself") {
    Rng rng(22);
    const auto q = rand_t({2, 1, 8}, rng, false), k = rand_t({2, 1, 8}, rng, false), v = rand_t({2, 1, 8}, rng, false);
    const auto y = attention(q, k, v, 4, true);
    for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == doctest::Approx(v.data()[i]).epsilon(1e-14));
  }

  TEST_CASE("attention rows are distributions") {
    Rng rng(23);
    const auto q = rand_t({2, 5, 8}, rng, false), k = rand_t({2, 5, 8}, rng, false);
    const auto w = attention_weights(q, k, 2, true);
    for (std::size_t row = 0; row < 2 * 2 * 5; ++row) {
      double s = 0;
      for (std::size_t j = 0; j < 5; ++j) {
        s += w[row * 5 + j];
        if (j > row % 5) CHECK(w[row * 5 + j] == 0.0);
      }
      CHECK(std::abs(s - 1.0) <= 1e-6);
    }
  }

  TEST_CASE("width must divide into heads") {
    Rng rng(24);
    const auto q = rand_t({1, 2, 6}, rng, false);
    CHECK_THROWS_AS(attention(q, q, q, 4, true), UsageError);
  }
}

TEST_SUITE("softmax_cross_entropy") {
  TEST_CASE("uniform logits give ln K") {
    const std::vector<std::int32_t> target{17};
    const auto l = softmax_cross_entropy(Tensor64::zeros({1, 1024}), std::span<const std::int32_t>(target));
    CHECK(l.item() == doctest::Approx(std::log(1024.0)).epsilon(1e-12));
    CHECK(std::abs(l.item() - 6.9315) < 1e-4);
  }

  TEST_CASE("confident correct logit gives zero loss") {
    std::vector<double> v(10, 0.0);
    v[3] = 50;
    const std::vector<std::int32_t> target{3};
    const auto l = softmax_cross_entropy(Tensor64::from_data({1, 10}, v), std::span<const std::int32_t>(target));
    CHECK(l.item() < 1e-18);
    CHECK(l.item() >= 0);
  }

  TEST_CASE("matches a long-double log-sum-exp oracle") {
    Rng rng(31);
    const auto logits = rand_t({4, 7}, rng, true, -3, 3);
    const std::vector<std::int32_t> targets{0, 6, 3, 3};
    const auto l = softmax_cross_entropy(logits, std::span<const std::int32_t>(targets));
    long double ref = 0;
    for (std::size_t i = 0; i < 4; ++i) {
      const auto row = logits.data().subspan(i * 7, 7);
      ref += oracle::logsumexp(row) - row[targets[i]];
    }
    CHECK(std::abs(l.item() - static_cast<double>(ref / 4)) <= 1e-6);
    l.backward();
    for (std::size_t i = 0; i < 4; ++i) {
      const auto row = logits.data().subspan(i * 7, 7);
      const long double lse = oracle::logsumexp(row);
      for (std::size_t k = 0; k < 7; ++k) {
        const double p = static_cast<double>(std::exp(row[k] - lse));
        CHECK(logits.grad()[i * 7 + k] == doctest::Approx((p - (int(k) == targets[i])) / 4).epsilon(1e-9));
      }
    }
  }

  TEST_CASE("out-of-range target is rejected") {
    const std::vector<std::int32_t> target{5};
    CHECK_THROWS_AS(softmax_cross_entropy(Tensor64::zeros({1, 5}), std::span<const std::int32_t>(target)), UsageError);
  }

  TEST_CASE("softmax rows sum to one and loss is non-negative") {
    Rng rng(32);
    for (int trial = 0; trial < 20; ++trial) {
      auto row = oracle::random_vector(13, rng, -20, 20);
      std::vector<std::int32_t> t{static_cast<std::int32_t>(rng.below(13))};
      const auto l = softmax_cross_entropy(Tensor64::from_data({1, 13}, row), std::span<const std::int32_t>(t));
      CHECK(l.item() >= 0);
      softmax_inplace(std::span<double>(row));
      CHECK(std::abs(std::accumulate(row.begin(), row.end(), 0.0) - 1.0) <= 1e-6);
    }
  }
}

TEST_SUITE("backward") {
  TEST_CASE("sum gives ones and accumulates across calls") {
    auto x = Tensor64::from_data({3}, {1, -2, 5}, true);
    const auto l = sum(x);
    l.backward();
    for (double g : x.grad()) CHECK(g == 1.0);
    l.backward();
    for (double g : x.grad()) CHECK(g == 2.0);
  }

  TEST_CASE("squared norm gives 2x") {
    auto x = Tensor64::from_data({4}, {1, -2, 0.5, 3}, true);
    sse(x, Tensor64::zeros({4})).backward();
    for (std::size_t i = 0; i < 4; ++i) CHECK(x.grad()[i] == 2 * x.data()[i]);
  }

  TEST_CASE("parameters off the graph receive no gradient") {
    auto x = Tensor64::from_data({2}, {1, 2}, true);
    auto unused = Tensor64::from_data({2}, {3, 4}, true);
    sum(x).backward();
    for (double v : unused.mutable_grad()) CHECK(v == 0.0);
  }

  TEST_CASE("no-grad guard records no history") {
    auto x = Tensor64::from_data({2}, {1, 2}, true);
    NoGradGuard guard;
    const auto y = scale(x, 2.0);
    CHECK(!y.requires_grad());
  }
}

TEST_SUITE("adam") {
  TEST_CASE("zero gradient leaves parameters unchanged") {
    std::vector<Tensor64> p{Tensor64::from_data({3}, {1, 2, 3}, true)};
    p[0].mutable_grad();
    AdamState<double> st;
    adam_step(std::span<Tensor64>(p), st);
    CHECK(as_double(p[0]) == std::vector<double>{1, 2, 3});
    CHECK(st.step == 1);
  }

  TEST_CASE("zero gradient decays the moments") {
    std::vector<Tensor64> p{Tensor64::from_data({1}, {0.0}, true)};
    AdamState<double> st;
    p[0].mutable_grad()[0] = 1;
    adam_step(std::span<Tensor64>(p), st);
    const double m = st.first_moment[0][0], v = st.second_moment[0][0];
    p[0].zero_grad();
    adam_step(std::span<Tensor64>(p), st);
    CHECK(st.first_moment[0][0] == doctest::Approx(0.9 * m).epsilon(1e-15));
    CHECK(st.second_moment[0][0] == doctest::Approx(0.999 * v).epsilon(1e-15));
    CHECK(st.step == 2);
  }

  TEST_CASE("first step with unit gradient moves by lr") {
    std::vector<Tensor> p{Tensor::full({5}, 1.0f, true)};
    for (auto& g : p[0].mutable_grad()) g = 1;
    AdamState<float> st;
    adam_step(std::span<Tensor>(p), st);
    for (float v : p[0].data()) CHECK(1.0 - v == doctest::Approx(1e-3 / (1 + 1e-8)).epsilon(1e-4));
  }

  TEST_CASE("two steps match a hand-rolled float64 Adam") {
    Rng rng(41);
    const auto w0 = oracle::random_vector(6, rng), g = oracle::random_vector(6, rng);
    std::vector<Tensor64> p{Tensor64::from_data({6}, w0, true)};
    AdamState<double> st;
    st.options.lr = 0.01;
    std::vector<double> w = w0, m(6, 0), v(6, 0);
    for (int t = 1; t <= 2; ++t) {
      p[0].zero_grad();
      std::copy(g.begin(), g.end(), p[0].mutable_grad().begin());
      adam_step(std::span<Tensor64>(p), st);
      for (std::size_t i = 0; i < 6; ++i) {
        m[i] = 0.9 * m[i] + 0.1 * g[i];
        v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
        const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
        w[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
      }
    }
    CHECK(max_abs_diff(as_double(p[0]), w) <= 1e-9);
  }
}

TEST_SUITE("grad_check") {
  TEST_CASE("linear map is exact") {
    Rng rng(51);
    const auto x = rand_t({3, 4}, rng, false);
    auto w = rand_t({2, 4}, rng), b = rand_t({2}, rng);
    const auto c = rand_t({3, 2}, rng, false);
    const auto r = grad_check([&] { return sum(mul(linear(x, w, b), c)); }, {w, b});
    CHECK(r.max_relative_error <= 1e-9);
  }

  TEST_CASE("gelu at random points") {
    for (std::uint64_t s = 0; s < 10; ++s) {
      Rng rng(60 + s);
      auto x = rand_t({12}, rng, true, -4, 4);
      const auto c = rand_t({12}, rng, false);
      CHECK(grad_check([&] { return sum(mul(gelu(x), c)); }, {x}).max_relative_error <= 1e-6);
    }
  }

  TEST_CASE("conv2d weight gradient") {
    Rng rng(70);
    const auto x = rand_t({2, 2, 6, 6}, rng, false);
    auto w = rand_t({3, 2, 3, 3}, rng), b = rand_t({3}, rng);
    const auto c = rand_t({2, 3, 2, 2}, rng, false);
    CHECK(grad_check([&] { return sum(mul(conv2d(x, w, b, {2, 2}), c)); }, {w, b}).max_relative_error <= 1e-4);
  }
}

// Every differentiable operator at 10 random points.
TEST_CASE("operator gradient suite") {
  for (std::uint64_t s = 0; s < 10; ++s)
    for (const auto& r : gradsuite::run(s)) {
      INFO(r.name << " seed " << s);
      CHECK(r.max_relative_error <= kGradTol);
    }
}
