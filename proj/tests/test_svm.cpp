#include <doctest.h>

#include <cmath>
#include <numeric>

#include "oracles.hpp"
#include "pbad/error.hpp"
#include "pbad/svm.hpp"

using namespace pbad;

namespace {

std::vector<float> gaussian_points(std::size_t n, std::size_t dim, Rng& rng) {
  std::vector<float> v(n * dim);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

std::vector<double> kernel_matrix(std::span<const float> x, std::size_t n, std::size_t dim, double gamma) {
  std::vector<double> k(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double d2 = 0;
      for (std::size_t c = 0; c < dim; ++c) {
        const double diff = static_cast<double>(x[i * dim + c]) - x[j * dim + c];
        d2 += diff * diff;
      }
      k[i * n + j] = std::exp(-gamma * d2);
    }
  return k;
}

struct NuCheck {
  double outlier_fraction;
  double support_fraction;
};

// Outliers are points whose decision is below the solver's KKT slack, which
// in the α scale is tolerance × the box bound 1/(νn).
NuCheck nu_property(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = 200;
  const auto x = gaussian_points(n, 2, rng);
  SvmOptions opt;
  opt.nu = 0.1;
  const auto fit = fit_ocsvm_detailed(x, 2, opt);
  const double slack = opt.tolerance / (opt.nu * static_cast<double>(n));
  const auto f = fit.model.decision_batch(x);
  const auto outliers = std::count_if(f.begin(), f.end(), [&](double v) { return v < -slack; });
  return {static_cast<double>(outliers) / n, static_cast<double>(fit.model.support_count()) / n};
}

}  // namespace

TEST_SUITE("gamma") {
  TEST_CASE("variance 2 in 10 dimensions") {
    const double h = std::sqrt(2.0);
    std::vector<float> rows(20);
    for (std::size_t c = 0; c < 10; ++c) {
      rows[c] = static_cast<float>(c) - static_cast<float>(h);
      rows[10 + c] = static_cast<float>(c) + static_cast<float>(h);
    }
    CHECK(gamma_heuristic(rows, 10) == doctest::Approx(0.05).epsilon(1e-6));
    CHECK(gamma_heuristic(rows, 10, VarianceMode::global) == doctest::Approx(1.0 / (10 * (2 + 8.25))).epsilon(1e-6));
  }

  TEST_CASE("standardized latents of dimension 4624") {
    const std::size_t n = 64, D = 4624;
    Rng rng(1);
    std::vector<double> raw(n * D);
    for (auto& v : raw) v = 3.0 + 2.0 * rng.normal();
    std::vector<float> rows(n * D);
    for (std::size_t c = 0; c < D; ++c) {
      double m = 0, s2 = 0;
      for (std::size_t i = 0; i < n; ++i) m += raw[i * D + c];
      m /= n;
      for (std::size_t i = 0; i < n; ++i) s2 += (raw[i * D + c] - m) * (raw[i * D + c] - m);
      const double sd = std::sqrt(s2 / n);
      for (std::size_t i = 0; i < n; ++i) rows[i * D + c] = static_cast<float>((raw[i * D + c] - m) / sd);
    }
    CHECK(gamma_heuristic(rows, D) == doctest::Approx(1.0 / 4624).epsilon(1e-5));
  }

  TEST_CASE("duplicating every latent leaves gamma unchanged") {
    Rng rng(2);
    const auto x = gaussian_points(37, 11, rng);
    std::vector<float> twice = x;
    twice.insert(twice.end(), x.begin(), x.end());
    const double g1 = gamma_heuristic(x, 11), g2 = gamma_heuristic(twice, 11);
    CHECK(std::abs(g1 - g2) <= 1e-9 * g1);
  }

  TEST_CASE("degenerate inputs are rejected") {
    const std::vector<float> same(3 * 4, 0.5f);
    CHECK_THROWS_AS(gamma_heuristic(same, 4), NumericError);
    CHECK_THROWS_AS(gamma_heuristic(std::vector<float>(4, 1.0f), 4), UsageError);
  }
}

TEST_SUITE("fit") {
  TEST_CASE("identical points score equally") {
    const std::vector<float> x(10 * 3, 0.25f);
    SvmOptions opt;
    opt.nu = 0.5;
    opt.gamma = 1.0;
    const auto m = fit_ocsvm(x, 3, opt);
    const auto f = m.decision_batch(x);
    for (double v : f) {
      CHECK(v == f[0]);
      CHECK(v >= 0.0);
    }
  }

  TEST_CASE("nu-property on a 2-D Gaussian") {
    const auto r = nu_property(0);
    MESSAGE("outliers " << r.outlier_fraction << ", support vectors " << r.support_fraction);
    CHECK(r.outlier_fraction <= 0.12);
    CHECK(r.support_fraction >= 0.08);
  }

  TEST_CASE("nu-property holds on repeated draws") {
    int held = 0;
    for (std::uint64_t seed = 100; seed < 120; ++seed) {
      const auto r = nu_property(seed);
      held += r.outlier_fraction <= 0.12 && r.support_fraction >= 0.08;
    }
    MESSAGE(held << " of 20 trials");
    CHECK(held >= 19);
  }

  TEST_CASE("objective matches a dense projected-gradient oracle") {
    for (std::uint64_t seed : {1, 2, 3}) {
      Rng rng(seed);
      const std::size_t n = 50;
      const auto x = gaussian_points(n, 3, rng);
      SvmOptions opt;
      opt.nu = 0.2;
      opt.gamma = 0.3;
      const auto fit = fit_ocsvm_detailed(x, 3, opt);
      const auto K = kernel_matrix(x, n, 3, opt.gamma);
      const double reference = oracle::dense_ocsvm_objective(K, n, 1.0 / (opt.nu * n));
      double own = 0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) own += fit.alpha_all[i] * K[i * n + j] * fit.alpha_all[j];
      own *= 0.5;
      CHECK(own == doctest::Approx(fit.objective).epsilon(1e-9));
      CHECK(std::abs(own - reference) <= 1e-3);
      CHECK(own >= reference - 1e-9);
    }
  }

  TEST_CASE("dual constraints") {
    Rng rng(4);
    const std::size_t n = 300;
    const auto x = gaussian_points(n, 5, rng);
    SvmOptions opt;
    opt.nu = 0.05;
    const auto fit = fit_ocsvm_detailed(x, 5, opt);
    const double C = 1.0 / (opt.nu * n);
    CHECK(std::accumulate(fit.alpha_all.begin(), fit.alpha_all.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-6));
    for (double a : fit.alpha_all) CHECK((a >= 0.0 && a <= C * (1 + 1e-12)));
    CHECK(std::accumulate(fit.model.alpha.begin(), fit.model.alpha.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-6));
    for (double a : fit.model.alpha) CHECK(a > 0.0);
    CHECK(fit.violation < opt.tolerance);
    CHECK(fit.model.gamma > 0.0);
  }

  TEST_CASE("subsample cap is seeded") {
    Rng rng(5);
    const auto x = gaussian_points(300, 2, rng);
    SvmOptions opt;
    opt.nu = 0.1;
    opt.subsample_cap = 100;
    opt.seed = 9;
    const auto a = fit_ocsvm_detailed(x, 2, opt), b = fit_ocsvm_detailed(x, 2, opt);
    CHECK(a.rows_used.size() == 100);
    CHECK(a.rows_used == b.rows_used);
    CHECK(a.model.n_train == 100);
    CHECK(a.model.alpha == b.model.alpha);
  }

  TEST_CASE("invalid options and budget exhaustion") {
    Rng rng(6);
    const auto x = gaussian_points(50, 2, rng);
    SvmOptions opt;
    opt.nu = 0;
    CHECK_THROWS_AS(fit_ocsvm(x, 2, opt), UsageError);
    opt.nu = 1.5;
    CHECK_THROWS_AS(fit_ocsvm(x, 2, opt), UsageError);
    opt.nu = 0.1;
    CHECK_THROWS_AS(fit_ocsvm(std::span<const float>(x).first(2), 2, opt), UsageError);
    opt.max_iterations = 1;
    try {
      fit_ocsvm(x, 2, opt);
      FAIL("expected a numeric error");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("violation") != std::string::npos);
    }
  }
}

TEST_SUITE("decision") {
  SvmModel fitted(std::size_t dim, std::uint64_t seed) {
    Rng rng(seed);
    const auto x = gaussian_points(120, dim, rng);
    SvmOptions opt;
    opt.nu = 0.1;
    return fit_ocsvm(x, dim, opt);
  }

  TEST_CASE("far away tends to minus rho") {
    const auto m = fitted(4, 1);
    const std::vector<float> far(4, 1e3f);
    CHECK(m.decision(far) == doctest::Approx(-m.rho).epsilon(1e-12));
  }

  TEST_CASE("heavily weighted support vector") {
    const auto m = fitted(4, 2);
    const auto top = static_cast<std::size_t>(std::max_element(m.alpha.begin(), m.alpha.end()) - m.alpha.begin());
    const std::span<const float> s(m.support.data() + top * 4, 4);
    CHECK(m.decision(s) >= m.alpha[top] - m.rho - 1e-12);
  }

  TEST_CASE("batch equals single") {
    const auto m = fitted(6, 3);
    Rng rng(33);
    const auto z = gaussian_points(40, 6, rng);
    const auto batch = m.decision_batch(z);
    for (std::size_t i = 0; i < 40; ++i)
      CHECK(std::abs(batch[i] - m.decision(std::span<const float>(z).subspan(i * 6, 6))) <= 1e-6);
    CHECK_THROWS_AS(m.decision(std::span<const float>(z).first(5)), UsageError);
  }

  TEST_CASE("Lipschitz bound from alpha and gamma") {
    const auto m = fitted(3, 4);
    const double L = std::accumulate(m.alpha.begin(), m.alpha.end(), 0.0) * std::sqrt(2 * m.gamma) * std::exp(-0.5);
    Rng rng(44);
    for (int t = 0; t < 200; ++t) {
      const auto a = gaussian_points(1, 3, rng), b = gaussian_points(1, 3, rng);
      double d = 0;
      for (int c = 0; c < 3; ++c) d += (a[c] - b[c]) * (a[c] - b[c]);
      CHECK(std::abs(m.decision(a) - m.decision(b)) <= L * std::sqrt(d) + 1e-12);
    }
  }

  TEST_CASE("container round trip") {
    auto m = fitted(5, 5);
    m.encoder_hash = "00ff00ff00ff00ff";
    m.input = SvmInput::center;
    const auto path = std::filesystem::temp_directory_path() / "pbad_svm_roundtrip.ckpt";
    save_svm(m, path);
    const auto back = load_svm(path);
    CHECK(back.alpha == m.alpha);
    CHECK(back.support == m.support);
    CHECK(back.rho == m.rho);
    CHECK(back.gamma == m.gamma);
    CHECK(back.nu == m.nu);
    CHECK(back.encoder_hash == m.encoder_hash);
    CHECK(back.input == SvmInput::center);
  }
}
