#include "pbad/svm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <list>
#include <numeric>
#include <unordered_map>

#include "pbad/error.hpp"
#include "pbad/rng.hpp"

namespace pbad {

std::string to_string(VarianceMode m) { return m == VarianceMode::per_coordinate ? "per_coordinate" : "global"; }

VarianceMode parse_variance_mode(const std::string& s) {
  if (s == "per_coordinate") return VarianceMode::per_coordinate;
  if (s == "global") return VarianceMode::global;
  throw UsageError("unknown variance mode '" + s + "' (expected per_coordinate or global)");
}

std::string to_string(SvmInput s) { return s == SvmInput::full ? "full" : "center"; }

SvmInput parse_svm_input(const std::string& s) {
  if (s == "full") return SvmInput::full;
  if (s == "center") return SvmInput::center;
  throw UsageError("unknown svm input '" + s + "' (expected full or center)");
}

double gamma_heuristic(std::span<const float> latents, std::size_t dim, VarianceMode mode) {
  if (dim == 0 || latents.size() % dim != 0) throw UsageError("gamma_heuristic: data is not a multiple of dim");
  const std::size_t n = latents.size() / dim;
  if (n < 2) throw UsageError("gamma_heuristic needs at least 2 latents, got " + std::to_string(n));
  double variance = 0;
  if (mode == VarianceMode::per_coordinate) {
    std::vector<double> mean(dim, 0.0), sq(dim, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < dim; ++c) mean[c] += latents[i * dim + c];
    for (auto& m : mean) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < dim; ++c) {
        const double d = latents[i * dim + c] - mean[c];
        sq[c] += d * d;
      }
    for (auto s : sq) variance += s / static_cast<double>(n);
    variance /= static_cast<double>(dim);
  } else {
    double mean = 0;
    for (float v : latents) mean += v;
    mean /= static_cast<double>(latents.size());
    for (float v : latents) variance += (v - mean) * (v - mean);
    variance /= static_cast<double>(latents.size());
  }
  if (!(variance > 0)) throw NumericError("gamma_heuristic: latents have zero variance (degenerate encoder)");
  return 1.0 / (variance * static_cast<double>(dim));
}

namespace {

double squared_distance(const float* a, const float* b, std::size_t dim) {
  double s = 0;
  for (std::size_t c = 0; c < dim; ++c) {
    const double d = static_cast<double>(a[c]) - static_cast<double>(b[c]);
    s += d * d;
  }
  return s;
}

// Kernel rows of the training set: a full matrix when it fits the budget,
// otherwise the most recently used rows.
class KernelRows {
 public:
  KernelRows(const float* data, std::size_t n, std::size_t dim, double gamma, std::size_t budget)
      : data_(data), n_(n), dim_(dim), gamma_(gamma) {
    const std::size_t row_bytes = n * sizeof(double);
    capacity_ = std::max<std::size_t>(2, budget / std::max<std::size_t>(row_bytes, 1));
    if (capacity_ >= n) {
      full_.resize(n * n);
      for (std::size_t i = 0; i < n; ++i) {
        full_[i * n + i] = 1.0;
        for (std::size_t j = 0; j < i; ++j) full_[i * n + j] = full_[j * n + i] = value(i, j);
      }
    }
  }

  const double* row(std::size_t i) {
    if (!full_.empty()) return full_.data() + i * n_;
    if (auto it = index_.find(i); it != index_.end()) {
      lru_.splice(lru_.begin(), lru_, it->second);
      return it->second->second.data();
    }
    std::vector<double> r;
    if (lru_.size() >= capacity_) {
      r = std::move(lru_.back().second);
      index_.erase(lru_.back().first);
      lru_.pop_back();
    }
    r.resize(n_);
    for (std::size_t j = 0; j < n_; ++j) r[j] = j == i ? 1.0 : value(i, j);
    lru_.emplace_front(i, std::move(r));
    index_[i] = lru_.begin();
    return lru_.front().second.data();
  }

 private:
  double value(std::size_t i, std::size_t j) const {
    return std::exp(-gamma_ * squared_distance(data_ + i * dim_, data_ + j * dim_, dim_));
  }

  const float* data_;
  std::size_t n_, dim_;
  double gamma_;
  std::size_t capacity_;
  std::vector<double> full_;
  std::list<std::pair<std::size_t, std::vector<double>>> lru_;
  std::unordered_map<std::size_t, std::list<std::pair<std::size_t, std::vector<double>>>::iterator> index_;
};

}  // namespace

SvmFit fit_ocsvm_detailed(std::span<const float> latents, std::size_t dim, const SvmOptions& options) {
  if (dim == 0 || latents.size() % dim != 0) throw UsageError("fit_ocsvm: data is not a multiple of dim");
  if (!(options.nu > 0 && options.nu <= 1)) {
    throw UsageError("fit_ocsvm: nu must lie in (0, 1], got " + std::to_string(options.nu));
  }
  const std::size_t n_all = latents.size() / dim;
  if (n_all < 2) throw UsageError("fit_ocsvm needs at least 2 latents, got " + std::to_string(n_all));

  SvmFit fit;
  std::vector<float> subset;
  std::span<const float> data = latents;
  if (options.subsample_cap > 0 && n_all > options.subsample_cap) {
    std::vector<std::size_t> order(n_all);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(options.seed, 0x5B5);
    for (std::size_t i = 0; i < options.subsample_cap; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.below(n_all - i));
      std::swap(order[i], order[j]);
    }
    order.resize(options.subsample_cap);
    std::sort(order.begin(), order.end());
    subset.reserve(order.size() * dim);
    for (auto r : order) subset.insert(subset.end(), latents.begin() + r * dim, latents.begin() + (r + 1) * dim);
    fit.rows_used = std::move(order);
    data = subset;
  } else {
    fit.rows_used.resize(n_all);
    std::iota(fit.rows_used.begin(), fit.rows_used.end(), std::size_t{0});
  }
  const std::size_t n = data.size() / dim;
  const double gamma = options.gamma > 0 ? options.gamma : gamma_heuristic(data, dim, options.variance);
  for (float v : data) {
    if (!std::isfinite(v)) throw NumericError("fit_ocsvm: non-finite latent value");
  }

  const double C = 1.0 / (options.nu * static_cast<double>(n));
  std::vector<double> alpha(n, 0.0);
  {
    const double nu_n = options.nu * static_cast<double>(n);
    const auto whole = static_cast<std::size_t>(std::floor(nu_n));
    for (std::size_t i = 0; i < whole && i < n; ++i) alpha[i] = C;
    if (whole < n) alpha[whole] = (nu_n - static_cast<double>(whole)) * C;
  }

  KernelRows kernel(data.data(), n, dim, gamma, options.cache_bytes);
  std::vector<double> G(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (alpha[i] == 0) continue;
    const double* Ki = kernel.row(i);
    for (std::size_t t = 0; t < n; ++t) G[t] += alpha[i] * Ki[t];
  }

  constexpr double kTau = 1e-12;
  const std::size_t max_iter = options.max_iterations ? options.max_iterations
                                                      : std::max<std::size_t>(10'000'000, 100 * n);
  const auto is_upper = [&](std::size_t t) { return alpha[t] >= C; };
  const auto is_lower = [&](std::size_t t) { return alpha[t] <= 0; };
  double violation = 0;
  std::size_t iter = 0;
  for (;; ++iter) {
    // i: maximal violator among rows that can grow; j: second-order choice
    // among rows that can shrink.
    double gmax = -std::numeric_limits<double>::infinity(), gmax2 = -std::numeric_limits<double>::infinity();
    std::size_t i = n;
    for (std::size_t t = 0; t < n; ++t) {
      if (!is_upper(t) && -G[t] > gmax) {
        gmax = -G[t];
        i = t;
      }
    }
    std::size_t j = n;
    double best = std::numeric_limits<double>::infinity();
    const double* Ki = i < n ? kernel.row(i) : nullptr;
    for (std::size_t t = 0; t < n; ++t) {
      if (is_lower(t)) continue;
      gmax2 = std::max(gmax2, G[t]);
      if (!Ki) continue;
      const double b = gmax + G[t];
      if (b > 0) {
        double a = 1.0 + 1.0 - 2.0 * Ki[t];
        if (a <= 0) a = kTau;
        const double obj = -(b * b) / a;
        if (obj < best) {
          best = obj;
          j = t;
        }
      }
    }
    // Measured on the unit-box scaling (α_i ∈ [0, 1], Σα = νn) so the
    // tolerance does not shrink with n.
    violation = (gmax + gmax2) / C;
    if (violation < options.tolerance || j == n || i == n) break;
    if (iter >= max_iter) {
      throw NumericError("fit_ocsvm: no convergence after " + std::to_string(iter) +
                         " iterations, KKT violation " + std::to_string(violation));
    }
    Ki = kernel.row(i);
    const double* Kj = kernel.row(j);
    double quad = 2.0 - 2.0 * Ki[j];
    if (quad <= 0) quad = kTau;
    const double ai = alpha[i], aj = alpha[j];
    const double delta = (G[i] - G[j]) / quad;
    const double total = ai + aj;
    double ni = ai - delta, nj = aj + delta;
    if (total > C) {
      if (ni > C) {
        ni = C;
        nj = total - C;
      }
    } else if (nj < 0) {
      nj = 0;
      ni = total;
    }
    if (total > C) {
      if (nj > C) {
        nj = C;
        ni = total - C;
      }
    } else if (ni < 0) {
      ni = 0;
      nj = total;
    }
    alpha[i] = ni;
    alpha[j] = nj;
    const double di = ni - ai, dj = nj - aj;
    Ki = kernel.row(i);
    for (std::size_t t = 0; t < n; ++t) G[t] += di * Ki[t] + dj * Kj[t];
  }

  // Offset: average gradient over free variables, else the midpoint of the
  // feasible interval.
  double ub = std::numeric_limits<double>::infinity(), lb = -std::numeric_limits<double>::infinity(), free_sum = 0;
  std::size_t n_free = 0;
  for (std::size_t t = 0; t < n; ++t) {
    if (is_upper(t)) {
      lb = std::max(lb, G[t]);
    } else if (is_lower(t)) {
      ub = std::min(ub, G[t]);
    } else {
      ++n_free;
      free_sum += G[t];
    }
  }
  const double rho = n_free > 0 ? free_sum / static_cast<double>(n_free) : (ub + lb) / 2;

  double objective = 0;
  for (std::size_t t = 0; t < n; ++t) objective += 0.5 * alpha[t] * G[t];

  SvmModel& m = fit.model;
  m.dim = dim;
  m.rho = rho;
  m.gamma = gamma;
  m.nu = options.nu;
  m.n_train = n;
  for (std::size_t t = 0; t < n; ++t) {
    if (alpha[t] <= 0) continue;
    m.alpha.push_back(alpha[t]);
    m.support.insert(m.support.end(), data.begin() + t * dim, data.begin() + (t + 1) * dim);
  }
  fit.alpha_all = std::move(alpha);
  fit.objective = objective;
  fit.violation = violation;
  fit.iterations = iter;
  return fit;
}

SvmModel fit_ocsvm(std::span<const float> latents, std::size_t dim, const SvmOptions& options) {
  return fit_ocsvm_detailed(latents, dim, options).model;
}

double SvmModel::decision(std::span<const float> z) const {
  if (z.size() != dim) {
    throw UsageError("svm decision: vector has " + std::to_string(z.size()) + " entries, model expects " +
                     std::to_string(dim));
  }
  double f = 0;
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    f += alpha[i] * std::exp(-gamma * squared_distance(support.data() + i * dim, z.data(), dim));
  }
  return f - rho;
}

std::vector<double> SvmModel::decision_batch(std::span<const float> zs) const {
  if (dim == 0 || zs.size() % dim != 0) throw UsageError("svm decision_batch: data is not a multiple of dim");
  std::vector<double> out(zs.size() / dim);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = decision(zs.subspan(i * dim, dim));
  return out;
}

Container SvmModel::to_container() const {
  Container c;
  c.metadata["kind"] = "svm";
  c.metadata["input"] = to_string(input);
  c.metadata["encoder_hash"] = encoder_hash;
  c.metadata["n_train"] = n_train;
  c.put_f32("sv", {alpha.size(), dim}, support);
  c.put_f64("alpha", {alpha.size()}, alpha);
  c.put_scalar("rho", rho);
  c.put_scalar("gamma", gamma);
  c.put_scalar("nu", nu);
  return c;
}

SvmModel SvmModel::from_container(const Container& c) {
  if (c.metadata.value("kind", std::string{}) != "svm") {
    throw DataError("checkpoint kind is '" + c.metadata.value("kind", std::string{"?"}) + "', expected 'svm'");
  }
  SvmModel m;
  std::vector<std::uint64_t> dims;
  m.support = c.get_f32("sv", &dims);
  m.alpha = c.get_f64("alpha");
  if (dims.size() != 2 || dims[0] != m.alpha.size()) throw DataError("svm checkpoint: sv and alpha disagree");
  m.dim = dims[1];
  m.rho = c.get_scalar("rho");
  m.gamma = c.get_scalar("gamma");
  m.nu = c.get_scalar("nu");
  m.n_train = c.metadata.value("n_train", std::size_t{0});
  m.input = parse_svm_input(c.metadata.value("input", std::string{"full"}));
  m.encoder_hash = c.metadata.value("encoder_hash", std::string{});
  return m;
}

void save_svm(const SvmModel& model, const std::filesystem::path& path) { write_container(path, model.to_container()); }

SvmModel load_svm(const std::filesystem::path& path) { return SvmModel::from_container(read_container(path)); }

}  // namespace pbad
