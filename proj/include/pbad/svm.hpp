#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pbad/checkpoint.hpp"

namespace pbad {

/// per_coordinate: mean over coordinates of each coordinate's variance.
/// global: variance of all entries pooled.
enum class VarianceMode { per_coordinate, global };
/// Which part of the latent feeds the SVM: the whole flattened grid or the
/// d channels of the central site.
enum class SvmInput { full, center };

std::string to_string(VarianceMode m);
VarianceMode parse_variance_mode(const std::string& s);
std::string to_string(SvmInput s);
SvmInput parse_svm_input(const std::string& s);

/// γ = 1 / (σ² · D) over n row vectors of dimension D (population variance).
double gamma_heuristic(std::span<const float> latents, std::size_t dim, VarianceMode mode = VarianceMode::per_coordinate);

struct SvmOptions {
  double nu = 0.03;
  /// 0 selects gamma_heuristic.
  double gamma = 0;
  VarianceMode variance = VarianceMode::per_coordinate;
  double tolerance = 1e-3;
  /// 0 picks max(10^7, 100 n).
  std::size_t max_iterations = 0;
  /// Rows beyond this are dropped by seeded uniform subsampling; 0 disables.
  std::size_t subsample_cap = 20000;
  std::uint64_t seed = 0;
  /// Full kernel matrix when it fits, LRU row cache otherwise.
  std::size_t cache_bytes = std::size_t{1} << 30;
};

struct SvmModel {
  std::size_t dim = 0;
  std::vector<float> support;  // n_sv × dim
  std::vector<double> alpha;
  double rho = 0;
  double gamma = 0;
  double nu = 0;
  std::size_t n_train = 0;
  SvmInput input = SvmInput::full;
  /// Content hash of the encoder the latents came from.
  std::string encoder_hash;

  std::size_t support_count() const { return alpha.size(); }
  /// f(z) = Σ α_i exp(-γ ||s_i - z||²) - ρ; anomaly score is -f.
  double decision(std::span<const float> z) const;
  std::vector<double> decision_batch(std::span<const float> zs) const;

  Container to_container() const;
  static SvmModel from_container(const Container& c);
};

struct SvmFit {
  SvmModel model;
  /// Dual variables over the (possibly subsampled) training rows.
  std::vector<double> alpha_all;
  std::vector<std::size_t> rows_used;
  double objective = 0;
  double violation = 0;
  std::size_t iterations = 0;
};

/// One-class ν-SVM dual: min ½ αᵀKα, 0 ≤ α_i ≤ 1/(νn), Σα = 1, solved by
/// pairwise (SMO) updates with second-order working-set selection.
SvmFit fit_ocsvm_detailed(std::span<const float> latents, std::size_t dim, const SvmOptions& options);
SvmModel fit_ocsvm(std::span<const float> latents, std::size_t dim, const SvmOptions& options);

void save_svm(const SvmModel& model, const std::filesystem::path& path);
SvmModel load_svm(const std::filesystem::path& path);

}  // namespace pbad
