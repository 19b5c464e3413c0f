#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pbad/autoencoder.hpp"
#include "pbad/image.hpp"
#include "pbad/patches.hpp"
#include "pbad/prior.hpp"
#include "pbad/svm.hpp"
#include "pbad/vq.hpp"

namespace pbad {

enum class Method { recon, recon_discrete, svm, svm_discrete, restore };

std::string to_string(Method m);
Method parse_method(const std::string& s);

/// Per-pixel scores aligned with the source image; higher = more anomalous.
struct AnomalyMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> scores;
  Method method = Method::recon;
  std::size_t stride = 1;
  /// Checkpoint hashes and the source image, stamped at export.
  nlohmann::json provenance = nlohmann::json::object();

  float at(std::size_t r, std::size_t c) const { return scores[r * width + c]; }
};

struct SsimParams {
  std::size_t window = kDefaultPatchSide;
  double c1 = 0.01 * 0.01;
  double c2 = 0.03 * 0.03;
};

/// SSIM of two 3 × side × side patches over the whole window, uniform
/// weights, averaged over channels.
double ssim_patch(std::span<const float> a, std::span<const float> b, std::size_t side, const SsimParams& params = {});

/// Mean over channels of the squared error at the central pixel.
double central_error(std::span<const float> patch, std::span<const float> recon, std::size_t side);

struct ScoreOptions {
  std::size_t stride = 1;
  std::size_t workers = 1;
  std::size_t batch = 64;
  SsimParams ssim;
  RestoreOptions restore;
};

/// Centers on the stride grid: 0, s, 2s, … ≤ n-1.
std::vector<std::size_t> grid_positions(std::size_t n, std::size_t stride);
/// Index of the grid center nearest to pixel p (ties to the lower center).
std::size_t nearest_grid_index(std::size_t p, std::size_t n, std::size_t stride);

/// Scores every stride-grid center with `score_batch` (which fills one value
/// per coordinate) and fills off-grid pixels from the nearest center. Work is
/// split statically over `workers`; the result does not depend on it.
using BatchScorer = std::function<void(const PatchBatch& batch, std::span<float> out)>;
AnomalyMap assemble_map(const ImageRGB& image, std::size_t side, const ScoreOptions& options,
                        const BatchScorer& score_batch);

/// Latent features fed to the SVM for each batch element of z (B × d × S × S).
std::vector<float> svm_features(std::span<const float> z, std::size_t batch, std::size_t channels, std::size_t side,
                                SvmInput input);

AnomalyMap score_map_recon(const ImageRGB& image, const AeModel& model, const ScoreOptions& options = {});
AnomalyMap score_map_recon(const ImageRGB& image, const VqModel& model, const ScoreOptions& options = {});
/// The SVM must have been fitted on this encoder (hash checked).
AnomalyMap score_map_svm(const ImageRGB& image, const AeModel& model, const SvmModel& svm,
                         const ScoreOptions& options = {});
AnomalyMap score_map_svm(const ImageRGB& image, const VqModel& model, const SvmModel& svm,
                         const ScoreOptions& options = {});
AnomalyMap score_map_restore(const ImageRGB& image, const VqModel& model, const PriorModel& prior,
                             const ScoreOptions& options = {});

void export_map(const AnomalyMap& map, const std::filesystem::path& path);
AnomalyMap import_map(const std::filesystem::path& path);
/// 16-bit grayscale, min-max normalized; a constant map becomes mid gray.
void write_map_preview(const AnomalyMap& map, const std::filesystem::path& path);
std::vector<std::uint16_t> preview_levels(const AnomalyMap& map);

}  // namespace pbad
