#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pbad/anomaly.hpp"
#include "pbad/dataset.hpp"
#include "pbad/image.hpp"

namespace pbad {

struct ScoredPixels {
  std::vector<float> scores;
  std::vector<std::uint8_t> labels;

  void append(std::span<const float> s, std::span<const std::uint8_t> l);
  std::size_t positives() const;
  std::size_t negatives() const { return labels.size() - positives(); }
};

/// Curve points in sweep order (x non-decreasing) plus its areas.
struct CurveArea {
  std::vector<double> x;
  std::vector<double> y;
  double area = 0;
  double limit = 1.0;
  double limited = 0;
  std::string convention;
};

/// ∫₀^limit y dx / limit over a curve with non-decreasing x, trapezoids,
/// linear interpolation at the cut.
double limited_area(std::span<const double> x, std::span<const double> y, double limit);
double limited_area(const CurveArea& curve, double limit);

/// Exact sweep over distinct thresholds; ties form one step.
CurveArea roc_curve(const ScoredPixels& sp, double fpr_limit = 0.3);
/// Step-wise average precision Σ (R_k − R_{k−1}) P_k over distinct thresholds.
CurveArea pr_curve(const ScoredPixels& sp);

struct Region {
  std::size_t image = 0;
  std::vector<std::uint32_t> pixels;  // row-major indices, ascending
};

/// 8-connected components, ordered by their first pixel in raster order.
std::vector<Region> connected_components(const GroundTruthMask& mask, std::size_t image_id = 0);

struct ProOptions {
  std::size_t thresholds = 200;
  double fpr_limit = 0.3;
};

/// Mean per-region overlap against pooled FPR. Thresholds are the pooled
/// score quantiles k/N (k = 0..N, nearest rank) plus +inf; a pixel counts as
/// detected when its score is ≥ the threshold.
CurveArea pro_curve(std::span<const AnomalyMap> maps, std::span<const GroundTruthMask> masks,
                    const ProOptions& options = {});
/// Same curve from raw score grids.
CurveArea pro_curve(std::span<const std::vector<float>> maps, std::span<const GroundTruthMask> masks,
                    const ProOptions& options = {});

struct MetricsRow {
  std::string method;
  std::string defect_type;  // "all" for the pooled row
  double auroc = 0, auroc30 = 0, auprc = 0, aupro = 0, aupro30 = 0;
  std::size_t n_pixels = 0;
  std::size_t n_regions = 0;
};

struct EvalOptions {
  ProOptions pro;
  double fpr_limit = 0.3;
};

/// Map location for one test entry: <root>/<method>/<defect>/<stem>.pbmap
std::filesystem::path map_path(const std::filesystem::path& maps_root, const std::string& method,
                               const TestEntry& entry);

/// Metrics for one method: a pooled "all" row then one row per defect type
/// (pixels of that type's images only).
std::vector<MetricsRow> evaluate_method(const std::filesystem::path& maps_root, const DatasetManifest& manifest,
                                        const std::string& method, const EvalOptions& options = {});
/// Every method that has a map directory, in canonical method order.
std::vector<MetricsRow> evaluate(const std::filesystem::path& maps_root, const DatasetManifest& manifest,
                                 const EvalOptions& options = {});

std::string format_metrics_csv(const std::vector<MetricsRow>& rows, const EvalOptions& options = {});
void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows,
                       const EvalOptions& options = {});
void write_curve_csv(const std::filesystem::path& path, const CurveArea& curve, const std::string& x_name,
                     const std::string& y_name);

}  // namespace pbad
