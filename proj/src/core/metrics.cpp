#include "pbad/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "pbad/error.hpp"

namespace pbad {

void ScoredPixels::append(std::span<const float> s, std::span<const std::uint8_t> l) {
  if (s.size() != l.size()) throw UsageError("scored pixels: scores and labels differ in length");
  scores.insert(scores.end(), s.begin(), s.end());
  labels.insert(labels.end(), l.begin(), l.end());
}

std::size_t ScoredPixels::positives() const {
  return static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [](std::uint8_t v) { return v != 0; }));
}

double limited_area(std::span<const double> x, std::span<const double> y, double limit) {
  if (!(limit > 0 && limit <= 1)) throw UsageError("fpr limit must lie in (0, 1], got " + std::to_string(limit));
  if (x.size() != y.size() || x.empty()) throw UsageError("limited_area: malformed curve");
  double area = 0;
  for (std::size_t i = 1; i < x.size(); ++i) {
    const double x0 = x[i - 1], x1 = x[i];
    if (x0 >= limit) break;
    if (x1 <= x0) continue;
    if (x1 <= limit) {
      area += (x1 - x0) * (y[i - 1] + y[i]) / 2;
    } else {
      const double yc = y[i - 1] + (y[i] - y[i - 1]) * (limit - x0) / (x1 - x0);
      area += (limit - x0) * (y[i - 1] + yc) / 2;
      break;
    }
  }
  return area / limit;
}

double limited_area(const CurveArea& curve, double limit) { return limited_area(curve.x, curve.y, limit); }

namespace {

void require_both_classes(const ScoredPixels& sp, const char* what) {
  if (sp.scores.size() != sp.labels.size()) throw UsageError(std::string(what) + ": scores and labels differ");
  const std::size_t p = sp.positives();
  if (p == 0 || p == sp.labels.size()) {
    throw DataError(std::string(what) + ": needs both anomalous and normal pixels (" + std::to_string(p) + " of " +
                    std::to_string(sp.labels.size()) + " anomalous)");
  }
}

std::vector<std::size_t> descending_order(const std::vector<float>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

}  // namespace

CurveArea roc_curve(const ScoredPixels& sp, double fpr_limit) {
  require_both_classes(sp, "roc");
  const double P = static_cast<double>(sp.positives()), N = static_cast<double>(sp.negatives());
  const auto order = descending_order(sp.scores);
  CurveArea c;
  c.x.push_back(0);
  c.y.push_back(0);
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const float s = sp.scores[order[i]];
    for (; i < order.size() && sp.scores[order[i]] == s; ++i) (sp.labels[order[i]] ? tp : fp) += 1;
    c.x.push_back(fp / N);
    c.y.push_back(tp / P);
  }
  c.area = limited_area(c.x, c.y, 1.0);
  c.limit = fpr_limit;
  c.limited = limited_area(c.x, c.y, fpr_limit);
  c.convention = "trapezoid over distinct thresholds";
  return c;
}

CurveArea pr_curve(const ScoredPixels& sp) {
  require_both_classes(sp, "pr");
  const double P = static_cast<double>(sp.positives());
  const auto order = descending_order(sp.scores);
  CurveArea c;
  double tp = 0, fp = 0, prev_recall = 0, ap = 0;
  for (std::size_t i = 0; i < order.size();) {
    const float s = sp.scores[order[i]];
    for (; i < order.size() && sp.scores[order[i]] == s; ++i) (sp.labels[order[i]] ? tp : fp) += 1;
    const double recall = tp / P, precision = tp / (tp + fp);
    c.x.push_back(recall);
    c.y.push_back(precision);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  c.area = ap;
  c.limited = ap;
  c.convention = "average precision: sum over thresholds of (R_k - R_k-1) * P_k";
  return c;
}

std::vector<Region> connected_components(const GroundTruthMask& mask, std::size_t image_id) {
  const std::size_t H = mask.height, W = mask.width;
  std::vector<std::uint8_t> seen(H * W, 0);
  std::vector<Region> out;
  std::vector<std::uint32_t> stack;
  for (std::size_t start = 0; start < H * W; ++start) {
    if (!mask.labels[start] || seen[start]) continue;
    Region region;
    region.image = image_id;
    seen[start] = 1;
    stack.assign(1, static_cast<std::uint32_t>(start));
    while (!stack.empty()) {
      const std::uint32_t p = stack.back();
      stack.pop_back();
      region.pixels.push_back(p);
      const std::ptrdiff_t r = p / W, c = p % W;
      for (std::ptrdiff_t dr = -1; dr <= 1; ++dr)
        for (std::ptrdiff_t dc = -1; dc <= 1; ++dc) {
          const std::ptrdiff_t rr = r + dr, cc = c + dc;
          if (rr < 0 || cc < 0 || rr >= static_cast<std::ptrdiff_t>(H) || cc >= static_cast<std::ptrdiff_t>(W)) continue;
          const std::size_t q = static_cast<std::size_t>(rr) * W + static_cast<std::size_t>(cc);
          if (mask.labels[q] && !seen[q]) {
            seen[q] = 1;
            stack.push_back(static_cast<std::uint32_t>(q));
          }
        }
    }
    std::sort(region.pixels.begin(), region.pixels.end());
    out.push_back(std::move(region));
  }
  return out;
}

CurveArea pro_curve(std::span<const std::vector<float>> maps, std::span<const GroundTruthMask> masks,
                    const ProOptions& options) {
  if (maps.size() != masks.size()) throw UsageError("pro: maps and masks differ in count");
  if (options.thresholds == 0) throw UsageError("pro: threshold count must be positive");
  std::vector<float> pooled, normal;
  std::vector<std::vector<float>> regions;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const auto& m = maps[i];
    const auto& gt = masks[i];
    if (m.size() != gt.labels.size()) {
      throw DataError("pro: map " + std::to_string(i) + " and its mask differ in size");
    }
    pooled.insert(pooled.end(), m.begin(), m.end());
    for (std::size_t p = 0; p < m.size(); ++p)
      if (!gt.labels[p]) normal.push_back(m[p]);
    for (const auto& r : connected_components(gt, i)) {
      std::vector<float> s;
      s.reserve(r.pixels.size());
      for (auto p : r.pixels) s.push_back(m[p]);
      std::sort(s.begin(), s.end());
      regions.push_back(std::move(s));
    }
  }
  if (regions.empty()) throw DataError("pro: ground truth contains no anomalous regions");
  if (normal.empty()) throw DataError("pro: no normal pixels to measure false positives");
  std::sort(pooled.begin(), pooled.end());
  std::sort(normal.begin(), normal.end());

  std::vector<double> thresholds{std::numeric_limits<double>::infinity()};
  const std::size_t M = pooled.size(), Nq = options.thresholds;
  for (std::size_t k = 0; k <= Nq; ++k) thresholds.push_back(pooled[(k * (M - 1) + Nq / 2) / Nq]);
  std::sort(thresholds.begin(), thresholds.end());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  // count of values ≥ t in a sorted vector
  auto at_least = [](const std::vector<float>& v, double t) {
    const auto it = std::lower_bound(v.begin(), v.end(), t, [](float a, double b) { return static_cast<double>(a) < b; });
    return static_cast<double>(v.end() - it);
  };
  CurveArea c;
  for (auto it = thresholds.rbegin(); it != thresholds.rend(); ++it) {
    const double t = *it;
    double overlap = 0;
    for (const auto& r : regions) overlap += at_least(r, t) / static_cast<double>(r.size());
    c.x.push_back(at_least(normal, t) / static_cast<double>(normal.size()));
    c.y.push_back(overlap / static_cast<double>(regions.size()));
  }
  c.area = limited_area(c.x, c.y, 1.0);
  c.limit = options.fpr_limit;
  c.limited = limited_area(c.x, c.y, options.fpr_limit);
  c.convention = std::to_string(Nq) + " nearest-rank quantile thresholds plus +inf, 8-connectivity, pooled fpr";
  return c;
}

CurveArea pro_curve(std::span<const AnomalyMap> maps, std::span<const GroundTruthMask> masks,
                    const ProOptions& options) {
  std::vector<std::vector<float>> raw;
  raw.reserve(maps.size());
  for (const auto& m : maps) raw.push_back(m.scores);
  return pro_curve(std::span<const std::vector<float>>(raw), masks, options);
}

// ---------------------------------------------------------------------------

std::filesystem::path map_path(const std::filesystem::path& maps_root, const std::string& method,
                               const TestEntry& entry) {
  return maps_root / method / entry.defect_type / (entry.stem() + ".pbmap");
}

namespace {

MetricsRow metrics_for(const std::string& method, const std::string& label, std::span<const std::vector<float>> maps,
                       std::span<const GroundTruthMask> masks, const EvalOptions& options) {
  MetricsRow row;
  row.method = method;
  row.defect_type = label;
  ScoredPixels sp;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    sp.append(maps[i], masks[i].labels);
    row.n_regions += connected_components(masks[i], i).size();
  }
  row.n_pixels = sp.scores.size();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  row.auroc = row.auroc30 = row.auprc = row.aupro = row.aupro30 = nan;
  if (sp.positives() == 0 || sp.negatives() == 0) return row;
  const auto roc = roc_curve(sp, options.fpr_limit);
  row.auroc = roc.area;
  row.auroc30 = roc.limited;
  row.auprc = pr_curve(sp).area;
  ProOptions po = options.pro;
  po.fpr_limit = options.fpr_limit;
  const auto pro = pro_curve(maps, masks, po);
  row.aupro = pro.area;
  row.aupro30 = pro.limited;
  return row;
}

}  // namespace

std::vector<MetricsRow> evaluate_method(const std::filesystem::path& maps_root, const DatasetManifest& manifest,
                                        const std::string& method, const EvalOptions& options) {
  if (manifest.test.empty()) throw DataError("evaluate: manifest has no test images");
  std::vector<std::string> missing;
  for (const auto& e : manifest.test) {
    if (!std::filesystem::exists(map_path(maps_root, method, e))) missing.push_back(map_path(maps_root, method, e).string());
  }
  if (!missing.empty()) {
    std::string msg = "evaluate: " + std::to_string(missing.size()) + " score map(s) missing for method " + method + ":";
    for (const auto& m : missing) msg += "\n  " + m;
    throw DataError(msg);
  }
  std::vector<std::vector<float>> maps;
  std::vector<GroundTruthMask> masks;
  for (const auto& e : manifest.test) {
    auto map = import_map(map_path(maps_root, method, e));
    GroundTruthMask mask = e.mask ? load_mask(*e.mask) : GroundTruthMask(map.height, map.width);
    if (mask.height != map.height || mask.width != map.width) {
      throw DataError("evaluate: map for " + e.image.string() + " is " + std::to_string(map.height) + "x" +
                      std::to_string(map.width) + " but its mask is " + std::to_string(mask.height) + "x" +
                      std::to_string(mask.width));
    }
    maps.push_back(std::move(map.scores));
    masks.push_back(std::move(mask));
  }
  std::vector<MetricsRow> rows{metrics_for(method, "all", maps, masks, options)};
  for (const auto& type : manifest.defect_types()) {
    std::vector<std::vector<float>> m;
    std::vector<GroundTruthMask> g;
    for (std::size_t i = 0; i < manifest.test.size(); ++i) {
      if (manifest.test[i].defect_type != type) continue;
      m.push_back(maps[i]);
      g.push_back(masks[i]);
    }
    rows.push_back(metrics_for(method, type, m, g, options));
  }
  return rows;
}

std::vector<MetricsRow> evaluate(const std::filesystem::path& maps_root, const DatasetManifest& manifest,
                                 const EvalOptions& options) {
  std::vector<MetricsRow> rows;
  for (auto m : {Method::recon, Method::recon_discrete, Method::svm, Method::svm_discrete, Method::restore}) {
    if (!std::filesystem::is_directory(maps_root / to_string(m))) continue;
    auto r = evaluate_method(maps_root, manifest, to_string(m), options);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  if (rows.empty()) throw DataError("evaluate: no score maps under " + maps_root.string());
  return rows;
}

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

std::string format_metrics_csv(const std::vector<MetricsRow>& rows, const EvalOptions& options) {
  std::ostringstream os;
  os << "# pixels pooled over the test set; roc: trapezoid over distinct thresholds\n";
  os << "# pr: average precision, sum over thresholds of (R_k - R_k-1) * P_k\n";
  os << "# pro: " << options.pro.thresholds
     << " nearest-rank quantile thresholds plus +inf, 8-connected regions, pooled fpr\n";
  os << "# limited areas: fpr <= " << fmt(options.fpr_limit) << ", normalized by the limit\n";
  os << "method,defect_type,auroc,auroc30,auprc,aupro,aupro30,n_pixels,n_regions\n";
  for (const auto& r : rows) {
    os << r.method << ',' << r.defect_type << ',' << fmt(r.auroc) << ',' << fmt(r.auroc30) << ',' << fmt(r.auprc)
       << ',' << fmt(r.aupro) << ',' << fmt(r.aupro30) << ',' << r.n_pixels << ',' << r.n_regions << '\n';
  }
  return os.str();
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows,
                       const EvalOptions& options) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << format_metrics_csv(rows, options);
}

void write_curve_csv(const std::filesystem::path& path, const CurveArea& curve, const std::string& x_name,
                     const std::string& y_name) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << x_name << ',' << y_name << '\n';
  char buf[64];
  for (std::size_t i = 0; i < curve.x.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.9g,%.9g\n", curve.x[i], curve.y[i]);
    out << buf;
  }
}

}  // namespace pbad
