#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace pbad {

struct TestEntry {
  std::filesystem::path image;
  std::string defect_type;  // "good" for normal images
  std::optional<std::filesystem::path> mask;

  bool is_normal() const { return defect_type == "good"; }
  std::string stem() const { return image.stem().string(); }
};

/// One MVTecAD-style category: <root>/<category>/{train/good, test/<type>,
/// ground_truth/<type>/<stem>_mask.png}.
struct DatasetManifest {
  std::string category;
  std::filesystem::path root;
  std::vector<std::filesystem::path> train;
  std::vector<TestEntry> test;

  std::size_t good_test_count() const;
  std::size_t defect_test_count() const;
  /// Sorted, excluding "good".
  std::vector<std::string> defect_types() const;
  std::string summary() const;
};

/// Deterministic lexicographic scan. Only *.png files are considered.
DatasetManifest scan_mvtec(const std::filesystem::path& root, const std::string& category);

}  // namespace pbad
