#include "pbad/dataset.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include "pbad/error.hpp"

namespace fs = std::filesystem;

namespace pbad {

namespace {

std::vector<fs::path> list_pngs(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::string> list_subdirs(const fs::path& dir) {
  std::vector<std::string> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_directory()) out.push_back(entry.path().filename().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

std::size_t DatasetManifest::good_test_count() const {
  return static_cast<std::size_t>(std::count_if(test.begin(), test.end(), [](const TestEntry& e) { return e.is_normal(); }));
}

std::size_t DatasetManifest::defect_test_count() const { return test.size() - good_test_count(); }

std::vector<std::string> DatasetManifest::defect_types() const {
  std::set<std::string> types;
  for (const auto& e : test) {
    if (!e.is_normal()) types.insert(e.defect_type);
  }
  return {types.begin(), types.end()};
}

std::string DatasetManifest::summary() const {
  std::ostringstream os;
  os << category << ": " << train.size() << " train, " << good_test_count() << " good test, " << defect_test_count()
     << " defective test (" << defect_types().size() << " defect types)";
  return os.str();
}

DatasetManifest scan_mvtec(const fs::path& root, const std::string& category) {
  const fs::path base = root / category;
  const fs::path train_dir = base / "train" / "good";
  const fs::path test_dir = base / "test";
  const fs::path gt_dir = base / "ground_truth";
  if (!fs::is_directory(train_dir)) throw DataError("missing training directory '" + train_dir.string() + "'");

  DatasetManifest manifest;
  manifest.category = category;
  manifest.root = root;
  manifest.train = list_pngs(train_dir);

  std::vector<std::string> missing;
  if (fs::is_directory(test_dir)) {
    for (const auto& type : list_subdirs(test_dir)) {
      for (const auto& image : list_pngs(test_dir / type)) {
        TestEntry entry{image, type, std::nullopt};
        if (!entry.is_normal()) {
          const fs::path mask = gt_dir / type / (image.stem().string() + "_mask.png");
          if (fs::is_regular_file(mask)) {
            entry.mask = mask;
          } else {
            missing.push_back(mask.string());
          }
        }
        manifest.test.push_back(std::move(entry));
      }
    }
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += "\n  " + m;
    throw DataError("missing ground-truth masks for defective test images:" + list);
  }
  return manifest;
}

}  // namespace pbad
