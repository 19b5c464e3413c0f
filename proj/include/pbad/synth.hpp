#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pbad/image.hpp"
#include "pbad/rng.hpp"

namespace pbad {

// Synthetic wood/carpet stand-ins with injected defects, for desk-scale runs.

enum class TexturePattern { grain, noise };
enum class DefectShape { disk, bar };

struct DefectSpec {
  std::size_t count = 0;
  DefectShape shape = DefectShape::disk;
  // Disk radius, or bar length, in pixels.
  double min_size = 5;
  double max_size = 10;
  // 0 leaves pixels untouched, 1 paints the tint.
  double contrast = 0.85;
  std::array<float, 3> tint{0.06f, 0.08f, 0.22f};
};

struct SynthSpec {
  std::size_t height = 128;
  std::size_t width = 128;
  TexturePattern pattern = TexturePattern::grain;
  std::vector<DefectSpec> defects;
};

struct SynthSample {
  ImageRGB image;
  GroundTruthMask mask;
};

SynthSample synth_texture(const SynthSpec& spec, Rng& rng);

TexturePattern parse_pattern(const std::string& name);
DefectShape parse_shape(const std::string& name);
std::string to_string(DefectShape shape);

struct SynthDatasetSpec {
  std::size_t train = 8;
  std::size_t test_good = 3;
  /// Defective test images per defect type.
  std::size_t test_defect = 4;
  std::size_t side = 128;
  TexturePattern pattern = TexturePattern::grain;
  std::vector<DefectShape> defect_types{DefectShape::disk};
  double contrast = 0.85;
};

/// Writes an MVTecAD-layout tree under <root>/<category>; returns the number
/// of files written.
std::size_t write_synthetic_dataset(const std::filesystem::path& root, const std::string& category,
                                    const SynthDatasetSpec& spec, std::uint64_t seed);

}  // namespace pbad
