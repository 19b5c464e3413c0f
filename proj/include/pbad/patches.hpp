#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "pbad/image.hpp"
#include "pbad/rng.hpp"
#include "pbad/tensor.hpp"

namespace pbad {

inline constexpr std::size_t kDefaultPatchSide = 63;

struct PatchCoord {
  std::size_t image = 0;
  std::size_t row = 0;
  std::size_t col = 0;

  bool operator==(const PatchCoord&) const = default;
};

/// B × 3 × side × side, channel-planar, values in [0, 1].
struct PatchBatch {
  std::size_t side = kDefaultPatchSide;
  std::vector<float> pixels;
  std::vector<PatchCoord> coords;

  std::size_t size() const { return coords.size(); }
  std::size_t patch_values() const { return 3 * side * side; }
  std::span<const float> patch(std::size_t i) const {
    return std::span<const float>(pixels).subspan(i * patch_values(), patch_values());
  }
  Tensor to_tensor() const;
};

/// Mirror index without repeating the border sample (… 2 1 | 0 1 2 … n-1 | n-2 …).
std::size_t reflect_index(std::ptrdiff_t i, std::size_t n);

/// Centers drawn uniformly such that the whole window lies inside the image.
std::vector<PatchCoord> sample_centers(const ImageRGB& image, std::size_t n, Rng& rng,
                                       std::size_t side = kDefaultPatchSide, std::size_t image_id = 0);
PatchBatch sample_patches(const ImageRGB& image, std::size_t n, Rng& rng, std::size_t side = kDefaultPatchSide,
                          std::size_t image_id = 0);

/// Window centered at (row, col); out-of-range reads are reflected.
void extract_patch(const ImageRGB& image, std::size_t row, std::size_t col, std::size_t side, std::span<float> out);
std::vector<float> extract_patch(const ImageRGB& image, std::size_t row, std::size_t col,
                                 std::size_t side = kDefaultPatchSide);

/// Materializes the listed windows; coords[i].image indexes `images`.
PatchBatch gather_patches(std::span<const ImageRGB> images, std::span<const PatchCoord> coords, std::size_t side);

}  // namespace pbad
