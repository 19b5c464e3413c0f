#include "pbad/patches.hpp"

#include <string>

#include "pbad/error.hpp"

namespace pbad {

Tensor PatchBatch::to_tensor() const { return Tensor::from_data({size(), 3, side, side}, pixels); }

std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
  std::ptrdiff_t k = i % period;
  if (k < 0) k += period;
  if (k >= static_cast<std::ptrdiff_t>(n)) k = period - k;
  return static_cast<std::size_t>(k);
}

namespace {

void check_side(std::size_t side) {
  if (side == 0 || side % 2 == 0) throw UsageError("patch side must be odd, got " + std::to_string(side));
}

}  // namespace

std::vector<PatchCoord> sample_centers(const ImageRGB& image, std::size_t n, Rng& rng, std::size_t side,
                                       std::size_t image_id) {
  check_side(side);
  if (image.height < side || image.width < side) {
    throw DataError("image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                    " is smaller than the " + std::to_string(side) + "x" + std::to_string(side) + " patch");
  }
  const std::size_t half = side / 2;
  std::vector<PatchCoord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t row = half + static_cast<std::size_t>(rng.below(image.height - side + 1));
    const std::size_t col = half + static_cast<std::size_t>(rng.below(image.width - side + 1));
    out.push_back({image_id, row, col});
  }
  return out;
}

PatchBatch sample_patches(const ImageRGB& image, std::size_t n, Rng& rng, std::size_t side, std::size_t image_id) {
  auto coords = sample_centers(image, n, rng, side, image_id);
  for (auto& c : coords) c.image = 0;
  PatchBatch batch = gather_patches(std::span<const ImageRGB>(&image, 1), coords, side);
  for (auto& c : batch.coords) c.image = image_id;
  return batch;
}

void extract_patch(const ImageRGB& image, std::size_t row, std::size_t col, std::size_t side, std::span<float> out) {
  check_side(side);
  if (out.size() != 3 * side * side) throw UsageError("extract_patch: output buffer has the wrong size");
  const auto half = static_cast<std::ptrdiff_t>(side / 2);
  const auto r0 = static_cast<std::ptrdiff_t>(row) - half;
  const auto c0 = static_cast<std::ptrdiff_t>(col) - half;
  const bool interior = r0 >= 0 && c0 >= 0 && row + side / 2 < image.height && col + side / 2 < image.width;
  for (std::size_t y = 0; y < side; ++y) {
    const std::size_t sy = interior ? static_cast<std::size_t>(r0) + y
                                    : reflect_index(r0 + static_cast<std::ptrdiff_t>(y), image.height);
    for (std::size_t x = 0; x < side; ++x) {
      const std::size_t sx = interior ? static_cast<std::size_t>(c0) + x
                                      : reflect_index(c0 + static_cast<std::ptrdiff_t>(x), image.width);
      const float* px = image.pixels.data() + (sy * image.width + sx) * 3;
      for (std::size_t ch = 0; ch < 3; ++ch) out[(ch * side + y) * side + x] = px[ch];
    }
  }
}

std::vector<float> extract_patch(const ImageRGB& image, std::size_t row, std::size_t col, std::size_t side) {
  std::vector<float> out(3 * side * side);
  extract_patch(image, row, col, side, out);
  return out;
}

PatchBatch gather_patches(std::span<const ImageRGB> images, std::span<const PatchCoord> coords, std::size_t side) {
  PatchBatch batch;
  batch.side = side;
  batch.coords.assign(coords.begin(), coords.end());
  batch.pixels.resize(coords.size() * 3 * side * side);
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const auto& c = coords[i];
    if (c.image >= images.size()) throw UsageError("gather_patches: image index out of range");
    extract_patch(images[c.image], c.row, c.col, side,
                  std::span<float>(batch.pixels).subspan(i * 3 * side * side, 3 * side * side));
  }
  return batch;
}

}  // namespace pbad
