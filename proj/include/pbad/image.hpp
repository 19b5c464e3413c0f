#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace pbad {

/// H × W × 3 interleaved, values in [0, 1].
struct ImageRGB {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  ImageRGB() = default;
  ImageRGB(std::size_t h, std::size_t w, float fill = 0.0f) : height(h), width(w), pixels(h * w * 3, fill) {}

  float& at(std::size_t row, std::size_t col, std::size_t ch) { return pixels[(row * width + col) * 3 + ch]; }
  float at(std::size_t row, std::size_t col, std::size_t ch) const { return pixels[(row * width + col) * 3 + ch]; }
};

/// H × W, 1 = anomalous pixel.
struct GroundTruthMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> labels;

  GroundTruthMask() = default;
  GroundTruthMask(std::size_t h, std::size_t w) : height(h), width(w), labels(h * w, 0) {}

  std::uint8_t& at(std::size_t row, std::size_t col) { return labels[row * width + col]; }
  std::uint8_t at(std::size_t row, std::size_t col) const { return labels[row * width + col]; }
  std::size_t count() const;
};

/// Reads an 8- or 16-bit gray/RGB(A)/palette PNG. Gray is replicated to three
/// channels, alpha dropped; 8-bit value v becomes v / 255.
ImageRGB load_image(const std::filesystem::path& path);
/// Any nonzero sample marks the pixel anomalous.
GroundTruthMask load_mask(const std::filesystem::path& path);

void write_png(const std::filesystem::path& path, const ImageRGB& image, int bit_depth = 8);
void write_mask_png(const std::filesystem::path& path, const GroundTruthMask& mask);
/// Single-channel PNG from samples already scaled to [0, 1].
void write_gray_png(const std::filesystem::path& path, std::size_t height, std::size_t width,
                    std::span<const float> values, int bit_depth);

}  // namespace pbad
