#include "pbad/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "pbad/error.hpp"

namespace fs = std::filesystem;

namespace pbad {

namespace {

void paint_grain(ImageRGB& img, Rng& rng) {
  const double pi2 = 2 * std::numbers::pi;
  const double angle = rng.uniform(-0.15, 0.15);
  const double period = rng.uniform(9.0, 14.0);
  const double warp_period = rng.uniform(40.0, 70.0);
  const double warp = rng.uniform(1.0, 2.5);
  const double phase = rng.uniform(0.0, pi2);
  const std::array<double, 3> base{0.58 + rng.uniform(-0.03, 0.03), 0.40 + rng.uniform(-0.03, 0.03),
                                   0.24 + rng.uniform(-0.02, 0.02)};
  const double ca = std::cos(angle), sa = std::sin(angle);
  for (std::size_t r = 0; r < img.height; ++r)
    for (std::size_t c = 0; c < img.width; ++c) {
      const double u = static_cast<double>(r) * ca - static_cast<double>(c) * sa;
      const double v = static_cast<double>(c);
      const double s = std::sin(pi2 * u / period + warp * std::sin(pi2 * v / warp_period) + phase);
      const double shade = 0.78 + 0.30 * (0.5 + 0.5 * s);
      for (std::size_t ch = 0; ch < 3; ++ch) img.at(r, c, ch) = static_cast<float>(base[ch] * shade + 0.015 * rng.normal());
    }
}

void paint_noise(ImageRGB& img, Rng& rng) {
  const std::size_t H = img.height, W = img.width;
  std::vector<double> field(H * W);
  for (auto& v : field) v = rng.normal();
  // two 3x3 box passes with reflected borders
  for (int pass = 0; pass < 2; ++pass) {
    std::vector<double> next(H * W);
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < W; ++c) {
        double s = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const std::size_t rr = std::min(H - 1, static_cast<std::size_t>(std::abs(static_cast<long>(r) + dy)));
            const std::size_t cc = std::min(W - 1, static_cast<std::size_t>(std::abs(static_cast<long>(c) + dx)));
            s += field[rr * W + cc];
          }
        next[r * W + c] = s / 9.0;
      }
    field.swap(next);
  }
  const std::array<double, 3> base{0.47 + rng.uniform(-0.02, 0.02), 0.44 + rng.uniform(-0.02, 0.02),
                                   0.40 + rng.uniform(-0.02, 0.02)};
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c)
      for (std::size_t ch = 0; ch < 3; ++ch) img.at(r, c, ch) = static_cast<float>(base[ch] + 0.25 * field[r * W + c]);
}

void paint_pixel(SynthSample& s, std::size_t r, std::size_t c, const DefectSpec& d) {
  for (std::size_t ch = 0; ch < 3; ++ch) {
    float& v = s.image.at(r, c, ch);
    v = static_cast<float>((1.0 - d.contrast) * v + d.contrast * d.tint[ch]);
  }
  s.mask.at(r, c) = 1;
}

void inject(SynthSample& s, const DefectSpec& d, Rng& rng) {
  const std::size_t H = s.image.height, W = s.image.width;
  const double size = d.min_size == d.max_size ? d.min_size : rng.uniform(d.min_size, d.max_size);
  if (d.shape == DefectShape::disk) {
    const auto reach = static_cast<std::size_t>(std::floor(size));
    if (2 * reach + 1 > std::min(H, W)) {
      throw UsageError("disk defect of radius " + std::to_string(size) + " does not fit the image");
    }
    const std::size_t cy = reach + static_cast<std::size_t>(rng.below(H - 2 * reach));
    const std::size_t cx = reach + static_cast<std::size_t>(rng.below(W - 2 * reach));
    const double r2 = size * size;
    for (std::size_t r = cy - reach; r <= cy + reach; ++r)
      for (std::size_t c = cx - reach; c <= cx + reach; ++c) {
        const double dy = static_cast<double>(r) - static_cast<double>(cy);
        const double dx = static_cast<double>(c) - static_cast<double>(cx);
        if (dy * dy + dx * dx <= r2) paint_pixel(s, r, c, d);
      }
    return;
  }
  // bar: length `size`, width size / 4 (at least 2), random orientation
  const double half_len = size / 2;
  const double half_w = std::max(1.0, size / 8);
  const auto reach = static_cast<std::size_t>(std::ceil(half_len));
  if (2 * reach + 1 > std::min(H, W)) {
    throw UsageError("bar defect of length " + std::to_string(size) + " does not fit the image");
  }
  const std::size_t cy = reach + static_cast<std::size_t>(rng.below(H - 2 * reach));
  const std::size_t cx = reach + static_cast<std::size_t>(rng.below(W - 2 * reach));
  const double angle = rng.uniform(0.0, std::numbers::pi);
  const double ca = std::cos(angle), sa = std::sin(angle);
  for (std::size_t r = cy - reach; r <= cy + reach; ++r)
    for (std::size_t c = cx - reach; c <= cx + reach; ++c) {
      const double dy = static_cast<double>(r) - static_cast<double>(cy);
      const double dx = static_cast<double>(c) - static_cast<double>(cx);
      const double along = dx * ca + dy * sa;
      const double across = -dx * sa + dy * ca;
      if (std::abs(along) <= half_len && std::abs(across) <= half_w) paint_pixel(s, r, c, d);
    }
}

}  // namespace

SynthSample synth_texture(const SynthSpec& spec, Rng& rng) {
  if (spec.height == 0 || spec.width == 0) throw UsageError("synth_texture: empty image size");
  SynthSample s{ImageRGB(spec.height, spec.width), GroundTruthMask(spec.height, spec.width)};
  if (spec.pattern == TexturePattern::grain) {
    paint_grain(s.image, rng);
  } else {
    paint_noise(s.image, rng);
  }
  for (auto& v : s.image.pixels) v = std::clamp(v, 0.0f, 1.0f);
  for (const auto& d : spec.defects)
    for (std::size_t i = 0; i < d.count; ++i) inject(s, d, rng);
  for (auto& v : s.image.pixels) v = std::clamp(v, 0.0f, 1.0f);
  return s;
}

TexturePattern parse_pattern(const std::string& name) {
  if (name == "grain") return TexturePattern::grain;
  if (name == "noise") return TexturePattern::noise;
  throw UsageError("unknown texture pattern '" + name + "' (expected grain or noise)");
}

DefectShape parse_shape(const std::string& name) {
  if (name == "disk") return DefectShape::disk;
  if (name == "bar") return DefectShape::bar;
  throw UsageError("unknown defect shape '" + name + "' (expected disk or bar)");
}

std::string to_string(DefectShape shape) { return shape == DefectShape::disk ? "disk" : "bar"; }

std::size_t write_synthetic_dataset(const fs::path& root, const std::string& category, const SynthDatasetSpec& spec,
                                    std::uint64_t seed) {
  const fs::path base = root / category;
  std::size_t written = 0;
  auto name = [](std::size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%03zu", i);
    return std::string(buf);
  };
  SynthSpec clean{spec.side, spec.side, spec.pattern, {}};
  std::uint64_t stream = 1;
  for (std::size_t i = 0; i < spec.train; ++i) {
    Rng rng(seed, stream++);
    write_png(base / "train" / "good" / (name(i) + ".png"), synth_texture(clean, rng).image);
    ++written;
  }
  for (std::size_t i = 0; i < spec.test_good; ++i) {
    Rng rng(seed, stream++);
    write_png(base / "test" / "good" / (name(i) + ".png"), synth_texture(clean, rng).image);
    ++written;
  }
  for (const auto shape : spec.defect_types) {
    DefectSpec d;
    d.count = 1;
    d.shape = shape;
    d.contrast = spec.contrast;
    if (shape == DefectShape::bar) {
      d.min_size = 14;
      d.max_size = 24;
    }
    SynthSpec defective{spec.side, spec.side, spec.pattern, {d}};
    const std::string type = to_string(shape);
    for (std::size_t i = 0; i < spec.test_defect; ++i) {
      Rng rng(seed, stream++);
      auto sample = synth_texture(defective, rng);
      write_png(base / "test" / type / (name(i) + ".png"), sample.image);
      write_mask_png(base / "ground_truth" / type / (name(i) + "_mask.png"), sample.mask);
      written += 2;
    }
  }
  return written;
}

}  // namespace pbad
