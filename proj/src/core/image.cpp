#include "pbad/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <memory>

#include "pbad/error.hpp"

namespace pbad {

std::size_t GroundTruthMask::count() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), std::uint8_t{1}));
}

namespace {

struct MemoryReader {
  const std::vector<unsigned char>* bytes;
  std::size_t offset;
};

void read_from_memory(png_structp png, png_bytep out, png_size_t count) {
  auto* reader = static_cast<MemoryReader*>(png_get_io_ptr(png));
  if (reader->offset + count > reader->bytes->size()) png_error(png, "unexpected end of data");
  std::memcpy(out, reader->bytes->data() + reader->offset, count);
  reader->offset += count;
}

struct Decoded {
  std::size_t height = 0, width = 0, channels = 0;
  int bit_depth = 0;
  std::vector<unsigned char> rows;  // packed, big-endian samples for 16-bit
};

// Returns false on any libpng error; no C++ objects are created between
// setjmp and the libpng calls.
bool decode_png(const std::vector<unsigned char>& bytes, Decoded& out, char* message, std::size_t message_size) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) {
    std::snprintf(message, message_size, "not a PNG file");
    return false;
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::snprintf(message, message_size, "libpng initialisation failed");
    return false;
  }
  MemoryReader reader{&bytes, 0};
  std::vector<png_bytep> row_ptrs;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::snprintf(message, message_size, "corrupt PNG data");
    return false;
  }
  png_set_read_fn(png, &reader, read_from_memory);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  out.width = png_get_image_width(png, info);
  out.height = png_get_image_height(png, info);
  out.channels = png_get_channels(png, info);
  out.bit_depth = png_get_bit_depth(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  out.rows.resize(stride * out.height);
  row_ptrs.resize(out.height);
  for (std::size_t r = 0; r < out.height; ++r) row_ptrs[r] = out.rows.data() + r * stride;
  png_read_image(png, row_ptrs.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return true;
}

Decoded read_png_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image '" + path.string() + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Decoded decoded;
  char message[128] = {0};
  if (!decode_png(bytes, decoded, message, sizeof message)) {
    throw DataError("cannot decode image '" + path.string() + "': " + message);
  }
  if (decoded.channels != 1 && decoded.channels != 3) {
    throw DataError("unsupported channel layout in '" + path.string() + "'");
  }
  return decoded;
}

double sample_at(const Decoded& d, std::size_t row, std::size_t col, std::size_t ch) {
  const std::size_t stride = d.width * d.channels * (d.bit_depth == 16 ? 2 : 1);
  const unsigned char* r = d.rows.data() + row * stride;
  const std::size_t k = col * d.channels + ch;
  if (d.bit_depth == 16) return static_cast<double>((r[2 * k] << 8) | r[2 * k + 1]) / 65535.0;
  return static_cast<double>(r[k]) / 255.0;
}

bool encode_png(std::FILE* fp, std::size_t height, std::size_t width, int channels, int bit_depth,
                const std::vector<unsigned char>& rows) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  std::vector<png_bytep> row_ptrs(height);
  const std::size_t stride = width * static_cast<std::size_t>(channels) * (bit_depth == 16 ? 2 : 1);
  for (std::size_t r = 0; r < height; ++r) row_ptrs[r] = const_cast<png_bytep>(rows.data() + r * stride);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth,
               channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, row_ptrs.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

void write_png_raw(const std::filesystem::path& path, std::size_t height, std::size_t width, int channels,
                   int bit_depth, const std::vector<unsigned char>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw DataError("cannot write image '" + path.string() + "'");
  const bool ok = encode_png(fp, height, width, channels, bit_depth, rows);
  std::fclose(fp);
  if (!ok) throw DataError("failed to encode PNG '" + path.string() + "'");
}

void put_sample(std::vector<unsigned char>& rows, std::size_t k, double v, int bit_depth) {
  v = std::clamp(v, 0.0, 1.0);
  if (bit_depth == 16) {
    const auto q = static_cast<unsigned>(std::lround(v * 65535.0));
    rows[2 * k] = static_cast<unsigned char>(q >> 8);
    rows[2 * k + 1] = static_cast<unsigned char>(q & 0xFF);
  } else {
    rows[k] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
}

void check_depth(int bit_depth) {
  if (bit_depth != 8 && bit_depth != 16) throw UsageError("PNG bit depth must be 8 or 16");
}

}  // namespace

ImageRGB load_image(const std::filesystem::path& path) {
  const Decoded d = read_png_file(path);
  ImageRGB image(d.height, d.width);
  for (std::size_t r = 0; r < d.height; ++r)
    for (std::size_t c = 0; c < d.width; ++c)
      for (std::size_t ch = 0; ch < 3; ++ch)
        image.at(r, c, ch) = static_cast<float>(sample_at(d, r, c, d.channels == 1 ? 0 : ch));
  return image;
}

GroundTruthMask load_mask(const std::filesystem::path& path) {
  const Decoded d = read_png_file(path);
  GroundTruthMask mask(d.height, d.width);
  for (std::size_t r = 0; r < d.height; ++r)
    for (std::size_t c = 0; c < d.width; ++c) {
      bool any = false;
      for (std::size_t ch = 0; ch < d.channels; ++ch) any = any || sample_at(d, r, c, ch) > 0.0;
      mask.at(r, c) = any ? 1 : 0;
    }
  return mask;
}

void write_png(const std::filesystem::path& path, const ImageRGB& image, int bit_depth) {
  check_depth(bit_depth);
  std::vector<unsigned char> rows(image.pixels.size() * (bit_depth == 16 ? 2 : 1));
  for (std::size_t k = 0; k < image.pixels.size(); ++k) put_sample(rows, k, image.pixels[k], bit_depth);
  write_png_raw(path, image.height, image.width, 3, bit_depth, rows);
}

void write_mask_png(const std::filesystem::path& path, const GroundTruthMask& mask) {
  std::vector<unsigned char> rows(mask.labels.size());
  for (std::size_t k = 0; k < rows.size(); ++k) rows[k] = mask.labels[k] ? 255 : 0;
  write_png_raw(path, mask.height, mask.width, 1, 8, rows);
}

void write_gray_png(const std::filesystem::path& path, std::size_t height, std::size_t width,
                    std::span<const float> values, int bit_depth) {
  check_depth(bit_depth);
  if (values.size() != height * width) throw UsageError("write_gray_png: value count does not match size");
  std::vector<unsigned char> rows(values.size() * (bit_depth == 16 ? 2 : 1));
  for (std::size_t k = 0; k < values.size(); ++k) put_sample(rows, k, values[k], bit_depth);
  write_png_raw(path, height, width, 1, bit_depth, rows);
}

}  // namespace pbad
