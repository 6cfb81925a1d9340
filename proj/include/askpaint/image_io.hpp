#pragma once

// PNG encode/decode through libpng's simplified API.

#include <png.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "askpaint/color.hpp"
#include "askpaint/errors.hpp"

namespace askpaint {

class ImageDecodeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

namespace detail {

inline Raster8 finish_png_read(png_image& image, const char* what) {
  if (image.format & PNG_FORMAT_FLAG_LINEAR) {
    png_image_free(&image);
    throw ValidationError(std::string(what) + ": unsupported bit depth 16");
  }
  const bool gray = !(image.format & PNG_FORMAT_FLAG_COLOR);
  image.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Raster8 out(static_cast<int>(image.width), static_cast<int>(image.height), gray ? 1 : 3);
  if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw ImageDecodeError(std::string(what) + ": " + msg);
  }
  return out;
}

inline png_image png_descriptor(const Raster8& r) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(r.width);
  image.height = static_cast<png_uint_32>(r.height);
  image.format = r.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  return image;
}

}  // namespace detail

inline Raster8 decode_png(const std::vector<std::uint8_t>& bytes) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (bytes.empty() || !png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
    throw ImageDecodeError(std::string("cannot decode PNG: ") + (bytes.empty() ? "empty buffer" : image.message));
  return detail::finish_png_read(image, "decode_png");
}

inline Raster8 read_png(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open image " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_png(bytes);
  } catch (const ImageDecodeError& e) {
    throw ImageDecodeError(path.string() + ": " + e.what());
  }
}

inline std::vector<std::uint8_t> encode_png(const Raster8& r) {
  if (r.channels != 1 && r.channels != 3) throw ValidationError("encode_png: 1 or 3 channels required");
  png_image image = detail::png_descriptor(r);
  png_alloc_size_t size = 0;
  if (!png_image_write_get_memory_size(image, size, 0, r.pixels.data(), 0, nullptr))
    throw std::runtime_error(std::string("encode_png: ") + image.message);
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, r.pixels.data(), 0, nullptr))
    throw std::runtime_error(std::string("encode_png: ") + image.message);
  out.resize(size);
  return out;
}

inline void write_png(const std::filesystem::path& path, const Raster8& r) {
  const auto bytes = encode_png(r);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to " + path.string());
}

// Nearest-neighbour resize followed by a centered crop to the target aspect.
inline Raster8 center_crop_resize(const Raster8& src, int width, int height) {
  const double scale = std::max(static_cast<double>(width) / src.width, static_cast<double>(height) / src.height);
  const double off_x = (src.width * scale - width) / 2.0;
  const double off_y = (src.height * scale - height) / 2.0;
  Raster8 out(width, height, src.channels);
  for (int i = 0; i < height; ++i)
    for (int j = 0; j < width; ++j) {
      const int si = std::min(src.height - 1, static_cast<int>((i + 0.5 + off_y) / scale));
      const int sj = std::min(src.width - 1, static_cast<int>((j + 0.5 + off_x) / scale));
      for (int c = 0; c < src.channels; ++c) out.at(i, j, c) = src.at(si, sj, c);
    }
  return out;
}

}  // namespace askpaint
