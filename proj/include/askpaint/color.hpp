#pragma once

// sRGB <-> CIELAB (D65, 2 degree observer) and the model-space encodings used
// by the colorizer.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "askpaint/errors.hpp"
#include "askpaint/tensor.hpp"

namespace askpaint {

struct Lab {
  double L = 0, a = 0, b = 0;
};

struct Rgb8 {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb8&, const Rgb8&) = default;
};

namespace color {

// D65 white as the image of sRGB (1, 1, 1), so white maps to L = 100, a = b = 0
// without rounding residue.
inline constexpr double kWhiteX = 0.4124564 + 0.3575761 + 0.1804375;
inline constexpr double kWhiteY = 0.2126729 + 0.7151522 + 0.0721750;
inline constexpr double kWhiteZ = 0.0193339 + 0.1191920 + 0.9503041;

inline double srgb_to_linear(double c) {
  return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
}

inline double linear_to_srgb(double c) {
  return c <= 0.0031308 ? 12.92 * c : 1.055 * std::pow(c, 1.0 / 2.4) - 0.055;
}

inline double lab_f(double t) {
  constexpr double d = 6.0 / 29.0;
  return t > d * d * d ? std::cbrt(t) : t / (3 * d * d) + 4.0 / 29.0;
}

inline double lab_f_inv(double t) {
  constexpr double d = 6.0 / 29.0;
  return t > d ? t * t * t : 3 * d * d * (t - 4.0 / 29.0);
}

// Components in [0, 1].
inline Lab srgb_to_lab(double r, double g, double b) {
  const double lr = srgb_to_linear(r), lg = srgb_to_linear(g), lb = srgb_to_linear(b);
  const double x = 0.4124564 * lr + 0.3575761 * lg + 0.1804375 * lb;
  const double y = 0.2126729 * lr + 0.7151522 * lg + 0.0721750 * lb;
  const double z = 0.0193339 * lr + 0.1191920 * lg + 0.9503041 * lb;
  const double fx = lab_f(x / kWhiteX), fy = lab_f(y / kWhiteY), fz = lab_f(z / kWhiteZ);
  return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

inline Lab srgb8_to_lab(Rgb8 c) { return srgb_to_lab(c.r / 255.0, c.g / 255.0, c.b / 255.0); }

// Gamma-encoded sRGB components; values outside [0, 1] mean out of gamut.
inline std::array<double, 3> lab_to_srgb(const Lab& lab) {
  const double fy = (lab.L + 16.0) / 116.0;
  const double fx = fy + lab.a / 500.0;
  const double fz = fy - lab.b / 200.0;
  const double x = kWhiteX * lab_f_inv(fx), y = kWhiteY * lab_f_inv(fy), z = kWhiteZ * lab_f_inv(fz);
  const double lr = 3.2404542 * x - 1.5371385 * y - 0.4985314 * z;
  const double lg = -0.9692660 * x + 1.8760108 * y + 0.0415560 * z;
  const double lb = 0.0556434 * x - 0.2040259 * y + 1.0572252 * z;
  return {linear_to_srgb(lr), linear_to_srgb(lg), linear_to_srgb(lb)};
}

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0), 0L, 255L));
}

inline Rgb8 lab_to_srgb8(const Lab& lab) {
  // Out-of-gamut linear values go negative; pow() on them is NaN, so clip
  // in linear light first.
  const double fy = (lab.L + 16.0) / 116.0;
  const double fx = fy + lab.a / 500.0;
  const double fz = fy - lab.b / 200.0;
  const double x = kWhiteX * lab_f_inv(fx), y = kWhiteY * lab_f_inv(fy), z = kWhiteZ * lab_f_inv(fz);
  auto enc = [](double lin) { return to_byte(linear_to_srgb(std::clamp(lin, 0.0, 1.0))); };
  return {enc(3.2404542 * x - 1.5371385 * y - 0.4985314 * z),
          enc(-0.9692660 * x + 1.8760108 * y + 0.0415560 * z),
          enc(0.0556434 * x - 0.2040259 * y + 1.0572252 * z)};
}

inline bool in_srgb_gamut(const Lab& lab, double tol = 1e-6) {
  const auto rgb = lab_to_srgb(lab);
  return std::all_of(rgb.begin(), rgb.end(), [tol](double v) { return v >= -tol && v <= 1 + tol; });
}

}  // namespace color

// 8-bit raster, interleaved channels (1 = gray, 3 = RGB).
struct Raster8 {
  int width = 0;
  int height = 0;
  int channels = 3;
  int bit_depth = 8;
  std::vector<std::uint8_t> pixels;

  Raster8() = default;
  Raster8(int w, int h, int c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), pixels(static_cast<std::size_t>(w) * h * c, fill) {}

  std::uint8_t& at(int i, int j, int c) { return pixels[(static_cast<std::size_t>(i) * width + j) * channels + c]; }
  std::uint8_t at(int i, int j, int c) const {
    return pixels[(static_cast<std::size_t>(i) * width + j) * channels + c];
  }
  Rgb8 rgb(int i, int j) const {
    if (channels == 1) return {at(i, j, 0), at(i, j, 0), at(i, j, 0)};
    return {at(i, j, 0), at(i, j, 1), at(i, j, 2)};
  }
  void set_rgb(int i, int j, Rgb8 v) {
    at(i, j, 0) = v.r;
    at(i, j, 1) = v.g;
    at(i, j, 2) = v.b;
  }
  friend bool operator==(const Raster8&, const Raster8&) = default;
};

enum class ColorMode { LabAB, Rgb };

inline std::string to_string(ColorMode m) { return m == ColorMode::LabAB ? "lab_ab" : "rgb"; }

inline ColorMode parse_color_mode(const std::string& s) {
  if (s == "lab_ab" || s == "LAB_AB" || s == "lab") return ColorMode::LabAB;
  if (s == "rgb" || s == "RGB") return ColorMode::Rgb;
  throw ValidationError("unknown color space '" + s + "' (expected lab_ab or rgb)");
}

// Model space: every channel is affinely mapped to roughly [-1, 1].
//   LabAB: input L/50 - 1, targets a*/110 and b*/110.
//   Rgb:   input luma/127.5 - 1, targets channel/127.5 - 1.
struct ColorSpaceSpec {
  ColorMode mode = ColorMode::LabAB;

  static constexpr double kAbScale = 110.0;
  static constexpr double kLOffset = 50.0;
  static constexpr double kRgbHalf = 127.5;
  static constexpr double kMin = -1.0;
  static constexpr double kMax = 1.0;

  int color_channels() const { return mode == ColorMode::LabAB ? 2 : 3; }
  int input_channels() const { return 1; }

  std::string input_description() const {
    return mode == ColorMode::LabAB ? "grayscale L channel" : "grayscale/outline luma";
  }

  // Model-space encoding of a single display color.
  std::vector<double> encode_color(Rgb8 c) const {
    if (mode == ColorMode::LabAB) {
      const Lab lab = color::srgb8_to_lab(c);
      return {lab.a / kAbScale, lab.b / kAbScale};
    }
    return {c.r / kRgbHalf - 1.0, c.g / kRgbHalf - 1.0, c.b / kRgbHalf - 1.0};
  }

  double encode_input(Rgb8 c) const {
    if (mode == ColorMode::LabAB) return color::srgb8_to_lab(c).L / kLOffset - 1.0;
    return (0.299 * c.r + 0.587 * c.g + 0.114 * c.b) / kRgbHalf - 1.0;
  }

  // Display color of a model-space color at a pixel with the given input value.
  template <typename T>
  Rgb8 decode_color(std::span<const T> channels, double input_value) const {
    if (mode == ColorMode::LabAB)
      return color::lab_to_srgb8(
          {(input_value + 1.0) * kLOffset, channels[0] * kAbScale, channels[1] * kAbScale});
    auto byte = [](double v) {
      return static_cast<std::uint8_t>(std::clamp(std::lround((v + 1.0) * kRgbHalf), 0L, 255L));
    };
    return {byte(channels[0]), byte(channels[1]), byte(channels[2])};
  }
};

template <typename T>
struct ModelSpaceImage {
  Tensor<T> input;   // 1xHxW
  Tensor<T> target;  // KxHxW
};

template <typename T = float>
ModelSpaceImage<T> to_model_space(const Raster8& image, const ColorSpaceSpec& spec) {
  if (image.bit_depth != 8) throw ValidationError("unsupported bit depth " + std::to_string(image.bit_depth));
  if (image.channels != 1 && image.channels != 3)
    throw ValidationError("unsupported channel count " + std::to_string(image.channels));
  if (image.pixels.size() != static_cast<std::size_t>(image.width) * image.height * image.channels)
    throw ValidationError("raster buffer size mismatch");
  const int K = spec.color_channels();
  ModelSpaceImage<T> out{Tensor<T>(1, image.height, image.width), Tensor<T>(K, image.height, image.width)};
  for (int i = 0; i < image.height; ++i)
    for (int j = 0; j < image.width; ++j) {
      const Rgb8 c = image.rgb(i, j);
      out.input.at(0, i, j) = static_cast<T>(spec.encode_input(c));
      const auto enc = spec.encode_color(c);
      for (int k = 0; k < K; ++k) out.target.at(k, i, j) = static_cast<T>(enc[k]);
    }
  return out;
}

// LabAB recombines the predicted a*b* with the L carried by `input`.
template <typename T>
Raster8 from_model_space(const Tensor<T>& prediction, const Tensor<T>& input, const ColorSpaceSpec& spec) {
  if (prediction.channels() != spec.color_channels())
    throw ValidationError("prediction has " + std::to_string(prediction.channels()) + " channels, color space needs " +
                          std::to_string(spec.color_channels()));
  if (input.channels() != 1 || input.height() != prediction.height() || input.width() != prediction.width())
    throw ValidationError("input/prediction size mismatch");
  const int H = prediction.height(), W = prediction.width(), K = prediction.channels();
  Raster8 out(W, H, 3);
  std::array<T, 3> px{};
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      for (int k = 0; k < K; ++k) px[k] = prediction.at(k, i, j);
      out.set_rgb(i, j, spec.decode_color(std::span<const T>(px.data(), K), input.at(0, i, j)));
    }
  return out;
}

}  // namespace askpaint
