#pragma once

// Synthetic scenes with one-to-many color ambiguity. Every shape class and the
// background have a fixed lightness L*, and each draws its chroma (a*, b*) from
// a palette whose entries all share that L*. The grayscale input therefore
// carries no information about which palette entry was drawn.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "askpaint/color.hpp"
#include "askpaint/errors.hpp"
#include "askpaint/tensor.hpp"

namespace askpaint {

struct Chroma {
  double a = 0, b = 0;
  friend bool operator==(const Chroma&, const Chroma&) = default;
};

enum class ShapeKind { Rectangle, Ellipse };

struct ShapeClass {
  ShapeKind kind = ShapeKind::Rectangle;
  double lightness = 50;
  std::vector<Chroma> palette;
};

struct SyntheticSceneSpec {
  int height = 32;
  int width = 32;
  int min_shapes = 2;
  int max_shapes = 4;
  int min_extent = 8;
  int max_extent = 14;
  int max_placement_attempts = 200;
  std::vector<ShapeClass> classes;
  ShapeClass background;
  std::uint64_t seed = 0;

  // A wide-palette rectangle class and a narrower ellipse class over a
  // near-neutral background.
  static SyntheticSceneSpec reference(int height = 32, int width = 32) {
    SyntheticSceneSpec s;
    s.height = height;
    s.width = width;
    s.background = {ShapeKind::Rectangle, 82.0, {{-6, 8}, {6, -8}}};
    s.classes = {
        {ShapeKind::Rectangle, 55.0, {{52, 30}, {-28, 48}, {0, -45}, {-25, -5}}},
        {ShapeKind::Ellipse, 40.0, {{30, 15}, {-15, 25}, {10, -25}}},
    };
    return s;
  }
};

inline void validate(const SyntheticSceneSpec& s) {
  if (s.height < 4 || s.width < 4) throw ValidationError("scene size too small");
  if (s.min_shapes < 0 || s.max_shapes < s.min_shapes) throw ValidationError("invalid shape count range");
  if (s.min_extent < 2 || s.max_extent < s.min_extent || s.max_extent > std::min(s.height, s.width))
    throw ValidationError("invalid shape extent range");
  if (s.max_shapes > 0 && s.classes.empty()) throw ValidationError("scene spec has no shape classes");
  auto check = [](const ShapeClass& c, const char* what) {
    if (c.palette.empty()) throw ValidationError(std::string(what) + " palette is empty");
    for (const auto& p : c.palette)
      if (!color::in_srgb_gamut({c.lightness, p.a, p.b}, 1e-3))
        throw ValidationError(std::string(what) + " palette entry outside the sRGB gamut");
  };
  check(s.background, "background");
  for (const auto& c : s.classes) check(c, "shape class");
}

// Model-space scene. `segmentation` holds 0 for background and 1..n for the
// n placed shapes; `shape_class` maps shape id -> class index (entry 0 = -1).
template <typename T>
struct SyntheticSample {
  Tensor<T> input;
  Tensor<T> target;
  std::vector<int> segmentation;  // HxW, row-major
  std::vector<int> shape_class;
  int height = 0;
  int width = 0;

  int label(int i, int j) const { return segmentation[static_cast<std::size_t>(i) * width + j]; }
};

namespace detail {

inline bool inside(ShapeKind kind, int top, int left, int h, int w, int i, int j) {
  if (i < top || i >= top + h || j < left || j >= left + w) return false;
  if (kind == ShapeKind::Rectangle) return true;
  const double cy = top + (h - 1) / 2.0, cx = left + (w - 1) / 2.0;
  const double ry = h / 2.0, rx = w / 2.0;
  const double dy = (i - cy) / ry, dx = (j - cx) / rx;
  return dy * dy + dx * dx <= 1.0;
}

inline double class_input(const ShapeClass& c, const ColorSpaceSpec& space) {
  if (space.mode == ColorMode::LabAB) return c.lightness / ColorSpaceSpec::kLOffset - 1.0;
  const Rgb8 gray = color::lab_to_srgb8({c.lightness, 0, 0});
  return space.encode_input(gray);
}

inline std::vector<double> class_target(const ShapeClass& c, const Chroma& chroma, const ColorSpaceSpec& space) {
  if (space.mode == ColorMode::LabAB) return {chroma.a / ColorSpaceSpec::kAbScale, chroma.b / ColorSpaceSpec::kAbScale};
  return space.encode_color(color::lab_to_srgb8({c.lightness, chroma.a, chroma.b}));
}

}  // namespace detail

namespace detail {

struct PlacedShape {
  int cls;
  Chroma chroma;
};

// Places one scene's shapes into `labels`. Returns false when some shape
// could not be placed within the attempt budget.
template <typename Rng>
bool place_shapes(const SyntheticSceneSpec& spec, Rng& rng, std::vector<int>& labels, std::vector<PlacedShape>& placed) {
  const int H = spec.height, W = spec.width;
  labels.assign(static_cast<std::size_t>(H) * W, 0);
  placed.clear();
  auto pick = [&rng](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };
  const int count = std::uniform_int_distribution<int>(spec.min_shapes, spec.max_shapes)(rng);
  for (int n = 0; n < count; ++n) {
    const int cls = static_cast<int>(pick(spec.classes.size()));
    const auto& sc = spec.classes[cls];
    bool ok = false;
    for (int attempt = 0; attempt < spec.max_placement_attempts && !ok; ++attempt) {
      const int h = std::uniform_int_distribution<int>(spec.min_extent, spec.max_extent)(rng);
      const int w = std::uniform_int_distribution<int>(spec.min_extent, spec.max_extent)(rng);
      const int top = std::uniform_int_distribution<int>(0, H - h)(rng);
      const int left = std::uniform_int_distribution<int>(0, W - w)(rng);
      // Keep one background pixel between shapes so same-class neighbours
      // stay separable in the grayscale input.
      ok = true;
      for (int i = std::max(0, top - 1); i < std::min(H, top + h + 1) && ok; ++i)
        for (int j = std::max(0, left - 1); j < std::min(W, left + w + 1) && ok; ++j) {
          bool near = false;
          for (int di = -1; di <= 1 && !near; ++di)
            for (int dj = -1; dj <= 1 && !near; ++dj) near = inside(sc.kind, top, left, h, w, i + di, j + dj);
          if (near && labels[static_cast<std::size_t>(i) * W + j] != 0) ok = false;
        }
      if (!ok) continue;
      const int id = static_cast<int>(placed.size()) + 1;
      for (int i = top; i < top + h; ++i)
        for (int j = left; j < left + w; ++j)
          if (inside(sc.kind, top, left, h, w, i, j)) labels[static_cast<std::size_t>(i) * W + j] = id;
    }
    if (!ok) return false;
    placed.push_back({cls, sc.palette[pick(sc.palette.size())]});
  }
  return true;
}

}  // namespace detail

inline constexpr int kMaxSceneAttempts = 50;

template <typename T, typename Rng>
SyntheticSample<T> generate_scene(const SyntheticSceneSpec& spec, const ColorSpaceSpec& space, Rng& rng) {
  const int H = spec.height, W = spec.width, K = space.color_channels();
  SyntheticSample<T> s;
  s.height = H;
  s.width = W;
  std::vector<detail::PlacedShape> placed;
  bool ok = false;
  for (int attempt = 0; attempt < kMaxSceneAttempts && !ok; ++attempt)
    ok = detail::place_shapes(spec, rng, s.segmentation, placed);
  if (!ok)
    throw GenerationError("could not place all shapes after " + std::to_string(kMaxSceneAttempts) + " scene attempts");
  s.shape_class.push_back(-1);
  for (const auto& p : placed) s.shape_class.push_back(p.cls);
  auto pick = [&rng](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };
  const Chroma bg = spec.background.palette[pick(spec.background.palette.size())];

  s.input = Tensor<T>(1, H, W);
  s.target = Tensor<T>(K, H, W);
  const double bg_in = detail::class_input(spec.background, space);
  const auto bg_out = detail::class_target(spec.background, bg, space);
  std::vector<double> in_by_id{bg_in};
  std::vector<std::vector<double>> out_by_id{bg_out};
  for (const auto& p : placed) {
    in_by_id.push_back(detail::class_input(spec.classes[p.cls], space));
    out_by_id.push_back(detail::class_target(spec.classes[p.cls], p.chroma, space));
  }
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      const int id = s.label(i, j);
      s.input.at(0, i, j) = static_cast<T>(in_by_id[id]);
      for (int k = 0; k < K; ++k) s.target.at(k, i, j) = static_cast<T>(out_by_id[id][k]);
    }
  return s;
}

template <typename T, typename Rng>
std::vector<SyntheticSample<T>> generate_synthetic_batch(const SyntheticSceneSpec& spec, const ColorSpaceSpec& space,
                                                         int batch_size, Rng& rng) {
  validate(spec);
  if (batch_size < 0) throw ValidationError("batch_size must be >= 0");
  std::vector<SyntheticSample<T>> out;
  out.reserve(batch_size);
  for (int b = 0; b < batch_size; ++b) out.push_back(generate_scene<T>(spec, space, rng));
  return out;
}

// Label raster for the dataset directory format: class ids in the red channel.
template <typename T>
Raster8 segmentation_raster(const SyntheticSample<T>& s) {
  Raster8 r(s.width, s.height, 3);
  for (int i = 0; i < s.height; ++i)
    for (int j = 0; j < s.width; ++j) r.at(i, j, 0) = static_cast<std::uint8_t>(s.label(i, j));
  return r;
}

inline void to_json(nlohmann::json& j, const ShapeClass& c) {
  nlohmann::json pal = nlohmann::json::array();
  for (const auto& p : c.palette) pal.push_back({p.a, p.b});
  j = {{"kind", c.kind == ShapeKind::Rectangle ? "rectangle" : "ellipse"}, {"lightness", c.lightness}, {"palette", pal}};
}

inline void from_json(const nlohmann::json& j, ShapeClass& c) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind != "rectangle" && kind != "ellipse") throw ValidationError("unknown shape kind " + kind);
  c.kind = kind == "rectangle" ? ShapeKind::Rectangle : ShapeKind::Ellipse;
  c.lightness = j.at("lightness").get<double>();
  c.palette.clear();
  for (const auto& p : j.at("palette")) c.palette.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
}

inline void to_json(nlohmann::json& j, const SyntheticSceneSpec& s) {
  j = {{"height", s.height},       {"width", s.width},           {"min_shapes", s.min_shapes},
       {"max_shapes", s.max_shapes}, {"min_extent", s.min_extent}, {"max_extent", s.max_extent},
       {"max_placement_attempts", s.max_placement_attempts},
       {"classes", s.classes},     {"background", s.background}, {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, SyntheticSceneSpec& s) {
  s = SyntheticSceneSpec::reference();
  s.height = j.value("height", s.height);
  s.width = j.value("width", s.width);
  s.min_shapes = j.value("min_shapes", s.min_shapes);
  s.max_shapes = j.value("max_shapes", s.max_shapes);
  s.min_extent = j.value("min_extent", s.min_extent);
  s.max_extent = j.value("max_extent", s.max_extent);
  s.max_placement_attempts = j.value("max_placement_attempts", s.max_placement_attempts);
  if (j.contains("classes")) s.classes = j.at("classes").get<std::vector<ShapeClass>>();
  if (j.contains("background")) s.background = j.at("background").get<ShapeClass>();
  s.seed = j.value("seed", s.seed);
}

}  // namespace askpaint
