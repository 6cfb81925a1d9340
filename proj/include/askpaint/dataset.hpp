#pragma once

// Dataset directories: color PNGs at the top level, optional label PNGs of the
// same name under seg/ (shape id in the red channel, 0 = background), and an
// optional scene.json describing how a synthetic set was generated.

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <memory>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "askpaint/color.hpp"
#include "askpaint/errors.hpp"
#include "askpaint/evaluator.hpp"
#include "askpaint/image_io.hpp"
#include "askpaint/synthetic.hpp"
#include "askpaint/trainer.hpp"

namespace askpaint {

namespace fs = std::filesystem;

inline std::vector<fs::path> list_pngs(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw NotFoundError("dataset directory " + dir.string() + " does not exist");
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

// Loads every image, center-cropped and resized to height x width when needed.
template <typename T>
std::vector<EvalSample<T>> load_dataset(const fs::path& dir, int height, int width, const ColorSpaceSpec& space) {
  std::vector<EvalSample<T>> out;
  for (const auto& path : list_pngs(dir)) {
    Raster8 img = read_png(path);
    if (img.width != width || img.height != height) img = center_crop_resize(img, width, height);
    auto ms = to_model_space<T>(img, space);
    EvalSample<T> s{std::move(ms.input), std::move(ms.target), {}, path.filename().string()};
    const fs::path seg = dir / "seg" / path.filename();
    if (fs::is_regular_file(seg)) {
      Raster8 lab = read_png(seg);
      if (lab.width != width || lab.height != height) lab = center_crop_resize(lab, width, height);
      s.segmentation.resize(static_cast<std::size_t>(height) * width);
      for (int i = 0; i < height; ++i)
        for (int j = 0; j < width; ++j) s.segmentation[static_cast<std::size_t>(i) * width + j] = lab.at(i, j, 0);
    }
    out.push_back(std::move(s));
  }
  if (out.empty()) throw ValidationError("dataset directory " + dir.string() + " holds no PNG images");
  return out;
}

// Training batches drawn uniformly with replacement from a loaded dataset.
template <typename T>
BatchSource<T> dataset_batches(std::vector<EvalSample<T>> samples, std::uint64_t seed) {
  if (samples.empty()) throw ValidationError("empty dataset");
  auto data = std::make_shared<std::vector<EvalSample<T>>>(std::move(samples));
  return [data, seed](std::int64_t step, int batch_size) {
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(step), 0xda7a));
    std::uniform_int_distribution<std::size_t> pick(0, data->size() - 1);
    std::vector<TrainingSample<T>> out;
    for (int b = 0; b < batch_size; ++b) {
      const auto& s = (*data)[pick(rng)];
      out.push_back({s.input, s.target});
    }
    return out;
  };
}

// Writes `count` synthetic scenes as a dataset directory.
inline void write_synthetic_dataset(const fs::path& dir, const SyntheticSceneSpec& spec, int count) {
  validate(spec);
  if (count < 1) throw ValidationError("count must be >= 1");
  fs::create_directories(dir / "seg");
  const ColorSpaceSpec space{ColorMode::LabAB};
  std::mt19937_64 rng(spec.seed);
  for (int n = 0; n < count; ++n) {
    const auto s = generate_scene<double>(spec, space, rng);
    char name[32];
    std::snprintf(name, sizeof name, "scene_%05d.png", n);
    write_png(dir / name, from_model_space(s.target, s.input, space));
    write_png(dir / "seg" / name, segmentation_raster(s));
  }
  std::ofstream(dir / "scene.json") << nlohmann::json(spec).dump(2) << "\n";
}

}  // namespace askpaint
