#pragma once

// Episode strips: one column per forward pass. Top row shows each answer
// painted into its question region over the grayscale input, middle row the
// colorization after that pass, bottom row the question the pass emitted.

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "askpaint/color.hpp"
#include "askpaint/episode.hpp"

namespace askpaint {

template <typename T>
Raster8 heatmap_raster(const QuestionMap<T>& q) {
  Raster8 r(q.width(), q.height(), 1);
  for (int i = 0; i < q.height(); ++i)
    for (int j = 0; j < q.width(); ++j)
      r.at(i, j, 0) = static_cast<std::uint8_t>(std::clamp(std::lround(static_cast<double>(q(i, j)) * 255.0), 0L, 255L));
  return r;
}

template <typename T>
Raster8 grayscale_raster(const Tensor<T>& input, const ColorSpaceSpec& space) {
  Tensor<T> neutral(space.color_channels(), input.height(), input.width());
  if (space.mode == ColorMode::Rgb)
    for (int k = 0; k < 3; ++k)
      std::copy(input.channel(0).begin(), input.channel(0).end(), neutral.channel(k).begin());
  return from_model_space(neutral, input, space);
}

// Answer color blended over the grayscale input with the question as alpha.
template <typename T>
Raster8 answer_raster(const Tensor<T>& input, const QuestionMap<T>& q, const AnswerColor<T>& answer,
                      const ColorSpaceSpec& space) {
  Raster8 gray = grayscale_raster(input, space);
  Raster8 out = gray;
  for (int i = 0; i < input.height(); ++i)
    for (int j = 0; j < input.width(); ++j) {
      const Rgb8 swatch = space.decode_color(std::span<const T>(answer), static_cast<double>(input.at(0, i, j)));
      const double w = q(i, j);
      const Rgb8 g = gray.rgb(i, j);
      auto mix = [w](std::uint8_t a, std::uint8_t b) {
        return static_cast<std::uint8_t>(std::lround(w * a + (1.0 - w) * b));
      };
      out.set_rgb(i, j, {mix(swatch.r, g.r), mix(swatch.g, g.g), mix(swatch.b, g.b)});
    }
  return out;
}

inline void blit(Raster8& dst, const Raster8& src, int top, int left, int scale) {
  for (int i = 0; i < src.height * scale; ++i)
    for (int j = 0; j < src.width * scale; ++j) dst.set_rgb(top + i, left + j, src.rgb(i / scale, j / scale));
}

template <typename T>
Raster8 episode_montage(const EpisodeState<T>& s, const ColorSpaceSpec& space, int scale = 4, int gap = 2) {
  const int H = s.input_x.height(), W = s.input_x.width();
  const int cols = static_cast<int>(s.prediction_history.size());
  if (cols == 0) throw StateError("montage of an episode with no forward passes");
  const int cw = W * scale, ch = H * scale;
  Raster8 out(cols * cw + (cols + 1) * gap, 3 * ch + 4 * gap, 3, 255);
  const Raster8 gray = grayscale_raster(s.input_x, space);
  for (int t = 0; t < cols; ++t) {
    const int left = gap + t * (cw + gap);
    // Pass t consumed the answer to the question emitted by pass t-1.
    const auto it = std::find(s.answer_pass.begin(), s.answer_pass.end(), t);
    if (it == s.answer_pass.end()) {
      blit(out, gray, gap, left, scale);
    } else {
      const auto& a = s.answer_history[static_cast<std::size_t>(it - s.answer_pass.begin())];
      blit(out, answer_raster(s.input_x, s.question_history[t - 1], a, space), gap, left, scale);
    }
    blit(out, from_model_space(s.prediction_history[t], s.input_x, space), 2 * gap + ch, left, scale);
    blit(out, heatmap_raster(s.question_history[t]), 3 * gap + 2 * ch, left, scale);
  }
  return out;
}

inline int montage_columns(const Raster8& montage, int image_width, int scale = 4, int gap = 2) {
  return (montage.width - gap) / (image_width * scale + gap);
}

}  // namespace askpaint
