#pragma once

// The answer function: a question is a soft [0,1] mask over the image and its
// answer is the mask-weighted mean ground-truth color,
//
//   answer_k = sum_ij q_ij * y_ijk / (sum_ij q_ij + eps).
//
// The answer is broadcast back to image shape as hint_ijk = q_ij * answer_k.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "askpaint/autodiff.hpp"
#include "askpaint/color.hpp"
#include "askpaint/errors.hpp"
#include "askpaint/tensor.hpp"

namespace askpaint {

inline constexpr double kAnswerEpsilon = 1e-8;

template <typename T>
class QuestionMap {
 public:
  QuestionMap() = default;
  QuestionMap(int height, int width) : values_(1, height, width) {}
  explicit QuestionMap(Tensor<T> values) : values_(std::move(values)) { validate(); }

  static QuestionMap zeros(int height, int width) { return QuestionMap(height, width); }

  const Tensor<T>& values() const { return values_; }
  int height() const { return values_.height(); }
  int width() const { return values_.width(); }
  T operator()(int i, int j) const { return values_.at(0, i, j); }
  T mass() const {
    T m = 0;
    for (T v : values_.vec()) m += v;
    return m;
  }
  friend bool operator==(const QuestionMap&, const QuestionMap&) = default;

 private:
  void validate() const {
    if (values_.channels() != 1) throw ValidationError("question map must have one channel");
    for (T v : values_.vec())
      if (!std::isfinite(v) || v < T(0) || v > T(1)) throw ValidationError("question map entries must lie in [0,1]");
  }

  Tensor<T> values_;
};

template <typename T>
using AnswerColor = std::vector<T>;

template <typename T>
struct Answer {
  AnswerColor<T> color;
  // The question's total mass was below epsilon; the answer is ~0.
  bool degenerate_mask = false;
};

struct NoiseConfig {
  bool enabled = false;
  double sigma = 0.05;
  std::uint64_t seed = 0;

  bool active() const { return enabled && sigma > 0.0; }
};

inline void validate(const NoiseConfig& n) {
  if (!(n.sigma >= 0.0) || !std::isfinite(n.sigma)) throw ValidationError("noise sigma must be finite and >= 0");
}

// Graph-level answer: the differentiable path used during training.
template <typename T>
ad::Var answer_node(ad::Graph<T>& g, ad::Var question, ad::Var target, T eps = T(kAnswerEpsilon)) {
  return ad::masked_mean(g, question, target, eps);
}

template <typename T>
Answer<T> compute_answer(const QuestionMap<T>& question, const Tensor<T>& target_colors, T eps = T(kAnswerEpsilon)) {
  if (question.height() != target_colors.height() || question.width() != target_colors.width())
    throw ValidationError("compute_answer: question " + question.values().shape().str() + " vs target " +
                          target_colors.shape().str());
  if (!(eps > T(0))) throw ValidationError("compute_answer: epsilon must be positive");
  ad::Graph<T> g(false);
  const auto a = answer_node(g, g.constant(question.values()), g.constant(target_colors), eps);
  const auto& v = g.value(a).vec();
  return {AnswerColor<T>(v.begin(), v.end()), question.mass() < eps};
}

// Gaussian perturbation in model space, clamped to the valid color range.
template <typename T, typename Rng>
AnswerColor<T> perturb_answer(const AnswerColor<T>& answer, const NoiseConfig& noise, Rng& rng) {
  validate(noise);
  if (!noise.active()) return answer;
  std::normal_distribution<double> dist(0.0, noise.sigma);
  AnswerColor<T> out(answer.size());
  for (std::size_t k = 0; k < answer.size(); ++k)
    out[k] = static_cast<T>(std::clamp(static_cast<double>(answer[k]) + dist(rng), ColorSpaceSpec::kMin,
                                       ColorSpaceSpec::kMax));
  return out;
}

template <typename T>
Tensor<T> broadcast_hint(const QuestionMap<T>& question, const AnswerColor<T>& answer) {
  ad::Graph<T> g(false);
  Tensor<T> a(static_cast<int>(answer.size()), 1, 1);
  std::copy(answer.begin(), answer.end(), a.vec().begin());
  return g.value(ad::broadcast(g, g.constant(question.values()), g.constant(std::move(a))));
}

}  // namespace askpaint
