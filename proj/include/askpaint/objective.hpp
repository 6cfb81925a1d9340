#pragma once

// Training objective:
//   total = reg + lambda_seg * seg
//   reg   = (1/HW) sum_ij sum_k (pred - target)^2      on the final prediction
//   seg   = sum_t (1/HW) sum_ij |q[i][j]-q[i-1][j]| + |q[i][j]-q[i][j-1]|
// with neighbour differences taken only where both pixels are in bounds.

#include <span>
#include <vector>

#include "askpaint/answer_oracle.hpp"
#include "askpaint/autodiff.hpp"
#include "askpaint/errors.hpp"

namespace askpaint {

inline constexpr double kDefaultLambdaSeg = 0.01;

struct LossBreakdown {
  double reg_loss = 0;
  double seg_loss = 0;
  double lambda_seg = 0;
  double total = 0;
};

namespace objective {

template <typename T>
ad::Var reg_loss(ad::Graph<T>& g, ad::Var prediction, ad::Var target) {
  return ad::sum_sq_error_per_pixel(g, prediction, target);
}

template <typename T>
ad::Var smooth_loss(ad::Graph<T>& g, std::span<const ad::Var> questions) {
  if (questions.empty()) return g.constant(Tensor<T>(1, 1, 1));
  const Shape s = g.value(questions.front()).shape();
  ad::Var acc{};
  for (ad::Var q : questions) {
    if (g.value(q).shape() != s) throw ValidationError("smooth_loss: question maps differ in shape");
    const ad::Var tv = ad::total_variation(g, q);
    acc = acc.valid() ? ad::add(g, acc, tv) : tv;
  }
  return acc;
}

struct LossNodes {
  ad::Var reg;
  ad::Var seg;
  ad::Var total;
};

template <typename T>
LossNodes total_loss(ad::Graph<T>& g, ad::Var prediction, ad::Var target, std::span<const ad::Var> questions,
                     T lambda_seg) {
  if (!(lambda_seg >= T(0))) throw ValidationError("lambda_seg must be nonnegative");
  const ad::Var reg = reg_loss(g, prediction, target);
  const ad::Var seg = smooth_loss(g, questions);
  const ad::Var total = ad::add(g, reg, ad::scale(g, seg, lambda_seg));
  return {reg, seg, total};
}

template <typename T>
LossBreakdown breakdown(const ad::Graph<T>& g, const LossNodes& n, T lambda_seg) {
  LossBreakdown b;
  b.reg_loss = static_cast<double>(g.value(n.reg)[0]);
  b.seg_loss = static_cast<double>(g.value(n.seg)[0]);
  b.lambda_seg = static_cast<double>(lambda_seg);
  b.total = b.reg_loss + b.lambda_seg * b.seg_loss;
  return b;
}

}  // namespace objective

// Value-level entry points.

template <typename T>
T reg_loss(const Tensor<T>& prediction, const Tensor<T>& target) {
  ad::Graph<T> g(false);
  return g.value(objective::reg_loss(g, g.constant(prediction), g.constant(target)))[0];
}

template <typename T>
T smooth_loss(std::span<const QuestionMap<T>> questions) {
  ad::Graph<T> g(false);
  std::vector<ad::Var> vars;
  for (const auto& q : questions) vars.push_back(g.constant(q.values()));
  return g.value(objective::smooth_loss<T>(g, vars))[0];
}

template <typename T>
LossBreakdown total_loss(const Tensor<T>& prediction, const Tensor<T>& target,
                         std::span<const QuestionMap<T>> questions, T lambda_seg) {
  ad::Graph<T> g(false);
  std::vector<ad::Var> vars;
  for (const auto& q : questions) vars.push_back(g.constant(q.values()));
  const auto n = objective::total_loss<T>(g, g.constant(prediction), g.constant(target), vars, lambda_seg);
  return objective::breakdown(g, n, lambda_seg);
}

}  // namespace askpaint
