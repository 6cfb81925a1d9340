#pragma once

// Evaluation protocols:
//   - PSNR after n answered questions, n = 0..S
//   - question order: zero-answer error map weighted by each question
//   - class precision: share of a question's mass inside its best class

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "askpaint/answer_oracle.hpp"
#include "askpaint/color.hpp"
#include "askpaint/episode.hpp"
#include "askpaint/errors.hpp"
#include "askpaint/model.hpp"

namespace askpaint {

inline constexpr double kPsnrCap = 100.0;

// 8-bit PSNR over all pixels and channels; identical images give the cap.
inline double psnr(const Raster8& prediction, const Raster8& reference) {
  if (prediction.width != reference.width || prediction.height != reference.height ||
      prediction.channels != reference.channels)
    throw ValidationError("psnr: image shapes differ");
  if (prediction.pixels.empty()) throw ValidationError("psnr: empty image");
  double se = 0;
  for (std::size_t k = 0; k < prediction.pixels.size(); ++k) {
    const double d = static_cast<double>(prediction.pixels[k]) - reference.pixels[k];
    se += d * d;
  }
  const double mse = se / static_cast<double>(prediction.pixels.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(255.0 * 255.0 / mse));
}

struct Summary {
  std::size_t count = 0;
  double mean = 0;
  double std_error = 0;
  double stddev = 0;
  double min = 0;
  double max = 0;
  double median = 0;
};

inline Summary summarize(std::vector<double> v) {
  Summary s;
  s.count = v.size();
  if (v.empty()) return s;
  double sum = 0;
  for (double x : v) sum += x;
  s.mean = sum / v.size();
  double ss = 0;
  for (double x : v) ss += (x - s.mean) * (x - s.mean);
  s.stddev = v.size() > 1 ? std::sqrt(ss / (v.size() - 1)) : 0.0;
  s.std_error = v.size() > 1 ? s.stddev / std::sqrt(static_cast<double>(v.size())) : 0.0;
  std::sort(v.begin(), v.end());
  s.min = v.front();
  s.max = v.back();
  s.median = v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
  return s;
}

inline void to_json(nlohmann::json& j, const Summary& s) {
  j = {{"count", s.count}, {"mean", s.mean}, {"std_error", s.std_error}, {"stddev", s.stddev},
       {"min", s.min},     {"max", s.max},   {"median", s.median}};
}

// Per-pixel L1 color error summed over channels.
template <typename T>
Tensor<T> error_map(const Tensor<T>& prediction, const Tensor<T>& target) {
  if (prediction.shape() != target.shape()) throw ValidationError("error_map: shape mismatch");
  Tensor<T> e(1, prediction.height(), prediction.width());
  const auto P = e.size();
  for (int c = 0; c < prediction.channels(); ++c) {
    const auto p = prediction.channel(c);
    const auto y = target.channel(c);
    for (std::size_t k = 0; k < P; ++k) e[k] += std::abs(p[k] - y[k]);
  }
  return e;
}

struct WeightedError {
  double normalized = 0;    // sum(E * Q) / sum(Q)
  double unnormalized = 0;  // sum(E * Q)
  double mass = 0;          // sum(Q)
};

template <typename T>
WeightedError weighted_error(const Tensor<T>& error, const Tensor<T>& weights) {
  if (error.shape() != weights.shape()) throw ValidationError("weighted_error: shape mismatch");
  WeightedError w;
  for (std::size_t k = 0; k < error.size(); ++k) {
    w.unnormalized += static_cast<double>(error[k]) * weights[k];
    w.mass += weights[k];
  }
  w.normalized = w.mass > 0 ? w.unnormalized / w.mass : std::numeric_limits<double>::quiet_NaN();
  return w;
}

template <typename T>
double mean_value(const Tensor<T>& t) {
  double s = 0;
  for (T v : t.vec()) s += v;
  return s / static_cast<double>(t.size());
}

// Fraction of the question's mass on its best-matching label. Empty when the
// question has no mass. `threshold` binarizes the question first (q > t).
template <typename T>
std::optional<double> class_precision(const QuestionMap<T>& question, const std::vector<int>& labels,
                                      std::optional<double> threshold = std::nullopt) {
  if (labels.size() != question.values().size()) throw ValidationError("class_precision: shape mismatch");
  std::map<int, double> by_class;
  double total = 0;
  for (std::size_t k = 0; k < labels.size(); ++k) {
    if (labels[k] < 0) throw ValidationError("class_precision: negative label");
    double w = question.values()[k];
    if (threshold) w = w > *threshold ? 1.0 : 0.0;
    by_class[labels[k]] += w;
    total += w;
  }
  if (!(total > 0)) return std::nullopt;
  double best = 0;
  for (const auto& [cls, m] : by_class) best = std::max(best, m);
  return best / total;
}

template <typename T>
struct EvalSample {
  Tensor<T> input;
  Tensor<T> target;
  std::vector<int> segmentation;  // optional, HxW
  std::string name;
};

struct PrecisionReport {
  Summary soft;       // pooled over every evaluated question
  Summary threshold;  // q > 0.5
  Summary uniform;    // all-ones question, one per image
  std::vector<double> per_image;  // mean soft precision per image
  std::size_t excluded = 0;
};

struct QuestionOrderReport {
  Summary global_error;                   // per-image mean of E
  std::vector<Summary> weighted;          // index i -> question i+1, normalized
  std::vector<Summary> weighted_raw;      // unnormalized sum(E * Q_i)
  std::vector<std::size_t> excluded;      // per question, degenerate masses
};

struct EvalReport {
  std::vector<Summary> psnr_by_steps;
  QuestionOrderReport question_order;
  std::optional<PrecisionReport> class_precision;
  nlohmann::json run_metadata = nlohmann::json::object();
};

struct EvalOptions {
  int max_steps = 3;
  int max_answers = 4;
  ColorSpaceSpec space;
  double degenerate_mass = 1e-6;
  double precision_threshold = 0.5;
};

// Everything the three protocols need from one image: a rollout with
// max_steps oracle answers (noise off). prediction_history[n] is exactly the
// final prediction of a rollout with n answers, since noiseless answers are
// deterministic.
template <typename T>
EpisodeState<T> eval_rollout(const ColorizerModel<T>& model, const EvalSample<T>& s, const EvalOptions& opt) {
  return rollout<T>(s.input, &s.target, opt.max_steps, opt.max_answers, model).state;
}

template <typename T>
std::vector<Summary> eval_hint_curve(const ColorizerModel<T>& model, const std::vector<EvalSample<T>>& dataset,
                                     const EvalOptions& opt) {
  if (dataset.empty()) throw ValidationError("eval_hint_curve: empty dataset");
  std::vector<std::vector<double>> values(opt.max_steps + 1);
  for (const auto& s : dataset) {
    const auto st = eval_rollout(model, s, opt);
    const Raster8 reference = from_model_space(s.target, s.input, opt.space);
    for (int n = 0; n <= opt.max_steps; ++n)
      values[n].push_back(psnr(from_model_space(st.prediction_history[n], s.input, opt.space), reference));
  }
  std::vector<Summary> out;
  for (auto& v : values) out.push_back(summarize(std::move(v)));
  return out;
}

template <typename T>
QuestionOrderReport question_order_analysis(const ColorizerModel<T>& model, const std::vector<EvalSample<T>>& dataset,
                                            int num_questions, const EvalOptions& opt) {
  if (dataset.empty()) throw ValidationError("question_order_analysis: empty dataset");
  if (num_questions < 1 || num_questions > opt.max_answers)
    throw ValidationError("num_questions outside [1, max_answers]");
  QuestionOrderReport r;
  std::vector<double> global;
  std::vector<std::vector<double>> w(num_questions), raw(num_questions);
  r.excluded.assign(num_questions, 0);
  for (const auto& s : dataset) {
    const auto st = rollout<T>(s.input, &s.target, num_questions, opt.max_answers, model).state;
    const auto E = error_map(st.prediction_history[0], s.target);
    global.push_back(mean_value(E));
    for (int i = 0; i < num_questions; ++i) {
      const auto we = weighted_error(E, st.question_history[i].values());
      if (we.mass < opt.degenerate_mass) {
        ++r.excluded[i];
        continue;
      }
      w[i].push_back(we.normalized);
      raw[i].push_back(we.unnormalized);
    }
  }
  r.global_error = summarize(std::move(global));
  for (int i = 0; i < num_questions; ++i) {
    r.weighted.push_back(summarize(std::move(w[i])));
    r.weighted_raw.push_back(summarize(std::move(raw[i])));
  }
  return r;
}

// Precision of the answered questions Q_1..Q_S of a max_steps rollout,
// pooled over images and questions.
template <typename T>
PrecisionReport class_precision_analysis(const ColorizerModel<T>& model, const std::vector<EvalSample<T>>& dataset,
                                         const EvalOptions& opt) {
  PrecisionReport r;
  std::vector<double> soft, thr, uni;
  for (const auto& s : dataset) {
    if (s.segmentation.empty()) throw ValidationError("class precision needs segmentations (" + s.name + ")");
    const auto st = eval_rollout(model, s, opt);
    double img = 0;
    int n = 0;
    for (int i = 0; i < opt.max_steps; ++i) {
      const auto& q = st.question_history[i];
      const auto p = class_precision(q, s.segmentation);
      if (!p) {
        ++r.excluded;
        continue;
      }
      soft.push_back(*p);
      img += *p;
      ++n;
      if (const auto pt = class_precision(q, s.segmentation, opt.precision_threshold)) thr.push_back(*pt);
    }
    if (n > 0) r.per_image.push_back(img / n);
    const QuestionMap<T> ones(Tensor<T>(1, s.input.height(), s.input.width(), T(1)));
    uni.push_back(*class_precision(ones, s.segmentation));
  }
  r.soft = summarize(std::move(soft));
  r.threshold = summarize(std::move(thr));
  r.uniform = summarize(std::move(uni));
  return r;
}

template <typename T>
EvalReport evaluate(const ColorizerModel<T>& model, const std::vector<EvalSample<T>>& dataset, const EvalOptions& opt) {
  EvalReport r;
  r.psnr_by_steps = eval_hint_curve(model, dataset, opt);
  r.question_order = question_order_analysis(model, dataset, std::max(1, opt.max_steps), opt);
  const bool have_seg = std::all_of(dataset.begin(), dataset.end(), [](const auto& s) { return !s.segmentation.empty(); });
  if (have_seg && opt.max_steps > 0) r.class_precision = class_precision_analysis(model, dataset, opt);
  r.run_metadata["images"] = dataset.size();
  r.run_metadata["max_steps"] = opt.max_steps;
  r.run_metadata["max_answers"] = opt.max_answers;
  r.run_metadata["color_space"] = to_string(opt.space.mode);
  r.run_metadata["answer_noise"] = false;
  r.run_metadata["protocol_notes"] = {
      "error map E comes from this model's own zero-answer prediction, not a separately trained baseline",
      "weighted question error is normalized by the question mass; unnormalized sums are reported alongside",
      "class precision pools the answered questions Q_1..Q_S over all images; label 0 (background) counts as a class"};
  return r;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  nlohmann::json psnr = nlohmann::json::object();
  for (std::size_t n = 0; n < r.psnr_by_steps.size(); ++n)
    psnr[std::to_string(n)] = {{"mean", r.psnr_by_steps[n].mean}, {"std_error", r.psnr_by_steps[n].std_error},
                               {"count", r.psnr_by_steps[n].count}};
  j["psnr_by_steps"] = psnr;
  j["global_error_baseline"] = r.question_order.global_error;
  nlohmann::json wq = nlohmann::json::object();
  for (std::size_t i = 0; i < r.question_order.weighted.size(); ++i)
    wq[std::to_string(i + 1)] = {{"normalized", r.question_order.weighted[i]},
                                 {"unnormalized", r.question_order.weighted_raw[i]},
                                 {"excluded", r.question_order.excluded[i]}};
  j["weighted_error_by_question"] = wq;
  if (r.class_precision) {
    const auto& p = *r.class_precision;
    j["class_precision"] = {{"mean", p.soft.mean},  {"soft", p.soft},          {"threshold_0_5", p.threshold},
                            {"uniform_heatmap", p.uniform}, {"per_image", p.per_image}, {"excluded", p.excluded}};
  } else {
    j["class_precision"] = nullptr;
  }
  j["run_metadata"] = r.run_metadata;
  return j;
}

}  // namespace askpaint
