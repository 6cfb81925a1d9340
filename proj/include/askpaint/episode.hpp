#pragma once

// Episode state machine. Forward pass 0 consumes zero question/hint/prediction
// buffers and yields (y_1, q_1). Every later pass t consumes (x, q_t, c_t, y_t)
// where c_t = q_t * a_t is built from the answer to the pending question.
// Only the current step's tensors are fed to the model; histories are kept for
// analysis and never read back by the forward pass.

#include <functional>
#include <optional>
#include <random>
#include <vector>

#include "askpaint/answer_oracle.hpp"
#include "askpaint/errors.hpp"
#include "askpaint/model.hpp"
#include "askpaint/tensor.hpp"

namespace askpaint {

template <typename T>
struct EpisodeState {
  Tensor<T> input_x;
  int max_answers = 0;
  int forward_passes = 0;
  QuestionMap<T> current_question;
  Tensor<T> current_hint;
  Tensor<T> current_prediction;
  std::vector<QuestionMap<T>> question_history;
  std::vector<AnswerColor<T>> answer_history;
  std::vector<int> answer_pass;  // forward pass that consumed answer_history[i]
  std::vector<Tensor<T>> prediction_history;

  // Index of the most recent forward pass; 0 before any pass has run.
  int step() const { return forward_passes == 0 ? 0 : forward_passes - 1; }
  int color_channels() const { return current_prediction.channels(); }
  bool exhausted() const { return forward_passes == max_answers + 1; }
  bool has_pending_question() const { return forward_passes >= 1 && !exhausted(); }
};

template <typename T>
EpisodeState<T> init_episode(Tensor<T> input_x, int max_answers, int color_channels) {
  if (max_answers < 0) throw ValidationError("max_answers must be >= 0");
  if (color_channels < 1) throw ValidationError("color_channels must be positive");
  if (input_x.channels() != 1) throw ValidationError("episode input must have one channel");
  if (!input_x.all_finite()) throw ValidationError("episode input contains non-finite values");
  EpisodeState<T> s;
  const int H = input_x.height(), W = input_x.width();
  s.input_x = std::move(input_x);
  s.max_answers = max_answers;
  s.current_question = QuestionMap<T>::zeros(H, W);
  s.current_hint = Tensor<T>(color_channels, H, W);
  s.current_prediction = Tensor<T>(color_channels, H, W);
  return s;
}

template <typename T>
EpisodeState<T> advance(EpisodeState<T> state, const ColorizerModel<T>& model,
                        const std::optional<AnswerColor<T>>& answer) {
  const auto& cfg = model.config();
  if (cfg.color_channels() != state.color_channels() || cfg.height != state.input_x.height() ||
      cfg.width != state.input_x.width())
    throw ConfigError("model expects " + std::to_string(cfg.color_channels()) + " color channels at " +
                      std::to_string(cfg.height) + "x" + std::to_string(cfg.width) + ", episode has " +
                      std::to_string(state.color_channels()) + " at " + state.input_x.shape().str());
  if (state.exhausted())
    throw StateError("episode already ran " + std::to_string(state.forward_passes) + " forward passes");
  if (answer) {
    if (state.forward_passes == 0) throw StateError("no pending question to answer before the first pass");
    if (static_cast<int>(answer->size()) != state.color_channels())
      throw ValidationError("answer has " + std::to_string(answer->size()) + " channels");
    for (T v : *answer)
      if (!std::isfinite(v)) throw ValidationError("answer contains non-finite values");
    state.current_hint = broadcast_hint(state.current_question, *answer);
    state.answer_history.push_back(*answer);
    state.answer_pass.push_back(state.forward_passes);
  } else if (state.forward_passes > 0) {
    state.current_hint.fill(T(0));
  }
  auto out = model.forward(state.input_x, state.current_question.values(), state.current_hint,
                           state.current_prediction);
  state.current_prediction = std::move(out.prediction);
  state.current_question = QuestionMap<T>(std::move(out.question));
  state.prediction_history.push_back(state.current_prediction);
  state.question_history.push_back(state.current_question);
  ++state.forward_passes;
  return state;
}

struct OracleConfig {
  NoiseConfig noise;  // off unless enabled
  double epsilon = kAnswerEpsilon;
};

// Supplies the answer to a pending question.
template <typename T>
using AnswerSource = std::function<AnswerColor<T>(const EpisodeState<T>&)>;

template <typename T>
struct RolloutResult {
  Tensor<T> final_prediction;
  EpisodeState<T> state;
};

// n_answers answered questions, n_answers + 1 forward passes.
template <typename T>
RolloutResult<T> rollout_with(Tensor<T> input_x, int n_answers, int max_answers, const ColorizerModel<T>& model,
                              const AnswerSource<T>& answers) {
  if (n_answers < 0 || n_answers > max_answers)
    throw ValidationError("n_answers " + std::to_string(n_answers) + " outside [0, " + std::to_string(max_answers) +
                          "]");
  auto state = init_episode(std::move(input_x), max_answers, model.config().color_channels());
  state = advance(std::move(state), model, std::optional<AnswerColor<T>>());
  for (int t = 0; t < n_answers; ++t) {
    auto a = answers(state);
    state = advance(std::move(state), model, std::optional<AnswerColor<T>>(std::move(a)));
  }
  return {state.current_prediction, std::move(state)};
}

// Oracle-answered rollout. ground_truth may be null only when n_answers == 0.
template <typename T, typename Rng = std::mt19937_64>
RolloutResult<T> rollout(Tensor<T> input_x, const Tensor<T>* ground_truth, int n_answers, int max_answers,
                         const ColorizerModel<T>& model, const OracleConfig& oracle = {}, Rng* rng = nullptr) {
  if (n_answers > 0 && ground_truth == nullptr)
    throw ValidationError("oracle rollout with answers needs ground truth");
  if (oracle.noise.active() && rng == nullptr) throw ValidationError("noisy oracle needs an rng");
  AnswerSource<T> source = [&](const EpisodeState<T>& s) {
    auto a = compute_answer(s.current_question, *ground_truth, static_cast<T>(oracle.epsilon)).color;
    if (oracle.noise.active()) a = perturb_answer(a, oracle.noise, *rng);
    return a;
  };
  return rollout_with<T>(std::move(input_x), n_answers, max_answers, model, source);
}

}  // namespace askpaint
