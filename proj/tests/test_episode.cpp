#include <gtest/gtest.h>

#include <random>

#include "askpaint/episode.hpp"
#include "test_util.hpp"

using namespace askpaint;
using askpaint::testing::random_tensor;
using askpaint::testing::tiny_config;

namespace {

using Opt = std::optional<AnswerColor<double>>;

}  // namespace

TEST(InitEpisode, ZeroBuffers) {
  const auto s = init_episode(Tensor<double>(1, 2, 2, 0.3), 4, 2);
  EXPECT_EQ(s.step(), 0);
  EXPECT_EQ(s.forward_passes, 0);
  EXPECT_EQ(s.current_question, QuestionMap<double>::zeros(2, 2));
  EXPECT_EQ(s.current_prediction, Tensor<double>(2, 2, 2));
  EXPECT_EQ(s.current_hint, Tensor<double>(2, 2, 2));
  EXPECT_TRUE(s.question_history.empty());
  EXPECT_TRUE(s.answer_history.empty());
  EXPECT_TRUE(s.prediction_history.empty());
}

TEST(InitEpisode, LabBuffersHaveTwoChannels) {
  const auto s = init_episode(Tensor<double>(1, 32, 32), 4, ColorSpaceSpec{ColorMode::LabAB}.color_channels());
  EXPECT_EQ(s.current_prediction.channels(), 2);
  EXPECT_EQ(s.current_hint.channels(), 2);
}

TEST(InitEpisode, Validation) {
  Tensor<double> bad(1, 2, 2);
  bad[0] = INFINITY;
  EXPECT_THROW(init_episode(bad, 4, 2), ValidationError);
  EXPECT_THROW(init_episode(Tensor<double>(1, 2, 2), -1, 2), ValidationError);
  EXPECT_NO_THROW(init_episode(Tensor<double>(1, 2, 2), 0, 2));
}

TEST(Advance, FirstPassAppendsHistories) {
  const auto m = build_model<double>(tiny_config());
  std::mt19937_64 rng(1);
  auto s = advance(init_episode(random_tensor<double>(1, 8, 8, rng), 4, 2), m, Opt());
  EXPECT_EQ(s.forward_passes, 1);
  EXPECT_EQ(s.question_history.size(), 1u);
  EXPECT_EQ(s.prediction_history.size(), 1u);
  for (double v : s.current_question.values().vec()) EXPECT_TRUE(v >= 0 && v <= 1);
}

TEST(Advance, FirstPassSeesZeros) {
  const auto m = build_model<double>(tiny_config());
  std::mt19937_64 rng(2);
  const auto x = random_tensor<double>(1, 8, 8, rng);
  const auto s = advance(init_episode(x, 4, 2), m, Opt());
  const auto direct = m.forward(x, Tensor<double>(1, 8, 8), Tensor<double>(2, 8, 8), Tensor<double>(2, 8, 8));
  EXPECT_EQ(s.current_prediction, direct.prediction);
  EXPECT_EQ(s.current_question.values(), direct.question);
}

TEST(Advance, HintIsQuestionTimesAnswer) {
  const auto m = build_model<double>(tiny_config());
  std::mt19937_64 rng(3);
  const auto x = random_tensor<double>(1, 8, 8, rng);
  auto s1 = advance(init_episode(x, 4, 2), m, Opt());
  const AnswerColor<double> a{0.4, -0.3};
  const auto s2 = advance(s1, m, Opt(a));
  for (int k = 0; k < 2; ++k)
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < 8; ++j) EXPECT_EQ(s2.current_hint.at(k, i, j), s1.current_question(i, j) * a[k]);
  const auto direct = m.forward(x, s1.current_question.values(), s2.current_hint, s1.current_prediction);
  EXPECT_EQ(s2.current_prediction, direct.prediction);
  EXPECT_EQ(s2.answer_history.size(), 1u);
  EXPECT_EQ(s2.answer_pass, std::vector<int>{1});
}

TEST(Advance, Errors) {
  const auto m = build_model<double>(tiny_config());
  auto fresh = init_episode(Tensor<double>(1, 8, 8), 1, 2);
  EXPECT_THROW(advance(fresh, m, Opt(AnswerColor<double>{0, 0})), StateError);
  EXPECT_THROW(advance(init_episode(Tensor<double>(1, 8, 8), 1, 3), m, Opt()), ConfigError);
  auto s = advance(fresh, m, Opt());
  s = advance(s, m, Opt(AnswerColor<double>{0, 0}));
  EXPECT_TRUE(s.exhausted());
  EXPECT_THROW(advance(s, m, Opt(AnswerColor<double>{0, 0})), StateError);
}

TEST(Advance, BitIdenticalAcrossRuns) {
  const auto m = build_model<float>(tiny_config());
  std::mt19937_64 rng(4);
  const auto x = random_tensor<float>(1, 8, 8, rng), y = random_tensor<float>(2, 8, 8, rng, -0.5, 0.5);
  const auto a = rollout<float>(x, &y, 3, 4, m), b = rollout<float>(x, &y, 3, 4, m);
  EXPECT_EQ(a.final_prediction, b.final_prediction);
  for (std::size_t t = 0; t < a.state.question_history.size(); ++t)
    EXPECT_EQ(a.state.question_history[t], b.state.question_history[t]);
}

TEST(Advance, HistoryIsAppendOnly) {
  const auto m = build_model<double>(tiny_config());
  std::mt19937_64 rng(5);
  auto s = advance(init_episode(random_tensor<double>(1, 8, 8, rng), 4, 2), m, Opt());
  const auto q0 = s.question_history[0];
  const auto p0 = s.prediction_history[0];
  s = advance(s, m, Opt(AnswerColor<double>{0.1, 0.2}));
  s = advance(s, m, Opt(AnswerColor<double>{-0.1, 0.3}));
  EXPECT_EQ(s.question_history[0], q0);
  EXPECT_EQ(s.prediction_history[0], p0);
}

TEST(Rollout, ZeroAnswersIsOnePass) {
  const auto m = build_model<double>(tiny_config());
  const auto r = rollout<double>(Tensor<double>(1, 8, 8), nullptr, 0, 4, m);
  EXPECT_EQ(r.state.forward_passes, 1);
  EXPECT_TRUE(r.state.answer_history.empty());
}

TEST(Rollout, ThreeAnswersFourPasses) {
  const auto m = build_model<double>(tiny_config());
  std::mt19937_64 rng(6);
  const auto y = random_tensor<double>(2, 8, 8, rng);
  const auto r = rollout<double>(random_tensor<double>(1, 8, 8, rng), &y, 3, 4, m);
  EXPECT_EQ(r.state.forward_passes, 4);
  EXPECT_EQ(r.state.answer_history.size(), 3u);
  EXPECT_EQ(r.state.question_history.size(), 4u);
  EXPECT_EQ(r.state.prediction_history.size(), 4u);
}

TEST(Rollout, MaxAnswersZero) {
  const auto m = build_model<double>(tiny_config());
  const auto r = rollout<double>(Tensor<double>(1, 8, 8), nullptr, 0, 0, m);
  EXPECT_TRUE(r.state.exhausted());
}

TEST(Rollout, Errors) {
  const auto m = build_model<double>(tiny_config());
  Tensor<double> y(2, 8, 8);
  EXPECT_THROW(rollout<double>(Tensor<double>(1, 8, 8), &y, 5, 4, m), ValidationError);
  EXPECT_THROW(rollout<double>(Tensor<double>(1, 8, 8), &y, -1, 4, m), ValidationError);
  EXPECT_THROW(rollout<double>(Tensor<double>(1, 8, 8), nullptr, 1, 4, m), ValidationError);
}

TEST(RolloutProperty, EqualsComposedAdvances) {
  const auto m = build_model<double>(tiny_config());
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    const auto x = random_tensor<double>(1, 8, 8, rng), y = random_tensor<double>(2, 8, 8, rng);
    const int n = trial % 5;
    const auto r = rollout<double>(x, &y, n, 4, m);
    auto s = advance(init_episode(x, 4, 2), m, Opt());
    for (int t = 0; t < n; ++t) s = advance(s, m, Opt(compute_answer(s.current_question, y).color));
    EXPECT_EQ(r.final_prediction, s.current_prediction);
    EXPECT_EQ(r.state.answer_history, s.answer_history);
  }
}

TEST(RolloutProperty, NoAnswersIgnoresGroundTruth) {
  const auto m = build_model<double>(tiny_config());
  std::mt19937_64 rng(8);
  const auto x = random_tensor<double>(1, 8, 8, rng);
  const auto y1 = random_tensor<double>(2, 8, 8, rng), y2 = random_tensor<double>(2, 8, 8, rng);
  EXPECT_EQ(rollout<double>(x, &y1, 0, 4, m).final_prediction, rollout<double>(x, &y2, 0, 4, m).final_prediction);
}

TEST(RolloutProperty, NoisyOracleIsSeeded) {
  const auto m = build_model<double>(tiny_config());
  std::mt19937_64 rng(9);
  const auto x = random_tensor<double>(1, 8, 8, rng), y = random_tensor<double>(2, 8, 8, rng);
  OracleConfig oc;
  oc.noise = {true, 0.1, 0};
  std::mt19937_64 r1(5), r2(5);
  const auto a = rollout<double>(x, &y, 2, 4, m, oc, &r1);
  const auto b = rollout<double>(x, &y, 2, 4, m, oc, &r2);
  EXPECT_EQ(a.final_prediction, b.final_prediction);
  EXPECT_NE(a.state.answer_history[0], compute_answer(a.state.question_history[0], y).color);
}
