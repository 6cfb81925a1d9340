#pragma once

// Training: per sample, draw the number of answered questions, unroll the
// episode on one graph (oracle answers stay differentiable in the question),
// apply the objective to the final prediction and every emitted question,
// and backpropagate through the whole chain. Gradients are averaged over the
// batch and applied with Adam.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "askpaint/answer_oracle.hpp"
#include "askpaint/autodiff.hpp"
#include "askpaint/checkpoint.hpp"
#include "askpaint/errors.hpp"
#include "askpaint/model.hpp"
#include "askpaint/objective.hpp"
#include "askpaint/synthetic.hpp"

namespace askpaint {

struct AdamConfig {
  double learning_rate = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct TrainConfig {
  // Episodes may answer up to max_answers questions; training draws the
  // answered count uniformly from {0, ..., max_answers - 1}.
  int max_answers = 4;
  int batch_size = 8;
  AdamConfig adam;
  double lambda_seg = kDefaultLambdaSeg;
  NoiseConfig noise{true, 0.05, 0};
  bool stop_answer_gradient = false;
  int steps = 20000;
  std::uint64_t seed = 1;
  int checkpoint_interval = 0;  // 0: only the final checkpoint
  int log_interval = 1;
};

inline void validate(const TrainConfig& c) {
  if (c.max_answers < 1) throw ValidationError("max_answers must be >= 1");
  if (c.batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (!(c.adam.learning_rate >= 0)) throw ValidationError("learning_rate must be >= 0");
  if (!(c.adam.beta1 >= 0 && c.adam.beta1 < 1) || !(c.adam.beta2 >= 0 && c.adam.beta2 < 1))
    throw ValidationError("adam betas must lie in [0, 1)");
  if (!(c.adam.epsilon > 0)) throw ValidationError("adam epsilon must be > 0");
  if (!(c.lambda_seg >= 0)) throw ValidationError("lambda_seg must be >= 0");
  validate(c.noise);
  if (c.steps < 0) throw ValidationError("steps must be >= 0");
  if (c.checkpoint_interval < 0) throw ValidationError("checkpoint_interval must be >= 0");
  if (c.log_interval < 1) throw ValidationError("log_interval must be >= 1");
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"max_answers", c.max_answers},
       {"batch_size", c.batch_size},
       {"learning_rate", c.adam.learning_rate},
       {"beta1", c.adam.beta1},
       {"beta2", c.adam.beta2},
       {"adam_epsilon", c.adam.epsilon},
       {"lambda_seg", c.lambda_seg},
       {"noise_enabled", c.noise.enabled},
       {"noise_sigma", c.noise.sigma},
       {"stop_answer_gradient", c.stop_answer_gradient},
       {"steps", c.steps},
       {"seed", c.seed},
       {"checkpoint_interval", c.checkpoint_interval},
       {"log_interval", c.log_interval}};
}

// Missing keys keep their defaults; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const std::vector<std::string> known = {
      "max_answers", "batch_size", "learning_rate", "beta1", "beta2", "adam_epsilon", "lambda_seg",
      "noise_enabled", "noise_sigma", "stop_answer_gradient", "steps", "seed", "checkpoint_interval", "log_interval"};
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end()) throw ValidationError("unknown train config key '" + k + "'");
  c.max_answers = j.value("max_answers", c.max_answers);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.adam.learning_rate = j.value("learning_rate", c.adam.learning_rate);
  c.adam.beta1 = j.value("beta1", c.adam.beta1);
  c.adam.beta2 = j.value("beta2", c.adam.beta2);
  c.adam.epsilon = j.value("adam_epsilon", c.adam.epsilon);
  c.lambda_seg = j.value("lambda_seg", c.lambda_seg);
  c.noise.enabled = j.value("noise_enabled", c.noise.enabled);
  c.noise.sigma = j.value("noise_sigma", c.noise.sigma);
  c.stop_answer_gradient = j.value("stop_answer_gradient", c.stop_answer_gradient);
  c.steps = j.value("steps", c.steps);
  c.seed = j.value("seed", c.seed);
  c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
  c.log_interval = j.value("log_interval", c.log_interval);
}

// Stateless seed mixing so every (seed, step, sample) gets an independent
// stream that can be reported and replayed.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
  return splitmix64(splitmix64(splitmix64(base) ^ a) ^ b);
}

template <typename Rng>
int sample_n_hint(const TrainConfig& config, Rng& rng) {
  return std::uniform_int_distribution<int>(0, config.max_answers - 1)(rng);
}

template <typename T>
struct TrainingSample {
  Tensor<T> input;
  Tensor<T> target;
};

template <typename T>
class Adam {
 public:
  Adam() = default;
  Adam(const ColorizerModel<T>& model, AdamConfig config) : config_(config) {
    for (const auto& p : model.parameters()) {
      m_.emplace_back(p.value.shape());
      v_.emplace_back(p.value.shape());
    }
  }

  void step(ColorizerModel<T>& model, const std::vector<Tensor<T>>& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    const T lr = static_cast<T>(config_.learning_rate);
    const T b1 = static_cast<T>(config_.beta1), b2 = static_cast<T>(config_.beta2);
    const T ic1 = static_cast<T>(1.0 / c1), ic2 = static_cast<T>(1.0 / c2), eps = static_cast<T>(config_.epsilon);
    auto& params = model.parameters();
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto& w = params[p].value;
      auto& m = m_[p];
      auto& v = v_[p];
      const auto& g = grads[p];
      for (std::size_t k = 0; k < w.size(); ++k) {
        m[k] = b1 * m[k] + (T(1) - b1) * g[k];
        v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
        w[k] -= lr * (m[k] * ic1) / (std::sqrt(v[k] * ic2) + eps);
      }
    }
  }

  std::int64_t steps_taken() const { return t_; }

 private:
  AdamConfig config_;
  std::vector<Tensor<T>> m_, v_;
  std::int64_t t_ = 0;
};

template <typename T>
struct EpisodeLoss {
  LossBreakdown loss;
  int n_hint = 0;
  std::vector<Tensor<T>> grads;  // one per parameter, empty if not requested
};

// Unrolls one training episode with n_hint oracle answers on a recording
// graph and returns the loss and parameter gradients.
template <typename T>
EpisodeLoss<T> episode_loss_and_grad(const ColorizerModel<T>& model, const TrainingSample<T>& sample, int n_hint,
                                     const TrainConfig& config, std::mt19937_64& rng, bool with_grad = true) {
  const auto& mc = model.config();
  const int H = mc.height, W = mc.width, K = mc.color_channels();
  ad::Graph<T> g(with_grad);
  const auto params = model.bind(g);
  const ad::Var x = g.constant(sample.input);
  const ad::Var y = g.constant(sample.target);
  auto out = model.forward(g, params, x, g.constant(Tensor<T>(1, H, W)), g.constant(Tensor<T>(K, H, W)),
                           g.constant(Tensor<T>(K, H, W)));
  std::vector<ad::Var> questions{out.question};
  for (int t = 0; t < n_hint; ++t) {
    const ad::Var q = out.question;
    ad::Var a = answer_node(g, config.stop_answer_gradient ? ad::stop_gradient(g, q) : q, y);
    if (config.noise.active()) {
      std::normal_distribution<double> dist(0.0, config.noise.sigma);
      Tensor<T> noise(K, 1, 1);
      for (auto& v : noise.vec()) v = static_cast<T>(dist(rng));
      a = ad::clamp(g, ad::add(g, a, g.constant(std::move(noise))), T(ColorSpaceSpec::kMin), T(ColorSpaceSpec::kMax));
    }
    const ad::Var hint = ad::broadcast(g, q, a);
    out = model.forward(g, params, x, q, hint, out.prediction);
    questions.push_back(out.question);
  }
  const auto lambda = static_cast<T>(config.lambda_seg);
  const auto nodes = objective::total_loss<T>(g, out.prediction, y, questions, lambda);
  EpisodeLoss<T> result{objective::breakdown(g, nodes, lambda), n_hint, {}};
  if (with_grad && std::isfinite(result.loss.total)) {
    g.backward(nodes.total);
    for (ad::Var v : params.vars) result.grads.push_back(g.grad(v));
  }
  return result;
}

struct StepReport {
  std::int64_t step = 0;
  LossBreakdown loss;  // batch means
  double mean_n_hint = 0;
};

// One optimizer update on `batch`. Sample i of the batch uses the rng stream
// derive_seed(config.seed, step, i) for its hint count and answer noise.
template <typename T>
StepReport train_step(ColorizerModel<T>& model, Adam<T>& optimizer, const std::vector<TrainingSample<T>>& batch,
                      const TrainConfig& config, std::int64_t step, const std::vector<int>* forced_n_hint = nullptr) {
  if (batch.empty()) throw ValidationError("train_step: empty batch");
  std::vector<Tensor<T>> grads;
  for (const auto& p : model.parameters()) grads.emplace_back(p.value.shape());
  StepReport report;
  report.step = step;
  const T inv = T(1) / static_cast<T>(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const std::uint64_t sample_seed = derive_seed(config.seed, static_cast<std::uint64_t>(step), i);
    std::mt19937_64 rng(sample_seed);
    const int n_hint = forced_n_hint ? (*forced_n_hint)[i] : sample_n_hint(config, rng);
    auto ep = episode_loss_and_grad(model, batch[i], n_hint, config, rng);
    if (!std::isfinite(ep.loss.total)) {
      std::ostringstream os;
      os << "non-finite loss at step " << step << ", sample " << i << " (sample seed " << sample_seed << ")";
      throw TrainingError(os.str());
    }
    for (std::size_t p = 0; p < grads.size(); ++p)
      for (std::size_t k = 0; k < grads[p].size(); ++k) grads[p][k] += inv * ep.grads[p][k];
    report.loss.reg_loss += ep.loss.reg_loss / batch.size();
    report.loss.seg_loss += ep.loss.seg_loss / batch.size();
    report.mean_n_hint += static_cast<double>(n_hint) / batch.size();
  }
  report.loss.lambda_seg = config.lambda_seg;
  report.loss.total = report.loss.reg_loss + report.loss.lambda_seg * report.loss.seg_loss;
  optimizer.step(model, grads);
  return report;
}

// Supplies the training batch for a given step.
template <typename T>
using BatchSource = std::function<std::vector<TrainingSample<T>>(std::int64_t step, int batch_size)>;

template <typename T>
BatchSource<T> synthetic_batches(SyntheticSceneSpec spec, ColorSpaceSpec space) {
  validate(spec);
  return [spec = std::move(spec), space](std::int64_t step, int batch_size) {
    std::mt19937_64 rng(derive_seed(spec.seed, static_cast<std::uint64_t>(step), 0x5ce4e));
    std::vector<TrainingSample<T>> out;
    for (auto& s : generate_synthetic_batch<T>(spec, space, batch_size, rng))
      out.push_back({std::move(s.input), std::move(s.target)});
    return out;
  };
}

template <typename T>
struct TrainCallbacks {
  std::function<void(const StepReport&)> on_log;
  // Receives every periodic checkpoint and the final one.
  std::function<void(const Checkpoint<T>&)> on_checkpoint;
};

template <typename T>
Checkpoint<T> train_loop(const ModelConfig& model_config, const TrainConfig& config, const BatchSource<T>& data,
                         const TrainCallbacks<T>& callbacks = {}) {
  validate(config);
  auto model = build_model<T>(model_config);
  Adam<T> optimizer(model, config.adam);
  auto snapshot = [&](std::int64_t steps) {
    return Checkpoint<T>{kCheckpointVersion, model, nlohmann::json(config), steps};
  };
  for (std::int64_t step = 0; step < config.steps; ++step) {
    const auto report = train_step(model, optimizer, data(step, config.batch_size), config, step);
    if (callbacks.on_log && (step % config.log_interval == 0 || step + 1 == config.steps)) callbacks.on_log(report);
    if (callbacks.on_checkpoint && config.checkpoint_interval > 0 && (step + 1) % config.checkpoint_interval == 0 &&
        step + 1 != config.steps)
      callbacks.on_checkpoint(snapshot(step + 1));
  }
  auto final_ckpt = snapshot(config.steps);
  if (callbacks.on_checkpoint) callbacks.on_checkpoint(final_ckpt);
  return final_ckpt;
}

}  // namespace askpaint
