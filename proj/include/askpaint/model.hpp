#pragma once

// U-net colorizer. One forward pass maps the concatenation
// (x, q_t, c_t, y_t) to (y_{t+1}, q_{t+1}): K bounded color channels and one
// sigmoid question channel.
//
// Reference topology for depth d and base width w (w_l = w * 2^l):
//   enc_l   : conv3(in, w_l) -> lrelu -> conv3(w_l, w_l) -> lrelu, maxpool2   l = 0..d-1
//   mid     : conv3(w_{d-1}, w_d) -> lrelu -> conv3(w_d, w_d) -> lrelu
//   dec_l   : upsample2, concat skip_l, conv3(w_{l+1} + w_l, w_l) -> lrelu -> conv3(w_l, w_l) -> lrelu
//   head    : conv1(w_0, K + 1); tanh on the color channels, sigmoid on the question channel

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "askpaint/autodiff.hpp"
#include "askpaint/color.hpp"
#include "askpaint/errors.hpp"
#include "askpaint/tensor.hpp"

namespace askpaint {

struct ModelConfig {
  int height = 32;
  int width = 32;
  ColorMode color_space = ColorMode::LabAB;
  int depth = 3;
  int base_width = 16;
  std::uint64_t seed = 1;

  int color_channels() const { return ColorSpaceSpec{color_space}.color_channels(); }
  int image_channels() const { return 1; }
  // x, q, c, y_hat
  int input_channels() const { return image_channels() + 1 + 2 * color_channels(); }
  int output_channels() const { return color_channels() + 1; }
  int level_width(int level) const { return base_width << level; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void validate(const ModelConfig& c) {
  if (c.depth < 0 || c.depth > 8) throw ConfigError("model depth must be in [0, 8]");
  if (c.base_width < 1) throw ConfigError("base_width must be positive");
  if (c.height < 1 || c.width < 1) throw ConfigError("image size must be positive");
  const int m = 1 << c.depth;
  if (c.height % m || c.width % m)
    throw ConfigError("image size " + std::to_string(c.height) + "x" + std::to_string(c.width) +
                      " not divisible by 2^depth = " + std::to_string(m));
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"height", c.height},     {"width", c.width},
       {"color_space", to_string(c.color_space)},
       {"depth", c.depth},       {"base_width", c.base_width},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.height = j.at("height").get<int>();
  c.width = j.at("width").get<int>();
  c.color_space = parse_color_mode(j.at("color_space").get<std::string>());
  c.depth = j.at("depth").get<int>();
  c.base_width = j.at("base_width").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
}

struct ParameterSpec {
  std::string name;
  Shape shape;
  double init_std = 0;  // 0 -> zero init
};

// Ordered parameter layout of the reference topology.
inline std::vector<ParameterSpec> parameter_layout(const ModelConfig& c) {
  std::vector<ParameterSpec> out;
  auto conv = [&out](const std::string& name, int in, int o, int k, double gain) {
    out.push_back({name + ".weight", Shape{o, in, k * k}, std::sqrt(gain / (in * k * k))});
    out.push_back({name + ".bias", Shape{o, 1, 1}, 0.0});
  };
  int in = c.input_channels();
  for (int l = 0; l < c.depth; ++l) {
    conv("enc" + std::to_string(l) + ".conv1", in, c.level_width(l), 3, 2.0);
    conv("enc" + std::to_string(l) + ".conv2", c.level_width(l), c.level_width(l), 3, 2.0);
    in = c.level_width(l);
  }
  conv("mid.conv1", in, c.level_width(c.depth), 3, 2.0);
  conv("mid.conv2", c.level_width(c.depth), c.level_width(c.depth), 3, 2.0);
  for (int l = c.depth - 1; l >= 0; --l) {
    conv("dec" + std::to_string(l) + ".conv1", c.level_width(l + 1) + c.level_width(l), c.level_width(l), 3, 2.0);
    conv("dec" + std::to_string(l) + ".conv2", c.level_width(l), c.level_width(l), 3, 2.0);
  }
  conv("head", c.level_width(0), c.output_channels(), 1, 1.0);
  return out;
}

// Closed-form parameter count of the reference topology.
inline std::size_t reference_parameter_count(const ModelConfig& c) {
  auto conv = [](std::size_t in, std::size_t o, std::size_t k) { return o * in * k * k + o; };
  auto w = [&c](int l) { return static_cast<std::size_t>(c.level_width(l)); };
  std::size_t n = 0;
  for (int l = 0; l < c.depth; ++l) n += conv(l == 0 ? c.input_channels() : w(l - 1), w(l), 3) + conv(w(l), w(l), 3);
  n += conv(c.depth == 0 ? c.input_channels() : w(c.depth - 1), w(c.depth), 3) + conv(w(c.depth), w(c.depth), 3);
  for (int l = 0; l < c.depth; ++l) n += conv(w(l + 1) + w(l), w(l), 3) + conv(w(l), w(l), 3);
  return n + conv(w(0), c.output_channels(), 1);
}

inline constexpr double kLeakySlope = 0.1;

template <typename T>
struct ForwardResult {
  Tensor<T> prediction;  // KxHxW
  Tensor<T> question;    // 1xHxW
};

template <typename T>
class ColorizerModel {
 public:
  struct Parameter {
    std::string name;
    Tensor<T> value;
  };

  ColorizerModel() = default;
  explicit ColorizerModel(ModelConfig config) : config_(config) {
    validate(config_);
    std::mt19937_64 rng(config_.seed);
    for (const auto& spec : parameter_layout(config_)) {
      Tensor<T> t(spec.shape);
      if (spec.init_std > 0) {
        std::normal_distribution<double> dist(0.0, spec.init_std);
        for (auto& v : t.vec()) v = static_cast<T>(dist(rng));
      }
      params_.push_back({spec.name, std::move(t)});
    }
  }

  const ModelConfig& config() const { return config_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  const Parameter& parameter(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return p;
    throw NotFoundError("no parameter named " + name);
  }

  template <typename U>
  ColorizerModel<U> cast() const {
    ColorizerModel<U> out;
    out.config_ = config_;
    for (const auto& p : params_) out.params_.push_back({p.name, p.value.template cast<U>()});
    return out;
  }

  // Parameters placed on a graph. Trainable when the graph records.
  struct Bound {
    std::vector<ad::Var> vars;
  };

  Bound bind(ad::Graph<T>& g) const {
    Bound b;
    b.vars.reserve(params_.size());
    for (const auto& p : params_) b.vars.push_back(g.variable(p.value));
    return b;
  }

  void check_inputs(const Tensor<T>& x, const Tensor<T>& q, const Tensor<T>& c, const Tensor<T>& y_hat) const {
    const int H = config_.height, W = config_.width, K = config_.color_channels();
    auto check = [&](const Tensor<T>& t, int ch, const char* what) {
      if (t.shape() != Shape{ch, H, W})
        throw ConfigError(std::string("forward: ") + what + " is " + t.shape().str() + ", expected " +
                          Shape{ch, H, W}.str());
    };
    check(x, config_.image_channels(), "input x");
    check(q, 1, "question");
    check(c, K, "hint");
    check(y_hat, K, "prediction");
  }

  struct Outputs {
    ad::Var prediction;
    ad::Var question;
  };

  // One pass on graph nodes. All four inputs must already live on `g`.
  Outputs forward(ad::Graph<T>& g, const Bound& p, ad::Var x, ad::Var q, ad::Var c, ad::Var y_hat) const {
    check_inputs(g.value(x), g.value(q), g.value(c), g.value(y_hat));
    for (ad::Var v : {x, q, c, y_hat})
      if (!g.value(v).all_finite()) throw ValidationError("forward: non-finite input");
    const std::array<ad::Var, 4> parts{x, q, c, y_hat};
    ad::Var h = ad::concat<T>(g, parts);
    std::size_t next = 0;
    auto conv = [&](ad::Var in) {
      const ad::Var out = ad::conv2d(g, in, p.vars[next], p.vars[next + 1]);
      next += 2;
      return out;
    };
    auto block = [&](ad::Var in) {
      in = ad::leaky_relu(g, conv(in), T(kLeakySlope));
      return ad::leaky_relu(g, conv(in), T(kLeakySlope));
    };
    std::vector<ad::Var> skips;
    for (int l = 0; l < config_.depth; ++l) {
      h = block(h);
      skips.push_back(h);
      h = ad::max_pool2(g, h);
    }
    h = block(h);
    for (int l = config_.depth - 1; l >= 0; --l) {
      const std::array<ad::Var, 2> cat{ad::upsample2(g, h), skips[l]};
      h = block(ad::concat<T>(g, cat));
    }
    const ad::Var out = conv(h);
    const int K = config_.color_channels();
    return {ad::tanh(g, ad::slice(g, out, 0, K)), ad::sigmoid(g, ad::slice(g, out, K, 1))};
  }

  // Inference pass on plain tensors.
  ForwardResult<T> forward(const Tensor<T>& x, const Tensor<T>& q, const Tensor<T>& c, const Tensor<T>& y_hat) const {
    ad::Graph<T> g(false);
    const auto bound = bind(g);
    const auto o = forward(g, bound, g.constant(x), g.constant(q), g.constant(c), g.constant(y_hat));
    return {g.value(o.prediction), g.value(o.question)};
  }

 private:
  template <typename>
  friend class ColorizerModel;

  ModelConfig config_;
  std::vector<Parameter> params_;
};

template <typename T = float>
ColorizerModel<T> build_model(const ModelConfig& config) {
  return ColorizerModel<T>(config);
}

}  // namespace askpaint
