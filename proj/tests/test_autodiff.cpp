#include <gtest/gtest.h>

#include <functional>
#include <random>

#include "askpaint/autodiff.hpp"
#include "test_util.hpp"

using namespace askpaint;
using askpaint::testing::random_tensor;

namespace {

using Build = std::function<ad::Var(ad::Graph<double>&, const std::vector<ad::Var>&)>;

// Reduces an op output to a scalar with fixed random weights so every output
// element contributes.
ad::Var weighted_sum(ad::Graph<double>& g, ad::Var v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto& val = g.value(v);
  auto w = random_tensor<double>(val.channels(), val.height(), val.width(), rng);
  ad::Var prod = ad::mul(g, v, g.constant(std::move(w)));
  Tensor<double> flat(1, 1, 1);
  for (double x : g.value(prod).vec()) flat[0] += x;
  return g.derived(std::move(flat), {prod}, [&g, prod] {
    return [&g, prod](const Tensor<double>& go) {
      if (auto* d = g.grad_buffer(prod))
        for (auto& x : d->vec()) x += go[0];
    };
  });
}

double evaluate(const Build& f, const std::vector<Tensor<double>>& inputs) {
  ad::Graph<double> g(false);
  std::vector<ad::Var> vars;
  for (const auto& t : inputs) vars.push_back(g.constant(t));
  return g.value(weighted_sum(g, f(g, vars), 99))[0];
}

void check_gradient(const Build& f, std::vector<Tensor<double>> inputs, double tol = 1e-6) {
  ad::Graph<double> g(true);
  std::vector<ad::Var> vars;
  for (const auto& t : inputs) vars.push_back(g.variable(t));
  const ad::Var loss = weighted_sum(g, f(g, vars), 99);
  g.backward(loss);
  for (std::size_t a = 0; a < inputs.size(); ++a) {
    const auto grad = g.grad(vars[a]);
    for (std::size_t k = 0; k < inputs[a].size(); ++k) {
      const double h = 1e-6, orig = inputs[a][k];
      inputs[a][k] = orig + h;
      const double up = evaluate(f, inputs);
      inputs[a][k] = orig - h;
      const double down = evaluate(f, inputs);
      inputs[a][k] = orig;
      const double fd = (up - down) / (2 * h);
      EXPECT_NEAR(grad[k], fd, tol * std::max(1.0, std::abs(fd))) << "input " << a << " element " << k;
    }
  }
}

}  // namespace

TEST(Autodiff, ElementwiseOps) {
  std::mt19937_64 rng(1);
  auto a = random_tensor<double>(2, 3, 4, rng), b = random_tensor<double>(2, 3, 4, rng);
  check_gradient([](auto& g, const auto& v) { return ad::add(g, v[0], v[1]); }, {a, b});
  check_gradient([](auto& g, const auto& v) { return ad::mul(g, v[0], v[1]); }, {a, b});
  check_gradient([](auto& g, const auto& v) { return ad::scale(g, v[0], 2.5); }, {a});
  check_gradient([](auto& g, const auto& v) { return ad::leaky_relu(g, v[0], 0.1); }, {a});
  check_gradient([](auto& g, const auto& v) { return ad::sigmoid(g, v[0]); }, {a});
  check_gradient([](auto& g, const auto& v) { return ad::tanh(g, v[0]); }, {a});
  check_gradient([](auto& g, const auto& v) { return ad::clamp(g, v[0], -0.5, 0.5); }, {a});
}

TEST(Autodiff, StructureOps) {
  std::mt19937_64 rng(2);
  auto a = random_tensor<double>(2, 4, 6, rng), b = random_tensor<double>(3, 4, 6, rng);
  check_gradient(
      [](auto& g, const auto& v) {
        const std::array<ad::Var, 2> parts{v[0], v[1]};
        return ad::concat<double>(g, parts);
      },
      {a, b});
  check_gradient([](auto& g, const auto& v) { return ad::slice(g, v[0], 1, 2); }, {b});
  check_gradient([](auto& g, const auto& v) { return ad::max_pool2(g, v[0]); }, {a});
  check_gradient([](auto& g, const auto& v) { return ad::upsample2(g, v[0]); }, {a});
}

TEST(Autodiff, Convolution) {
  std::mt19937_64 rng(3);
  auto x = random_tensor<double>(3, 5, 6, rng);
  auto w3 = random_tensor<double>(4, 3, 9, rng), b = random_tensor<double>(4, 1, 1, rng);
  check_gradient([](auto& g, const auto& v) { return ad::conv2d(g, v[0], v[1], v[2]); }, {x, w3, b});
  auto w1 = random_tensor<double>(2, 3, 1, rng), b1 = random_tensor<double>(2, 1, 1, rng);
  check_gradient([](auto& g, const auto& v) { return ad::conv2d(g, v[0], v[1], v[2]); }, {x, w1, b1});
}

TEST(Autodiff, ConvolutionMatchesDirectSum) {
  std::mt19937_64 rng(4);
  auto x = random_tensor<double>(2, 4, 5, rng);
  auto w = random_tensor<double>(3, 2, 9, rng), b = random_tensor<double>(3, 1, 1, rng);
  ad::Graph<double> g(false);
  const auto out = g.value(ad::conv2d(g, g.constant(x), g.constant(w), g.constant(b)));
  for (int o = 0; o < 3; ++o)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 5; ++j) {
        double s = b[o];
        for (int c = 0; c < 2; ++c)
          for (int di = -1; di <= 1; ++di)
            for (int dj = -1; dj <= 1; ++dj) {
              const int ii = i + di, jj = j + dj;
              if (ii < 0 || ii >= 4 || jj < 0 || jj >= 5) continue;
              s += w.at(o, c, (di + 1) * 3 + (dj + 1)) * x.at(c, ii, jj);
            }
        EXPECT_NEAR(out.at(o, i, j), s, 1e-12);
      }
}

TEST(Autodiff, AskingOps) {
  std::mt19937_64 rng(5);
  auto q = random_tensor<double>(1, 5, 5, rng, 0.05, 1.0);
  auto y = random_tensor<double>(2, 5, 5, rng);
  auto a = random_tensor<double>(2, 1, 1, rng);
  check_gradient([](auto& g, const auto& v) { return ad::masked_mean(g, v[0], v[1], 1e-8); }, {q, y});
  check_gradient([](auto& g, const auto& v) { return ad::broadcast(g, v[0], v[1]); }, {q, a});
  check_gradient([](auto& g, const auto& v) { return ad::sum_sq_error_per_pixel(g, v[0], v[1]); }, {y, y.cast<double>()});
  check_gradient([](auto& g, const auto& v) { return ad::total_variation(g, v[0]); }, {q});
}

TEST(Autodiff, StopGradientBlocksFlow) {
  ad::Graph<double> g(true);
  const auto x = g.variable(Tensor<double>(1, 1, 1, 3.0));
  const auto y = ad::mul(g, ad::stop_gradient(g, x), x);
  g.backward(y);
  EXPECT_DOUBLE_EQ(g.grad(x)[0], 3.0);
}

TEST(Autodiff, NonRecordingGraphRejectsBackward) {
  ad::Graph<double> g(false);
  const auto x = g.variable(Tensor<double>(1, 1, 1, 1.0));
  EXPECT_THROW(g.backward(x), StateError);
}

TEST(Autodiff, BackwardNeedsScalar) {
  ad::Graph<double> g(true);
  const auto x = g.variable(Tensor<double>(1, 2, 1, 1.0));
  EXPECT_THROW(g.backward(x), ValidationError);
}

TEST(Autodiff, ShapeMismatchRejected) {
  ad::Graph<double> g(false);
  const auto a = g.constant(Tensor<double>(1, 2, 2));
  const auto b = g.constant(Tensor<double>(1, 2, 3));
  EXPECT_THROW(ad::add(g, a, b), ValidationError);
}
