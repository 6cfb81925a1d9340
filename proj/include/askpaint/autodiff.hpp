#pragma once

// Tape-based reverse-mode differentiation over channel-major image tensors.
//
// A Graph owns every intermediate value created while evaluating an
// expression. Ops append a node and, when recording, a closure that pushes
// the node's gradient into its parents. Graph::backward() replays the tape in
// reverse creation order, which is a valid topological order because a node
// can only reference nodes created before it.

#include <Eigen/Core>

#include <cassert>
#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "askpaint/errors.hpp"
#include "askpaint/tensor.hpp"

namespace askpaint::ad {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <typename T>
class Graph {
 public:
  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return record_; }

  Var constant(Tensor<T> value) { return push(std::move(value), false); }
  Var variable(Tensor<T> value) { return push(std::move(value), record_); }

  const Tensor<T>& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  // Most recently created node; inside a derived() backward factory this is
  // the node being built.
  Var last() const { return Var{static_cast<int>(nodes_.size()) - 1}; }

  // Gradient of the last backward() target with respect to v. Zero-filled
  // when nothing flowed into v.
  Tensor<T> grad(Var v) const {
    const auto& n = nodes_[v.id];
    if (n.grad.empty()) return Tensor<T>(n.value.shape());
    return n.grad;
  }

  void backward(Var loss) {
    if (!record_) throw StateError("backward() on a graph that does not record");
    if (nodes_[loss.id].value.size() != 1) throw ValidationError("backward() needs a scalar");
    for (auto& n : nodes_) n.grad = Tensor<T>();
    nodes_[loss.id].grad = Tensor<T>(nodes_[loss.id].value.shape(), T(1));
    for (int id = loss.id; id >= 0; --id) {
      auto& n = nodes_[id];
      if (n.backward && !n.grad.empty()) n.backward(n.grad);
    }
  }

  // --- op authoring interface ---

  using BackwardFn = std::function<void(const Tensor<T>& out_grad)>;

  // Appends a derived node. `make_backward` is only invoked when at least
  // one parent needs a gradient, so ops can skip saving buffers otherwise.
  template <typename MakeBackward>
  Var derived(Tensor<T> value, std::initializer_list<Var> parents, MakeBackward&& make_backward) {
    bool needs = false;
    if (record_)
      for (Var p : parents) needs = needs || nodes_[p.id].requires_grad;
    Var v = push(std::move(value), needs);
    if (needs) nodes_[v.id].backward = make_backward();
    return v;
  }
  Var derived(Tensor<T> value, std::span<const Var> parents, std::function<BackwardFn()> make) {
    bool needs = false;
    if (record_)
      for (Var p : parents) needs = needs || nodes_[p.id].requires_grad;
    Var v = push(std::move(value), needs);
    if (needs) nodes_[v.id].backward = make();
    return v;
  }

  // Gradient buffer of v, allocated on first use. Returns nullptr when v
  // does not take gradients.
  Tensor<T>* grad_buffer(Var v) {
    auto& n = nodes_[v.id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return &n.grad;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Tensor<T> value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), Tensor<T>(), requires_grad, {}});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  bool record_;
  std::vector<Node> nodes_;
};

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ValidationError(std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
}

// Rows are (c, ki, kj); columns are output pixels. Zero padding of k/2.
template <typename T>
void im2col(const Tensor<T>& x, int k, AlignedVector<T>& cols) {
  const int C = x.channels(), H = x.height(), W = x.width(), r = k / 2;
  cols.assign(static_cast<std::size_t>(C) * k * k * H * W, T(0));
  T* out = cols.data();
  for (int c = 0; c < C; ++c)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        for (int i = 0; i < H; ++i) {
          const int si = i + ki - r;
          if (si < 0 || si >= H) {
            out += W;
            continue;
          }
          const T* src = x.data() + (static_cast<std::size_t>(c) * H + si) * W;
          const int dj = kj - r;
          for (int j = 0; j < W; ++j) {
            const int sj = j + dj;
            out[j] = (sj >= 0 && sj < W) ? src[sj] : T(0);
          }
          out += W;
        }
      }
}

template <typename T>
void col2im_add(const T* cols, int C, int H, int W, int k, Tensor<T>& dx) {
  const int r = k / 2;
  for (int c = 0; c < C; ++c)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        for (int i = 0; i < H; ++i) {
          const int si = i + ki - r;
          if (si < 0 || si >= H) {
            cols += W;
            continue;
          }
          T* dst = dx.data() + (static_cast<std::size_t>(c) * H + si) * W;
          const int dj = kj - r;
          for (int j = 0; j < W; ++j) {
            const int sj = j + dj;
            if (sj >= 0 && sj < W) dst[sj] += cols[j];
          }
          cols += W;
        }
      }
}

template <typename T>
Tensor<T> scalar_tensor(T v) {
  return Tensor<T>(1, 1, 1, v);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename T>
Var add(Graph<T>& g, Var a, Var b) {
  const auto& va = g.value(a);
  const auto& vb = g.value(b);
  detail::require_same(va.shape(), vb.shape(), "add");
  Tensor<T> out = va;
  for (std::size_t k = 0; k < out.size(); ++k) out[k] += vb[k];
  return g.derived(std::move(out), {a, b}, [&g, a, b] {
    return [&g, a, b](const Tensor<T>& go) {
      for (Var p : {a, b})
        if (auto* d = g.grad_buffer(p))
          for (std::size_t k = 0; k < go.size(); ++k) (*d)[k] += go[k];
    };
  });
}

template <typename T>
Var mul(Graph<T>& g, Var a, Var b) {
  const auto& va = g.value(a);
  const auto& vb = g.value(b);
  detail::require_same(va.shape(), vb.shape(), "mul");
  Tensor<T> out = va;
  for (std::size_t k = 0; k < out.size(); ++k) out[k] *= vb[k];
  return g.derived(std::move(out), {a, b}, [&g, a, b] {
    return [&g, a, b](const Tensor<T>& go) {
      const auto& va = g.value(a);
      const auto& vb = g.value(b);
      if (auto* d = g.grad_buffer(a))
        for (std::size_t k = 0; k < go.size(); ++k) (*d)[k] += go[k] * vb[k];
      if (auto* d = g.grad_buffer(b))
        for (std::size_t k = 0; k < go.size(); ++k) (*d)[k] += go[k] * va[k];
    };
  });
}

template <typename T>
Var scale(Graph<T>& g, Var a, T s) {
  Tensor<T> out = g.value(a);
  for (auto& v : out.vec()) v *= s;
  return g.derived(std::move(out), {a}, [&g, a, s] {
    return [&g, a, s](const Tensor<T>& go) {
      if (auto* d = g.grad_buffer(a))
        for (std::size_t k = 0; k < go.size(); ++k) (*d)[k] += s * go[k];
    };
  });
}

// Value passes through; gradient does not.
template <typename T>
Var stop_gradient(Graph<T>& g, Var a) {
  return g.constant(g.value(a));
}

// ---------------------------------------------------------------------------
// Activations

template <typename T>
Var leaky_relu(Graph<T>& g, Var a, T slope) {
  Tensor<T> out = g.value(a);
  for (auto& v : out.vec()) v = v > T(0) ? v : slope * v;
  return g.derived(std::move(out), {a}, [&g, a, slope] {
    return [&g, a, slope](const Tensor<T>& go) {
      const auto& x = g.value(a);
      if (auto* d = g.grad_buffer(a))
        for (std::size_t k = 0; k < go.size(); ++k) (*d)[k] += x[k] > T(0) ? go[k] : slope * go[k];
    };
  });
}

template <typename T>
Var sigmoid(Graph<T>& g, Var a) {
  Tensor<T> out = g.value(a);
  for (auto& v : out.vec()) v = T(1) / (T(1) + std::exp(-v));
  return g.derived(std::move(out), {a}, [&g, a] {
    return [&g, a, self = g.last()](const Tensor<T>& go) {
      const auto& y = g.value(self);
      if (auto* d = g.grad_buffer(a))
        for (std::size_t k = 0; k < go.size(); ++k) (*d)[k] += go[k] * y[k] * (T(1) - y[k]);
    };
  });
}

template <typename T>
Var tanh(Graph<T>& g, Var a) {
  Tensor<T> out = g.value(a);
  for (auto& v : out.vec()) v = std::tanh(v);
  return g.derived(std::move(out), {a}, [&g, a] {
    return [&g, a, self = g.last()](const Tensor<T>& go) {
      const auto& y = g.value(self);
      if (auto* d = g.grad_buffer(a))
        for (std::size_t k = 0; k < go.size(); ++k) (*d)[k] += go[k] * (T(1) - y[k] * y[k]);
    };
  });
}

// Clamp to [lo, hi]; gradient is zero where the clamp is active.
template <typename T>
Var clamp(Graph<T>& g, Var a, T lo, T hi) {
  Tensor<T> out = g.value(a);
  for (auto& v : out.vec()) v = std::clamp(v, lo, hi);
  return g.derived(std::move(out), {a}, [&g, a, lo, hi] {
    return [&g, a, lo, hi](const Tensor<T>& go) {
      const auto& x = g.value(a);
      if (auto* d = g.grad_buffer(a))
        for (std::size_t k = 0; k < go.size(); ++k)
          if (x[k] >= lo && x[k] <= hi) (*d)[k] += go[k];
    };
  });
}

// ---------------------------------------------------------------------------
// Structure

template <typename T>
Var concat(Graph<T>& g, std::span<const Var> parts) {
  std::vector<const Tensor<T>*> ptrs;
  for (Var p : parts) ptrs.push_back(&g.value(p));
  Tensor<T> out = concat_channels<T>(ptrs);
  std::vector<Var> keep(parts.begin(), parts.end());
  return g.derived(std::move(out), parts, [&g, keep]() -> typename Graph<T>::BackwardFn {
    return [&g, keep](const Tensor<T>& go) {
      std::size_t offset = 0;
      for (Var p : keep) {
        const auto n = g.value(p).size();
        if (auto* d = g.grad_buffer(p))
          for (std::size_t k = 0; k < n; ++k) (*d)[k] += go[offset + k];
        offset += n;
      }
    };
  });
}

template <typename T>
Var slice(Graph<T>& g, Var a, int begin, int count) {
  Tensor<T> out = slice_channels(g.value(a), begin, count);
  return g.derived(std::move(out), {a}, [&g, a, begin] {
    return [&g, a, begin](const Tensor<T>& go) {
      if (auto* d = g.grad_buffer(a)) {
        const auto off = begin * d->shape().plane();
        for (std::size_t k = 0; k < go.size(); ++k) (*d)[off + k] += go[k];
      }
    };
  });
}

// 2x2 max pooling with stride 2. Ties go to the first element in raster order.
template <typename T>
Var max_pool2(Graph<T>& g, Var a) {
  const auto& x = g.value(a);
  const int C = x.channels(), H = x.height(), W = x.width();
  if (H % 2 || W % 2) throw ConfigError("max_pool2 needs even spatial size");
  Tensor<T> out(C, H / 2, W / 2);
  std::vector<std::uint32_t> argmax(out.size());
  std::size_t o = 0;
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < H / 2; ++i)
      for (int j = 0; j < W / 2; ++j, ++o) {
        std::size_t best = (static_cast<std::size_t>(c) * H + 2 * i) * W + 2 * j;
        for (int di = 0; di < 2; ++di)
          for (int dj = 0; dj < 2; ++dj) {
            const std::size_t idx = (static_cast<std::size_t>(c) * H + 2 * i + di) * W + 2 * j + dj;
            if (x[idx] > x[best]) best = idx;
          }
        out[o] = x[best];
        argmax[o] = static_cast<std::uint32_t>(best);
      }
  return g.derived(std::move(out), {a}, [&g, a, &argmax] {
    return [&g, a, am = std::move(argmax)](const Tensor<T>& go) {
      if (auto* d = g.grad_buffer(a))
        for (std::size_t k = 0; k < go.size(); ++k) (*d)[am[k]] += go[k];
    };
  });
}

// Nearest-neighbour 2x upsampling.
template <typename T>
Var upsample2(Graph<T>& g, Var a) {
  const auto& x = g.value(a);
  const int C = x.channels(), H = x.height(), W = x.width();
  Tensor<T> out(C, 2 * H, 2 * W);
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < 2 * H; ++i)
      for (int j = 0; j < 2 * W; ++j) out.at(c, i, j) = x.at(c, i / 2, j / 2);
  return g.derived(std::move(out), {a}, [&g, a] {
    return [&g, a](const Tensor<T>& go) {
      if (auto* d = g.grad_buffer(a))
        for (int c = 0; c < go.channels(); ++c)
          for (int i = 0; i < go.height(); ++i)
            for (int j = 0; j < go.width(); ++j) d->at(c, i / 2, j / 2) += go.at(c, i, j);
    };
  });
}

// ---------------------------------------------------------------------------
// Convolution

// Same-size convolution with odd kernel k and zero padding k/2.
// weight: Shape{out, in, k*k}; bias: Shape{out, 1, 1}.
template <typename T>
Var conv2d(Graph<T>& g, Var x, Var weight, Var bias) {
  using detail::CMapMat;
  using detail::MapMat;
  const auto& xv = g.value(x);
  const auto& wv = g.value(weight);
  const auto& bv = g.value(bias);
  const int C = xv.channels(), H = xv.height(), W = xv.width();
  const int O = wv.channels();
  const int k = static_cast<int>(std::lround(std::sqrt(static_cast<double>(wv.width()))));
  if (wv.height() != C || k * k != wv.width() || k % 2 == 0)
    throw ConfigError("conv2d: weight " + wv.shape().str() + " incompatible with input " +
                      xv.shape().str());
  if (bv.channels() != O) throw ConfigError("conv2d: bias size mismatch");
  const int HW = H * W, CK = C * k * k;

  auto cols = std::make_shared<AlignedVector<T>>();
  const T* cols_ptr = xv.data();
  if (k != 1) {
    detail::im2col(xv, k, *cols);
    cols_ptr = cols->data();
  }
  Tensor<T> out(O, H, W);
  MapMat<T> om(out.data(), O, HW);
  om.noalias() = CMapMat<T>(wv.data(), O, CK) * CMapMat<T>(cols_ptr, CK, HW);
  for (int o = 0; o < O; ++o) om.row(o).array() += bv[o];

  return g.derived(std::move(out), {x, weight, bias}, [&] {
    return [&g, x, weight, bias, cols, k, C, H, W, O, HW, CK](const Tensor<T>& go) {
      CMapMat<T> gom(go.data(), O, HW);
      const T* colp = k == 1 ? g.value(x).data() : cols->data();
      CMapMat<T> colm(colp, CK, HW);
      if (auto* dw = g.grad_buffer(weight)) MapMat<T>(dw->data(), O, CK).noalias() += gom * colm.transpose();
      if (auto* db = g.grad_buffer(bias))
        for (int o = 0; o < O; ++o) (*db)[o] += gom.row(o).sum();
      if (auto* dx = g.grad_buffer(x)) {
        const auto& wv = g.value(weight);
        if (k == 1) {
          MapMat<T>(dx->data(), CK, HW).noalias() += CMapMat<T>(wv.data(), O, CK).transpose() * gom;
        } else {
          detail::RowMat<T> dcols = CMapMat<T>(wv.data(), O, CK).transpose() * gom;
          detail::col2im_add(dcols.data(), C, H, W, k, *dx);
        }
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Reductions used by the asking objective

template <typename T>
Var add_scalars(Graph<T>& g, Var a, Var b) {
  if (g.value(a).size() != 1 || g.value(b).size() != 1) throw ValidationError("add_scalars: need scalars");
  return add(g, a, b);
}

// Mean over pixels of the channel-summed squared error.
template <typename T>
Var sum_sq_error_per_pixel(Graph<T>& g, Var pred, Var target) {
  const auto& p = g.value(pred);
  const auto& y = g.value(target);
  detail::require_same(p.shape(), y.shape(), "reg_loss");
  const T inv = T(1) / static_cast<T>(p.shape().plane());
  T acc = 0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    const T d = p[k] - y[k];
    acc += d * d;
  }
  return g.derived(detail::scalar_tensor(acc * inv), {pred, target}, [&g, pred, target, inv] {
    return [&g, pred, target, inv](const Tensor<T>& go) {
      const auto& p = g.value(pred);
      const auto& y = g.value(target);
      const T s = T(2) * inv * go[0];
      if (auto* d = g.grad_buffer(pred))
        for (std::size_t k = 0; k < p.size(); ++k) (*d)[k] += s * (p[k] - y[k]);
      if (auto* d = g.grad_buffer(target))
        for (std::size_t k = 0; k < p.size(); ++k) (*d)[k] -= s * (p[k] - y[k]);
    };
  });
}

// Anisotropic total variation of a single-channel map, divided by H*W.
// Differences are taken only where both neighbours are in bounds.
template <typename T>
Var total_variation(Graph<T>& g, Var q) {
  const auto& v = g.value(q);
  if (v.channels() != 1) throw ValidationError("total_variation expects a single-channel map");
  const int H = v.height(), W = v.width();
  const T inv = T(1) / static_cast<T>(v.shape().plane());
  T acc = 0;
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      if (i > 0) acc += std::abs(v.at(0, i, j) - v.at(0, i - 1, j));
      if (j > 0) acc += std::abs(v.at(0, i, j) - v.at(0, i, j - 1));
    }
  return g.derived(detail::scalar_tensor(acc * inv), {q}, [&g, q, inv] {
    return [&g, q, inv](const Tensor<T>& go) {
      auto* d = g.grad_buffer(q);
      if (!d) return;
      const auto& v = g.value(q);
      const T s = inv * go[0];
      auto sgn = [](T x) { return T((x > T(0)) - (x < T(0))); };
      for (int i = 0; i < v.height(); ++i)
        for (int j = 0; j < v.width(); ++j) {
          if (i > 0) {
            const T e = s * sgn(v.at(0, i, j) - v.at(0, i - 1, j));
            d->at(0, i, j) += e;
            d->at(0, i - 1, j) -= e;
          }
          if (j > 0) {
            const T e = s * sgn(v.at(0, i, j) - v.at(0, i, j - 1));
            d->at(0, i, j) += e;
            d->at(0, i, j - 1) -= e;
          }
        }
    };
  });
}

// Question-weighted channel means: out_k = sum(q * y_k) / (sum(q) + eps).
// q: 1xHxW, y: KxHxW, result: Kx1x1.
template <typename T>
Var masked_mean(Graph<T>& g, Var q, Var y, T eps) {
  const auto& qv = g.value(q);
  const auto& yv = g.value(y);
  if (qv.channels() != 1 || qv.height() != yv.height() || qv.width() != yv.width())
    throw ValidationError("masked_mean: question " + qv.shape().str() + " vs target " + yv.shape().str());
  const int K = yv.channels();
  const std::size_t P = qv.size();
  T mass = 0;
  for (std::size_t p = 0; p < P; ++p) mass += qv[p];
  const T denom = mass + eps;
  Tensor<T> out(K, 1, 1);
  for (int c = 0; c < K; ++c) {
    T acc = 0;
    const auto ch = yv.channel(c);
    for (std::size_t p = 0; p < P; ++p) acc += qv[p] * ch[p];
    out[c] = acc / denom;
  }
  return g.derived(std::move(out), {q, y}, [&g, q, y, denom] {
    return [&g, q, y, denom, self = g.last()](const Tensor<T>& go) {
      const auto& qv = g.value(q);
      const auto& yv = g.value(y);
      const auto& av = g.value(self);
      const std::size_t P = qv.size();
      if (auto* d = g.grad_buffer(q))
        for (int c = 0; c < yv.channels(); ++c) {
          const auto ch = yv.channel(c);
          const T s = go[c] / denom;
          for (std::size_t p = 0; p < P; ++p) (*d)[p] += s * (ch[p] - av[c]);
        }
      if (auto* d = g.grad_buffer(y))
        for (int c = 0; c < yv.channels(); ++c) {
          const T s = go[c] / denom;
          auto dch = d->channel(c);
          for (std::size_t p = 0; p < P; ++p) dch[p] += s * qv[p];
        }
    };
  });
}

// Outer product of a 1xHxW map with a Kx1x1 vector -> KxHxW.
template <typename T>
Var broadcast(Graph<T>& g, Var q, Var a) {
  const auto& qv = g.value(q);
  const auto& av = g.value(a);
  if (qv.channels() != 1 || av.height() != 1 || av.width() != 1)
    throw ValidationError("broadcast: expects 1xHxW map and Kx1x1 vector");
  const int K = av.channels();
  Tensor<T> out(K, qv.height(), qv.width());
  for (int c = 0; c < K; ++c) {
    auto ch = out.channel(c);
    for (std::size_t p = 0; p < ch.size(); ++p) ch[p] = qv[p] * av[c];
  }
  return g.derived(std::move(out), {q, a}, [&g, q, a] {
    return [&g, q, a](const Tensor<T>& go) {
      const auto& qv = g.value(q);
      const auto& av = g.value(a);
      auto* dq = g.grad_buffer(q);
      auto* da = g.grad_buffer(a);
      for (int c = 0; c < av.channels(); ++c) {
        const auto gch = go.channel(c);
        T acc = 0;
        for (std::size_t p = 0; p < gch.size(); ++p) {
          if (dq) (*dq)[p] += gch[p] * av[c];
          acc += gch[p] * qv[p];
        }
        if (da) (*da)[c] += acc;
      }
    };
  });
}

}  // namespace askpaint::ad
