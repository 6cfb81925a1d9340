#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <new>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "askpaint/errors.hpp"

namespace askpaint {

// Channel-major image grid: value(c, i, j) lives at (c * H + i) * W + j.
struct Shape {
  int channels = 0;
  int height = 0;
  int width = 0;

  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  std::size_t size() const { return plane() * channels; }
  friend bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    std::ostringstream os;
    os << channels << "x" << height << "x" << width;
    return os.str();
  }
};

// Eigen's kernels pick vectorization paths by pointer alignment, so every
// buffer handed to them is 64-byte aligned to keep results bit-reproducible.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) noexcept {
    return true;
  }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Storage = AlignedVector<T>;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(shape), data_(shape.size(), fill) {
    if (shape.channels < 0 || shape.height < 0 || shape.width < 0)
      throw ValidationError("negative tensor dimension");
  }
  Tensor(int c, int h, int w, T fill = T(0)) : Tensor(Shape{c, h, w}, fill) {}
  Tensor(Shape shape, const std::vector<T>& data) : shape_(shape), data_(data.begin(), data.end()) {
    if (data_.size() != shape_.size())
      throw ValidationError("tensor data size does not match shape " + shape_.str());
  }

  const Shape& shape() const { return shape_; }
  int channels() const { return shape_.channels; }
  int height() const { return shape_.height; }
  int width() const { return shape_.width; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  Storage& vec() { return data_; }
  const Storage& vec() const { return data_; }

  T& operator[](std::size_t k) { return data_[k]; }
  const T& operator[](std::size_t k) const { return data_[k]; }

  T& at(int c, int i, int j) { return data_[index(c, i, j)]; }
  const T& at(int c, int i, int j) const { return data_[index(c, i, j)]; }

  std::span<T> channel(int c) { return {data_.data() + c * shape_.plane(), shape_.plane()}; }
  std::span<const T> channel(int c) const {
    return {data_.data() + c * shape_.plane(), shape_.plane()};
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.vec().begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::size_t index(int c, int i, int j) const {
    return (static_cast<std::size_t>(c) * shape_.height + i) * shape_.width + j;
  }

  Shape shape_;
  Storage data_;
};

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>* const> parts) {
  if (parts.empty()) return {};
  Shape s = parts.front()->shape();
  s.channels = 0;
  for (const auto* p : parts) {
    if (p->height() != s.height || p->width() != s.width)
      throw ValidationError("concat: spatial size mismatch");
    s.channels += p->channels();
  }
  Tensor<T> out(s);
  auto it = out.vec().begin();
  for (const auto* p : parts) it = std::copy(p->vec().begin(), p->vec().end(), it);
  return out;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& t, int begin, int count) {
  if (begin < 0 || count < 0 || begin + count > t.channels())
    throw ValidationError("slice_channels out of range");
  Tensor<T> out(count, t.height(), t.width());
  const auto plane = t.shape().plane();
  std::copy_n(t.data() + begin * plane, count * plane, out.data());
  return out;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ValidationError("max_abs_diff: shape mismatch");
  T m = 0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a[k] - b[k]));
  return m;
}

}  // namespace askpaint
