#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "restoredet/error.hpp"

namespace restoredet {

/// Cache-line aligned storage. Vectorized reductions peel by address, so a
/// fixed alignment keeps floating-point results independent of heap layout.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

/// Dense NCHW tensor.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(int n, int c, int h, int w, T fill = T{0}) : shape_{n, c, h, w} {
    if (n < 0 || c < 0 || h < 0 || w < 0) throw ShapeError("negative tensor extent");
    values_.assign(static_cast<std::size_t>(n) * c * h * w, fill);
  }

  int n() const { return shape_[0]; }
  int c() const { return shape_[1]; }
  int h() const { return shape_[2]; }
  int w() const { return shape_[3]; }
  const std::array<int, 4>& shape() const { return shape_; }
  std::size_t size() const { return values_.size(); }
  std::size_t plane() const { return static_cast<std::size_t>(shape_[2]) * shape_[3]; }
  std::size_t sample_size() const { return plane() * shape_[1]; }

  T* data() { return values_.data(); }
  const T* data() const { return values_.data(); }
  T* sample(int i) { return values_.data() + i * sample_size(); }
  const T* sample(int i) const { return values_.data() + i * sample_size(); }

  T& at(int n, int c, int y, int x) { return values_[index(n, c, y, x)]; }
  T at(int n, int c, int y, int x) const { return values_[index(n, c, y, x)]; }
  T& operator[](std::size_t i) { return values_[i]; }
  T operator[](std::size_t i) const { return values_[i]; }

  std::span<T> values() { return values_; }
  std::span<const T> values() const { return values_; }

  void fill(T v) { std::fill(values_.begin(), values_.end(), v); }
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  Tensor& operator+=(const Tensor& other) {
    require_same_shape(other, "tensor +=");
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += other.values_[i];
    return *this;
  }

  void require_same_shape(const Tensor& other, const char* where) const {
    if (!same_shape(other)) throw ShapeError(std::string(where) + ": shape mismatch");
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::size_t index(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x;
  }

  std::array<int, 4> shape_{0, 0, 0, 0};
  AlignedVector<T> values_;
};

template <typename T>
Tensor<T> zeros_like(const Tensor<T>& t) {
  return Tensor<T>(t.n(), t.c(), t.h(), t.w());
}

}  // namespace restoredet
