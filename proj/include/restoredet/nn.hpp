#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "restoredet/rng.hpp"
#include "restoredet/tensor.hpp"

namespace restoredet::nn {

/// Optimizer groups; the transformation decoder trains at its own rate.
enum class ParamGroup { kBase, kTransform };

template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  ParamGroup group = ParamGroup::kBase;

  Param() = default;
  Param(std::string n, int d0, int d1, int d2, int d3, ParamGroup g)
      : name(std::move(n)), value(d0, d1, d2, d3), grad(d0, d1, d2, d3), group(g) {}

  std::size_t count() const { return value.size(); }
  void zero_grad() { grad.fill(T{0}); }
};

template <typename T>
using ParamRefs = std::vector<Param<T>*>;

/// k x k convolution with bias, zero padding.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, int in_channels, int out_channels, int kernel, int stride,
         int pad, ParamGroup group = ParamGroup::kBase);

  int out_extent(int in_extent) const { return (in_extent + 2 * pad_ - kernel_) / stride_ + 1; }

  Tensor<T> forward(const Tensor<T>& x) const;
  /// Accumulates weight/bias gradients; returns dL/dx unless need_input_grad is false.
  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy, bool need_input_grad = true);

  /// He-normal weights scaled by `gain`, constant bias.
  void init(Rng& rng, double gain = 2.0, T bias = T{0});
  void append_params(ParamRefs<T>& out) { out.push_back(&weight); out.push_back(&bias); }

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }

  Param<T> weight;  // (out, in, k, k)
  Param<T> bias;    // (1, out, 1, 1)

 private:
  int in_ = 0;
  int out_ = 0;
  int kernel_ = 1;
  int stride_ = 1;
  int pad_ = 0;
};

/// Transposed convolution (fractionally strided), bias included.
template <typename T>
class ConvTranspose2d {
 public:
  ConvTranspose2d() = default;
  ConvTranspose2d(const std::string& name, int in_channels, int out_channels, int kernel,
                  int stride, int pad, ParamGroup group = ParamGroup::kBase);

  int out_extent(int in_extent) const { return (in_extent - 1) * stride_ - 2 * pad_ + kernel_; }

  Tensor<T> forward(const Tensor<T>& x) const;
  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy);
  void init(Rng& rng);
  void append_params(ParamRefs<T>& out) { out.push_back(&weight); out.push_back(&bias); }

  Param<T> weight;  // (in, out, k, k)
  Param<T> bias;

 private:
  int in_ = 0;
  int out_ = 0;
  int kernel_ = 4;
  int stride_ = 2;
  int pad_ = 1;
};

/// Fully connected layer on (n, c, 1, 1) tensors.
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, int in_features, int out_features,
         ParamGroup group = ParamGroup::kBase);

  Tensor<T> forward(const Tensor<T>& x) const;
  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy);
  void init(Rng& rng, double gain = 2.0);
  void append_params(ParamRefs<T>& out) { out.push_back(&weight); out.push_back(&bias); }

  Param<T> weight;  // (out, in, 1, 1)
  Param<T> bias;

 private:
  int in_ = 0;
  int out_ = 0;
};

/// Test hook: while non-null, relu() folds the sign pattern of its inputs
/// into this digest so finite-difference checks can detect kink crossings.
inline thread_local std::uint64_t* relu_sign_digest = nullptr;

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
/// dL/dx given the ReLU output y.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& y, const Tensor<T>& dy);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

template <typename T>
Tensor<T> global_average_pool(const Tensor<T>& x);
template <typename T>
Tensor<T> global_average_pool_backward(const Tensor<T>& dy, int height, int width);

/// Half-pixel bilinear resize (edge-clamped), the usual feature-map resize.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, int out_h, int out_w);
template <typename T>
Tensor<T> bilinear_resize_backward(const Tensor<T>& dy, int in_h, int in_w);

/// (n, c*r*r, h, w) -> (n, c, h*r, w*r).
template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, int r);
template <typename T>
Tensor<T> pixel_shuffle_backward(const Tensor<T>& dy, int r);

/// (n, a, 1, 1) ++ (n, b, 1, 1) -> (n, a + b, 1, 1) and its split.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace restoredet::nn
