#include "restoredet/nn.hpp"

#include <Eigen/Core>

#include <cmath>
#include <random>

namespace restoredet::nn {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

struct Geometry {
  int channels;
  int height;
  int width;
  int kernel;
  int stride;
  int pad;
  int out_h;
  int out_w;
};

// Unfolds one (channels, height, width) image into (channels*k*k, out_h*out_w).
template <typename T>
void im2col(const T* image, const Geometry& g, T* cols) {
  const int out_plane = g.out_h * g.out_w;
  for (int c = 0; c < g.channels; ++c) {
    const T* plane = image + static_cast<std::size_t>(c) * g.height * g.width;
    for (int ki = 0; ki < g.kernel; ++ki) {
      for (int kj = 0; kj < g.kernel; ++kj) {
        T* row = cols + (static_cast<std::size_t>(c) * g.kernel * g.kernel + ki * g.kernel + kj) * out_plane;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad + ki;
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= g.height) {
            std::fill(dst, dst + g.out_w, T{0});
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * g.width;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.pad + kj;
            dst[ox] = (ix >= 0 && ix < g.width) ? src[ix] : T{0};
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters-adds columns back into the image.
template <typename T>
void col2im(const T* cols, const Geometry& g, T* image) {
  const int out_plane = g.out_h * g.out_w;
  for (int c = 0; c < g.channels; ++c) {
    T* plane = image + static_cast<std::size_t>(c) * g.height * g.width;
    for (int ki = 0; ki < g.kernel; ++ki) {
      for (int kj = 0; kj < g.kernel; ++kj) {
        const T* row = cols + (static_cast<std::size_t>(c) * g.kernel * g.kernel + ki * g.kernel + kj) * out_plane;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.height) continue;
          const T* src = row + oy * g.out_w;
          T* dst = plane + static_cast<std::size_t>(iy) * g.width;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.pad + kj;
            if (ix >= 0 && ix < g.width) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

template <typename T>
void normal_fill(Tensor<T>& t, Rng& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (T& v : t.values()) v = static_cast<T>(dist(rng));
}

bool is_pointwise(int kernel, int stride, int pad) { return kernel == 1 && stride == 1 && pad == 0; }

}  // namespace

// ---------------------------------------------------------------- Conv2d

template <typename T>
Conv2d<T>::Conv2d(const std::string& name, int in_channels, int out_channels, int kernel,
                  int stride, int pad, ParamGroup group)
    : weight(name + ".weight", out_channels, in_channels, kernel, kernel, group),
      bias(name + ".bias", 1, out_channels, 1, 1, group),
      in_(in_channels),
      out_(out_channels),
      kernel_(kernel),
      stride_(stride),
      pad_(pad) {}

template <typename T>
void Conv2d<T>::init(Rng& rng, double gain, T bias_value) {
  const double fan_in = static_cast<double>(in_) * kernel_ * kernel_;
  normal_fill(weight.value, rng, std::sqrt(gain / fan_in));
  bias.value.fill(bias_value);
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x) const {
  if (x.c() != in_) throw ShapeError("conv " + weight.name + ": input channel mismatch");
  const Geometry g{in_, x.h(), x.w(), kernel_, stride_, pad_, out_extent(x.h()), out_extent(x.w())};
  if (g.out_h < 1 || g.out_w < 1) throw ShapeError("conv " + weight.name + ": input too small");
  Tensor<T> y(x.n(), out_, g.out_h, g.out_w);
  const int k2 = in_ * kernel_ * kernel_;
  const int out_plane = g.out_h * g.out_w;
  ConstMapMat<T> w(weight.value.data(), out_, k2);
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> b(bias.value.data(), out_);
  const bool pointwise = is_pointwise(kernel_, stride_, pad_);
  AlignedVector<T> cols(pointwise ? 0 : static_cast<std::size_t>(k2) * out_plane);
  for (int i = 0; i < x.n(); ++i) {
    const T* col_ptr = x.sample(i);
    if (!pointwise) {
      im2col(x.sample(i), g, cols.data());
      col_ptr = cols.data();
    }
    MapMat<T> out(y.sample(i), out_, out_plane);
    out.noalias() = w * ConstMapMat<T>(col_ptr, k2, out_plane);
    out.colwise() += b;
  }
  return y;
}

template <typename T>
Tensor<T> Conv2d<T>::backward(const Tensor<T>& x, const Tensor<T>& dy, bool need_input_grad) {
  const Geometry g{in_, x.h(), x.w(), kernel_, stride_, pad_, out_extent(x.h()), out_extent(x.w())};
  if (dy.n() != x.n() || dy.c() != out_ || dy.h() != g.out_h || dy.w() != g.out_w) {
    throw ShapeError("conv " + weight.name + ": gradient shape mismatch");
  }
  const int k2 = in_ * kernel_ * kernel_;
  const int out_plane = g.out_h * g.out_w;
  ConstMapMat<T> w(weight.value.data(), out_, k2);
  MapMat<T> dw(weight.grad.data(), out_, k2);
  Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> db(bias.grad.data(), out_);
  Tensor<T> dx = need_input_grad ? zeros_like(x) : Tensor<T>();
  const bool pointwise = is_pointwise(kernel_, stride_, pad_);
  AlignedVector<T> cols(pointwise ? 0 : static_cast<std::size_t>(k2) * out_plane);
  AlignedVector<T> dcols(pointwise || !need_input_grad ? 0 : static_cast<std::size_t>(k2) * out_plane);
  for (int i = 0; i < x.n(); ++i) {
    const T* col_ptr = x.sample(i);
    if (!pointwise) {
      im2col(x.sample(i), g, cols.data());
      col_ptr = cols.data();
    }
    ConstMapMat<T> g_out(dy.sample(i), out_, out_plane);
    dw.noalias() += g_out * ConstMapMat<T>(col_ptr, k2, out_plane).transpose();
    db += g_out.rowwise().sum();
    if (!need_input_grad) continue;
    if (pointwise) {
      MapMat<T>(dx.sample(i), k2, out_plane).noalias() = w.transpose() * g_out;
    } else {
      MapMat<T>(dcols.data(), k2, out_plane).noalias() = w.transpose() * g_out;
      col2im(dcols.data(), g, dx.sample(i));
    }
  }
  return dx;
}

// ------------------------------------------------------- ConvTranspose2d

template <typename T>
ConvTranspose2d<T>::ConvTranspose2d(const std::string& name, int in_channels, int out_channels,
                                    int kernel, int stride, int pad, ParamGroup group)
    : weight(name + ".weight", in_channels, out_channels, kernel, kernel, group),
      bias(name + ".bias", 1, out_channels, 1, 1, group),
      in_(in_channels),
      out_(out_channels),
      kernel_(kernel),
      stride_(stride),
      pad_(pad) {}

template <typename T>
void ConvTranspose2d<T>::init(Rng& rng) {
  // Each output sees in * (k / stride)^2 taps.
  const double fan_in = static_cast<double>(in_) * kernel_ * kernel_ / (stride_ * stride_);
  normal_fill(weight.value, rng, std::sqrt(2.0 / fan_in));
  bias.value.fill(T{0});
}

template <typename T>
Tensor<T> ConvTranspose2d<T>::forward(const Tensor<T>& x) const {
  if (x.c() != in_) throw ShapeError("deconv " + weight.name + ": input channel mismatch");
  const int oh = out_extent(x.h());
  const int ow = out_extent(x.w());
  // The output is the "image" side of a convolution whose result has x's size.
  const Geometry g{out_, oh, ow, kernel_, stride_, pad_, x.h(), x.w()};
  const int k2 = out_ * kernel_ * kernel_;
  const int in_plane = x.h() * x.w();
  ConstMapMat<T> w(weight.value.data(), in_, k2);
  Tensor<T> y(x.n(), out_, oh, ow);
  AlignedVector<T> cols(static_cast<std::size_t>(k2) * in_plane);
  for (int i = 0; i < x.n(); ++i) {
    MapMat<T>(cols.data(), k2, in_plane).noalias() =
        w.transpose() * ConstMapMat<T>(x.sample(i), in_, in_plane);
    col2im(cols.data(), g, y.sample(i));
    T* out = y.sample(i);
    for (int c = 0; c < out_; ++c) {
      const T b = bias.value[c];
      T* plane = out + static_cast<std::size_t>(c) * oh * ow;
      for (int p = 0; p < oh * ow; ++p) plane[p] += b;
    }
  }
  return y;
}

template <typename T>
Tensor<T> ConvTranspose2d<T>::backward(const Tensor<T>& x, const Tensor<T>& dy) {
  const int oh = out_extent(x.h());
  const int ow = out_extent(x.w());
  if (dy.n() != x.n() || dy.c() != out_ || dy.h() != oh || dy.w() != ow) {
    throw ShapeError("deconv " + weight.name + ": gradient shape mismatch");
  }
  const Geometry g{out_, oh, ow, kernel_, stride_, pad_, x.h(), x.w()};
  const int k2 = out_ * kernel_ * kernel_;
  const int in_plane = x.h() * x.w();
  ConstMapMat<T> w(weight.value.data(), in_, k2);
  MapMat<T> dw(weight.grad.data(), in_, k2);
  Tensor<T> dx = zeros_like(x);
  AlignedVector<T> cols(static_cast<std::size_t>(k2) * in_plane);
  for (int i = 0; i < x.n(); ++i) {
    im2col(dy.sample(i), g, cols.data());
    ConstMapMat<T> dcols(cols.data(), k2, in_plane);
    ConstMapMat<T> xs(x.sample(i), in_, in_plane);
    dw.noalias() += xs * dcols.transpose();
    MapMat<T>(dx.sample(i), in_, in_plane).noalias() = w * dcols;
    const T* g_out = dy.sample(i);
    for (int c = 0; c < out_; ++c) {
      const T* plane = g_out + static_cast<std::size_t>(c) * oh * ow;
      T s{0};
      for (int p = 0; p < oh * ow; ++p) s += plane[p];
      bias.grad[c] += s;
    }
  }
  return dx;
}

// ---------------------------------------------------------------- Linear

template <typename T>
Linear<T>::Linear(const std::string& name, int in_features, int out_features, ParamGroup group)
    : weight(name + ".weight", out_features, in_features, 1, 1, group),
      bias(name + ".bias", 1, out_features, 1, 1, group),
      in_(in_features),
      out_(out_features) {}

template <typename T>
void Linear<T>::init(Rng& rng, double gain) {
  normal_fill(weight.value, rng, std::sqrt(gain / in_));
  bias.value.fill(T{0});
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x) const {
  if (x.c() * x.h() * x.w() != in_) throw ShapeError("linear " + weight.name + ": input size mismatch");
  Tensor<T> y(x.n(), out_, 1, 1);
  ConstMapMat<T> w(weight.value.data(), out_, in_);
  ConstMapMat<T> xs(x.data(), x.n(), in_);
  MapMat<T> ys(y.data(), x.n(), out_);
  ys.noalias() = xs * w.transpose();
  ys.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.value.data(), out_);
  return y;
}

template <typename T>
Tensor<T> Linear<T>::backward(const Tensor<T>& x, const Tensor<T>& dy) {
  ConstMapMat<T> w(weight.value.data(), out_, in_);
  ConstMapMat<T> xs(x.data(), x.n(), in_);
  ConstMapMat<T> g(dy.data(), x.n(), out_);
  MapMat<T>(weight.grad.data(), out_, in_).noalias() += g.transpose() * xs;
  Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.grad.data(), out_) += g.colwise().sum();
  Tensor<T> dx = zeros_like(x);
  MapMat<T>(dx.data(), x.n(), in_).noalias() = g * w;
  return dx;
}

// ------------------------------------------------------- pointwise ops

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (T& v : y.values()) v = v > T{0} ? v : T{0};
  if (relu_sign_digest != nullptr) {
    std::uint64_t h = *relu_sign_digest;
    for (T v : x.values()) h = (h ^ static_cast<std::uint64_t>(v > T{0})) * 0x100000001b3ULL;
    *relu_sign_digest = h;
  }
  return y;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& y, const Tensor<T>& dy) {
  Tensor<T> dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i) {
    if (!(y[i] > T{0})) dx[i] = T{0};
  }
  return dx;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (T& v : y.values()) v = T{1} / (T{1} + std::exp(-v));
  return y;
}

template <typename T>
Tensor<T> global_average_pool(const Tensor<T>& x) {
  Tensor<T> y(x.n(), x.c(), 1, 1);
  const std::size_t plane = x.plane();
  for (int i = 0; i < x.n(); ++i) {
    for (int c = 0; c < x.c(); ++c) {
      const T* p = x.sample(i) + c * plane;
      double s = 0.0;
      for (std::size_t k = 0; k < plane; ++k) s += p[k];
      y.at(i, c, 0, 0) = static_cast<T>(s / static_cast<double>(plane));
    }
  }
  return y;
}

template <typename T>
Tensor<T> global_average_pool_backward(const Tensor<T>& dy, int height, int width) {
  Tensor<T> dx(dy.n(), dy.c(), height, width);
  const T scale = T{1} / static_cast<T>(height * width);
  const std::size_t plane = dx.plane();
  for (int i = 0; i < dy.n(); ++i) {
    for (int c = 0; c < dy.c(); ++c) {
      const T g = dy.at(i, c, 0, 0) * scale;
      T* p = dx.sample(i) + c * plane;
      std::fill(p, p + plane, g);
    }
  }
  return dx;
}

namespace {

struct LinearTaps {
  std::vector<int> i0;
  std::vector<int> i1;
  std::vector<double> frac;
};

LinearTaps linear_taps(int in_size, int out_size) {
  LinearTaps taps;
  const double ratio = static_cast<double>(in_size) / out_size;
  for (int o = 0; o < out_size; ++o) {
    const double src = std::max((o + 0.5) * ratio - 0.5, 0.0);
    const int a = std::min(static_cast<int>(std::floor(src)), in_size - 1);
    taps.i0.push_back(a);
    taps.i1.push_back(std::min(a + 1, in_size - 1));
    taps.frac.push_back(src - a);
  }
  return taps;
}

}  // namespace

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_resize: output must be at least 1x1");
  if (out_h == x.h() && out_w == x.w()) return x;
  const LinearTaps ty = linear_taps(x.h(), out_h);
  const LinearTaps tx = linear_taps(x.w(), out_w);
  Tensor<T> y(x.n(), x.c(), out_h, out_w);
  for (int i = 0; i < x.n(); ++i) {
    for (int c = 0; c < x.c(); ++c) {
      for (int oy = 0; oy < out_h; ++oy) {
        const T fy = static_cast<T>(ty.frac[oy]);
        for (int ox = 0; ox < out_w; ++ox) {
          const T fx = static_cast<T>(tx.frac[ox]);
          const T top = (T{1} - fx) * x.at(i, c, ty.i0[oy], tx.i0[ox]) + fx * x.at(i, c, ty.i0[oy], tx.i1[ox]);
          const T bot = (T{1} - fx) * x.at(i, c, ty.i1[oy], tx.i0[ox]) + fx * x.at(i, c, ty.i1[oy], tx.i1[ox]);
          y.at(i, c, oy, ox) = (T{1} - fy) * top + fy * bot;
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> bilinear_resize_backward(const Tensor<T>& dy, int in_h, int in_w) {
  if (dy.h() == in_h && dy.w() == in_w) return dy;
  const LinearTaps ty = linear_taps(in_h, dy.h());
  const LinearTaps tx = linear_taps(in_w, dy.w());
  Tensor<T> dx(dy.n(), dy.c(), in_h, in_w);
  for (int i = 0; i < dy.n(); ++i) {
    for (int c = 0; c < dy.c(); ++c) {
      for (int oy = 0; oy < dy.h(); ++oy) {
        const T fy = static_cast<T>(ty.frac[oy]);
        for (int ox = 0; ox < dy.w(); ++ox) {
          const T fx = static_cast<T>(tx.frac[ox]);
          const T g = dy.at(i, c, oy, ox);
          dx.at(i, c, ty.i0[oy], tx.i0[ox]) += (T{1} - fy) * (T{1} - fx) * g;
          dx.at(i, c, ty.i0[oy], tx.i1[ox]) += (T{1} - fy) * fx * g;
          dx.at(i, c, ty.i1[oy], tx.i0[ox]) += fy * (T{1} - fx) * g;
          dx.at(i, c, ty.i1[oy], tx.i1[ox]) += fy * fx * g;
        }
      }
    }
  }
  return dx;
}

template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, int r) {
  if (x.c() % (r * r) != 0) throw ShapeError("pixel_shuffle: channels not divisible by r^2");
  const int c_out = x.c() / (r * r);
  Tensor<T> y(x.n(), c_out, x.h() * r, x.w() * r);
  for (int i = 0; i < x.n(); ++i) {
    for (int c = 0; c < c_out; ++c) {
      for (int dy = 0; dy < r; ++dy) {
        for (int dx = 0; dx < r; ++dx) {
          const int src_c = c * r * r + dy * r + dx;
          for (int yy = 0; yy < x.h(); ++yy) {
            for (int xx = 0; xx < x.w(); ++xx) {
              y.at(i, c, yy * r + dy, xx * r + dx) = x.at(i, src_c, yy, xx);
            }
          }
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> pixel_shuffle_backward(const Tensor<T>& dy, int r) {
  Tensor<T> dx(dy.n(), dy.c() * r * r, dy.h() / r, dy.w() / r);
  for (int i = 0; i < dy.n(); ++i) {
    for (int c = 0; c < dy.c(); ++c) {
      for (int oy = 0; oy < r; ++oy) {
        for (int ox = 0; ox < r; ++ox) {
          const int dst_c = c * r * r + oy * r + ox;
          for (int yy = 0; yy < dx.h(); ++yy) {
            for (int xx = 0; xx < dx.w(); ++xx) {
              dx.at(i, dst_c, yy, xx) = dy.at(i, c, yy * r + oy, xx * r + ox);
            }
          }
        }
      }
    }
  }
  return dx;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.n() != b.n() || a.h() != 1 || a.w() != 1 || b.h() != 1 || b.w() != 1) {
    throw ShapeError("concat_channels expects (n, c, 1, 1) tensors with equal n");
  }
  Tensor<T> y(a.n(), a.c() + b.c(), 1, 1);
  for (int i = 0; i < a.n(); ++i) {
    for (int c = 0; c < a.c(); ++c) y.at(i, c, 0, 0) = a.at(i, c, 0, 0);
    for (int c = 0; c < b.c(); ++c) y.at(i, a.c() + c, 0, 0) = b.at(i, c, 0, 0);
  }
  return y;
}

#define RESTOREDET_INSTANTIATE(T)                                                     \
  template class Conv2d<T>;                                                           \
  template class ConvTranspose2d<T>;                                                  \
  template class Linear<T>;                                                           \
  template Tensor<T> relu(const Tensor<T>&);                                          \
  template Tensor<T> relu_backward(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> sigmoid(const Tensor<T>&);                                       \
  template Tensor<T> global_average_pool(const Tensor<T>&);                           \
  template Tensor<T> global_average_pool_backward(const Tensor<T>&, int, int);        \
  template Tensor<T> bilinear_resize(const Tensor<T>&, int, int);                     \
  template Tensor<T> bilinear_resize_backward(const Tensor<T>&, int, int);            \
  template Tensor<T> pixel_shuffle(const Tensor<T>&, int);                            \
  template Tensor<T> pixel_shuffle_backward(const Tensor<T>&, int);                   \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);

RESTOREDET_INSTANTIATE(float)
RESTOREDET_INSTANTIATE(double)

#undef RESTOREDET_INSTANTIATE

}  // namespace restoredet::nn
