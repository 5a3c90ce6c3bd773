#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "restoredet/image.hpp"
#include "restoredet/nn.hpp"
#include "restoredet/tensor.hpp"

namespace restoredet {

inline constexpr int kNetworkStride = 32;
inline constexpr int kOutputStride = 4;

struct ModelConfig {
  std::array<int, 4> stage_widths{16, 32, 64, 128};
  std::array<int, 3> upscale_widths{64, 32, 32};
  int head_width = 32;
  int num_classes = 3;
  int input_channels = 3;
  int dt_hidden = 64;
  int dt_stage = 3;  // backbone stage feeding the transformation decoder: 2 (/8), 3 (/16), 4 (/32)
  int arrd_width = 16;
  bool enable_dt = true;
  bool enable_dr = true;

  void validate() const;
  /// Tiny widths used by gradient checks and fast tests.
  static ModelConfig tiny();
};

template <typename T>
struct FeaturePyramid {
  Tensor<T> f8;
  Tensor<T> f16;
  Tensor<T> f32;
};

template <typename T>
struct NetworkOutput {
  Tensor<T> heatmap;  // (n, classes, h/4, w/4), logistic
  Tensor<T> size;     // (n, 2, h/4, w/4), (width, height) in output cells
  Tensor<T> offset;   // (n, 2, h/4, w/4), (dx, dy) in [0, 1)
};

/// Per-sample (k, s, n) predictions in [0, 1]; shape (n, 3, 1, 1).
template <typename T>
using TransformationPrediction = Tensor<T>;

/// Counts decoder invocations so tests can verify which heads ran.
struct CallCounters {
  std::int64_t encoder = 0;
  std::int64_t upscale = 0;
  std::int64_t detect = 0;
  std::int64_t transform_decoder = 0;
  std::int64_t restoration_decoder = 0;
};

/// Shared-weight backbone E: two stride-2 stem convs, then three stride-2 stages.
template <typename T>
class Encoder {
 public:
  struct Cache {
    Tensor<T> input;
    std::vector<Tensor<T>> acts;  // post-ReLU output of each conv
  };

  Encoder() = default;
  explicit Encoder(const ModelConfig& config);

  /// Runs the backbone through `last_stage` (1..4) and keeps activations.
  void forward(const Tensor<T>& x, Cache& cache, int last_stage = 4) const;
  /// Output of stage 1..4 (/4, /8, /16, /32).
  static const Tensor<T>& stage_output(const Cache& cache, int stage);
  /// stage_grads[k] is dL/d(stage k+1 output); empty tensors contribute nothing.
  void backward(const Cache& cache, const std::array<Tensor<T>, 4>& stage_grads);

  void init(Rng& rng);
  void append_params(nn::ParamRefs<T>& out);

 private:
  std::vector<nn::Conv2d<T>> convs_;
};

/// Three x2 transposed-conv blocks from /32 to /4 with additive /16 and /8 skips.
template <typename T>
class UpscaleBlocks {
 public:
  struct Cache {
    Tensor<T> f32;
    Tensor<T> f16;
    Tensor<T> f8;
    Tensor<T> a1, s1, a2, s2, a3;
  };
  struct InputGrads {
    Tensor<T> f8, f16, f32;
  };

  UpscaleBlocks() = default;
  explicit UpscaleBlocks(const ModelConfig& config);

  Tensor<T> forward(const Tensor<T>& f8, const Tensor<T>& f16, const Tensor<T>& f32, Cache& cache) const;
  InputGrads backward(const Cache& cache, const Tensor<T>& d_f4);

  void init(Rng& rng);
  void append_params(nn::ParamRefs<T>& out);

  nn::ConvTranspose2d<T> up1, up2, up3;
  nn::Conv2d<T> skip16, skip8;
};

/// Detection decoder: heatmap, size and offset heads.
template <typename T>
class DetectionHeads {
 public:
  struct Cache {
    Tensor<T> f4;
    Tensor<T> hm_hidden, size_hidden, off_hidden;
    Tensor<T> size_raw;
    NetworkOutput<T> out;
  };

  DetectionHeads() = default;
  explicit DetectionHeads(const ModelConfig& config);

  NetworkOutput<T> forward(const Tensor<T>& f4, Cache& cache) const;
  /// Takes gradients with respect to the squashed outputs.
  Tensor<T> backward(const Cache& cache, const NetworkOutput<T>& grads);

  void init(Rng& rng);
  void append_params(nn::ParamRefs<T>& out);

  static constexpr T kSizeLogClamp = T(8);

 private:
  nn::Conv2d<T> hm1_, hm2_, size1_, size2_, off1_, off2_;
};

/// D_t: GAP on both branches, concatenate, two FC layers, logistic output.
template <typename T>
class TransformDecoder {
 public:
  struct Cache {
    int hr_h = 0, hr_w = 0, lr_h = 0, lr_w = 0, channels = 0;
    Tensor<T> pooled;  // concatenated GAP vectors
    Tensor<T> hidden;
    Tensor<T> out;
  };
  struct InputGrads {
    Tensor<T> hr, lr;
  };

  TransformDecoder() = default;
  explicit TransformDecoder(const ModelConfig& config);

  TransformationPrediction<T> forward(const Tensor<T>& feat_hr, const Tensor<T>& feat_lr, Cache& cache) const;
  InputGrads backward(const Cache& cache, const Tensor<T>& d_out);

  void init(Rng& rng);
  void append_params(nn::ParamRefs<T>& out);

 private:
  int channels_ = 0;
  nn::Linear<T> fc1_, fc2_;
};

/// D_r (ARRD): bilinear resize to target/4, residual conv stack, 3*16-channel
/// conv, x4 sub-pixel rearrangement, logistic output.
template <typename T>
class RestorationDecoder {
 public:
  struct Cache {
    int in_h = 0, in_w = 0;
    Tensor<T> resized, hidden, fused, out;
  };

  RestorationDecoder() = default;
  explicit RestorationDecoder(const ModelConfig& config);

  Tensor<T> forward(const Tensor<T>& f4, int target_h, int target_w, Cache& cache) const;
  Tensor<T> backward(const Cache& cache, const Tensor<T>& d_image);

  void init(Rng& rng);
  void append_params(nn::ParamRefs<T>& out);

 private:
  nn::Conv2d<T> res1_, res2_, to_pixels_;
};

template <typename T>
class Model {
 public:
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  void init(std::uint64_t seed);

  /// All trainable parameters in a fixed order.
  nn::ParamRefs<T> parameters();
  void zero_grad();
  std::size_t parameter_count();

  std::size_t encoder_parameter_count();
  std::size_t upscale_parameter_count();
  std::size_t detection_parameter_count();
  std::size_t transform_parameter_count();
  std::size_t restoration_parameter_count();

  FeaturePyramid<T> encode(const Tensor<T>& images) const;
  Tensor<T> upscale(const FeaturePyramid<T>& pyramid) const;
  NetworkOutput<T> detect_heads(const Tensor<T>& f4) const;
  TransformationPrediction<T> transform_decode(const Tensor<T>& feat_hr, const Tensor<T>& feat_lr) const;
  Tensor<T> restore(const Tensor<T>& f4, int target_h, int target_w) const;

  /// encode -> upscale -> detect_heads; never touches D_t or D_r.
  NetworkOutput<T> forward_detection(const Tensor<T>& images) const;

  Encoder<T> encoder;
  UpscaleBlocks<T> upscale_blocks;
  DetectionHeads<T> heads;
  std::optional<TransformDecoder<T>> transform_decoder;
  std::optional<RestorationDecoder<T>> restoration_decoder;

  CallCounters& counters() const { return counters_; }

 private:
  ModelConfig config_;
  mutable CallCounters counters_;
};

/// Stacks images (all the same size) into an (n, c, h, w) tensor.
template <typename T>
Tensor<T> to_tensor(const std::vector<ImageTensor>& images);
template <typename T>
Tensor<T> to_tensor(const ImageTensor& image);
/// Sample i of an (n, c, h, w) tensor as an image (values clamped to [0, 1]).
template <typename T>
ImageTensor to_image(const Tensor<T>& t, int index);

void require_stride_multiple(int height, int width);

}  // namespace restoredet
