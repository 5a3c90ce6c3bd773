#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "restoredet/image.hpp"
#include "restoredet/rng.hpp"

namespace restoredet {

inline constexpr double kMaxNoiseSigma = 25.0 / 255.0;
inline constexpr int kMaxKernelSize = 21;
inline constexpr double kMinScale = 1.0;
inline constexpr double kMaxScale = 4.0;

enum class KernelType { kNone, kIsotropic, kAnisotropic };
enum class ResampleMethod { kNearest, kBilinear, kBicubic };

std::string_view to_string(KernelType type);
std::string_view to_string(ResampleMethod method);
KernelType parse_kernel_type(std::string_view text);
ResampleMethod parse_resample_method(std::string_view text);

/// Square blur kernel stored row-major. size == 0 means "no blur".
struct BlurKernel {
  int size = 0;
  std::vector<double> weights;

  double at(int row, int col) const {
    return weights[static_cast<std::size_t>(row) * size + col];
  }
  bool empty() const { return size == 0; }
};

struct OutputSize {
  int height = 0;
  int width = 0;
  friend bool operator==(const OutputSize&, const OutputSize&) = default;
};

/// Full parameterization of one degradation: blur, then resample to
/// output_size, then additive white Gaussian noise.
struct DegradationParams {
  KernelType kernel_type = KernelType::kNone;
  int kernel_size = 0;
  double width_major = 0.0;  // std-dev in pixels
  double width_minor = 0.0;
  double angle = 0.0;        // radians in [0, pi]
  double scale = 1.0;        // hr_side / output side
  ResampleMethod resample_method = ResampleMethod::kBilinear;
  double noise_sigma = 0.0;
  OutputSize output_size;

  /// Parameters that leave an image of the given size untouched.
  static DegradationParams identity(int height, int width);

  /// Throws ParameterError when any invariant is violated. stride == 0 skips
  /// the stride-multiple check on the output size.
  void validate(int stride = 0) const;

  friend bool operator==(const DegradationParams&, const DegradationParams&) = default;
};

/// Regression labels for the transformation decoder, each in [0, 1].
struct TransformationTarget {
  double k_norm = 0.0;
  double s_norm = 0.0;
  double n_norm = 0.0;
};

struct SamplerConfig {
  int hr_side = 512;
  int stride = 32;
  double scale_min = kMinScale;
  double scale_max = kMaxScale;
  double iso_width_min = 0.1;
  double iso_width_max = 2.4;
  double aniso_major_min = 0.5;
  double aniso_major_max = 6.0;
  double aniso_minor_min = 0.1;
  std::vector<int> kernel_sizes = {7, 9, 11, 13, 15, 17, 19, 21};
  double noise_sigma_max = kMaxNoiseSigma;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

/// Output sides reachable for this configuration: the stride multiples in
/// [hr_side / 4, hr_side].
std::vector<int> admissible_output_sides(const SamplerConfig& config);

/// Snaps hr_side / raw_scale to the nearest admissible output side.
int snap_output_side(int hr_side, double raw_scale, int stride);

DegradationParams sample_degradation(Rng& rng, const SamplerConfig& config);

/// Like sample_degradation, but with the resampling ratio pinned to
/// `scale` (hr_side / scale must be an admissible side).
DegradationParams sample_degradation_fixed_scale(Rng& rng, const SamplerConfig& config,
                                                 double scale);

BlurKernel build_kernel(const DegradationParams& params);

/// Same-size 2-D filtering with reflect (edge-not-repeated) boundary handling.
ImageTensor convolve(const ImageTensor& image, const BlurKernel& kernel);

ImageTensor resample(const ImageTensor& image, OutputSize out_size, ResampleMethod method);

ImageTensor add_noise(const ImageTensor& image, double sigma, Rng& rng);

/// blur -> resample -> noise, in that order.
ImageTensor degrade(const ImageTensor& image, const DegradationParams& params, Rng& rng);

TransformationTarget normalize_params(const DegradationParams& params);

}  // namespace restoredet
