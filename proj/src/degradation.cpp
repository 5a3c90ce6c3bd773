#include "restoredet/degradation.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <sstream>

#include "restoredet/error.hpp"

namespace restoredet {

std::string_view to_string(KernelType type) {
  switch (type) {
    case KernelType::kNone: return "none";
    case KernelType::kIsotropic: return "isotropic";
    case KernelType::kAnisotropic: return "anisotropic";
  }
  return "none";
}

std::string_view to_string(ResampleMethod method) {
  switch (method) {
    case ResampleMethod::kNearest: return "nearest";
    case ResampleMethod::kBilinear: return "bilinear";
    case ResampleMethod::kBicubic: return "bicubic";
  }
  return "bilinear";
}

KernelType parse_kernel_type(std::string_view text) {
  if (text == "none") return KernelType::kNone;
  if (text == "isotropic") return KernelType::kIsotropic;
  if (text == "anisotropic") return KernelType::kAnisotropic;
  throw ParameterError("unknown kernel type: " + std::string(text));
}

ResampleMethod parse_resample_method(std::string_view text) {
  if (text == "nearest") return ResampleMethod::kNearest;
  if (text == "bilinear") return ResampleMethod::kBilinear;
  if (text == "bicubic") return ResampleMethod::kBicubic;
  throw ParameterError("unknown resample method: " + std::string(text));
}

DegradationParams DegradationParams::identity(int height, int width) {
  DegradationParams p;
  p.output_size = {height, width};
  return p;
}

void DegradationParams::validate(int stride) const {
  auto fail = [](const std::string& what) { throw ParameterError("degradation params: " + what); };
  switch (kernel_type) {
    case KernelType::kNone:
      if (kernel_size != 0) fail("kernel none requires kernel_size 0");
      break;
    case KernelType::kIsotropic:
      if (width_major != width_minor) fail("isotropic kernel requires equal widths");
      if (width_major < 0.1 || width_major > 2.4) fail("isotropic width outside [0.1, 2.4]");
      if (angle != 0.0) fail("isotropic kernel requires angle 0");
      break;
    case KernelType::kAnisotropic:
      if (width_major < 0.5 || width_major > 6.0) fail("anisotropic major width outside [0.5, 6]");
      if (!(width_minor > 0.0) || width_minor > width_major) fail("anisotropic minor width outside (0, major]");
      if (angle < 0.0 || angle > std::numbers::pi) fail("angle outside [0, pi]");
      break;
  }
  if (kernel_type != KernelType::kNone &&
      (kernel_size < 7 || kernel_size > kMaxKernelSize || kernel_size % 2 == 0)) {
    fail("kernel_size must be odd in [7, 21]");
  }
  if (!(scale >= kMinScale && scale <= kMaxScale)) fail("scale outside [1, 4]");
  if (!(noise_sigma >= 0.0 && noise_sigma <= kMaxNoiseSigma + 1e-12)) fail("noise sigma outside [0, 25/255]");
  if (output_size.height < 1 || output_size.width < 1) fail("output size must be positive");
  if (stride > 0 && (output_size.height % stride != 0 || output_size.width % stride != 0)) {
    fail("output size must be a multiple of the stride");
  }
}

void SamplerConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("sampler config: " + what); };
  if (stride < 1) fail("stride must be positive");
  if (hr_side < 1 || hr_side % (4 * stride) != 0) fail("hr_side must be a positive multiple of 4*stride");
  if (!(scale_min >= 1.0 && scale_min <= scale_max && scale_max <= 4.0)) fail("scale range must lie in [1, 4]");
  if (!(iso_width_min > 0.0 && iso_width_min <= iso_width_max)) fail("invalid isotropic width range");
  if (!(aniso_major_min > 0.0 && aniso_major_min <= aniso_major_max)) fail("invalid anisotropic width range");
  if (!(aniso_minor_min > 0.0 && aniso_minor_min <= aniso_major_min)) fail("invalid anisotropic minor width floor");
  if (kernel_sizes.empty()) fail("kernel_sizes must not be empty");
  for (int k : kernel_sizes) {
    if (k < 1 || k % 2 == 0 || k > kMaxKernelSize) fail("kernel sizes must be odd and <= 21");
  }
  if (!(noise_sigma_max >= 0.0 && noise_sigma_max <= kMaxNoiseSigma + 1e-12)) fail("noise range must lie in [0, 25/255]");
}

std::vector<int> admissible_output_sides(const SamplerConfig& config) {
  config.validate();
  std::vector<int> sides;
  for (int side = config.hr_side / 4; side <= config.hr_side; side += config.stride) {
    sides.push_back(side);
  }
  return sides;
}

int snap_output_side(int hr_side, double raw_scale, int stride) {
  const double target = static_cast<double>(hr_side) / raw_scale;
  int side = static_cast<int>(std::lround(target / stride)) * stride;
  return std::clamp(side, hr_side / 4, hr_side);
}

namespace {

template <typename T>
const T& pick(Rng& rng, const std::vector<T>& values) {
  return values[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(values.size()) - 1))];
}

void sample_kernel_and_noise(Rng& rng, const SamplerConfig& config, DegradationParams& p) {
  p.kernel_type = static_cast<KernelType>(uniform_int(rng, 0, 2));
  if (p.kernel_type != KernelType::kNone) {
    p.kernel_size = pick(rng, config.kernel_sizes);
  }
  if (p.kernel_type == KernelType::kIsotropic) {
    p.width_major = uniform(rng, config.iso_width_min, config.iso_width_max);
    p.width_minor = p.width_major;
  } else if (p.kernel_type == KernelType::kAnisotropic) {
    p.width_major = uniform(rng, config.aniso_major_min, config.aniso_major_max);
    // (min, major]: mirror a half-open [min, major) draw.
    p.width_minor = config.aniso_minor_min + p.width_major -
                    uniform(rng, config.aniso_minor_min, p.width_major);
    p.angle = uniform(rng, 0.0, std::numbers::pi);
  }
  p.resample_method = static_cast<ResampleMethod>(uniform_int(rng, 0, 2));
  p.noise_sigma = uniform(rng, 0.0, config.noise_sigma_max);
}

}  // namespace

DegradationParams sample_degradation(Rng& rng, const SamplerConfig& config) {
  config.validate();
  DegradationParams p;
  sample_kernel_and_noise(rng, config, p);
  const double raw_scale = uniform(rng, config.scale_min, config.scale_max);
  const int side = snap_output_side(config.hr_side, raw_scale, config.stride);
  p.output_size = {side, side};
  p.scale = static_cast<double>(config.hr_side) / side;
  return p;
}

DegradationParams sample_degradation_fixed_scale(Rng& rng, const SamplerConfig& config,
                                                 double scale) {
  config.validate();
  const double side_real = config.hr_side / scale;
  const int side = static_cast<int>(std::lround(side_real));
  if (std::abs(side_real - side) > 1e-9 || side % config.stride != 0 ||
      side < config.hr_side / 4 || side > config.hr_side) {
    throw ParameterError("fixed scale does not map to an admissible output side");
  }
  DegradationParams p;
  sample_kernel_and_noise(rng, config, p);
  // Consume the scale draw so fixed-scale streams stay aligned with random ones.
  (void)uniform(rng, config.scale_min, config.scale_max);
  p.output_size = {side, side};
  p.scale = static_cast<double>(config.hr_side) / side;
  return p;
}

BlurKernel build_kernel(const DegradationParams& params) {
  BlurKernel kernel;
  if (params.kernel_type == KernelType::kNone) {
    return kernel;
  }
  if (!(params.width_major > 0.0) || !(params.width_minor > 0.0)) {
    throw ParameterError("kernel widths must be positive");
  }
  if (params.kernel_size < 1 || params.kernel_size % 2 == 0) {
    throw ParameterError("kernel size must be a positive odd integer");
  }
  const int size = params.kernel_size;
  const int radius = size / 2;
  const double angle = params.kernel_type == KernelType::kIsotropic ? 0.0 : params.angle;
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  const double inv_major2 = 1.0 / (params.width_major * params.width_major);
  const double inv_minor2 = 1.0 / (params.width_minor * params.width_minor);

  kernel.size = size;
  kernel.weights.resize(static_cast<std::size_t>(size) * size);
  double total = 0.0;
  for (int row = 0; row < size; ++row) {
    for (int col = 0; col < size; ++col) {
      const double dx = col - radius;
      const double dy = row - radius;
      // Coordinates in the kernel's principal frame.
      const double along = c * dx + s * dy;
      const double across = -s * dx + c * dy;
      const double q = along * along * inv_major2 + across * across * inv_minor2;
      const double w = std::exp(-0.5 * q);
      kernel.weights[static_cast<std::size_t>(row) * size + col] = w;
      total += w;
    }
  }
  for (double& w : kernel.weights) w /= total;
  return kernel;
}

namespace {

// Reflect without repeating the edge sample: -1 -> 1, n -> n - 2.
int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

float clamp_unit(double v) {
  return static_cast<float>(std::clamp(v, 0.0, 1.0));
}

}  // namespace

ImageTensor convolve(const ImageTensor& image, const BlurKernel& kernel) {
  if (kernel.empty()) {
    return image;
  }
  if (kernel.size > 2 * std::min(image.height(), image.width())) {
    throw ParameterError("kernel larger than twice the smaller image side");
  }
  const int h = image.height();
  const int w = image.width();
  const int channels = image.channels();
  const int r = kernel.size / 2;
  const int pw = w + 2 * r;
  const int ph = h + 2 * r;

  std::vector<int> col_src(static_cast<std::size_t>(pw));
  for (int x = 0; x < pw; ++x) col_src[x] = reflect_index(x - r, w);

  ImageTensor out(h, w, channels);
  std::vector<double> padded(static_cast<std::size_t>(ph) * pw);
  std::vector<double> acc(static_cast<std::size_t>(w));
  for (int ch = 0; ch < channels; ++ch) {
    for (int y = 0; y < ph; ++y) {
      const int sy = reflect_index(y - r, h);
      for (int x = 0; x < pw; ++x) {
        padded[static_cast<std::size_t>(y) * pw + x] = image.at(sy, col_src[x], ch);
      }
    }
    for (int y = 0; y < h; ++y) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (int i = 0; i < kernel.size; ++i) {
        const double* row = &padded[static_cast<std::size_t>(y + i) * pw];
        for (int j = 0; j < kernel.size; ++j) {
          const double k = kernel.at(i, j);
          const double* src = row + j;
          for (int x = 0; x < w; ++x) acc[x] += k * src[x];
        }
      }
      for (int x = 0; x < w; ++x) out.at(y, x, ch) = clamp_unit(acc[x]);
    }
  }
  return out;
}

namespace {

struct Taps {
  // For each output index: first tap offset into idx/weight arrays.
  int per_output = 0;
  std::vector<int> index;
  std::vector<double> weight;
};

double cubic_weight(double t) {
  // Catmull-Rom, a = -0.5.
  constexpr double a = -0.5;
  t = std::abs(t);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

Taps make_taps(int in_size, int out_size, ResampleMethod method) {
  Taps taps;
  const double ratio = static_cast<double>(in_size) / out_size;
  switch (method) {
    case ResampleMethod::kNearest: {
      taps.per_output = 1;
      for (int o = 0; o < out_size; ++o) {
        const int i = static_cast<int>(std::floor((o + 0.5) * ratio));
        taps.index.push_back(std::min(i, in_size - 1));
        taps.weight.push_back(1.0);
      }
      break;
    }
    case ResampleMethod::kBilinear: {
      taps.per_output = 2;
      for (int o = 0; o < out_size; ++o) {
        const double src = std::max((o + 0.5) * ratio - 0.5, 0.0);
        const int i0 = std::min(static_cast<int>(std::floor(src)), in_size - 1);
        const int i1 = std::min(i0 + 1, in_size - 1);
        const double frac = src - i0;
        taps.index.push_back(i0);
        taps.weight.push_back(1.0 - frac);
        taps.index.push_back(i1);
        taps.weight.push_back(frac);
      }
      break;
    }
    case ResampleMethod::kBicubic: {
      taps.per_output = 4;
      for (int o = 0; o < out_size; ++o) {
        const double src = (o + 0.5) * ratio - 0.5;
        const int base = static_cast<int>(std::floor(src));
        const double frac = src - base;
        for (int k = -1; k <= 2; ++k) {
          taps.index.push_back(std::clamp(base + k, 0, in_size - 1));
          taps.weight.push_back(cubic_weight(frac - k));
        }
      }
      break;
    }
  }
  return taps;
}

}  // namespace

ImageTensor resample(const ImageTensor& image, OutputSize out_size, ResampleMethod method) {
  if (out_size.height < 1 || out_size.width < 1) {
    throw ParameterError("resample output size must be at least 1x1");
  }
  const int channels = image.channels();
  const Taps tx = make_taps(image.width(), out_size.width, method);
  const Taps ty = make_taps(image.height(), out_size.height, method);

  // Horizontal pass into a double buffer, then vertical pass.
  const int h = image.height();
  const int ow = out_size.width;
  std::vector<double> mid(static_cast<std::size_t>(h) * ow * channels);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < ow; ++x) {
      for (int c = 0; c < channels; ++c) {
        double v = 0.0;
        for (int t = 0; t < tx.per_output; ++t) {
          const std::size_t k = static_cast<std::size_t>(x) * tx.per_output + t;
          v += tx.weight[k] * image.at(y, tx.index[k], c);
        }
        mid[(static_cast<std::size_t>(y) * ow + x) * channels + c] = v;
      }
    }
  }
  ImageTensor out(out_size.height, ow, channels);
  for (int y = 0; y < out_size.height; ++y) {
    for (int x = 0; x < ow; ++x) {
      for (int c = 0; c < channels; ++c) {
        double v = 0.0;
        for (int t = 0; t < ty.per_output; ++t) {
          const std::size_t k = static_cast<std::size_t>(y) * ty.per_output + t;
          v += ty.weight[k] * mid[(static_cast<std::size_t>(ty.index[k]) * ow + x) * channels + c];
        }
        out.at(y, x, c) = clamp_unit(v);
      }
    }
  }
  return out;
}

ImageTensor add_noise(const ImageTensor& image, double sigma, Rng& rng) {
  if (!(sigma >= 0.0)) {
    throw ParameterError("noise sigma must be nonnegative");
  }
  if (sigma == 0.0) {
    return image;
  }
  ImageTensor out = image;
  std::normal_distribution<double> gauss(0.0, sigma);
  for (float& v : out.values()) {
    v = clamp_unit(static_cast<double>(v) + gauss(rng));
  }
  return out;
}

ImageTensor degrade(const ImageTensor& image, const DegradationParams& params, Rng& rng) {
  const OutputSize out = params.output_size;
  if (out.height < 1 || out.width < 1) {
    throw ParameterError("degrade: output size must be positive");
  }
  if (std::abs(params.scale * out.height - image.height()) > 0.5 ||
      std::abs(params.scale * out.width - image.width()) > 0.5) {
    std::ostringstream msg;
    msg << "degrade: input " << image.height() << "x" << image.width()
        << " inconsistent with scale " << params.scale << " and output " << out.height << "x"
        << out.width;
    throw ParameterError(msg.str());
  }
  ImageTensor blurred = convolve(image, build_kernel(params));
  ImageTensor resized = resample(blurred, out, params.resample_method);
  return add_noise(resized, params.noise_sigma, rng);
}

TransformationTarget normalize_params(const DegradationParams& params) {
  TransformationTarget t;
  t.k_norm = params.kernel_type == KernelType::kNone
                 ? 0.0
                 : static_cast<double>(params.kernel_size) / kMaxKernelSize;
  t.s_norm = (params.scale - kMinScale) / (kMaxScale - kMinScale);
  t.n_norm = params.noise_sigma / kMaxNoiseSigma;
  t.k_norm = std::clamp(t.k_norm, 0.0, 1.0);
  t.s_norm = std::clamp(t.s_norm, 0.0, 1.0);
  t.n_norm = std::clamp(t.n_norm, 0.0, 1.0);
  return t;
}

}  // namespace restoredet
