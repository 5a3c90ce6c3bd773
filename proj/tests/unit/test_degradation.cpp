#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <set>

#include "restoredet/degradation.hpp"
#include "restoredet/error.hpp"
#include "test_util.hpp"

namespace restoredet {
namespace {

DegradationParams iso(int size, double w) {
  DegradationParams p;
  p.kernel_type = KernelType::kIsotropic;
  p.kernel_size = size;
  p.width_major = p.width_minor = w;
  return p;
}

DegradationParams aniso(int size, double major, double minor, double angle) {
  DegradationParams p;
  p.kernel_type = KernelType::kAnisotropic;
  p.kernel_size = size;
  p.width_major = major;
  p.width_minor = minor;
  p.angle = angle;
  return p;
}

// Independent oracle: evaluates exp(-0.5 u^T Sigma^-1 u) with Sigma built
// from explicit rotation-matrix products, then normalizes.
std::vector<double> oracle_kernel(int size, double major, double minor, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  // Sigma = R diag(a^2, b^2) R^T
  const double s00 = c * c * major * major + s * s * minor * minor;
  const double s01 = c * s * (major * major - minor * minor);
  const double s11 = s * s * major * major + c * c * minor * minor;
  const double det = s00 * s11 - s01 * s01;
  const double i00 = s11 / det, i01 = -s01 / det, i11 = s00 / det;
  std::vector<double> w(size * size);
  double sum = 0.0;
  const int r = size / 2;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double u = x - r, v = y - r;
      w[y * size + x] = std::exp(-0.5 * (u * u * i00 + 2 * u * v * i01 + v * v * i11));
      sum += w[y * size + x];
    }
  }
  for (auto& v : w) v /= sum;
  return w;
}

TEST(Kernel, MatchesDirectGaussianFormula) {
  for (auto [size, a, b, th] : std::vector<std::tuple<int, double, double, double>>{
           {7, 1.0, 1.0, 0.0}, {11, 4.0, 1.5, 0.7}, {21, 6.0, 0.3, 2.9}, {9, 2.0, 2.0, 1.1}}) {
    const BlurKernel k = build_kernel(a == b ? iso(size, a) : aniso(size, a, b, th));
    const auto ref = oracle_kernel(size, a, b, a == b ? 0.0 : th);
    ASSERT_EQ(k.size, size);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(k.weights[i], ref[i], 1e-12);
  }
}

TEST(Kernel, NarrowIsotropicIsNearDelta) {
  const BlurKernel k = build_kernel(iso(7, 0.1));
  EXPECT_GT(k.at(3, 3), 0.999);
}

TEST(Kernel, NoneHasSizeZero) {
  DegradationParams p;
  EXPECT_TRUE(build_kernel(p).empty());
  EXPECT_TRUE(build_kernel(p).weights.empty());
}

TEST(Kernel, AnisotropicWithEqualWidthsEqualsIsotropic) {
  Rng rng = make_rng(1, 0);
  for (int t = 0; t < 100; ++t) {
    const double w = uniform(rng, 0.5, 2.4);
    const double th = uniform(rng, 0.0, std::numbers::pi);
    const int size = 7 + 2 * uniform_int(rng, 0, 7);
    const BlurKernel a = build_kernel(aniso(size, w, w, th));
    const BlurKernel b = build_kernel(iso(size, w));
    for (std::size_t i = 0; i < a.weights.size(); ++i) EXPECT_NEAR(a.weights[i], b.weights[i], 1e-8);
  }
}

TEST(Kernel, SampledKernelsAreNormalizedAndPointSymmetric) {
  SamplerConfig cfg;
  Rng rng = make_rng(2, 0);
  int built = 0;
  for (int t = 0; t < 2000; ++t) {
    const DegradationParams p = sample_degradation(rng, cfg);
    const BlurKernel k = build_kernel(p);
    if (k.empty()) continue;
    ++built;
    double sum = 0.0;
    for (double v : k.weights) {
      EXPECT_GE(v, 0.0);
      sum += v;
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
    for (int i = 0; i < k.size; ++i) {
      for (int j = 0; j < k.size; ++j) EXPECT_NEAR(k.at(i, j), k.at(k.size - 1 - i, k.size - 1 - j), 1e-9);
    }
  }
  EXPECT_GT(built, 1000);
}

TEST(Kernel, NonPositiveWidthIsRejected) {
  EXPECT_THROW(build_kernel(iso(7, 0.0)), ParameterError);
  EXPECT_THROW(build_kernel(aniso(7, 2.0, -1.0, 0.0)), ParameterError);
}

TEST(Sampling, AdmissibleSidesFor512) {
  SamplerConfig cfg;
  cfg.hr_side = 512;
  const auto sides = admissible_output_sides(cfg);
  ASSERT_EQ(sides.size(), 13u);
  for (std::size_t i = 0; i < sides.size(); ++i) EXPECT_EQ(sides[i], 128 + 32 * static_cast<int>(i));
}

TEST(Sampling, AdmissibleSidesFor128) {
  SamplerConfig cfg;
  cfg.hr_side = 128;
  EXPECT_EQ(admissible_output_sides(cfg), (std::vector<int>{32, 64, 96, 128}));
}

TEST(Sampling, SnapsToNearestStrideMultiple) {
  EXPECT_EQ(snap_output_side(512, 2.2, 32), 224);
  EXPECT_NEAR(512.0 / snap_output_side(512, 2.2, 32), 2.2857142857, 1e-9);
  EXPECT_EQ(snap_output_side(512, 1.0, 32), 512);
  EXPECT_EQ(snap_output_side(512, 4.0, 32), 128);
  EXPECT_EQ(snap_output_side(128, 3.9, 32), 32);
}

TEST(Sampling, DrawsStayInRanges) {
  SamplerConfig cfg;
  cfg.hr_side = 512;
  Rng rng = make_rng(3, 0);
  std::set<KernelType> types;
  std::set<ResampleMethod> methods;
  std::set<int> sizes;
  for (int t = 0; t < 10000; ++t) {
    const DegradationParams p = sample_degradation(rng, cfg);
    EXPECT_NO_THROW(p.validate(32));
    EXPECT_GE(p.noise_sigma, 0.0);
    EXPECT_LE(p.noise_sigma, 25.0 / 255.0);
    if (p.kernel_type == KernelType::kIsotropic) {
      EXPECT_GE(p.width_major, 0.1);
      EXPECT_LE(p.width_major, 2.4);
    } else if (p.kernel_type == KernelType::kAnisotropic) {
      EXPECT_GE(p.width_major, 0.5);
      EXPECT_LE(p.width_major, 6.0);
      EXPECT_GT(p.width_minor, 0.0);
      EXPECT_LE(p.width_minor, p.width_major);
    }
    EXPECT_EQ(p.output_size.height % 32, 0);
    EXPECT_DOUBLE_EQ(p.scale, 512.0 / p.output_size.height);
    types.insert(p.kernel_type);
    methods.insert(p.resample_method);
    if (p.kernel_size > 0) sizes.insert(p.kernel_size);
  }
  EXPECT_EQ(types.size(), 3u);
  EXPECT_EQ(methods.size(), 3u);
  EXPECT_EQ(sizes.size(), 8u);
}

TEST(Sampling, SameSeedSameDraws) {
  SamplerConfig cfg;
  Rng a = make_rng(9, 1), b = make_rng(9, 1);
  for (int t = 0; t < 50; ++t) EXPECT_EQ(sample_degradation(a, cfg), sample_degradation(b, cfg));
}

TEST(Sampling, FixedScalePinsResolution) {
  SamplerConfig cfg;
  cfg.hr_side = 128;
  Rng rng = make_rng(4, 0);
  for (int t = 0; t < 200; ++t) {
    const DegradationParams p = sample_degradation_fixed_scale(rng, cfg, 2.0);
    EXPECT_EQ(p.output_size.height, 64);
    EXPECT_EQ(p.scale, 2.0);
  }
  EXPECT_THROW(sample_degradation_fixed_scale(rng, cfg, 3.0), ParameterError);
}

TEST(Sampling, InvalidConfigIsRejected) {
  SamplerConfig cfg;
  cfg.hr_side = 100;
  Rng rng = make_rng(0, 0);
  EXPECT_THROW(sample_degradation(rng, cfg), ConfigError);
  cfg = {};
  cfg.scale_max = 5.0;
  EXPECT_THROW(sample_degradation(rng, cfg), ConfigError);
}

// reflect-101: -1 -> 1, n -> n - 2
int reflect(int i, int n) {
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
  return i;
}

TEST(Convolve, MatchesNaiveOracleWithReflectPadding) {
  Rng rng = make_rng(5, 0);
  const ImageTensor img = testing::random_image(rng, 13, 17);
  const BlurKernel k = build_kernel(aniso(9, 3.0, 1.0, 0.6));
  const ImageTensor out = convolve(img, k);
  const int r = k.size / 2;
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int i = 0; i < k.size; ++i) {
          for (int j = 0; j < k.size; ++j) {
            acc += k.at(i, j) * img.at(reflect(y + i - r, img.height()), reflect(x + j - r, img.width()), c);
          }
        }
        EXPECT_NEAR(out.at(y, x, c), acc, 1e-6);
      }
    }
  }
}

TEST(Convolve, EmptyKernelIsBitwiseIdentity) {
  Rng rng = make_rng(6, 0);
  const ImageTensor img = testing::random_image(rng, 8, 8);
  EXPECT_EQ(convolve(img, BlurKernel{}), img);
}

TEST(Convolve, ConstantImageStaysConstant) {
  ImageTensor img(20, 20, 3, 0.37f);
  const ImageTensor out = convolve(img, build_kernel(aniso(21, 6.0, 0.5, 1.0)));
  for (float v : out.values()) EXPECT_NEAR(v, 0.37f, 1e-6);
}

TEST(Convolve, ImpulseReproducesKernel) {
  ImageTensor img(41, 41, 1, 0.0f);
  img.at(20, 20, 0) = 1.0f;
  const BlurKernel k = build_kernel(aniso(11, 3.0, 1.0, 0.4));
  const ImageTensor out = convolve(img, k);
  // Correlation with an impulse yields the point-reflected kernel, which for
  // a centered Gaussian is the kernel itself.
  for (int i = 0; i < 11; ++i) {
    for (int j = 0; j < 11; ++j) EXPECT_NEAR(out.at(15 + i, 15 + j, 0), k.at(i, j), 1e-7);
  }
}

TEST(Convolve, OversizedKernelIsRejected) {
  ImageTensor img(4, 4, 1);
  EXPECT_THROW(convolve(img, build_kernel(iso(9, 1.0))), ParameterError);
}

TEST(Resample, BilinearIdentitySize) {
  Rng rng = make_rng(7, 0);
  const ImageTensor img = testing::random_image(rng, 16, 12);
  const ImageTensor out = resample(img, {16, 12}, ResampleMethod::kBilinear);
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(out.values()[i], img.values()[i], 1e-7);
}

TEST(Resample, NearestIntegerRatioIsSubsampling) {
  ImageTensor img(4, 4, 1);
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 4; ++x) img.at(y, x, 0) = static_cast<float>(y * 4 + x) / 16.0f;
  }
  const ImageTensor out = resample(img, {2, 2}, ResampleMethod::kNearest);
  // Half-pixel mapping: src = floor((o + 0.5) * 2) = 1, 3.
  const int idx[2] = {1, 3};
  for (int y = 0; y < 2; ++y) {
    for (int x = 0; x < 2; ++x) EXPECT_EQ(out.at(y, x, 0), img.at(idx[y], idx[x], 0));
  }
}

TEST(Resample, BilinearHalvingAveragesPairs) {
  // With half-pixel centers, output o samples input at 2o + 0.5: the mean of
  // pixels 2o and 2o + 1 in each axis.
  Rng rng = make_rng(8, 0);
  const ImageTensor img = testing::random_image(rng, 8, 8, 1);
  const ImageTensor out = resample(img, {4, 4}, ResampleMethod::kBilinear);
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 4; ++x) {
      const double m = (img.at(2 * y, 2 * x, 0) + img.at(2 * y, 2 * x + 1, 0) + img.at(2 * y + 1, 2 * x, 0) +
                        img.at(2 * y + 1, 2 * x + 1, 0)) / 4.0;
      EXPECT_NEAR(out.at(y, x, 0), m, 1e-6);
    }
  }
}

double catmull_rom(double t) {
  t = std::abs(t);
  const double a = -0.5;
  if (t <= 1) return (a + 2) * t * t * t - (a + 3) * t * t + 1;
  if (t < 2) return a * t * t * t - 5 * a * t * t + 8 * a * t - 4 * a;
  return 0.0;
}

TEST(Resample, BicubicMatchesCatmullRomOracle) {
  Rng rng = make_rng(9, 0);
  const ImageTensor img = testing::random_image(rng, 12, 12, 1);
  const ImageTensor out = resample(img, {5, 5}, ResampleMethod::kBicubic);
  const double ratio = 12.0 / 5.0;
  for (int oy = 0; oy < 5; ++oy) {
    for (int ox = 0; ox < 5; ++ox) {
      const double sy = (oy + 0.5) * ratio - 0.5, sx = (ox + 0.5) * ratio - 0.5;
      const int by = static_cast<int>(std::floor(sy)), bx = static_cast<int>(std::floor(sx));
      double acc = 0.0;
      for (int i = -1; i <= 2; ++i) {
        for (int j = -1; j <= 2; ++j) {
          const int yy = std::clamp(by + i, 0, 11), xx = std::clamp(bx + j, 0, 11);
          acc += catmull_rom(sy - (by + i)) * catmull_rom(sx - (bx + j)) * img.at(yy, xx, 0);
        }
      }
      EXPECT_NEAR(out.at(oy, ox, 0), std::clamp(acc, 0.0, 1.0), 1e-6);
    }
  }
}

TEST(Resample, ConstantImageStaysConstantForAllMethods) {
  ImageTensor img(24, 24, 3, 0.61f);
  for (auto m : {ResampleMethod::kNearest, ResampleMethod::kBilinear, ResampleMethod::kBicubic}) {
    for (auto size : {OutputSize{8, 8}, OutputSize{17, 5}, OutputSize{24, 24}}) {
      const ImageTensor out = resample(img, size, m);
      EXPECT_EQ(out.height(), size.height);
      EXPECT_EQ(out.width(), size.width);
      for (float v : out.values()) EXPECT_NEAR(v, 0.61f, 1e-6);
    }
  }
}

TEST(Resample, BicubicOutputIsClamped) {
  ImageTensor img(8, 8, 1, 0.0f);
  for (int y = 0; y < 8; ++y) {
    for (int x = 4; x < 8; ++x) img.at(y, x, 0) = 1.0f;
  }
  const ImageTensor out = resample(img, {8, 13}, ResampleMethod::kBicubic);
  EXPECT_TRUE(out.in_unit_range());
}

TEST(Noise, ZeroSigmaIsBitwiseIdentity) {
  Rng rng = make_rng(10, 0);
  const ImageTensor img = testing::random_image(rng, 9, 9);
  EXPECT_EQ(add_noise(img, 0.0, rng), img);
}

TEST(Noise, NegativeSigmaIsRejected) {
  Rng rng = make_rng(10, 1);
  EXPECT_THROW(add_noise(ImageTensor(2, 2, 1), -0.1, rng), ParameterError);
}

TEST(Noise, SameSeedSameNoise) {
  const ImageTensor img(16, 16, 3, 0.5f);
  Rng a = make_rng(11, 0), b = make_rng(11, 0);
  EXPECT_EQ(add_noise(img, 0.05, a), add_noise(img, 0.05, b));
}

TEST(Noise, EmpiricalStatisticsMatchSigma) {
  for (double sigma : {5.0 / 255.0, 13.3 / 255.0, 25.0 / 255.0}) {
    const ImageTensor img(1000, 1000, 1, 0.5f);
    Rng rng = make_rng(12, static_cast<std::uint64_t>(sigma * 1e6));
    const ImageTensor out = add_noise(img, sigma, rng);
    double sum = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double d = static_cast<double>(out.values()[i]) - 0.5;
      sum += d;
      sq += d * d;
    }
    const double n = static_cast<double>(out.size());
    const double mean = sum / n;
    const double sd = std::sqrt(sq / n - mean * mean);
    EXPECT_LT(std::abs(mean), 1e-3);
    EXPECT_NEAR(sd / sigma, 1.0, 0.01);
  }
}

TEST(Degrade, IdentityParamsAreBitwiseIdentity) {
  Rng rng = make_rng(13, 0);
  for (int t = 0; t < 20; ++t) {
    const ImageTensor img = testing::random_image(rng, 32, 32);
    const DegradationParams p = DegradationParams::identity(32, 32);
    EXPECT_EQ(degrade(img, p, rng), img);
  }
}

TEST(Degrade, OutputHasRequestedShapeAndIsReproducible) {
  Rng rng = make_rng(14, 0);
  const ImageTensor img = testing::random_image(rng, 128, 128);
  DegradationParams p = aniso(13, 3.0, 1.0, 0.3);
  p.scale = 2.0;
  p.output_size = {64, 64};
  p.resample_method = ResampleMethod::kBicubic;
  p.noise_sigma = 0.05;
  Rng a = make_rng(1, 1), b = make_rng(1, 1);
  const ImageTensor x = degrade(img, p, a);
  EXPECT_EQ(x.height(), 64);
  EXPECT_EQ(x.width(), 64);
  EXPECT_EQ(x.channels(), 3);
  EXPECT_TRUE(x.in_unit_range());
  EXPECT_EQ(x, degrade(img, p, b));
}

TEST(Degrade, AppliesBlurThenResampleThenNoise) {
  Rng rng = make_rng(15, 0);
  const ImageTensor img = testing::random_image(rng, 64, 64);
  DegradationParams p = iso(9, 1.5);
  p.scale = 2.0;
  p.output_size = {32, 32};
  p.noise_sigma = 0.02;
  Rng a = make_rng(2, 2), b = make_rng(2, 2);
  const ImageTensor composed =
      add_noise(resample(convolve(img, build_kernel(p)), p.output_size, p.resample_method), p.noise_sigma, b);
  EXPECT_EQ(degrade(img, p, a), composed);
}

TEST(Normalize, EndpointsAndNoneMapping) {
  DegradationParams p = DegradationParams::identity(128, 128);
  TransformationTarget t = normalize_params(p);
  EXPECT_EQ(t.k_norm, 0.0);
  EXPECT_EQ(t.s_norm, 0.0);
  EXPECT_EQ(t.n_norm, 0.0);
  p = iso(21, 1.0);
  p.scale = 4.0;
  p.output_size = {32, 32};
  p.noise_sigma = 25.0 / 255.0;
  t = normalize_params(p);
  EXPECT_DOUBLE_EQ(t.k_norm, 1.0);
  EXPECT_DOUBLE_EQ(t.s_norm, 1.0);
  EXPECT_DOUBLE_EQ(t.n_norm, 1.0);
  p.kernel_size = 7;
  p.scale = 2.5;
  p.noise_sigma = 5.0 / 255.0;
  t = normalize_params(p);
  EXPECT_DOUBLE_EQ(t.k_norm, 7.0 / 21.0);
  EXPECT_DOUBLE_EQ(t.s_norm, 0.5);
  EXPECT_DOUBLE_EQ(t.n_norm, 0.2);
}

TEST(Params, ValidateRejectsBrokenInvariants) {
  DegradationParams p = iso(7, 1.0);
  p.width_minor = 0.9;
  EXPECT_THROW(p.validate(), ParameterError);
  p = aniso(7, 2.0, 3.0, 0.0);
  EXPECT_THROW(p.validate(), ParameterError);
  p = iso(8, 1.0);
  EXPECT_THROW(p.validate(), ParameterError);
  p = DegradationParams::identity(100, 100);
  EXPECT_THROW(p.validate(32), ParameterError);
  EXPECT_NO_THROW(p.validate(0));
}

TEST(Params, TextRoundTrip) {
  for (auto t : {KernelType::kNone, KernelType::kIsotropic, KernelType::kAnisotropic}) {
    EXPECT_EQ(parse_kernel_type(to_string(t)), t);
  }
  for (auto m : {ResampleMethod::kNearest, ResampleMethod::kBilinear, ResampleMethod::kBicubic}) {
    EXPECT_EQ(parse_resample_method(to_string(m)), m);
  }
  EXPECT_THROW(parse_kernel_type("gauss"), ParameterError);
}

}  // namespace
}  // namespace restoredet
