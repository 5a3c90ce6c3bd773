#include "restoredet/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "restoredet/error.hpp"

namespace restoredet {

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("model config: " + what); };
  for (int w : stage_widths) if (w < 1) fail("stage widths must be positive");
  for (int w : upscale_widths) if (w < 1) fail("upscale widths must be positive");
  if (head_width < 1 || dt_hidden < 1 || arrd_width < 1) fail("head widths must be positive");
  if (num_classes < 1) fail("num_classes must be positive");
  if (input_channels != 1 && input_channels != 3) fail("input_channels must be 1 or 3");
  if (dt_stage < 2 || dt_stage > 4) fail("dt_stage must be 2, 3 or 4");
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.stage_widths = {2, 4, 8, 16};
  c.upscale_widths = {8, 4, 4};
  c.head_width = 4;
  c.dt_hidden = 8;
  c.arrd_width = 4;
  return c;
}

void require_stride_multiple(int height, int width) {
  if (height < kNetworkStride || width < kNetworkStride || height % kNetworkStride != 0 ||
      width % kNetworkStride != 0) {
    throw ShapeError("input sides must be positive multiples of 32, got " + std::to_string(height) +
                     "x" + std::to_string(width));
  }
}

namespace {

template <typename T>
void add_into(Tensor<T>& acc, const Tensor<T>& g) {
  if (g.size() == 0) return;
  if (acc.size() == 0) {
    acc = g;
  } else {
    acc += g;
  }
}

template <typename T>
std::size_t count_params(nn::ParamRefs<T> params) {
  std::size_t n = 0;
  for (const auto* p : params) n += p->count();
  return n;
}

template <typename T>
T logistic_grad(T y) {
  return y * (T{1} - y);
}

}  // namespace

// ---------------------------------------------------------------- Encoder

template <typename T>
Encoder<T>::Encoder(const ModelConfig& c) {
  const auto& w = c.stage_widths;
  convs_.emplace_back("encoder.stem1", c.input_channels, w[0], 3, 2, 1);
  convs_.emplace_back("encoder.stem2", w[0], w[0], 3, 2, 1);
  convs_.emplace_back("encoder.stage1", w[0], w[0], 3, 1, 1);
  convs_.emplace_back("encoder.stage2a", w[0], w[1], 3, 2, 1);
  convs_.emplace_back("encoder.stage2b", w[1], w[1], 3, 1, 1);
  convs_.emplace_back("encoder.stage3a", w[1], w[2], 3, 2, 1);
  convs_.emplace_back("encoder.stage3b", w[2], w[2], 3, 1, 1);
  convs_.emplace_back("encoder.stage4a", w[2], w[3], 3, 2, 1);
  convs_.emplace_back("encoder.stage4b", w[3], w[3], 3, 1, 1);
}

template <typename T>
void Encoder<T>::forward(const Tensor<T>& x, Cache& cache, int last_stage) const {
  require_stride_multiple(x.h(), x.w());
  const int depth = 2 * std::clamp(last_stage, 1, 4) + 1;
  cache.input = x;
  cache.acts.assign(static_cast<std::size_t>(depth), Tensor<T>());
  const Tensor<T>* in = &cache.input;
  for (int i = 0; i < depth; ++i) {
    cache.acts[i] = nn::relu(convs_[i].forward(*in));
    in = &cache.acts[i];
  }
}

template <typename T>
const Tensor<T>& Encoder<T>::stage_output(const Cache& cache, int stage) {
  const std::size_t idx = static_cast<std::size_t>(2 * stage);
  if (stage < 1 || stage > 4 || idx >= cache.acts.size()) {
    throw ShapeError("encoder stage " + std::to_string(stage) + " not computed");
  }
  return cache.acts[idx];
}

template <typename T>
void Encoder<T>::backward(const Cache& cache, const std::array<Tensor<T>, 4>& stage_grads) {
  Tensor<T> grad;
  for (int i = static_cast<int>(cache.acts.size()) - 1; i >= 0; --i) {
    if (i % 2 == 0 && i >= 2) add_into(grad, stage_grads[static_cast<std::size_t>(i / 2 - 1)]);
    if (grad.size() == 0) continue;
    const Tensor<T> d_pre = nn::relu_backward(cache.acts[i], grad);
    const Tensor<T>& input = i == 0 ? cache.input : cache.acts[i - 1];
    grad = convs_[i].backward(input, d_pre, i != 0);
  }
}

template <typename T>
void Encoder<T>::init(Rng& rng) {
  for (auto& conv : convs_) conv.init(rng);
}

template <typename T>
void Encoder<T>::append_params(nn::ParamRefs<T>& out) {
  for (auto& conv : convs_) conv.append_params(out);
}

// ----------------------------------------------------------- UpscaleBlocks

template <typename T>
UpscaleBlocks<T>::UpscaleBlocks(const ModelConfig& c)
    : up1("upscale.up1", c.stage_widths[3], c.upscale_widths[0], 4, 2, 1),
      up2("upscale.up2", c.upscale_widths[0], c.upscale_widths[1], 4, 2, 1),
      up3("upscale.up3", c.upscale_widths[1], c.upscale_widths[2], 4, 2, 1),
      skip16("upscale.skip16", c.stage_widths[2], c.upscale_widths[0], 1, 1, 0),
      skip8("upscale.skip8", c.stage_widths[1], c.upscale_widths[1], 1, 1, 0) {}

template <typename T>
Tensor<T> UpscaleBlocks<T>::forward(const Tensor<T>& f8, const Tensor<T>& f16, const Tensor<T>& f32,
                                    Cache& cache) const {
  if (f16.h() != 2 * f32.h() || f16.w() != 2 * f32.w() || f8.h() != 2 * f16.h() ||
      f8.w() != 2 * f16.w()) {
    throw ShapeError("upscale: pyramid levels are not consecutive x2 sizes");
  }
  cache.f32 = f32;
  cache.f16 = f16;
  cache.f8 = f8;
  cache.a1 = nn::relu(up1.forward(f32));
  cache.s1 = cache.a1;
  cache.s1 += skip16.forward(f16);
  cache.a2 = nn::relu(up2.forward(cache.s1));
  cache.s2 = cache.a2;
  cache.s2 += skip8.forward(f8);
  cache.a3 = nn::relu(up3.forward(cache.s2));
  return cache.a3;
}

template <typename T>
typename UpscaleBlocks<T>::InputGrads UpscaleBlocks<T>::backward(const Cache& cache, const Tensor<T>& d_f4) {
  InputGrads g;
  const Tensor<T> d_s2 = up3.backward(cache.s2, nn::relu_backward(cache.a3, d_f4));
  g.f8 = skip8.backward(cache.f8, d_s2);
  const Tensor<T> d_s1 = up2.backward(cache.s1, nn::relu_backward(cache.a2, d_s2));
  g.f16 = skip16.backward(cache.f16, d_s1);
  g.f32 = up1.backward(cache.f32, nn::relu_backward(cache.a1, d_s1));
  return g;
}

template <typename T>
void UpscaleBlocks<T>::init(Rng& rng) {
  up1.init(rng);
  up2.init(rng);
  up3.init(rng);
  skip16.init(rng, 1.0);
  skip8.init(rng, 1.0);
}

template <typename T>
void UpscaleBlocks<T>::append_params(nn::ParamRefs<T>& out) {
  up1.append_params(out);
  up2.append_params(out);
  up3.append_params(out);
  skip16.append_params(out);
  skip8.append_params(out);
}

// ---------------------------------------------------------- DetectionHeads

template <typename T>
DetectionHeads<T>::DetectionHeads(const ModelConfig& c)
    : hm1_("heads.heatmap1", c.upscale_widths[2], c.head_width, 3, 1, 1),
      hm2_("heads.heatmap2", c.head_width, c.num_classes, 1, 1, 0),
      size1_("heads.size1", c.upscale_widths[2], c.head_width, 3, 1, 1),
      size2_("heads.size2", c.head_width, 2, 1, 1, 0),
      off1_("heads.offset1", c.upscale_widths[2], c.head_width, 3, 1, 1),
      off2_("heads.offset2", c.head_width, 2, 1, 1, 0) {}

template <typename T>
NetworkOutput<T> DetectionHeads<T>::forward(const Tensor<T>& f4, Cache& cache) const {
  cache.f4 = f4;
  cache.hm_hidden = nn::relu(hm1_.forward(f4));
  cache.size_hidden = nn::relu(size1_.forward(f4));
  cache.off_hidden = nn::relu(off1_.forward(f4));

  NetworkOutput<T>& out = cache.out;
  out.heatmap = nn::sigmoid(hm2_.forward(cache.hm_hidden));
  cache.size_raw = size2_.forward(cache.size_hidden);
  out.size = cache.size_raw;
  for (T& v : out.size.values()) v = std::exp(std::clamp(v, -kSizeLogClamp, kSizeLogClamp));
  out.offset = nn::sigmoid(off2_.forward(cache.off_hidden));
  return out;
}

template <typename T>
Tensor<T> DetectionHeads<T>::backward(const Cache& cache, const NetworkOutput<T>& grads) {
  Tensor<T> d_f4 = zeros_like(cache.f4);
  auto branch = [&](nn::Conv2d<T>& first, nn::Conv2d<T>& second, const Tensor<T>& hidden,
                    const Tensor<T>& d_logits) {
    const Tensor<T> d_hidden = second.backward(hidden, d_logits);
    d_f4 += first.backward(cache.f4, nn::relu_backward(hidden, d_hidden));
  };
  if (grads.heatmap.size() != 0) {
    Tensor<T> d = grads.heatmap;
    for (std::size_t i = 0; i < d.size(); ++i) d[i] *= logistic_grad(cache.out.heatmap[i]);
    branch(hm1_, hm2_, cache.hm_hidden, d);
  }
  if (grads.size.size() != 0) {
    Tensor<T> d = grads.size;
    for (std::size_t i = 0; i < d.size(); ++i) {
      const T raw = cache.size_raw[i];
      d[i] = (raw > -kSizeLogClamp && raw < kSizeLogClamp) ? d[i] * cache.out.size[i] : T{0};
    }
    branch(size1_, size2_, cache.size_hidden, d);
  }
  if (grads.offset.size() != 0) {
    Tensor<T> d = grads.offset;
    for (std::size_t i = 0; i < d.size(); ++i) d[i] *= logistic_grad(cache.out.offset[i]);
    branch(off1_, off2_, cache.off_hidden, d);
  }
  return d_f4;
}

template <typename T>
void DetectionHeads<T>::init(Rng& rng) {
  // Heatmap prior of 0.1 everywhere: bias = -log((1 - 0.1) / 0.1).
  hm1_.init(rng);
  hm2_.init(rng, 1.0 / 3.0, static_cast<T>(-2.19));
  size1_.init(rng);
  size2_.init(rng, 1.0 / 3.0, static_cast<T>(1.0));
  off1_.init(rng);
  off2_.init(rng, 1.0 / 3.0);
}

template <typename T>
void DetectionHeads<T>::append_params(nn::ParamRefs<T>& out) {
  hm1_.append_params(out);
  hm2_.append_params(out);
  size1_.append_params(out);
  size2_.append_params(out);
  off1_.append_params(out);
  off2_.append_params(out);
}

// -------------------------------------------------------- TransformDecoder

template <typename T>
TransformDecoder<T>::TransformDecoder(const ModelConfig& c)
    : channels_(c.stage_widths[static_cast<std::size_t>(c.dt_stage - 1)]),
      fc1_("transform.fc1", 2 * channels_, c.dt_hidden, nn::ParamGroup::kTransform),
      fc2_("transform.fc2", c.dt_hidden, 3, nn::ParamGroup::kTransform) {}

template <typename T>
TransformationPrediction<T> TransformDecoder<T>::forward(const Tensor<T>& feat_hr, const Tensor<T>& feat_lr,
                                                         Cache& cache) const {
  if (feat_hr.c() != channels_ || feat_lr.c() != channels_) {
    throw ShapeError("transform decoder: feature channel mismatch");
  }
  if (feat_hr.n() != feat_lr.n()) throw ShapeError("transform decoder: batch size mismatch");
  cache.hr_h = feat_hr.h();
  cache.hr_w = feat_hr.w();
  cache.lr_h = feat_lr.h();
  cache.lr_w = feat_lr.w();
  cache.channels = channels_;
  cache.pooled = nn::concat_channels(nn::global_average_pool(feat_hr), nn::global_average_pool(feat_lr));
  cache.hidden = nn::relu(fc1_.forward(cache.pooled));
  cache.out = nn::sigmoid(fc2_.forward(cache.hidden));
  return cache.out;
}

template <typename T>
typename TransformDecoder<T>::InputGrads TransformDecoder<T>::backward(const Cache& cache, const Tensor<T>& d_out) {
  Tensor<T> d_logits = d_out;
  for (std::size_t i = 0; i < d_logits.size(); ++i) d_logits[i] *= logistic_grad(cache.out[i]);
  const Tensor<T> d_hidden = fc2_.backward(cache.hidden, d_logits);
  const Tensor<T> d_pooled = fc1_.backward(cache.pooled, nn::relu_backward(cache.hidden, d_hidden));
  const int n = d_pooled.n();
  Tensor<T> d_hr(n, cache.channels, 1, 1);
  Tensor<T> d_lr(n, cache.channels, 1, 1);
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < cache.channels; ++c) {
      d_hr.at(i, c, 0, 0) = d_pooled.at(i, c, 0, 0);
      d_lr.at(i, c, 0, 0) = d_pooled.at(i, cache.channels + c, 0, 0);
    }
  }
  return {nn::global_average_pool_backward(d_hr, cache.hr_h, cache.hr_w),
          nn::global_average_pool_backward(d_lr, cache.lr_h, cache.lr_w)};
}

template <typename T>
void TransformDecoder<T>::init(Rng& rng) {
  fc1_.init(rng);
  fc2_.init(rng, 1.0);
}

template <typename T>
void TransformDecoder<T>::append_params(nn::ParamRefs<T>& out) {
  fc1_.append_params(out);
  fc2_.append_params(out);
}

// ------------------------------------------------------ RestorationDecoder

template <typename T>
RestorationDecoder<T>::RestorationDecoder(const ModelConfig& c)
    : res1_("restore.res1", c.upscale_widths[2], c.arrd_width, 3, 1, 1),
      res2_("restore.res2", c.arrd_width, c.upscale_widths[2], 3, 1, 1),
      to_pixels_("restore.to_pixels", c.upscale_widths[2], c.input_channels * kOutputStride * kOutputStride, 1, 1, 0) {}

template <typename T>
Tensor<T> RestorationDecoder<T>::forward(const Tensor<T>& f4, int target_h, int target_w, Cache& cache) const {
  if (target_h < kOutputStride || target_w < kOutputStride || target_h % kOutputStride != 0 ||
      target_w % kOutputStride != 0) {
    throw ShapeError("restore: target sides must be positive multiples of 4");
  }
  cache.in_h = f4.h();
  cache.in_w = f4.w();
  cache.resized = nn::bilinear_resize(f4, target_h / kOutputStride, target_w / kOutputStride);
  cache.hidden = nn::relu(res1_.forward(cache.resized));
  cache.fused = cache.resized;
  cache.fused += res2_.forward(cache.hidden);
  cache.out = nn::sigmoid(nn::pixel_shuffle(to_pixels_.forward(cache.fused), kOutputStride));
  return cache.out;
}

template <typename T>
Tensor<T> RestorationDecoder<T>::backward(const Cache& cache, const Tensor<T>& d_image) {
  Tensor<T> d = d_image;
  for (std::size_t i = 0; i < d.size(); ++i) d[i] *= logistic_grad(cache.out[i]);
  const Tensor<T> d_fused = to_pixels_.backward(cache.fused, nn::pixel_shuffle_backward(d, kOutputStride));
  const Tensor<T> d_hidden = res2_.backward(cache.hidden, d_fused);
  Tensor<T> d_resized = d_fused;
  d_resized += res1_.backward(cache.resized, nn::relu_backward(cache.hidden, d_hidden));
  return nn::bilinear_resize_backward(d_resized, cache.in_h, cache.in_w);
}

template <typename T>
void RestorationDecoder<T>::init(Rng& rng) {
  res1_.init(rng);
  res2_.init(rng, 0.1);
  to_pixels_.init(rng, 1.0);
}

template <typename T>
void RestorationDecoder<T>::append_params(nn::ParamRefs<T>& out) {
  res1_.append_params(out);
  res2_.append_params(out);
  to_pixels_.append_params(out);
}

// ------------------------------------------------------------------- Model

template <typename T>
Model<T>::Model(const ModelConfig& config)
    : encoder((config.validate(), config)), upscale_blocks(config), heads(config), config_(config) {
  if (config_.enable_dt) transform_decoder.emplace(config_);
  if (config_.enable_dr) restoration_decoder.emplace(config_);
}

template <typename T>
void Model<T>::init(std::uint64_t seed) {
  // Independent substreams: shared components initialize identically
  // whichever optional decoders exist.
  Rng enc = make_rng(seed, 1);
  encoder.init(enc);
  Rng up = make_rng(seed, 2);
  upscale_blocks.init(up);
  Rng hd = make_rng(seed, 3);
  heads.init(hd);
  if (transform_decoder) {
    Rng r = make_rng(seed, 4);
    transform_decoder->init(r);
  }
  if (restoration_decoder) {
    Rng r = make_rng(seed, 5);
    restoration_decoder->init(r);
  }
}

template <typename T>
nn::ParamRefs<T> Model<T>::parameters() {
  nn::ParamRefs<T> out;
  encoder.append_params(out);
  upscale_blocks.append_params(out);
  heads.append_params(out);
  if (transform_decoder) transform_decoder->append_params(out);
  if (restoration_decoder) restoration_decoder->append_params(out);
  return out;
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

template <typename T>
std::size_t Model<T>::parameter_count() {
  return count_params(parameters());
}

template <typename T>
std::size_t Model<T>::encoder_parameter_count() {
  nn::ParamRefs<T> p;
  encoder.append_params(p);
  return count_params(p);
}

template <typename T>
std::size_t Model<T>::upscale_parameter_count() {
  nn::ParamRefs<T> p;
  upscale_blocks.append_params(p);
  return count_params(p);
}

template <typename T>
std::size_t Model<T>::detection_parameter_count() {
  nn::ParamRefs<T> p;
  heads.append_params(p);
  return count_params(p);
}

template <typename T>
std::size_t Model<T>::transform_parameter_count() {
  nn::ParamRefs<T> p;
  if (transform_decoder) transform_decoder->append_params(p);
  return count_params(p);
}

template <typename T>
std::size_t Model<T>::restoration_parameter_count() {
  nn::ParamRefs<T> p;
  if (restoration_decoder) restoration_decoder->append_params(p);
  return count_params(p);
}

template <typename T>
FeaturePyramid<T> Model<T>::encode(const Tensor<T>& images) const {
  ++counters_.encoder;
  typename Encoder<T>::Cache cache;
  encoder.forward(images, cache);
  return {Encoder<T>::stage_output(cache, 2), Encoder<T>::stage_output(cache, 3),
          Encoder<T>::stage_output(cache, 4)};
}

template <typename T>
Tensor<T> Model<T>::upscale(const FeaturePyramid<T>& pyramid) const {
  ++counters_.upscale;
  typename UpscaleBlocks<T>::Cache cache;
  return upscale_blocks.forward(pyramid.f8, pyramid.f16, pyramid.f32, cache);
}

template <typename T>
NetworkOutput<T> Model<T>::detect_heads(const Tensor<T>& f4) const {
  ++counters_.detect;
  typename DetectionHeads<T>::Cache cache;
  return heads.forward(f4, cache);
}

template <typename T>
TransformationPrediction<T> Model<T>::transform_decode(const Tensor<T>& feat_hr, const Tensor<T>& feat_lr) const {
  if (!transform_decoder) throw ConfigError("model has no transformation decoder");
  ++counters_.transform_decoder;
  typename TransformDecoder<T>::Cache cache;
  return transform_decoder->forward(feat_hr, feat_lr, cache);
}

template <typename T>
Tensor<T> Model<T>::restore(const Tensor<T>& f4, int target_h, int target_w) const {
  if (!restoration_decoder) throw ConfigError("model has no restoration decoder");
  ++counters_.restoration_decoder;
  typename RestorationDecoder<T>::Cache cache;
  return restoration_decoder->forward(f4, target_h, target_w, cache);
}

template <typename T>
NetworkOutput<T> Model<T>::forward_detection(const Tensor<T>& images) const {
  return detect_heads(upscale(encode(images)));
}

template <typename T>
Tensor<T> to_tensor(const std::vector<ImageTensor>& images) {
  if (images.empty()) return {};
  const ImageTensor& first = images.front();
  Tensor<T> t(static_cast<int>(images.size()), first.channels(), first.height(), first.width());
  for (std::size_t i = 0; i < images.size(); ++i) {
    const ImageTensor& img = images[i];
    if (!img.same_shape(first)) throw ShapeError("to_tensor: images differ in shape");
    for (int c = 0; c < img.channels(); ++c) {
      for (int y = 0; y < img.height(); ++y) {
        for (int x = 0; x < img.width(); ++x) {
          t.at(static_cast<int>(i), c, y, x) = static_cast<T>(img.at(y, x, c));
        }
      }
    }
  }
  return t;
}

template <typename T>
Tensor<T> to_tensor(const ImageTensor& image) {
  return to_tensor<T>(std::vector<ImageTensor>{image});
}

template <typename T>
ImageTensor to_image(const Tensor<T>& t, int index) {
  ImageTensor img(t.h(), t.w(), t.c());
  for (int c = 0; c < t.c(); ++c) {
    for (int y = 0; y < t.h(); ++y) {
      for (int x = 0; x < t.w(); ++x) {
        img.at(y, x, c) = static_cast<float>(std::clamp(static_cast<double>(t.at(index, c, y, x)), 0.0, 1.0));
      }
    }
  }
  return img;
}

#define RESTOREDET_INSTANTIATE(T)                                         \
  template class Encoder<T>;                                              \
  template class UpscaleBlocks<T>;                                        \
  template class DetectionHeads<T>;                                       \
  template class TransformDecoder<T>;                                     \
  template class RestorationDecoder<T>;                                   \
  template class Model<T>;                                                \
  template Tensor<T> to_tensor<T>(const std::vector<ImageTensor>&);       \
  template Tensor<T> to_tensor<T>(const ImageTensor&);                    \
  template ImageTensor to_image<T>(const Tensor<T>&, int);

RESTOREDET_INSTANTIATE(float)
RESTOREDET_INSTANTIATE(double)

#undef RESTOREDET_INSTANTIATE

}  // namespace restoredet
