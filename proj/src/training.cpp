#include "restoredet/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "restoredet/checkpoint.hpp"
#include "restoredet/error.hpp"
#include "restoredet/evaluation.hpp"
#include "restoredet/image_io.hpp"

namespace restoredet {

namespace fs = std::filesystem;

std::string_view to_string(Scheme scheme) {
  switch (scheme) {
    case Scheme::kN: return "N";
    case Scheme::kL: return "L";
    case Scheme::kNPlusL: return "N+L";
  }
  return "?";
}

Scheme parse_scheme(std::string_view text) {
  if (text == "N" || text == "n") return Scheme::kN;
  if (text == "L" || text == "l") return Scheme::kL;
  if (text == "N+L" || text == "n+l" || text == "N_plus_L" || text == "NL") return Scheme::kNPlusL;
  throw ConfigError("unknown training scheme: " + std::string(text) + " (expected N, L or N+L)");
}

ModelConfig TrainConfig::resolved_model() const {
  ModelConfig m = model;
  m.enable_dt = enable_dt;
  m.enable_dr = enable_dr;
  m.dt_stage = dt_stage;
  return m;
}

std::vector<int> TrainConfig::milestones() const {
  if (!decay_milestones.empty()) return decay_milestones;
  std::vector<int> out;
  for (double f : {0.72, 0.9}) {
    const int m = static_cast<int>(std::lround(f * epochs));
    if (m > 0 && m < epochs && (out.empty() || m > out.back())) out.push_back(m);
  }
  return out;
}

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(base_lr > 0.0) || !(dt_lr > 0.0)) throw ConfigError("learning rates must be > 0");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (warmup_iters < 0) throw ConfigError("warmup_iters must be >= 0");
  if (!(warmup_start_factor > 0.0) || warmup_start_factor > 1.0) {
    throw ConfigError("warmup_start_factor must lie in (0, 1]");
  }
  if (!(decay_factor > 0.0) || decay_factor > 1.0) throw ConfigError("decay_factor must lie in (0, 1]");
  const auto ms = milestones();
  for (std::size_t i = 0; i < ms.size(); ++i) {
    if (ms[i] < 1 || ms[i] >= epochs) throw ConfigError("milestones must lie in [1, epochs)");
    if (i > 0 && ms[i] <= ms[i - 1]) throw ConfigError("milestones must be strictly increasing");
  }
  if (hr_side < 4 * kNetworkStride || hr_side % (4 * kNetworkStride) != 0) {
    throw ConfigError("hr_side must be a positive multiple of " + std::to_string(4 * kNetworkStride));
  }
  if (dt_stage < 2 || dt_stage > 4) throw ConfigError("dt_stage must be 2, 3 or 4");
  if (eval_every < 0 || eval_limit < 0) throw ConfigError("eval_every and eval_limit must be >= 0");
  if (grad_clip_norm < 0.0) throw ConfigError("grad_clip_norm must be >= 0");
  if (loss.lambda_trans < 0.0 || loss.lambda_restore < 0.0) throw ConfigError("loss weights must be >= 0");
  resolved_model().validate();
}

namespace {

std::vector<int> to_vector(const auto& arr) { return {arr.begin(), arr.end()}; }

template <std::size_t N>
std::array<int, N> to_array(const std::vector<int>& v, const char* key) {
  if (v.size() != N) throw ConfigError(std::string(key) + " needs " + std::to_string(N) + " values");
  std::array<int, N> out{};
  std::copy(v.begin(), v.end(), out.begin());
  return out;
}

}  // namespace

const std::vector<std::string>& TrainConfig::keys() {
  static const std::vector<std::string> k = {
      "scheme", "enable_dt", "enable_dr", "epochs", "batch_size", "base_lr", "dt_lr", "momentum",
      "weight_decay", "warmup_iters", "warmup_start_factor", "decay_milestones", "decay_factor",
      "hr_side", "seed", "dt_stage", "hflip", "eval_every", "eval_limit", "grad_clip_norm",
      "stage_widths", "upscale_widths", "head_width", "dt_hidden", "arrd_width", "num_classes",
      "lambda_trans", "lambda_restore", "center_weight", "size_weight", "offset_weight",
      "focal_alpha", "focal_beta"};
  return k;
}

KeyValueConfig TrainConfig::to_kv() const {
  KeyValueConfig kv;
  kv.set("scheme", std::string(to_string(scheme)));
  kv.set("enable_dt", enable_dt ? "true" : "false");
  kv.set("enable_dr", enable_dr ? "true" : "false");
  kv.set("epochs", std::to_string(epochs));
  kv.set("batch_size", std::to_string(batch_size));
  kv.set("base_lr", format_double(base_lr));
  kv.set("dt_lr", format_double(dt_lr));
  kv.set("momentum", format_double(momentum));
  kv.set("weight_decay", format_double(weight_decay));
  kv.set("warmup_iters", std::to_string(warmup_iters));
  kv.set("warmup_start_factor", format_double(warmup_start_factor));
  kv.set("decay_milestones", join_ints(milestones()));
  kv.set("decay_factor", format_double(decay_factor));
  kv.set("hr_side", std::to_string(hr_side));
  kv.set("seed", std::to_string(seed));
  kv.set("dt_stage", std::to_string(dt_stage));
  kv.set("hflip", hflip ? "true" : "false");
  kv.set("eval_every", std::to_string(eval_every));
  kv.set("eval_limit", std::to_string(eval_limit));
  kv.set("grad_clip_norm", format_double(grad_clip_norm));
  kv.set("stage_widths", join_ints(to_vector(model.stage_widths)));
  kv.set("upscale_widths", join_ints(to_vector(model.upscale_widths)));
  kv.set("head_width", std::to_string(model.head_width));
  kv.set("dt_hidden", std::to_string(model.dt_hidden));
  kv.set("arrd_width", std::to_string(model.arrd_width));
  kv.set("num_classes", std::to_string(model.num_classes));
  kv.set("lambda_trans", format_double(loss.lambda_trans));
  kv.set("lambda_restore", format_double(loss.lambda_restore));
  kv.set("center_weight", format_double(loss.center));
  kv.set("size_weight", format_double(loss.size));
  kv.set("offset_weight", format_double(loss.offset));
  kv.set("focal_alpha", format_double(loss.focal_alpha));
  kv.set("focal_beta", format_double(loss.focal_beta));
  return kv;
}

TrainConfig TrainConfig::from_kv(const KeyValueConfig& kv) { return from_kv(kv, TrainConfig{}); }

TrainConfig TrainConfig::from_kv(const KeyValueConfig& kv, TrainConfig c) {
  const auto unknown = kv.unknown_keys(keys());
  if (!unknown.empty()) throw ConfigError("unknown training config key: " + unknown.front());
  if (kv.has("scheme")) c.scheme = parse_scheme(kv.get("scheme"));
  c.enable_dt = kv.get_bool("enable_dt", c.enable_dt);
  c.enable_dr = kv.get_bool("enable_dr", c.enable_dr);
  c.epochs = kv.get_int("epochs", c.epochs);
  c.batch_size = kv.get_int("batch_size", c.batch_size);
  c.base_lr = kv.get_double("base_lr", c.base_lr);
  c.dt_lr = kv.get_double("dt_lr", c.dt_lr);
  c.momentum = kv.get_double("momentum", c.momentum);
  c.weight_decay = kv.get_double("weight_decay", c.weight_decay);
  c.warmup_iters = kv.get_int("warmup_iters", c.warmup_iters);
  c.warmup_start_factor = kv.get_double("warmup_start_factor", c.warmup_start_factor);
  c.decay_milestones = kv.get_int_list("decay_milestones", c.decay_milestones);
  c.decay_factor = kv.get_double("decay_factor", c.decay_factor);
  c.hr_side = kv.get_int("hr_side", c.hr_side);
  const long long seed = kv.get_int64("seed", static_cast<long long>(c.seed));
  if (seed < 0) throw ConfigError("seed must be >= 0");
  c.seed = static_cast<std::uint64_t>(seed);
  c.dt_stage = kv.get_int("dt_stage", c.dt_stage);
  c.hflip = kv.get_bool("hflip", c.hflip);
  c.eval_every = kv.get_int("eval_every", c.eval_every);
  c.eval_limit = kv.get_int("eval_limit", c.eval_limit);
  c.grad_clip_norm = kv.get_double("grad_clip_norm", c.grad_clip_norm);
  if (kv.has("stage_widths")) {
    c.model.stage_widths = to_array<4>(kv.get_int_list("stage_widths", {}), "stage_widths");
  }
  if (kv.has("upscale_widths")) {
    c.model.upscale_widths = to_array<3>(kv.get_int_list("upscale_widths", {}), "upscale_widths");
  }
  c.model.head_width = kv.get_int("head_width", c.model.head_width);
  c.model.dt_hidden = kv.get_int("dt_hidden", c.model.dt_hidden);
  c.model.arrd_width = kv.get_int("arrd_width", c.model.arrd_width);
  c.model.num_classes = kv.get_int("num_classes", c.model.num_classes);
  c.loss.lambda_trans = kv.get_double("lambda_trans", c.loss.lambda_trans);
  c.loss.lambda_restore = kv.get_double("lambda_restore", c.loss.lambda_restore);
  c.loss.center = kv.get_double("center_weight", c.loss.center);
  c.loss.size = kv.get_double("size_weight", c.loss.size);
  c.loss.offset = kv.get_double("offset_weight", c.loss.offset);
  c.loss.focal_alpha = kv.get_double("focal_alpha", c.loss.focal_alpha);
  c.loss.focal_beta = kv.get_double("focal_beta", c.loss.focal_beta);
  return c;
}

std::string TrainConfig::fingerprint() const {
  return sha256_hex(to_kv().dump()).substr(0, 16);
}

std::string TrainConfig::label() const {
  std::string name;
  if (enable_dt && enable_dr) {
    name = "restoredet";
  } else if (enable_dr) {
    name = "restoredet-no-dt";
  } else if (enable_dt) {
    name = "restoredet-no-dr";
  } else {
    name = "vanilla";
  }
  return name + "/" + std::string(to_string(scheme));
}

LearningRates lr_at(long long iteration, int epoch, const TrainConfig& config) {
  if (iteration < 0) throw ConfigError("iteration must be >= 0");
  double factor = 1.0;
  if (iteration < config.warmup_iters) {
    const double t = static_cast<double>(iteration) / config.warmup_iters;
    factor = config.warmup_start_factor + (1.0 - config.warmup_start_factor) * t;
  }
  for (int m : config.milestones()) {
    if (epoch >= m) factor *= config.decay_factor;
  }
  return {config.base_lr * factor, config.dt_lr * factor};
}

Batch make_batch(const std::vector<const Scene*>& scenes, Rng& rng, const TrainConfig& config) {
  if (scenes.empty()) throw DatasetError("make_batch: empty scene list");
  SamplerConfig sampler;
  sampler.hr_side = config.hr_side;
  sampler.stride = kNetworkStride;

  Batch b;
  b.degraded = config.scheme == Scheme::kL || (config.scheme == Scheme::kNPlusL && coin_flip(rng));
  // The resolution is drawn once; kernel and noise below are redrawn per sample.
  const DegradationParams shared = b.degraded ? sample_degradation(rng, sampler)
                                              : DegradationParams::identity(config.hr_side, config.hr_side);
  for (const Scene* scene : scenes) {
    if (scene->image.height() != config.hr_side || scene->image.width() != config.hr_side) {
      throw DatasetError("scene " + std::to_string(scene->scene_id) + " is " +
                         std::to_string(scene->image.width()) + "x" + std::to_string(scene->image.height()) +
                         ", expected hr_side " + std::to_string(config.hr_side));
    }
    ImageTensor hr = scene->image;
    Annotation ann = scene->annotation;
    if (config.hflip && coin_flip(rng)) {
      hr = flip_horizontal(hr);
      const double w = hr.width();
      for (auto& box : ann.boxes) box = {w - box.x2, box.y1, w - box.x1, box.y2};
    }
    DegradationParams p = shared;
    ImageTensor lr;
    if (b.degraded) {
      p = sample_degradation(rng, sampler);
      p.scale = shared.scale;
      p.output_size = shared.output_size;
      lr = degrade(hr, p, rng);
    } else {
      lr = hr;
    }
    b.transformation_targets.push_back(normalize_params(p));
    b.lr_annotations.push_back(scale_annotation(ann, p.scale));
    b.params.push_back(p);
    b.hr_images.push_back(std::move(hr));
    b.lr_images.push_back(std::move(lr));
  }
  b.detection_targets = build_batch_targets(b.lr_annotations, shared.output_size.height,
                                            shared.output_size.width, config.model.num_classes);
  return b;
}

template <typename T>
void SgdMomentum<T>::step(const nn::ParamRefs<T>& params, LearningRates lr) {
  if (velocity_.empty()) {
    for (const auto* p : params) velocity_.push_back(zeros_like(p->value));
  }
  if (velocity_.size() != params.size()) throw ShapeError("optimizer state does not match parameters");
  const T mu = static_cast<T>(momentum_);
  const T wd = static_cast<T>(weight_decay_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto* p = params[i];
    auto& v = velocity_[i];
    p->value.require_same_shape(v, "optimizer step");
    const T rate = static_cast<T>(p->group == nn::ParamGroup::kTransform ? lr.transform : lr.base);
    auto w = p->value.values();
    auto g = p->grad.values();
    auto vv = v.values();
    for (std::size_t j = 0; j < w.size(); ++j) {
      vv[j] = mu * vv[j] + g[j] + wd * w[j];
      w[j] -= rate * vv[j];
    }
  }
}

namespace {

template <typename T>
void scale_in_place(Tensor<T>& t, double factor) {
  const T f = static_cast<T>(factor);
  for (auto& v : t.values()) v *= f;
}

std::string describe(const DegradationParams& p) {
  std::ostringstream os;
  os << "kernel=" << to_string(p.kernel_type) << " size=" << p.kernel_size << " widths=(" << p.width_major
     << "," << p.width_minor << ") angle=" << p.angle << " scale=" << p.scale
     << " resample=" << to_string(p.resample_method) << " sigma=" << p.noise_sigma << " out="
     << p.output_size.width << "x" << p.output_size.height;
  return os.str();
}

}  // namespace

template <typename T>
StepLosses forward_backward(Model<T>& model, const Batch& batch, const TrainConfig& config) {
  model.zero_grad();
  StepLosses losses;
  const Tensor<T> lr_input = to_tensor<T>(batch.lr_images);
  require_stride_multiple(lr_input.h(), lr_input.w());

  typename Encoder<T>::Cache lr_cache;
  model.encoder.forward(lr_input, lr_cache, 4);
  ++model.counters().encoder;
  typename UpscaleBlocks<T>::Cache up_cache;
  const Tensor<T> f4 = model.upscale_blocks.forward(Encoder<T>::stage_output(lr_cache, 2),
                                                    Encoder<T>::stage_output(lr_cache, 3),
                                                    Encoder<T>::stage_output(lr_cache, 4), up_cache);
  ++model.counters().upscale;
  typename DetectionHeads<T>::Cache head_cache;
  const NetworkOutput<T> out = model.heads.forward(f4, head_cache);
  ++model.counters().detect;

  NetworkOutput<T> det_grads;
  losses.detection = detection_loss(out, batch.detection_targets, config.loss, &det_grads);
  losses.l_obj = losses.detection.total;
  Tensor<T> d_f4 = model.heads.backward(head_cache, det_grads);

  std::optional<Tensor<T>> hr_input;
  if (model.restoration_decoder) {
    hr_input = to_tensor<T>(batch.hr_images);
    typename RestorationDecoder<T>::Cache dr_cache;
    const Tensor<T> restored = model.restoration_decoder->forward(f4, hr_input->h(), hr_input->w(), dr_cache);
    ++model.counters().restoration_decoder;
    Tensor<T> g;
    losses.l_d = restoration_loss(restored, *hr_input, &g);
    scale_in_place(g, config.loss.lambda_restore);
    d_f4 += model.restoration_decoder->backward(dr_cache, g);
  }

  auto up_grads = model.upscale_blocks.backward(up_cache, d_f4);
  std::array<Tensor<T>, 4> lr_stage_grads{Tensor<T>{}, std::move(up_grads.f8), std::move(up_grads.f16),
                                          std::move(up_grads.f32)};

  if (model.transform_decoder) {
    if (!hr_input) hr_input = to_tensor<T>(batch.hr_images);
    const int k = model.config().dt_stage;
    typename Encoder<T>::Cache hr_cache;
    model.encoder.forward(*hr_input, hr_cache, k);
    ++model.counters().encoder;
    typename TransformDecoder<T>::Cache dt_cache;
    const Tensor<T> pred = model.transform_decoder->forward(Encoder<T>::stage_output(hr_cache, k),
                                                            Encoder<T>::stage_output(lr_cache, k), dt_cache);
    ++model.counters().transform_decoder;
    Tensor<T> g;
    losses.l_trans = transformation_loss(pred, batch.transformation_targets, &g);
    scale_in_place(g, config.loss.lambda_trans);
    auto dt_grads = model.transform_decoder->backward(dt_cache, g);
    lr_stage_grads[k - 1] += dt_grads.lr;
    std::array<Tensor<T>, 4> hr_stage_grads;
    hr_stage_grads[k - 1] = std::move(dt_grads.hr);
    model.encoder.backward(hr_cache, hr_stage_grads);
  }
  model.encoder.backward(lr_cache, lr_stage_grads);

  try {
    losses.l_total = total_loss(losses.l_obj, losses.l_trans, losses.l_d, config.loss,
                                model.transform_decoder.has_value(), model.restoration_decoder.has_value());
  } catch (const NumericError& e) {
    std::ostringstream os;
    os << e.what() << " (l_obj=" << losses.l_obj << " l_trans=" << losses.l_trans << " l_d=" << losses.l_d
       << "; first sample: " << describe(batch.params.front()) << ")";
    throw NumericError(os.str());
  }
  return losses;
}

double global_grad_norm(const nn::ParamRefs<float>& params) {
  double sum = 0.0;
  for (const auto* p : params) {
    for (float g : p->grad.values()) sum += static_cast<double>(g) * g;
  }
  return std::sqrt(sum);
}

template <typename T>
StepLosses train_step(Model<T>& model, const Batch& batch, SgdMomentum<T>& optimizer, LearningRates lr,
                      const TrainConfig& config) {
  StepLosses losses = forward_backward(model, batch, config);
  const auto params = model.parameters();
  if (config.grad_clip_norm > 0.0) {
    double sum = 0.0;
    for (const auto* p : params) {
      for (T g : p->grad.values()) sum += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(sum);
    if (norm > config.grad_clip_norm) {
      for (auto* p : params) scale_in_place(p->grad, config.grad_clip_norm / norm);
    }
  }
  optimizer.step(params, lr);
  return losses;
}

template class SgdMomentum<float>;
template class SgdMomentum<double>;
template StepLosses forward_backward(Model<float>&, const Batch&, const TrainConfig&);
template StepLosses forward_backward(Model<double>&, const Batch&, const TrainConfig&);
template StepLosses train_step(Model<float>&, const Batch&, SgdMomentum<float>&, LearningRates, const TrainConfig&);
template StepLosses train_step(Model<double>&, const Batch&, SgdMomentum<double>&, LearningRates,
                               const TrainConfig&);

std::string to_jsonl(const HistoryRecord& r) {
  nlohmann::json j = {{"epoch", r.epoch},   {"iteration", r.iteration}, {"l_obj", r.l_obj},
                      {"l_trans", r.l_trans}, {"l_d", r.l_d},           {"l_total", r.l_total}};
  if (r.eval_ap50) j["eval_ap50"] = *r.eval_ap50;
  return j.dump();
}

std::vector<HistoryRecord> read_history(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read history: " + path.string());
  std::vector<HistoryRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      HistoryRecord r;
      r.epoch = j.at("epoch").get<int>();
      r.iteration = j.at("iteration").get<long long>();
      r.l_obj = j.at("l_obj").get<double>();
      r.l_trans = j.at("l_trans").get<double>();
      r.l_d = j.at("l_d").get<double>();
      r.l_total = j.at("l_total").get<double>();
      if (j.contains("eval_ap50")) r.eval_ap50 = j.at("eval_ap50").get<double>();
      out.push_back(r);
    } catch (const nlohmann::json::exception& e) {
      throw IoError("malformed history record in " + path.string() + ": " + e.what());
    }
  }
  return out;
}

namespace {

void write_history(const fs::path& path, const std::vector<HistoryRecord>& history) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write history: " + path.string());
  for (const auto& r : history) out << to_jsonl(r) << '\n';
}

void append_history(const fs::path& path, const HistoryRecord& r) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot write history: " + path.string());
  out << to_jsonl(r) << '\n';
}

std::string milestone_name(int epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%03d.ckpt", epoch);
  return buf;
}

}  // namespace

TrainResult train_loop(const TrainConfig& config, const fs::path& dataset_dir, const fs::path& out_dir,
                       const TrainOptions& options) {
  config.validate();
  const auto log = [&](const std::string& msg) {
    if (options.log) options.log(msg);
  };
  // Everything that can reject the run happens before out_dir is touched.
  const fs::path train_dir = dataset_dir / "train";
  if (!fs::exists(train_dir / kManifestFile)) {
    throw DatasetError("no training split at " + train_dir.string() + " (expected " + kManifestFile + ")");
  }
  const std::vector<Scene> scenes = load_dataset(train_dir);
  if (config.epochs > 0 && static_cast<int>(scenes.size()) < config.batch_size) {
    throw DatasetError("training split has " + std::to_string(scenes.size()) + " scenes, fewer than batch_size " +
                       std::to_string(config.batch_size));
  }
  std::vector<EvalSample> eval_set;
  const fs::path test_dir = dataset_dir / "test";
  if (config.eval_every > 0 && config.epochs > 0 && fs::exists(test_dir / kManifestFile)) {
    std::vector<Scene> test = load_dataset(test_dir);
    if (config.eval_limit > 0 && static_cast<int>(test.size()) > config.eval_limit) test.resize(config.eval_limit);
    eval_set = make_eval_set(test, Protocol::kRandom, derive_seed(config.seed, 0xe7a1), config.hr_side);
  }

  Model<float> model(config.resolved_model());
  model.init(config.seed);
  SgdMomentum<float> optimizer(config.momentum, config.weight_decay);
  int start_epoch = 0;
  long long iteration = 0;
  std::vector<HistoryRecord> history;

  if (!options.resume_from.empty()) {
    LoadedCheckpoint ckpt = load_checkpoint(options.resume_from);
    if (ckpt.fingerprint != config.fingerprint()) {
      throw ConfigError("checkpoint " + options.resume_from.string() + " was trained with config " +
                        ckpt.fingerprint + ", current config is " + config.fingerprint());
    }
    const auto src = ckpt.model->parameters();
    const auto dst = model.parameters();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i]->value = src[i]->value;
    optimizer.velocity() = std::move(ckpt.velocity);
    start_epoch = ckpt.epoch;
    iteration = ckpt.iteration;
    const fs::path hist = options.resume_from.parent_path() / kHistoryFile;
    if (fs::exists(hist)) {
      for (const auto& r : read_history(hist)) {
        if (r.epoch <= start_epoch) history.push_back(r);
      }
    }
    log("resuming " + config.label() + " at epoch " + std::to_string(start_epoch) + ", iteration " +
        std::to_string(iteration));
  }

  fs::create_directories(out_dir);
  const fs::path history_path = out_dir / kHistoryFile;
  write_history(history_path, history);

  const int n = static_cast<int>(scenes.size());
  const int batches = config.epochs > 0 ? n / config.batch_size : 0;
  const auto milestones = config.milestones();
  for (int epoch = start_epoch; epoch < config.epochs; ++epoch) {
    if (options.stop_after_epochs >= 0 && epoch >= options.stop_after_epochs) {
      return {out_dir / kLatestCheckpoint, history};
    }
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng = make_rng(config.seed, 0x5f00 + static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double sum_obj = 0.0, sum_trans = 0.0, sum_d = 0.0, sum_total = 0.0;
    const std::uint64_t epoch_seed = derive_seed(config.seed, 0xba00 + static_cast<std::uint64_t>(epoch));
    for (int b = 0; b < batches; ++b) {
      std::vector<const Scene*> members;
      for (int i = 0; i < config.batch_size; ++i) members.push_back(&scenes[order[b * config.batch_size + i]]);
      Rng batch_rng = make_rng(epoch_seed, static_cast<std::uint64_t>(b));
      const Batch batch = make_batch(members, batch_rng, config);
      StepLosses losses;
      try {
        losses = train_step(model, batch, optimizer, lr_at(iteration, epoch, config), config);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " [epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(b) + ", iteration " + std::to_string(iteration) + ", batch seed " +
                           std::to_string(derive_seed(epoch_seed, b)) + "]");
      }
      ++iteration;
      sum_obj += losses.l_obj;
      sum_trans += losses.l_trans;
      sum_d += losses.l_d;
      sum_total += losses.l_total;
    }

    HistoryRecord rec;
    rec.epoch = epoch + 1;
    rec.iteration = iteration;
    const double denom = std::max(batches, 1);
    rec.l_obj = sum_obj / denom;
    rec.l_trans = sum_trans / denom;
    rec.l_d = sum_d / denom;
    rec.l_total = sum_total / denom;
    const bool last = epoch + 1 == config.epochs;
    if (!eval_set.empty() && ((epoch + 1) % config.eval_every == 0 || last)) {
      EvalOptions eo;
      eo.measure_speed = false;
      rec.eval_ap50 = evaluate_model(model, eval_set, eo).ap50;
    }
    history.push_back(rec);
    append_history(history_path, rec);

    std::ostringstream msg;
    msg << config.label() << " epoch " << rec.epoch << "/" << config.epochs << " iter " << iteration
        << " l_total " << rec.l_total << " l_obj " << rec.l_obj << " l_trans " << rec.l_trans << " l_d "
        << rec.l_d;
    if (rec.eval_ap50) msg << " AP50 " << *rec.eval_ap50;
    log(msg.str());

    save_checkpoint(out_dir / kLatestCheckpoint, config, model, optimizer, epoch + 1, iteration);
    if (std::find(milestones.begin(), milestones.end(), epoch + 1) != milestones.end()) {
      save_checkpoint(out_dir / milestone_name(epoch + 1), config, model, optimizer, epoch + 1, iteration);
    }
  }

  const fs::path final_path = out_dir / kFinalCheckpoint;
  save_checkpoint(final_path, config, model, optimizer, config.epochs, iteration);
  if (config.epochs == 0) save_checkpoint(out_dir / kLatestCheckpoint, config, model, optimizer, 0, iteration);
  return {final_path, history};
}

}  // namespace restoredet
