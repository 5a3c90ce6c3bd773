#include "restoredet/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <thread>
#include <tuple>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "restoredet/checkpoint.hpp"
#include "restoredet/error.hpp"
#include "restoredet/image_io.hpp"
#include "restoredet/plot.hpp"

namespace restoredet {

namespace fs = std::filesystem;

double iou(const BoundingBox& first, const BoundingBox& second) {
  // Canonical operand order keeps the result exactly symmetric even when the
  // compiler fuses multiply-adds.
  const bool swap = std::tie(second.x1, second.y1, second.x2, second.y2) <
                    std::tie(first.x1, first.y1, first.x2, first.y2);
  const BoundingBox& a = swap ? second : first;
  const BoundingBox& b = swap ? first : second;
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? std::min(1.0, inter / uni) : 0.0;
}

double envelope_area(const std::vector<double>& recall, const std::vector<double>& precision) {
  if (recall.size() != precision.size()) throw ShapeError("envelope_area: recall/precision length mismatch");
  std::vector<double> r{0.0};
  std::vector<double> p{0.0};
  r.insert(r.end(), recall.begin(), recall.end());
  p.insert(p.end(), precision.begin(), precision.end());
  r.push_back(1.0);
  p.push_back(0.0);
  for (int i = static_cast<int>(p.size()) - 2; i >= 0; --i) p[i] = std::max(p[i], p[i + 1]);
  double area = 0.0;
  for (std::size_t i = 1; i < r.size(); ++i) {
    if (r[i] != r[i - 1]) area += (r[i] - r[i - 1]) * p[i];
  }
  return area;
}

namespace {

struct Ranked {
  double score;
  int image;
  int index;  // position within the image's detection list
};

/// Detections of one class across all images in descending score order;
/// ties broken by image and list position so results are order-independent.
std::vector<Ranked> rank_class(const std::vector<std::vector<Detection>>& detections, int cls) {
  std::vector<Ranked> out;
  for (int i = 0; i < static_cast<int>(detections.size()); ++i) {
    for (int j = 0; j < static_cast<int>(detections[i].size()); ++j) {
      if (detections[i][j].class_id == cls) out.push_back({detections[i][j].score, i, j});
    }
  }
  std::sort(out.begin(), out.end(), [](const Ranked& a, const Ranked& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image != b.image) return a.image < b.image;
    return a.index < b.index;
  });
  return out;
}

void check_inputs(const std::vector<std::vector<Detection>>& detections, const std::vector<Annotation>& gt,
                  int num_classes) {
  if (detections.size() != gt.size()) throw ShapeError("compute_ap: detections and ground truth differ in image count");
  if (num_classes < 1) throw ConfigError("compute_ap: num_classes must be >= 1");
  for (const auto& a : gt) {
    for (int c : a.class_ids) {
      if (c < 0 || c >= num_classes) throw ConfigError("ground-truth class outside the class universe");
    }
  }
  for (const auto& dets : detections) {
    for (const auto& d : dets) {
      if (d.class_id < 0 || d.class_id >= num_classes) throw ConfigError("detection class outside the class universe");
    }
  }
}

/// Matching with an "ignore" mask on ground truth: detections matched to an
/// ignored box, or unmatched and themselves flagged ignorable, drop out.
struct ClassEval {
  std::optional<double> ap;
  PrCurve curve;
};

ClassEval evaluate_class(const std::vector<std::vector<Detection>>& detections, const std::vector<Annotation>& gt,
                         int cls, double iou_threshold, const std::function<bool(const BoundingBox&)>& counted) {
  int npos = 0;
  std::vector<std::vector<int>> gt_idx(gt.size());
  std::vector<std::vector<char>> used(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) {
    for (std::size_t j = 0; j < gt[i].boxes.size(); ++j) {
      if (gt[i].class_ids[j] != cls) continue;
      gt_idx[i].push_back(static_cast<int>(j));
      if (counted(gt[i].boxes[j])) ++npos;
    }
    used[i].assign(gt_idx[i].size(), 0);
  }
  ClassEval out;
  if (npos == 0) return out;

  int tp = 0, fp = 0;
  for (const Ranked& r : rank_class(detections, cls)) {
    const BoundingBox& box = detections[r.image][r.index].box;
    // Prefer counted ground truth; fall back to ignored ones.
    int best = -1;
    bool best_counted = false;
    double best_iou = iou_threshold;
    for (std::size_t k = 0; k < gt_idx[r.image].size(); ++k) {
      if (used[r.image][k]) continue;
      const BoundingBox& g = gt[r.image].boxes[gt_idx[r.image][k]];
      const bool is_counted = counted(g);
      if (best_counted && !is_counted) continue;
      const double v = iou(box, g);
      if (v < iou_threshold) continue;
      if ((is_counted && !best_counted) || v > best_iou || best < 0) {
        best = static_cast<int>(k);
        best_counted = is_counted;
        best_iou = v;
      }
    }
    if (best >= 0) {
      used[r.image][best] = 1;
      if (!best_counted) continue;
      ++tp;
    } else {
      if (!counted(box)) continue;
      ++fp;
    }
    out.curve.recall.push_back(static_cast<double>(tp) / npos);
    out.curve.precision.push_back(static_cast<double>(tp) / (tp + fp));
  }
  out.ap = envelope_area(out.curve.recall, out.curve.precision);
  return out;
}

std::optional<double> mean_of(const std::vector<std::optional<double>>& values) {
  double sum = 0.0;
  int n = 0;
  for (const auto& v : values) {
    if (v) {
      sum += *v;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

}  // namespace

ApResult compute_ap(const std::vector<std::vector<Detection>>& detections, const std::vector<Annotation>& ground_truth,
                    int num_classes, double iou_threshold) {
  check_inputs(detections, ground_truth, num_classes);
  ApResult out;
  for (int c = 0; c < num_classes; ++c) {
    ClassEval e = evaluate_class(detections, ground_truth, c, iou_threshold, [](const BoundingBox&) { return true; });
    out.per_class.push_back(e.ap);
    out.curves.push_back(std::move(e.curve));
  }
  out.mean = mean_of(out.per_class);
  return out;
}

int size_bucket(double area, const SizeBuckets& buckets) {
  if (area < buckets.small_max_area) return 0;
  if (area < buckets.medium_max_area) return 1;
  return 2;
}

SizeBucketedAp size_bucketed_ap(const std::vector<std::vector<Detection>>& detections,
                                const std::vector<Annotation>& ground_truth, int num_classes,
                                const SizeBuckets& buckets, double iou_threshold) {
  check_inputs(detections, ground_truth, num_classes);
  std::array<std::optional<double>, 3> result;
  for (int b = 0; b < 3; ++b) {
    const auto counted = [&](const BoundingBox& box) { return size_bucket(box.area(), buckets) == b; };
    std::vector<std::optional<double>> per_class;
    for (int c = 0; c < num_classes; ++c) {
      per_class.push_back(evaluate_class(detections, ground_truth, c, iou_threshold, counted).ap);
    }
    result[b] = mean_of(per_class);
  }
  return {result[0], result[1], result[2]};
}

double psnr(const ImageTensor& a, const ImageTensor& b) {
  if (!a.same_shape(b)) throw ShapeError("psnr: image shapes differ");
  if (a.size() == 0) throw ShapeError("psnr: empty images");
  double sum = 0.0;
  const auto va = a.values();
  const auto vb = b.values();
  for (std::size_t i = 0; i < va.size(); ++i) {
    const double d = static_cast<double>(va[i]) - vb[i];
    sum += d * d;
  }
  const double mse = sum / static_cast<double>(va.size());
  if (mse < 1e-10) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

std::string_view to_string(Protocol protocol) {
  switch (protocol) {
    case Protocol::kRandom: return "random";
    case Protocol::kDown2: return "down2";
    case Protocol::kDown4: return "down4";
  }
  return "?";
}

Protocol parse_protocol(std::string_view text) {
  if (text == "random") return Protocol::kRandom;
  if (text == "down2") return Protocol::kDown2;
  if (text == "down4") return Protocol::kDown4;
  throw ConfigError("unknown protocol: " + std::string(text) + " (expected random, down2 or down4)");
}

std::vector<EvalSample> make_eval_set(const std::vector<Scene>& scenes, Protocol protocol, std::uint64_t seed,
                                      int hr_side) {
  SamplerConfig sampler;
  sampler.hr_side = hr_side;
  sampler.stride = kNetworkStride;
  sampler.validate();
  const std::uint64_t protocol_seed = derive_seed(seed, static_cast<std::uint64_t>(protocol) + 1);
  std::vector<EvalSample> out;
  out.reserve(scenes.size());
  for (const Scene& scene : scenes) {
    if (scene.image.height() != hr_side || scene.image.width() != hr_side) {
      throw DatasetError("test scene " + std::to_string(scene.scene_id) + " does not match hr_side " +
                         std::to_string(hr_side));
    }
    // Keyed by scene id so any subset of the test split sees the same inputs.
    Rng rng = make_rng(protocol_seed, static_cast<std::uint64_t>(scene.scene_id));
    DegradationParams p;
    switch (protocol) {
      case Protocol::kRandom: p = sample_degradation(rng, sampler); break;
      case Protocol::kDown2: p = sample_degradation_fixed_scale(rng, sampler, 2.0); break;
      case Protocol::kDown4: p = sample_degradation_fixed_scale(rng, sampler, 4.0); break;
    }
    EvalSample s;
    s.scene_id = scene.scene_id;
    s.hr = scene.image;
    s.lr = degrade(scene.image, p, rng);
    s.lr_annotation = scale_annotation(scene.annotation, p.scale);
    s.params = p;
    s.target = normalize_params(p);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<Detection> infer(const Model<float>& model, const ImageTensor& image, const InferOptions& options) {
  require_stride_multiple(image.height(), image.width());
  const NetworkOutput<float> out = model.forward_detection(to_tensor<float>(image));
  return decode_detections(out, 0, options.max_dets, options.score_threshold);
}

namespace {

const Tensor<float>& pyramid_stage(const FeaturePyramid<float>& p, int stage) {
  switch (stage) {
    case 2: return p.f8;
    case 3: return p.f16;
    case 4: return p.f32;
    default: throw ConfigError("transformation decoder stage must be 2, 3 or 4");
  }
}

TransformationTarget predict_transformation(const Model<float>& model, const FeaturePyramid<float>& hr,
                                            const FeaturePyramid<float>& lr) {
  const int k = model.config().dt_stage;
  const Tensor<float> pred = model.transform_decode(pyramid_stage(hr, k), pyramid_stage(lr, k));
  return {pred[0], pred[1], pred[2]};
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 == 1 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

}  // namespace

TransformationErrors transformation_error(const std::vector<TransformationTarget>& predictions,
                                          const std::vector<TransformationTarget>& targets) {
  if (predictions.size() != targets.size()) throw ShapeError("transformation_error: length mismatch");
  TransformationErrors e;
  if (targets.empty()) return e;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    e.k += std::abs(predictions[i].k_norm - targets[i].k_norm);
    e.s += std::abs(predictions[i].s_norm - targets[i].s_norm);
    e.n += std::abs(predictions[i].n_norm - targets[i].n_norm);
  }
  const double n = static_cast<double>(targets.size());
  return {e.k / n, e.s / n, e.n / n};
}

TransformationErrors transformation_error(const Model<float>& model, const std::vector<EvalSample>& samples) {
  if (!model.transform_decoder) throw ConfigError("model has no transformation decoder");
  std::vector<TransformationTarget> preds, targets;
  for (const auto& s : samples) {
    preds.push_back(predict_transformation(model, model.encode(to_tensor<float>(s.hr)),
                                           model.encode(to_tensor<float>(s.lr))));
    targets.push_back(s.target);
  }
  return transformation_error(preds, targets);
}

TransformationErrors best_constant_error(const std::vector<TransformationTarget>& targets) {
  std::vector<double> k, s, n;
  for (const auto& t : targets) {
    k.push_back(t.k_norm);
    s.push_back(t.s_norm);
    n.push_back(t.n_norm);
  }
  const TransformationTarget c{median(k), median(s), median(n)};
  return transformation_error(std::vector<TransformationTarget>(targets.size(), c), targets);
}

std::string hardware_descriptor() {
  std::string cpu = "unknown cpu";
  std::ifstream in("/proc/cpuinfo");
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) cpu = line.substr(line.find_first_not_of(' ', colon + 1));
      break;
    }
  }
  std::ostringstream os;
  os << cpu << "; " << std::thread::hardware_concurrency() << " hw threads; eigen threads " << Eigen::nbThreads();
  return os.str();
}

FpsResult measure_fps(const Model<float>& model, int image_size, int warmup_iters, int timed_iters,
                      bool include_restore) {
  if (timed_iters < 10) throw BenchmarkError("measure_fps needs at least 10 timed iterations");
  if (warmup_iters < 0) throw BenchmarkError("warmup_iters must be >= 0");
  if (include_restore && !model.restoration_decoder) throw BenchmarkError("model has no restoration decoder");
  require_stride_multiple(image_size, image_size);
  ImageTensor image(image_size, image_size, 3);
  Rng rng = make_rng(0, 0xf95);
  for (auto& v : image.values()) v = static_cast<float>(uniform(rng, 0.0, 1.0));

  const auto once = [&] {
    if (include_restore) {
      const Tensor<float> f4 = model.upscale(model.encode(to_tensor<float>(image)));
      const auto dets = decode_detections(model.detect_heads(f4), 0, 100, 0.01);
      const Tensor<float> restored = model.restore(f4, 2 * image_size, 2 * image_size);
      return dets.size() + restored.size();
    }
    return infer(model, image).size();
  };
  std::size_t sink = 0;
  for (int i = 0; i < warmup_iters; ++i) sink += once();
  const auto start = std::chrono::steady_clock::now();
  for (int i = 0; i < timed_iters; ++i) sink += once();
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  static volatile std::size_t keep = 0;
  keep = keep + sink;
  return {timed_iters / std::max(seconds, 1e-9), hardware_descriptor()};
}

EvalReport evaluate_model(const Model<float>& model, const std::vector<EvalSample>& samples,
                          const EvalOptions& options) {
  if (samples.empty()) throw DatasetError("evaluation set is empty");
  const int num_classes = model.config().num_classes;
  std::vector<std::vector<Detection>> detections;
  std::vector<Annotation> gts;
  std::vector<TransformationTarget> preds, targets;
  double psnr_sum = 0.0;
  const bool write_artifacts = options.artifact_images > 0 && !options.artifact_dir.empty();
  if (write_artifacts) fs::create_directories(options.artifact_dir);

  for (std::size_t i = 0; i < samples.size(); ++i) {
    const EvalSample& s = samples[i];
    require_stride_multiple(s.lr.height(), s.lr.width());
    const FeaturePyramid<float> lr_pyr = model.encode(to_tensor<float>(s.lr));
    const Tensor<float> f4 = model.upscale(lr_pyr);
    detections.push_back(decode_detections(model.detect_heads(f4), 0, options.infer.max_dets,
                                           options.infer.score_threshold));
    gts.push_back(s.lr_annotation);
    targets.push_back(s.target);
    std::optional<ImageTensor> restored;
    if (model.restoration_decoder) {
      restored = to_image(model.restore(f4, s.hr.height(), s.hr.width()), 0);
      psnr_sum += psnr(*restored, s.hr);
    }
    if (model.transform_decoder) {
      preds.push_back(predict_transformation(model, model.encode(to_tensor<float>(s.hr)), lr_pyr));
    }
    if (write_artifacts && static_cast<int>(i) < options.artifact_images) {
      char name[64];
      std::snprintf(name, sizeof name, "scene_%06lld", static_cast<long long>(s.scene_id));
      const int up = std::max(1, 256 / s.lr.width());
      write_png(options.artifact_dir / (std::string(name) + "_detections.png"),
                annotate_detections(s.lr, detections.back(), s.lr_annotation, up));
      if (restored) write_png(options.artifact_dir / (std::string(name) + "_restored.png"), *restored);
    }
  }

  EvalReport report;
  const ApResult ap = compute_ap(detections, gts, num_classes);
  report.per_class_ap50 = ap.per_class;
  report.pr_curves = ap.curves;
  report.ap50 = ap.mean.value_or(0.0);
  report.size_ap = size_bucketed_ap(detections, gts, num_classes);
  if (model.restoration_decoder) report.psnr = psnr_sum / static_cast<double>(samples.size());
  if (model.transform_decoder) report.trans_error = transformation_error(preds, targets);
  report.trans_baseline = best_constant_error(targets);
  if (options.measure_speed) {
    const int side = samples.front().hr.height();
    const FpsResult fps = measure_fps(model, side, options.fps_warmup, options.fps_iters);
    report.fps = fps.fps;
    report.hardware = fps.hardware;
    if (model.restoration_decoder) {
      report.fps_with_restore = measure_fps(model, side, options.fps_warmup, options.fps_iters, true).fps;
    }
  }
  if (write_artifacts) {
    write_png(options.artifact_dir / "pr_curves.png", plot_pr_curves({{"model", ap.curves}}, num_classes, "PR AT IOU 0.5"));
  }
  return report;
}

namespace {

nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

std::optional<double> opt_from(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

nlohmann::json errors_json(const std::optional<TransformationErrors>& e) {
  if (!e) return nullptr;
  return {{"k", e->k}, {"s", e->s}, {"n", e->n}};
}

std::optional<TransformationErrors> errors_from(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  const auto& e = j.at(key);
  return TransformationErrors{e.at("k").get<double>(), e.at("s").get<double>(), e.at("n").get<double>()};
}

std::string fmt(const std::optional<double>& v, int precision = 3) {
  if (!v) return "n/a";
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << *v;
  return os.str();
}

}  // namespace

std::string to_jsonl(const EvalReport& r) {
  nlohmann::json per_class = nlohmann::json::array();
  for (const auto& v : r.per_class_ap50) per_class.push_back(opt(v));
  nlohmann::json j = {{"label", r.label},
                      {"scheme", r.scheme},
                      {"enable_dt", r.enable_dt},
                      {"enable_dr", r.enable_dr},
                      {"train_seed", r.train_seed},
                      {"protocol", r.protocol},
                      {"eval_seed", r.eval_seed},
                      {"ap50", r.ap50},
                      {"per_class_ap50", per_class},
                      {"ap_s", opt(r.size_ap.small)},
                      {"ap_m", opt(r.size_ap.medium)},
                      {"ap_l", opt(r.size_ap.large)},
                      {"psnr", opt(r.psnr)},
                      {"trans_error", errors_json(r.trans_error)},
                      {"trans_baseline", errors_json(r.trans_baseline)},
                      {"fps", r.fps},
                      {"fps_with_restore", opt(r.fps_with_restore)},
                      {"hardware", r.hardware},
                      {"fingerprint", r.fingerprint},
                      {"checkpoint", r.checkpoint}};
  return j.dump();
}

EvalReport report_from_json(const std::string& line) {
  try {
    const auto j = nlohmann::json::parse(line);
    EvalReport r;
    r.label = j.at("label").get<std::string>();
    r.scheme = j.at("scheme").get<std::string>();
    r.enable_dt = j.at("enable_dt").get<bool>();
    r.enable_dr = j.at("enable_dr").get<bool>();
    r.train_seed = j.at("train_seed").get<std::uint64_t>();
    r.protocol = j.at("protocol").get<std::string>();
    r.eval_seed = j.at("eval_seed").get<std::uint64_t>();
    r.ap50 = j.at("ap50").get<double>();
    for (const auto& v : j.at("per_class_ap50")) {
      r.per_class_ap50.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
    }
    r.size_ap = {opt_from(j, "ap_s"), opt_from(j, "ap_m"), opt_from(j, "ap_l")};
    r.psnr = opt_from(j, "psnr");
    r.trans_error = errors_from(j, "trans_error");
    r.trans_baseline = errors_from(j, "trans_baseline");
    r.fps = j.at("fps").get<double>();
    r.fps_with_restore = opt_from(j, "fps_with_restore");
    r.hardware = j.value("hardware", "");
    r.fingerprint = j.value("fingerprint", "");
    r.checkpoint = j.value("checkpoint", "");
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed evaluation record: ") + e.what());
  }
}

std::vector<EvalReport> read_reports(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read reports: " + path.string());
  std::vector<EvalReport> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(report_from_json(line));
  }
  return out;
}

std::string format_table(const std::vector<EvalReport>& reports) {
  std::ostringstream os;
  os << "# AP50: average precision at IoU 0.5 (single threshold, all-point interpolation).\n"
     << "# AP_s/m/l: LR box area < 12^2, < 32^2, >= 32^2 pixels. err_k/s/n: mean |prediction - target|, "
        "normalized units (baseline = best constant predictor).\n";
  os << std::left << std::setw(24) << "config" << std::setw(8) << "proto" << std::setw(6) << "seed"
     << std::right << std::setw(8) << "AP50" << std::setw(8) << "AP_s" << std::setw(8) << "AP_m" << std::setw(8)
     << "AP_l" << std::setw(8) << "PSNR" << std::setw(8) << "err_k" << std::setw(8) << "err_s" << std::setw(8)
     << "err_n" << std::setw(10) << "FPS" << std::setw(10) << "FPS+D_r" << '\n';
  for (const auto& r : reports) {
    os << std::left << std::setw(24) << r.label << std::setw(8) << r.protocol << std::setw(6) << r.train_seed
       << std::right << std::setw(8) << fmt(r.ap50) << std::setw(8) << fmt(r.size_ap.small) << std::setw(8)
       << fmt(r.size_ap.medium) << std::setw(8) << fmt(r.size_ap.large) << std::setw(8) << fmt(r.psnr, 2);
    const auto& e = r.trans_error;
    os << std::setw(8) << fmt(e ? std::optional(e->k) : std::nullopt) << std::setw(8)
       << fmt(e ? std::optional(e->s) : std::nullopt) << std::setw(8) << fmt(e ? std::optional(e->n) : std::nullopt)
       << std::setw(10) << fmt(r.fps, 1) << std::setw(10) << fmt(r.fps_with_restore, 1) << '\n';
  }
  return os.str();
}

std::vector<AggregateRow> aggregate_reports(const std::vector<EvalReport>& reports) {
  std::vector<std::vector<const EvalReport*>> groups;
  std::vector<std::pair<std::string, std::string>> keys;
  for (const auto& r : reports) {
    const auto key = std::make_pair(r.label, r.protocol);
    auto it = std::find(keys.begin(), keys.end(), key);
    if (it == keys.end()) {
      keys.push_back(key);
      groups.emplace_back();
      it = keys.end() - 1;
    }
    groups[it - keys.begin()].push_back(&r);
  }
  const auto mean_errors = [](const std::vector<const EvalReport*>& g, auto member) {
    std::optional<TransformationErrors> out;
    int n = 0;
    TransformationErrors sum;
    for (const auto* r : g) {
      const auto& e = r->*member;
      if (!e) continue;
      sum.k += e->k;
      sum.s += e->s;
      sum.n += e->n;
      ++n;
    }
    if (n > 0) out = TransformationErrors{sum.k / n, sum.s / n, sum.n / n};
    return out;
  };
  const auto mean_opt = [](const std::vector<const EvalReport*>& g, auto member) {
    std::vector<std::optional<double>> v;
    for (const auto* r : g) v.push_back(r->*member);
    return mean_of(v);
  };

  std::vector<AggregateRow> rows;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    const auto& g = groups[i];
    AggregateRow row;
    row.label = keys[i].first;
    row.protocol = keys[i].second;
    row.runs = static_cast<int>(g.size());
    for (const auto* r : g) {
      row.ap50_mean += r->ap50;
      row.fps_mean += r->fps;
    }
    row.ap50_mean /= row.runs;
    row.fps_mean /= row.runs;
    if (row.runs > 1) {
      double ss = 0.0;
      for (const auto* r : g) ss += (r->ap50 - row.ap50_mean) * (r->ap50 - row.ap50_mean);
      row.ap50_std = std::sqrt(ss / (row.runs - 1));
    }
    row.psnr_mean = mean_opt(g, &EvalReport::psnr);
    row.fps_with_restore_mean = mean_opt(g, &EvalReport::fps_with_restore);
    row.trans_error_mean = mean_errors(g, &EvalReport::trans_error);
    row.trans_baseline_mean = mean_errors(g, &EvalReport::trans_baseline);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string format_aggregate(const std::vector<AggregateRow>& rows) {
  std::ostringstream os;
  os << "# mean over training seeds (AP50 std is the sample standard deviation)\n";
  os << std::left << std::setw(24) << "config" << std::setw(8) << "proto" << std::setw(6) << "runs" << std::right
     << std::setw(8) << "AP50" << std::setw(8) << "std" << std::setw(8) << "PSNR" << std::setw(8) << "err_s"
     << std::setw(8) << "base_s" << std::setw(10) << "FPS" << std::setw(10) << "FPS+D_r" << '\n';
  for (const auto& r : rows) {
    const auto& e = r.trans_error_mean;
    const auto& b = r.trans_baseline_mean;
    os << std::left << std::setw(24) << r.label << std::setw(8) << r.protocol << std::setw(6) << r.runs
       << std::right << std::setw(8) << fmt(r.ap50_mean) << std::setw(8) << fmt(r.ap50_std) << std::setw(8)
       << fmt(r.psnr_mean, 2) << std::setw(8) << fmt(e ? std::optional(e->s) : std::nullopt) << std::setw(8)
       << fmt(b ? std::optional(b->s) : std::nullopt) << std::setw(10) << fmt(r.fps_mean, 1) << std::setw(10)
       << fmt(r.fps_with_restore_mean, 1) << '\n';
  }
  return os.str();
}

namespace {

std::string sanitize(const std::string& s) {
  std::string out;
  for (char c : s) out += std::isalnum(static_cast<unsigned char>(c)) ? c : (c == '+' ? 'p' : '_');
  return out;
}

}  // namespace

std::vector<EvalReport> run_benchmark(const std::vector<BenchmarkEntry>& entries, const std::vector<Scene>& test_scenes,
                                      const std::vector<Protocol>& protocols, std::uint64_t seed,
                                      const fs::path& out_dir, const EvalOptions& options) {
  if (entries.empty()) throw BenchmarkError("no checkpoints to benchmark");
  if (protocols.empty()) throw BenchmarkError("no protocols to benchmark");
  if (test_scenes.empty()) throw BenchmarkError("test set is empty");
  for (const auto& e : entries) {
    if (!fs::exists(e.checkpoint)) throw BenchmarkError("missing checkpoint: " + e.checkpoint.string());
  }
  const int hr_side = test_scenes.front().image.height();
  fs::create_directories(out_dir);

  std::vector<LoadedCheckpoint> models;
  for (const auto& e : entries) models.push_back(load_checkpoint(e.checkpoint));

  std::vector<EvalReport> reports;
  std::map<std::size_t, std::pair<double, std::optional<double>>> fps_cache;
  std::string hardware;
  for (Protocol protocol : protocols) {
    const std::vector<EvalSample> samples = make_eval_set(test_scenes, protocol, seed, hr_side);
    std::vector<PrSeries> series;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const LoadedCheckpoint& ckpt = models[i];
      const std::string label = entries[i].label.empty() ? ckpt.config.label() : entries[i].label;
      EvalOptions eo = options;
      eo.measure_speed = options.measure_speed && !fps_cache.count(i);
      if (options.artifact_images > 0) {
        eo.artifact_dir = out_dir / "artifacts" / (sanitize(label) + "_s" + std::to_string(ckpt.config.seed) + "_" +
                                                   std::string(to_string(protocol)));
      }
      EvalReport r = evaluate_model(*ckpt.model, samples, eo);
      if (eo.measure_speed) {
        fps_cache[i] = {r.fps, r.fps_with_restore};
        hardware = r.hardware;
      } else if (fps_cache.count(i)) {
        r.fps = fps_cache[i].first;
        r.fps_with_restore = fps_cache[i].second;
        r.hardware = hardware;
      }
      r.label = label;
      r.scheme = std::string(to_string(ckpt.config.scheme));
      r.enable_dt = ckpt.config.enable_dt;
      r.enable_dr = ckpt.config.enable_dr;
      r.train_seed = ckpt.config.seed;
      r.protocol = std::string(to_string(protocol));
      r.eval_seed = seed;
      r.fingerprint = ckpt.fingerprint;
      r.checkpoint = entries[i].checkpoint.string();

      series.push_back({label + " S" + std::to_string(ckpt.config.seed), r.pr_curves});
      reports.push_back(std::move(r));
    }
    write_png(out_dir / ("pr_" + std::string(to_string(protocol)) + ".png"),
              plot_pr_curves(series, models.front().model->config().num_classes,
                             "PR AT IOU 0.5 - " + std::string(to_string(protocol))));
  }

  std::ofstream jsonl(out_dir / "benchmark.jsonl", std::ios::trunc);
  if (!jsonl) throw IoError("cannot write " + (out_dir / "benchmark.jsonl").string());
  for (const auto& r : reports) jsonl << to_jsonl(r) << '\n';
  std::ofstream table(out_dir / "benchmark.txt", std::ios::trunc);
  if (!table) throw IoError("cannot write " + (out_dir / "benchmark.txt").string());
  table << format_table(reports) << '\n' << format_aggregate(aggregate_reports(reports));
  return reports;
}

}  // namespace restoredet
