#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "restoredet/degradation.hpp"
#include "restoredet/detection.hpp"
#include "restoredet/model.hpp"
#include "restoredet/scene.hpp"

namespace restoredet {

double iou(const BoundingBox& a, const BoundingBox& b);

struct PrCurve {
  std::vector<double> recall;
  std::vector<double> precision;
};

struct ApResult {
  std::vector<std::optional<double>> per_class;  // nullopt: class has no ground truth
  std::optional<double> mean;                    // over classes with ground truth
  std::vector<PrCurve> curves;
};

/// All-point interpolated AP per class. Detections are matched in descending
/// score order to the highest-IoU unmatched ground truth of the same class.
ApResult compute_ap(const std::vector<std::vector<Detection>>& detections,
                    const std::vector<Annotation>& ground_truth, int num_classes,
                    double iou_threshold = 0.5);

/// Area under the precision envelope of a PR curve ordered by rank.
double envelope_area(const std::vector<double>& recall, const std::vector<double>& precision);

struct SizeBuckets {
  double small_max_area = 12.0 * 12.0;   // LR pixels
  double medium_max_area = 32.0 * 32.0;
};

struct SizeBucketedAp {
  std::optional<double> small;
  std::optional<double> medium;
  std::optional<double> large;
};

int size_bucket(double area, const SizeBuckets& buckets);

/// AP restricted to ground truth in each area bucket; detections matched to
/// out-of-bucket ground truth, or unmatched and out-of-bucket, are ignored.
SizeBucketedAp size_bucketed_ap(const std::vector<std::vector<Detection>>& detections,
                                const std::vector<Annotation>& ground_truth, int num_classes,
                                const SizeBuckets& buckets = {}, double iou_threshold = 0.5);

inline constexpr double kPsnrCap = 99.0;
double psnr(const ImageTensor& a, const ImageTensor& b);

enum class Protocol { kRandom, kDown2, kDown4 };
std::string_view to_string(Protocol protocol);
Protocol parse_protocol(std::string_view text);

struct EvalSample {
  std::int64_t scene_id = 0;
  ImageTensor hr;
  ImageTensor lr;
  Annotation lr_annotation;
  DegradationParams params;
  TransformationTarget target;
};

/// Degraded copy of the test scenes. Depends only on (scenes, protocol, seed),
/// so every model is scored on identical inputs.
std::vector<EvalSample> make_eval_set(const std::vector<Scene>& scenes, Protocol protocol,
                                      std::uint64_t seed, int hr_side);

struct InferOptions {
  int max_dets = 100;
  double score_threshold = 0.01;
};

/// Lightweight deployment path: encoder, upscaling blocks, detection heads.
std::vector<Detection> infer(const Model<float>& model, const ImageTensor& image,
                             const InferOptions& options = {});

struct TransformationErrors {
  double k = 0.0;
  double s = 0.0;
  double n = 0.0;
};

/// Mean |prediction - target| of D_t on (HR, LR) pairs, normalized units.
TransformationErrors transformation_error(const Model<float>& model, const std::vector<EvalSample>& samples);
TransformationErrors transformation_error(const std::vector<TransformationTarget>& predictions,
                                          const std::vector<TransformationTarget>& targets);
/// Error of the best constant predictor under absolute loss (per-component median).
TransformationErrors best_constant_error(const std::vector<TransformationTarget>& targets);

struct FpsResult {
  double fps = 0.0;
  std::string hardware;
};

/// Batch-1 wall-clock throughput of infer (optionally followed by D_r).
FpsResult measure_fps(const Model<float>& model, int image_size, int warmup_iters, int timed_iters,
                      bool include_restore = false);

std::string hardware_descriptor();

struct EvalReport {
  std::string label;
  std::string scheme;
  bool enable_dt = false;
  bool enable_dr = false;
  std::uint64_t train_seed = 0;
  std::string protocol;
  std::uint64_t eval_seed = 0;
  std::vector<std::optional<double>> per_class_ap50;
  double ap50 = 0.0;
  SizeBucketedAp size_ap;
  std::optional<double> psnr;
  std::optional<TransformationErrors> trans_error;
  std::optional<TransformationErrors> trans_baseline;
  double fps = 0.0;
  std::optional<double> fps_with_restore;
  std::string hardware;
  std::string fingerprint;
  std::string checkpoint;
  std::vector<PrCurve> pr_curves;  // per class; not serialized
};

struct EvalOptions {
  InferOptions infer;
  bool measure_speed = true;
  int fps_warmup = 5;
  int fps_iters = 30;
  int artifact_images = 0;  // annotated detections / restorations to write
  std::filesystem::path artifact_dir;
};

/// Scores detections, restoration and transformation prediction on a
/// prepared eval set and, optionally, writes artifacts.
EvalReport evaluate_model(const Model<float>& model, const std::vector<EvalSample>& samples,
                          const EvalOptions& options);

std::string to_jsonl(const EvalReport& report);
EvalReport report_from_json(const std::string& line);
std::vector<EvalReport> read_reports(const std::filesystem::path& path);
/// Fixed-width comparison table, one row per report.
std::string format_table(const std::vector<EvalReport>& reports);

/// Mean (and sample std of AP50) over training seeds, grouped by
/// (label, protocol) in first-seen order.
struct AggregateRow {
  std::string label;
  std::string protocol;
  int runs = 0;
  double ap50_mean = 0.0;
  double ap50_std = 0.0;
  std::optional<double> psnr_mean;
  std::optional<TransformationErrors> trans_error_mean;
  std::optional<TransformationErrors> trans_baseline_mean;
  double fps_mean = 0.0;
  std::optional<double> fps_with_restore_mean;
};

std::vector<AggregateRow> aggregate_reports(const std::vector<EvalReport>& reports);
std::string format_aggregate(const std::vector<AggregateRow>& rows);

struct BenchmarkEntry {
  std::string label;
  std::filesystem::path checkpoint;
};

/// Evaluates every checkpoint on the same degraded test set per protocol and
/// writes benchmark.jsonl, benchmark.txt and per-configuration artifacts.
std::vector<EvalReport> run_benchmark(const std::vector<BenchmarkEntry>& entries,
                                      const std::vector<Scene>& test_scenes,
                                      const std::vector<Protocol>& protocols, std::uint64_t seed,
                                      const std::filesystem::path& out_dir, const EvalOptions& options);

}  // namespace restoredet
