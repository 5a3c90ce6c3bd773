#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "restoredet/degradation.hpp"
#include "restoredet/detection.hpp"
#include "restoredet/kv_config.hpp"
#include "restoredet/model.hpp"
#include "restoredet/scene.hpp"

namespace restoredet {

/// Training data regimes: clean only, degraded only, or mixed.
enum class Scheme { kN, kL, kNPlusL };

std::string_view to_string(Scheme scheme);
Scheme parse_scheme(std::string_view text);

struct TrainConfig {
  Scheme scheme = Scheme::kNPlusL;
  bool enable_dt = true;
  bool enable_dr = true;
  int epochs = 30;
  int batch_size = 16;
  double base_lr = 1e-3;
  double dt_lr = 1e-4;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int warmup_iters = 500;
  double warmup_start_factor = 0.1;
  std::vector<int> decay_milestones;  // empty: round(0.72 * epochs), round(0.9 * epochs)
  double decay_factor = 0.1;
  int hr_side = 128;
  std::uint64_t seed = 0;
  int dt_stage = 3;
  bool hflip = true;
  int eval_every = 5;   // epochs between held-out evaluations; 0 disables
  int eval_limit = 0;   // cap on evaluated test scenes; 0 means all
  double grad_clip_norm = 0.0;  // 0 disables
  ModelConfig model;
  LossWeights loss;

  /// Model config with the enable flags and tap stage of this run applied.
  ModelConfig resolved_model() const;
  std::vector<int> milestones() const;
  void validate() const;

  KeyValueConfig to_kv() const;
  static TrainConfig from_kv(const KeyValueConfig& kv);
  static TrainConfig from_kv(const KeyValueConfig& kv, TrainConfig base);
  static const std::vector<std::string>& keys();
  /// Short stable hash of the resolved configuration.
  std::string fingerprint() const;
  /// e.g. "vanilla/N", "restoredet/N+L", "restoredet-no-dt/N+L".
  std::string label() const;
};

struct LearningRates {
  double base = 0.0;
  double transform = 0.0;
};

/// Linear warmup from warmup_start_factor * lr over warmup_iters, then
/// step decay by decay_factor at every milestone epoch reached.
LearningRates lr_at(long long iteration, int epoch, const TrainConfig& config);

struct Batch {
  std::vector<ImageTensor> hr_images;
  std::vector<ImageTensor> lr_images;
  std::vector<DegradationParams> params;
  std::vector<TransformationTarget> transformation_targets;
  std::vector<Annotation> lr_annotations;
  DetectionTargets detection_targets;
  bool degraded = false;
};

/// One shared output resolution per batch; kernel and noise drawn per sample.
Batch make_batch(const std::vector<const Scene*>& scenes, Rng& rng, const TrainConfig& config);

template <typename T>
class SgdMomentum {
 public:
  SgdMomentum(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  /// v = momentum * v + (g + wd * w); w -= lr(group) * v.
  void step(const nn::ParamRefs<T>& params, LearningRates lr);

  std::vector<Tensor<T>>& velocity() { return velocity_; }
  const std::vector<Tensor<T>>& velocity() const { return velocity_; }

 private:
  double momentum_;
  double weight_decay_;
  std::vector<Tensor<T>> velocity_;
};

struct StepLosses {
  double l_obj = 0.0;
  double l_trans = 0.0;
  double l_d = 0.0;
  double l_total = 0.0;
  DetectionLoss detection;
};

/// Zeroes gradients, runs both siamese branches and every enabled decoder,
/// and backpropagates l_total into the parameter gradients.
template <typename T>
StepLosses forward_backward(Model<T>& model, const Batch& batch, const TrainConfig& config);

/// forward_backward followed by one optimizer update.
template <typename T>
StepLosses train_step(Model<T>& model, const Batch& batch, SgdMomentum<T>& optimizer,
                      LearningRates lr, const TrainConfig& config);

double global_grad_norm(const nn::ParamRefs<float>& params);

struct HistoryRecord {
  int epoch = 0;
  long long iteration = 0;
  double l_obj = 0.0;
  double l_trans = 0.0;
  double l_d = 0.0;
  double l_total = 0.0;
  std::optional<double> eval_ap50;
};

std::string to_jsonl(const HistoryRecord& record);
std::vector<HistoryRecord> read_history(const std::filesystem::path& path);

struct TrainOptions {
  std::filesystem::path resume_from;  // empty: start fresh
  std::function<void(const std::string&)> log;
  int stop_after_epochs = -1;  // testing hook: simulate an interruption
};

struct TrainResult {
  std::filesystem::path final_checkpoint;
  std::vector<HistoryRecord> history;
};

inline constexpr const char* kHistoryFile = "history.jsonl";
inline constexpr const char* kFinalCheckpoint = "final.ckpt";
inline constexpr const char* kLatestCheckpoint = "latest.ckpt";

/// Runs epochs x batches of train_step over dataset_dir/train, evaluating on
/// dataset_dir/test when present, and persists checkpoints and history.
TrainResult train_loop(const TrainConfig& config, const std::filesystem::path& dataset_dir,
                       const std::filesystem::path& out_dir, const TrainOptions& options = {});

}  // namespace restoredet
