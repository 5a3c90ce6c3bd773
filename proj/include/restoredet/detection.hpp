#pragma once

#include <vector>

#include "restoredet/degradation.hpp"
#include "restoredet/model.hpp"
#include "restoredet/scene.hpp"
#include "restoredet/tensor.hpp"

namespace restoredet {

struct Detection {
  BoundingBox box;
  int class_id = 0;
  double score = 0.0;
};

/// Regression targets for one annotated object, in output-grid units.
struct ObjectTarget {
  int batch = 0;
  int class_id = 0;
  int cell_x = 0;
  int cell_y = 0;
  double size_w = 0.0;
  double size_h = 0.0;
  double offset_x = 0.0;
  double offset_y = 0.0;
};

struct DetectionTargets {
  int num_classes = 0;
  Tensor<double> heatmap;  // (n, classes, h/4, w/4)
  std::vector<ObjectTarget> objects;
};

/// Radius of the center splat such that a box displaced by it still overlaps
/// the ground truth with IoU >= min_overlap (three-case corner analysis).
double gaussian_radius(double height, double width, double min_overlap = 0.7);

/// Splats a peak-1 Gaussian of the given integer radius with elementwise max.
void draw_gaussian(Tensor<double>& heatmap, int batch, int class_id, int cx, int cy, int radius);

/// Targets for one image whose annotation is already in LR pixel coordinates.
DetectionTargets build_detection_targets(const Annotation& annotation, int image_h, int image_w,
                                         int num_classes);
DetectionTargets build_batch_targets(const std::vector<Annotation>& annotations, int image_h,
                                     int image_w, int num_classes);

struct LossWeights {
  double lambda_trans = 8.0;
  double lambda_restore = 0.8;
  double center = 1.0;
  double size = 0.1;
  double offset = 1.0;
  double focal_alpha = 2.0;
  double focal_beta = 4.0;
};

struct DetectionLoss {
  double center = 0.0;
  double size = 0.0;
  double offset = 0.0;
  double total = 0.0;
};

inline constexpr double kHeatmapClamp = 1e-4;

/// Penalty-reduced focal loss on the heatmap plus L1 size/offset losses at
/// annotated centers, all normalized by max(object count, 1). When `grads`
/// is given it receives dL/d(output) for every map.
template <typename T>
DetectionLoss detection_loss(const NetworkOutput<T>& output, const DetectionTargets& targets,
                             const LossWeights& weights, NetworkOutput<T>* grads = nullptr);

/// Mean absolute difference; `grad` receives dL/d(restored).
template <typename T>
double restoration_loss(const Tensor<T>& restored, const Tensor<T>& hr, Tensor<T>* grad = nullptr);
double restoration_loss(const ImageTensor& restored, const ImageTensor& hr);

/// Mean squared error over (k, s, n) and the batch; pred has shape (n, 3, 1, 1).
template <typename T>
double transformation_loss(const Tensor<T>& pred, const std::vector<TransformationTarget>& targets,
                           Tensor<T>* grad = nullptr);
double transformation_loss(const TransformationTarget& pred, const TransformationTarget& target);

/// l_obj + lambda1 * l_trans + lambda2 * l_d; disabled terms contribute 0.
double total_loss(double l_obj, double l_trans, double l_d, const LossWeights& weights,
                  bool enable_trans = true, bool enable_restore = true);

/// Peak picking on sample `index`: 3x3 local maxima, top max_dets with
/// score >= threshold, boxes in input-pixel coordinates clipped to the image.
template <typename T>
std::vector<Detection> decode_detections(const NetworkOutput<T>& output, int index, int max_dets,
                                         double score_threshold);

}  // namespace restoredet
