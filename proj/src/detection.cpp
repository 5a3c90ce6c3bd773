#include "restoredet/detection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <tuple>

#include "restoredet/error.hpp"

namespace restoredet {

double gaussian_radius(double height, double width, double min_overlap) {
  const double m = min_overlap;
  const double b1 = height + width;
  const double c1 = width * height * (1.0 - m) / (1.0 + m);
  const double r1 = (b1 + std::sqrt(b1 * b1 - 4.0 * c1)) / 2.0;

  const double b2 = 2.0 * (height + width);
  const double c2 = (1.0 - m) * width * height;
  const double r2 = (b2 + std::sqrt(b2 * b2 - 16.0 * c2)) / 2.0;

  const double a3 = 4.0 * m;
  const double b3 = -2.0 * m * (height + width);
  const double c3 = (m - 1.0) * width * height;
  const double r3 = (b3 + std::sqrt(b3 * b3 - 4.0 * a3 * c3)) / 2.0;
  return std::min({r1, r2, r3});
}

void draw_gaussian(Tensor<double>& heatmap, int batch, int class_id, int cx, int cy, int radius) {
  const double diameter = 2.0 * radius + 1.0;
  const double sigma = diameter / 6.0;
  const double floor_value = std::numeric_limits<double>::epsilon();
  for (int dy = -radius; dy <= radius; ++dy) {
    const int y = cy + dy;
    if (y < 0 || y >= heatmap.h()) continue;
    for (int dx = -radius; dx <= radius; ++dx) {
      const int x = cx + dx;
      if (x < 0 || x >= heatmap.w()) continue;
      double g = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      if (g < floor_value) g = 0.0;
      double& v = heatmap.at(batch, class_id, y, x);
      v = std::max(v, g);
    }
  }
}

DetectionTargets build_batch_targets(const std::vector<Annotation>& annotations, int image_h,
                                     int image_w, int num_classes) {
  if (image_h % kOutputStride != 0 || image_w % kOutputStride != 0) {
    throw TargetError("image sides must be multiples of 4");
  }
  DetectionTargets t;
  t.num_classes = num_classes;
  const int out_h = image_h / kOutputStride;
  const int out_w = image_w / kOutputStride;
  t.heatmap = Tensor<double>(static_cast<int>(annotations.size()), num_classes, out_h, out_w);
  for (std::size_t b = 0; b < annotations.size(); ++b) {
    const Annotation& ann = annotations[b];
    if (ann.boxes.size() != ann.class_ids.size()) throw TargetError("boxes/class_ids length mismatch");
    for (std::size_t k = 0; k < ann.boxes.size(); ++k) {
      const BoundingBox& box = ann.boxes[k];
      const int cls = ann.class_ids[k];
      if (!box.valid_within(image_w, image_h)) throw TargetError("box outside image bounds");
      if (cls < 0 || cls >= num_classes) throw TargetError("class id out of range");
      const double w = box.width() / kOutputStride;
      const double h = box.height() / kOutputStride;
      const double cx = 0.5 * (box.x1 + box.x2) / kOutputStride;
      const double cy = 0.5 * (box.y1 + box.y2) / kOutputStride;
      const int ix = std::min(static_cast<int>(std::floor(cx)), out_w - 1);
      const int iy = std::min(static_cast<int>(std::floor(cy)), out_h - 1);
      const int radius = std::max(0, static_cast<int>(gaussian_radius(std::ceil(h), std::ceil(w))));
      draw_gaussian(t.heatmap, static_cast<int>(b), cls, ix, iy, radius);
      t.objects.push_back({static_cast<int>(b), cls, ix, iy, w, h, cx - ix, cy - iy});
    }
  }
  return t;
}

DetectionTargets build_detection_targets(const Annotation& annotation, int image_h, int image_w,
                                         int num_classes) {
  return build_batch_targets({annotation}, image_h, image_w, num_classes);
}

template <typename T>
DetectionLoss detection_loss(const NetworkOutput<T>& output, const DetectionTargets& targets,
                             const LossWeights& weights, NetworkOutput<T>* grads) {
  const Tensor<T>& hm = output.heatmap;
  if (hm.n() != targets.heatmap.n() || hm.c() != targets.heatmap.c() || hm.h() != targets.heatmap.h() ||
      hm.w() != targets.heatmap.w()) {
    throw ShapeError("detection loss: heatmap/target shape mismatch");
  }
  const double norm = std::max<double>(1.0, static_cast<double>(targets.objects.size()));
  const double alpha = weights.focal_alpha;
  const double beta = weights.focal_beta;
  if (grads != nullptr) {
    grads->heatmap = zeros_like(output.heatmap);
    grads->size = zeros_like(output.size);
    grads->offset = zeros_like(output.offset);
  }

  DetectionLoss loss;
  double focal = 0.0;
  for (std::size_t i = 0; i < hm.size(); ++i) {
    const double raw = static_cast<double>(hm[i]);
    const bool clamped = raw < kHeatmapClamp || raw > 1.0 - kHeatmapClamp;
    const double p = std::clamp(raw, kHeatmapClamp, 1.0 - kHeatmapClamp);
    const double gt = targets.heatmap[i];
    double value = 0.0;
    double d_p = 0.0;
    if (gt == 1.0) {
      const double q = std::pow(1.0 - p, alpha);
      value = -std::log(p) * q;
      d_p = -(q / p - alpha * std::pow(1.0 - p, alpha - 1.0) * std::log(p));
    } else {
      const double reduce = std::pow(1.0 - gt, beta);
      const double pa = std::pow(p, alpha);
      value = -reduce * pa * std::log(1.0 - p);
      d_p = -reduce * (alpha * std::pow(p, alpha - 1.0) * std::log(1.0 - p) - pa / (1.0 - p));
    }
    focal += value;
    if (grads != nullptr && !clamped) {
      grads->heatmap[i] = static_cast<T>(weights.center * d_p / norm);
    }
  }
  loss.center = focal / norm;

  double size_sum = 0.0;
  double offset_sum = 0.0;
  for (const ObjectTarget& o : targets.objects) {
    const std::array<double, 2> size_t_{o.size_w, o.size_h};
    const std::array<double, 2> off_t{o.offset_x, o.offset_y};
    for (int ch = 0; ch < 2; ++ch) {
      const double ds = static_cast<double>(output.size.at(o.batch, ch, o.cell_y, o.cell_x)) - size_t_[ch];
      const double doff = static_cast<double>(output.offset.at(o.batch, ch, o.cell_y, o.cell_x)) - off_t[ch];
      size_sum += std::abs(ds);
      offset_sum += std::abs(doff);
      if (grads != nullptr) {
        const double sgn_s = ds > 0.0 ? 1.0 : (ds < 0.0 ? -1.0 : 0.0);
        const double sgn_o = doff > 0.0 ? 1.0 : (doff < 0.0 ? -1.0 : 0.0);
        grads->size.at(o.batch, ch, o.cell_y, o.cell_x) += static_cast<T>(weights.size * sgn_s / norm);
        grads->offset.at(o.batch, ch, o.cell_y, o.cell_x) += static_cast<T>(weights.offset * sgn_o / norm);
      }
    }
  }
  loss.size = size_sum / norm;
  loss.offset = offset_sum / norm;
  loss.total = weights.center * loss.center + weights.size * loss.size + weights.offset * loss.offset;
  return loss;
}

template <typename T>
double restoration_loss(const Tensor<T>& restored, const Tensor<T>& hr, Tensor<T>* grad) {
  restored.require_same_shape(hr, "restoration loss");
  const double count = static_cast<double>(std::max<std::size_t>(restored.size(), 1));
  double sum = 0.0;
  if (grad != nullptr) *grad = zeros_like(restored);
  for (std::size_t i = 0; i < restored.size(); ++i) {
    const double d = static_cast<double>(restored[i]) - static_cast<double>(hr[i]);
    sum += std::abs(d);
    if (grad != nullptr) (*grad)[i] = static_cast<T>((d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)) / count);
  }
  return sum / count;
}

double restoration_loss(const ImageTensor& restored, const ImageTensor& hr) {
  if (!restored.same_shape(hr)) throw ShapeError("restoration loss: shape mismatch");
  double sum = 0.0;
  const auto a = restored.values();
  const auto b = hr.values();
  for (std::size_t i = 0; i < a.size(); ++i) sum += std::abs(static_cast<double>(a[i]) - b[i]);
  return sum / static_cast<double>(std::max<std::size_t>(a.size(), 1));
}

template <typename T>
double transformation_loss(const Tensor<T>& pred, const std::vector<TransformationTarget>& targets,
                           Tensor<T>* grad) {
  if (pred.c() != 3 || pred.h() != 1 || pred.w() != 1 || pred.n() != static_cast<int>(targets.size())) {
    throw ShapeError("transformation loss: prediction must be (n, 3, 1, 1) matching the targets");
  }
  const double count = 3.0 * std::max<std::size_t>(targets.size(), 1);
  if (grad != nullptr) *grad = zeros_like(pred);
  double sum = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const std::array<double, 3> t{targets[i].k_norm, targets[i].s_norm, targets[i].n_norm};
    for (int c = 0; c < 3; ++c) {
      const double d = static_cast<double>(pred.at(static_cast<int>(i), c, 0, 0)) - t[c];
      sum += d * d;
      if (grad != nullptr) grad->at(static_cast<int>(i), c, 0, 0) = static_cast<T>(2.0 * d / count);
    }
  }
  return sum / count;
}

double transformation_loss(const TransformationTarget& pred, const TransformationTarget& target) {
  const double dk = pred.k_norm - target.k_norm;
  const double ds = pred.s_norm - target.s_norm;
  const double dn = pred.n_norm - target.n_norm;
  return (dk * dk + ds * ds + dn * dn) / 3.0;
}

double total_loss(double l_obj, double l_trans, double l_d, const LossWeights& weights,
                  bool enable_trans, bool enable_restore) {
  if (!std::isfinite(l_obj) || !std::isfinite(l_trans) || !std::isfinite(l_d)) {
    throw NumericError("total_loss: non-finite loss term");
  }
  double total = l_obj;
  if (enable_trans) total += weights.lambda_trans * l_trans;
  if (enable_restore) total += weights.lambda_restore * l_d;
  return total;
}

template <typename T>
std::vector<Detection> decode_detections(const NetworkOutput<T>& output, int index, int max_dets,
                                         double score_threshold) {
  const Tensor<T>& hm = output.heatmap;
  const int h = hm.h();
  const int w = hm.w();
  struct Peak {
    double score;
    int cls, y, x;
  };
  std::vector<Peak> peaks;
  for (int c = 0; c < hm.c(); ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double v = hm.at(index, c, y, x);
        if (v < score_threshold) continue;
        bool is_max = true;
        for (int dy = -1; dy <= 1 && is_max; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = y + dy;
            const int xx = x + dx;
            if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
            if (static_cast<double>(hm.at(index, c, yy, xx)) > v) {
              is_max = false;
              break;
            }
          }
        }
        if (is_max) peaks.push_back({v, c, y, x});
      }
    }
  }
  std::sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) {
    return std::tie(b.score, a.cls, a.y, a.x) < std::tie(a.score, b.cls, b.y, b.x);
  });
  if (static_cast<int>(peaks.size()) > max_dets) peaks.resize(static_cast<std::size_t>(std::max(max_dets, 0)));

  const double img_w = static_cast<double>(w) * kOutputStride;
  const double img_h = static_cast<double>(h) * kOutputStride;
  std::vector<Detection> dets;
  dets.reserve(peaks.size());
  for (const Peak& p : peaks) {
    const double cx = (p.x + static_cast<double>(output.offset.at(index, 0, p.y, p.x))) * kOutputStride;
    const double cy = (p.y + static_cast<double>(output.offset.at(index, 1, p.y, p.x))) * kOutputStride;
    const double bw = static_cast<double>(output.size.at(index, 0, p.y, p.x)) * kOutputStride;
    const double bh = static_cast<double>(output.size.at(index, 1, p.y, p.x)) * kOutputStride;
    Detection d;
    d.class_id = p.cls;
    d.score = p.score;
    d.box = {std::clamp(cx - bw / 2.0, 0.0, img_w), std::clamp(cy - bh / 2.0, 0.0, img_h),
             std::clamp(cx + bw / 2.0, 0.0, img_w), std::clamp(cy + bh / 2.0, 0.0, img_h)};
    dets.push_back(d);
  }
  return dets;
}

#define RESTOREDET_INSTANTIATE(T)                                                                  \
  template DetectionLoss detection_loss<T>(const NetworkOutput<T>&, const DetectionTargets&,       \
                                           const LossWeights&, NetworkOutput<T>*);                 \
  template double restoration_loss<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>*);             \
  template double transformation_loss<T>(const Tensor<T>&, const std::vector<TransformationTarget>&, \
                                          Tensor<T>*);                                             \
  template std::vector<Detection> decode_detections<T>(const NetworkOutput<T>&, int, int, double);

RESTOREDET_INSTANTIATE(float)
RESTOREDET_INSTANTIATE(double)

#undef RESTOREDET_INSTANTIATE

}  // namespace restoredet
