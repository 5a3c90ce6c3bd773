#pragma once

#include <string>
#include <vector>

#include "restoredet/detection.hpp"
#include "restoredet/image.hpp"

namespace restoredet {

struct PrCurve;

struct Rgb {
  float r = 0.0f;
  float g = 0.0f;
  float b = 0.0f;
};

/// Minimal RGB raster for report figures.
class Canvas {
 public:
  Canvas(int height, int width, Rgb background = {1.0f, 1.0f, 1.0f});
  explicit Canvas(ImageTensor image);

  int height() const { return image_.height(); }
  int width() const { return image_.width(); }
  const ImageTensor& image() const { return image_; }

  void set(int x, int y, Rgb color);
  void line(double x0, double y0, double x1, double y1, Rgb color, int thickness = 1);
  void rect(double x1, double y1, double x2, double y2, Rgb color, int thickness = 1);
  void fill(int x1, int y1, int x2, int y2, Rgb color);
  /// 5x7 bitmap glyphs (upper-case letters, digits, a little punctuation).
  void text(int x, int y, const std::string& s, Rgb color, int scale = 1);
  static int text_width(const std::string& s, int scale = 1) { return static_cast<int>(s.size()) * 6 * scale; }

 private:
  ImageTensor image_;
};

Rgb palette(int index);

/// Nearest-neighbor enlargement followed by ground truth (green) and
/// detections at or above min_score (class colors, score labels).
ImageTensor annotate_detections(const ImageTensor& image, const std::vector<Detection>& detections,
                                const Annotation& ground_truth, int upscale = 2, double min_score = 0.3);

struct PrSeries {
  std::string label;
  std::vector<PrCurve> per_class;
};

/// One panel per class, one line per series, with a shared legend.
ImageTensor plot_pr_curves(const std::vector<PrSeries>& series, int num_classes, const std::string& title);

}  // namespace restoredet
