#include "restoredet/image.hpp"

#include <algorithm>
#include <cmath>

#include "restoredet/error.hpp"

namespace restoredet {

ImageTensor::ImageTensor(int height, int width, int channels, float fill)
    : height_(height), width_(width), channels_(channels) {
  if (height < 1 || width < 1) {
    throw ShapeError("image sides must be >= 1");
  }
  if (channels != 1 && channels != 3) {
    throw ShapeError("image channels must be 1 or 3");
  }
  values_.assign(static_cast<std::size_t>(height) * width * channels, fill);
}

bool ImageTensor::in_unit_range() const {
  return std::all_of(values_.begin(), values_.end(), [](float v) {
    return std::isfinite(v) && v >= 0.0f && v <= 1.0f;
  });
}

ImageTensor flip_horizontal(const ImageTensor& image) {
  ImageTensor out(image.height(), image.width(), image.channels());
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x) {
      for (int c = 0; c < image.channels(); ++c) {
        out.at(y, image.width() - 1 - x, c) = image.at(y, x, c);
      }
    }
  }
  return out;
}

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return "configuration error";
    case ErrorKind::kParameter: return "parameter error";
    case ErrorKind::kShape: return "shape error";
    case ErrorKind::kDataset: return "dataset error";
    case ErrorKind::kNumeric: return "numeric error";
    case ErrorKind::kTarget: return "target error";
    case ErrorKind::kBenchmark: return "benchmark error";
    case ErrorKind::kIo: return "I/O error";
    case ErrorKind::kUsage: return "usage error";
  }
  return "error";
}

}  // namespace restoredet
