#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace restoredet {

/// H x W x C image with interleaved float samples in [0, 1].
class ImageTensor {
 public:
  ImageTensor() = default;
  ImageTensor(int height, int width, int channels, float fill = 0.0f);

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  float& at(int y, int x, int c) {
    return values_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
  }
  float at(int y, int x, int c) const {
    return values_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
  }

  std::span<float> values() { return values_; }
  std::span<const float> values() const { return values_; }

  bool same_shape(const ImageTensor& other) const {
    return height_ == other.height_ && width_ == other.width_ &&
           channels_ == other.channels_;
  }

  /// True when every sample is finite and inside [0, 1].
  bool in_unit_range() const;

  friend bool operator==(const ImageTensor&, const ImageTensor&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<float> values_;
};

/// Horizontal mirror.
ImageTensor flip_horizontal(const ImageTensor& image);

}  // namespace restoredet
