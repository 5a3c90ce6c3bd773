#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "restoredet/image.hpp"
#include "restoredet/rng.hpp"

namespace restoredet {

struct BoundingBox {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  bool valid_within(double image_width, double image_height) const {
    return 0.0 <= x1 && x1 < x2 && x2 <= image_width && 0.0 <= y1 && y1 < y2 &&
           y2 <= image_height;
  }
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct Annotation {
  std::vector<BoundingBox> boxes;
  std::vector<int> class_ids;

  std::size_t size() const { return boxes.size(); }
  friend bool operator==(const Annotation&, const Annotation&) = default;
};

struct Scene {
  ImageTensor image;
  Annotation annotation;
  std::int64_t scene_id = 0;
};

enum class Background { kFlat, kGradient, kTextured };
enum class Split { kTrain, kTest };

std::string_view to_string(Background background);
Background parse_background(std::string_view text);
std::string_view to_string(Split split);
Split parse_split(std::string_view text);

/// Shape classes: 0 = circle, 1 = square, 2 = triangle.
inline constexpr int kShapeClassCount = 3;
const char* class_name(int class_id);

struct SceneConfig {
  int image_side = 128;
  int num_classes = kShapeClassCount;
  int min_objects = 1;
  int max_objects = 4;
  double min_object_side = 16.0;
  double max_object_side = 56.0;
  Background background = Background::kGradient;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

Scene generate_scene(Rng& rng, const SceneConfig& config, std::int64_t scene_id = 0);

/// Scene `scene_id` of `split`, drawn from its own substream of config.rng_seed.
Scene generate_scene_for(const SceneConfig& config, Split split, std::int64_t scene_id);

struct ManifestEntry {
  std::string path;  // relative to the dataset directory
  std::string sha256;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
};

inline constexpr const char* kManifestFile = "manifest.jsonl";

DatasetManifest generate_dataset(const SceneConfig& config, int count, Split split,
                                 const std::filesystem::path& out_dir);

DatasetManifest read_manifest(const std::filesystem::path& dataset_dir);

/// Loads every scene listed in the manifest; checksums are verified.
std::vector<Scene> load_dataset(const std::filesystem::path& dataset_dir);

void write_annotation(const std::filesystem::path& path, const Scene& scene);
Scene read_annotation(const std::filesystem::path& path);

/// Divides every coordinate by s (HR pixels -> LR pixels for s = hr / lr).
Annotation scale_annotation(const Annotation& annotation, double s);

}  // namespace restoredet
