#include "restoredet/scene.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "restoredet/error.hpp"
#include "restoredet/image_io.hpp"

namespace restoredet {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(Background background) {
  switch (background) {
    case Background::kFlat: return "flat";
    case Background::kGradient: return "gradient";
    case Background::kTextured: return "textured";
  }
  return "gradient";
}

Background parse_background(std::string_view text) {
  if (text == "flat") return Background::kFlat;
  if (text == "gradient") return Background::kGradient;
  if (text == "textured") return Background::kTextured;
  throw ConfigError("unknown background: " + std::string(text));
}

std::string_view to_string(Split split) { return split == Split::kTrain ? "train" : "test"; }

Split parse_split(std::string_view text) {
  if (text == "train") return Split::kTrain;
  if (text == "test") return Split::kTest;
  throw ConfigError("unknown split: " + std::string(text));
}

const char* class_name(int class_id) {
  static constexpr std::array<const char*, kShapeClassCount> kNames = {"circle", "square", "triangle"};
  return class_id >= 0 && class_id < kShapeClassCount ? kNames[class_id] : "unknown";
}

void SceneConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("scene config: " + what); };
  if (image_side < 128 || image_side % 128 != 0) fail("image_side must be a multiple of 128");
  if (num_classes < 1 || num_classes > kShapeClassCount) fail("num_classes must be in [1, 3]");
  if (min_objects < 1 || min_objects > max_objects) fail("invalid objects_per_image range");
  if (!(min_object_side >= 4.0 && min_object_side <= max_object_side)) fail("invalid object side range");
  if (max_object_side > image_side) fail("objects must fit inside the image");
}

namespace {

using Color = std::array<float, 3>;

Color random_color(Rng& rng, double lo, double hi) {
  return {static_cast<float>(uniform(rng, lo, hi)), static_cast<float>(uniform(rng, lo, hi)),
          static_cast<float>(uniform(rng, lo, hi))};
}

void paint_background(ImageTensor& image, Rng& rng, Background kind) {
  const int side = image.height();
  const Color base = random_color(rng, 0.15, 0.85);
  Color other = base;
  double gx = 0.0;
  double gy = 0.0;
  if (kind != Background::kFlat) {
    other = random_color(rng, 0.15, 0.85);
    const double theta = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    gx = std::cos(theta);
    gy = std::sin(theta);
  }
  struct Wave { double fx, fy, phase, amp; };
  std::array<Wave, 3> waves{};
  if (kind == Background::kTextured) {
    for (Wave& w : waves) {
      w = {uniform(rng, -0.25, 0.25), uniform(rng, -0.25, 0.25), uniform(rng, 0.0, 6.283), uniform(rng, 0.02, 0.06)};
    }
  }
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      // Projection onto the gradient direction, mapped to [0, 1].
      const double u = kind == Background::kFlat
                           ? 0.0
                           : 0.5 + ((x + 0.5) / side - 0.5) * gx + ((y + 0.5) / side - 0.5) * gy;
      double texture = 0.0;
      if (kind == Background::kTextured) {
        for (const Wave& w : waves) texture += w.amp * std::sin(w.fx * x + w.fy * y + w.phase);
      }
      for (int c = 0; c < 3; ++c) {
        const double v = (1.0 - u) * base[c] + u * other[c] + texture;
        image.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
}

bool inside_shape(int class_id, const BoundingBox& b, double px, double py) {
  switch (class_id) {
    case 0: {
      const double cx = 0.5 * (b.x1 + b.x2);
      const double cy = 0.5 * (b.y1 + b.y2);
      const double r = 0.5 * b.width();
      return (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r;
    }
    case 1:
      return px >= b.x1 && px <= b.x2 && py >= b.y1 && py <= b.y2;
    default: {
      // Apex at top center, base along y2.
      if (py < b.y1 || py > b.y2) return false;
      const double t = (py - b.y1) / b.height();
      const double half = 0.5 * b.width() * t;
      const double cx = 0.5 * (b.x1 + b.x2);
      return px >= cx - half && px <= cx + half;
    }
  }
}

void paint_shape(ImageTensor& image, int class_id, const BoundingBox& box, const Color& color) {
  constexpr int kSub = 4;
  const int x0 = std::max(0, static_cast<int>(std::floor(box.x1)));
  const int y0 = std::max(0, static_cast<int>(std::floor(box.y1)));
  const int x1 = std::min(image.width() - 1, static_cast<int>(std::ceil(box.x2)));
  const int y1 = std::min(image.height() - 1, static_cast<int>(std::ceil(box.y2)));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSub; ++sy) {
        for (int sx = 0; sx < kSub; ++sx) {
          hits += inside_shape(class_id, box, x + (sx + 0.5) / kSub, y + (sy + 0.5) / kSub);
        }
      }
      if (hits == 0) continue;
      const float coverage = static_cast<float>(hits) / (kSub * kSub);
      for (int c = 0; c < 3; ++c) {
        float& v = image.at(y, x, c);
        v = (1.0f - coverage) * v + coverage * color[c];
      }
    }
  }
}

bool overlaps(const BoundingBox& a, const BoundingBox& b, double margin) {
  return a.x1 < b.x2 + margin && b.x1 < a.x2 + margin && a.y1 < b.y2 + margin &&
         b.y1 < a.y2 + margin;
}

}  // namespace

Scene generate_scene(Rng& rng, const SceneConfig& config, std::int64_t scene_id) {
  config.validate();
  Scene scene;
  scene.scene_id = scene_id;
  scene.image = ImageTensor(config.image_side, config.image_side, 3);
  paint_background(scene.image, rng, config.background);

  const int wanted = uniform_int(rng, config.min_objects, config.max_objects);
  constexpr int kMaxAttempts = 50;
  for (int obj = 0; obj < wanted; ++obj) {
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
      const int class_id = uniform_int(rng, 0, config.num_classes - 1);
      const double side = uniform(rng, config.min_object_side, config.max_object_side);
      const double x = uniform(rng, 0.0, config.image_side - side);
      const double y = uniform(rng, 0.0, config.image_side - side);
      const BoundingBox box{x, y, x + side, y + side};
      const bool clash = std::any_of(scene.annotation.boxes.begin(), scene.annotation.boxes.end(),
                                     [&](const BoundingBox& other) { return overlaps(box, other, 2.0); });
      if (clash) continue;

      const int cx = std::clamp(static_cast<int>(0.5 * (box.x1 + box.x2)), 0, config.image_side - 1);
      const int cy = std::clamp(static_cast<int>(0.5 * (box.y1 + box.y2)), 0, config.image_side - 1);
      Color color = random_color(rng, 0.0, 1.0);
      double contrast = 0.0;
      for (int c = 0; c < 3; ++c) contrast += std::abs(color[c] - scene.image.at(cy, cx, c));
      if (contrast / 3.0 < 0.25) {
        for (int c = 0; c < 3; ++c) color[c] = scene.image.at(cy, cx, c) < 0.5f ? 0.95f - 0.3f * color[c] : 0.05f + 0.3f * color[c];
      }
      paint_shape(scene.image, class_id, box, color);
      scene.annotation.boxes.push_back(box);
      scene.annotation.class_ids.push_back(class_id);
      break;
    }
  }
  return scene;
}

Scene generate_scene_for(const SceneConfig& config, Split split, std::int64_t scene_id) {
  const std::uint64_t split_seed = derive_seed(config.rng_seed, split == Split::kTrain ? 1 : 2);
  Rng rng = make_rng(split_seed, static_cast<std::uint64_t>(scene_id));
  return generate_scene(rng, config, scene_id);
}

namespace {

std::string scene_stem(std::int64_t scene_id) {
  std::ostringstream name;
  name << "scene_";
  name.width(6);
  name.fill('0');
  name << scene_id;
  return name.str();
}

}  // namespace

void write_annotation(const fs::path& path, const Scene& scene) {
  json boxes = json::array();
  for (const BoundingBox& b : scene.annotation.boxes) boxes.push_back({b.x1, b.y1, b.x2, b.y2});
  const json doc = {{"scene_id", scene.scene_id},
                    {"width", scene.image.width()},
                    {"height", scene.image.height()},
                    {"boxes", boxes},
                    {"class_ids", scene.annotation.class_ids}};
  std::ofstream out(path);
  if (!out) throw DatasetError("cannot write annotation: " + path.string());
  out << doc.dump(2) << '\n';
  if (!out) throw DatasetError("failed writing annotation: " + path.string());
}

Scene read_annotation(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot read annotation: " + path.string());
  Scene scene;
  try {
    const json doc = json::parse(in);
    scene.scene_id = doc.at("scene_id").get<std::int64_t>();
    for (const auto& b : doc.at("boxes")) {
      scene.annotation.boxes.push_back({b.at(0).get<double>(), b.at(1).get<double>(),
                                        b.at(2).get<double>(), b.at(3).get<double>()});
    }
    scene.annotation.class_ids = doc.at("class_ids").get<std::vector<int>>();
    const int width = doc.at("width").get<int>();
    const int height = doc.at("height").get<int>();
    if (scene.annotation.boxes.size() != scene.annotation.class_ids.size()) {
      throw DatasetError("boxes/class_ids length mismatch in " + path.string());
    }
    for (const BoundingBox& b : scene.annotation.boxes) {
      if (!b.valid_within(width, height)) throw DatasetError("box outside image in " + path.string());
    }
  } catch (const json::exception& e) {
    throw DatasetError("malformed annotation " + path.string() + ": " + e.what());
  }
  return scene;
}

DatasetManifest generate_dataset(const SceneConfig& config, int count, Split split,
                                 const fs::path& out_dir) {
  config.validate();
  if (count < 0) throw ConfigError("scene count must be nonnegative");
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  fs::create_directories(out_dir / "annotations", ec);
  if (ec) throw DatasetError("cannot create dataset directory " + out_dir.string() + ": " + ec.message());

  DatasetManifest manifest;
  for (int i = 0; i < count; ++i) {
    const Scene scene = generate_scene_for(config, split, i);
    const std::string stem = scene_stem(i);
    const std::string image_rel = "images/" + stem + ".png";
    const std::string ann_rel = "annotations/" + stem + ".json";
    try {
      write_png(out_dir / image_rel, scene.image);
    } catch (const IoError& e) {
      throw DatasetError(e.what());
    }
    write_annotation(out_dir / ann_rel, scene);
    manifest.entries.push_back({image_rel, sha256_file(out_dir / image_rel)});
    manifest.entries.push_back({ann_rel, sha256_file(out_dir / ann_rel)});
  }
  std::ofstream out(out_dir / kManifestFile);
  if (!out) throw DatasetError("cannot write manifest in " + out_dir.string());
  for (const ManifestEntry& e : manifest.entries) {
    out << json{{"path", e.path}, {"sha256", e.sha256}}.dump() << '\n';
  }
  if (!out) throw DatasetError("failed writing manifest in " + out_dir.string());
  return manifest;
}

DatasetManifest read_manifest(const fs::path& dataset_dir) {
  std::ifstream in(dataset_dir / kManifestFile);
  if (!in) throw DatasetError("no dataset manifest in " + dataset_dir.string());
  DatasetManifest manifest;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      const json rec = json::parse(line);
      manifest.entries.push_back({rec.at("path").get<std::string>(), rec.at("sha256").get<std::string>()});
    } catch (const json::exception& e) {
      throw DatasetError("malformed manifest line in " + dataset_dir.string() + ": " + e.what());
    }
  }
  return manifest;
}

std::vector<Scene> load_dataset(const fs::path& dataset_dir) {
  const DatasetManifest manifest = read_manifest(dataset_dir);
  for (const ManifestEntry& e : manifest.entries) {
    const fs::path file = dataset_dir / e.path;
    if (!fs::exists(file)) throw DatasetError("missing dataset file: " + file.string());
    if (sha256_file(file) != e.sha256) throw DatasetError("checksum mismatch: " + file.string());
  }
  std::vector<Scene> scenes;
  for (const ManifestEntry& e : manifest.entries) {
    if (e.path.rfind("annotations/", 0) != 0) continue;
    Scene scene = read_annotation(dataset_dir / e.path);
    const fs::path image_path = dataset_dir / "images" / (fs::path(e.path).stem().string() + ".png");
    try {
      scene.image = read_png(image_path);
    } catch (const IoError& err) {
      throw DatasetError(err.what());
    }
    scenes.push_back(std::move(scene));
  }
  std::sort(scenes.begin(), scenes.end(),
            [](const Scene& a, const Scene& b) { return a.scene_id < b.scene_id; });
  return scenes;
}

Annotation scale_annotation(const Annotation& annotation, double s) {
  Annotation out = annotation;
  for (BoundingBox& b : out.boxes) {
    b.x1 /= s;
    b.y1 /= s;
    b.x2 /= s;
    b.y2 /= s;
  }
  return out;
}

}  // namespace restoredet
