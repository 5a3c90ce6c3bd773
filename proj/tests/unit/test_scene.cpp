#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "restoredet/error.hpp"
#include "restoredet/image_io.hpp"
#include "restoredet/scene.hpp"
#include "test_util.hpp"

namespace restoredet {
namespace {

namespace fs = std::filesystem;

TEST(Scene, SingleObjectConfigYieldsOneBox) {
  SceneConfig cfg;
  cfg.min_objects = cfg.max_objects = 1;
  for (int i = 0; i < 20; ++i) {
    const Scene s = generate_scene_for(cfg, Split::kTrain, i);
    EXPECT_EQ(s.annotation.size(), 1u);
    EXPECT_EQ(s.annotation.class_ids.size(), 1u);
  }
}

TEST(Scene, SameSeedIsIdentical) {
  SceneConfig cfg;
  cfg.background = Background::kTextured;
  Rng a = make_rng(3, 0), b = make_rng(3, 0);
  const Scene x = generate_scene(a, cfg), y = generate_scene(b, cfg);
  EXPECT_EQ(x.image, y.image);
  EXPECT_EQ(x.annotation, y.annotation);
}

TEST(Scene, SplitsDrawFromDifferentStreams) {
  SceneConfig cfg;
  EXPECT_NE(generate_scene_for(cfg, Split::kTrain, 0).image, generate_scene_for(cfg, Split::kTest, 0).image);
  EXPECT_NE(generate_scene_for(cfg, Split::kTrain, 0).image, generate_scene_for(cfg, Split::kTrain, 1).image);
}

TEST(Scene, ThousandScenesAreValidAndCoverAllClasses) {
  SceneConfig cfg;
  std::vector<int> histogram(cfg.num_classes, 0);
  const double min_area = cfg.min_object_side * cfg.min_object_side / 2.0;
  for (int i = 0; i < 1000; ++i) {
    const Scene s = generate_scene_for(cfg, Split::kTrain, i);
    ASSERT_EQ(s.annotation.boxes.size(), s.annotation.class_ids.size());
    ASSERT_GE(s.annotation.size(), static_cast<std::size_t>(cfg.min_objects));
    ASSERT_LE(s.annotation.size(), static_cast<std::size_t>(cfg.max_objects));
    ASSERT_TRUE(s.image.in_unit_range());
    for (std::size_t j = 0; j < s.annotation.size(); ++j) {
      const BoundingBox& b = s.annotation.boxes[j];
      ASSERT_TRUE(b.valid_within(cfg.image_side, cfg.image_side));
      ASSERT_GE(b.area(), min_area);
      const int c = s.annotation.class_ids[j];
      ASSERT_GE(c, 0);
      ASSERT_LT(c, cfg.num_classes);
      ++histogram[c];
    }
  }
  for (int count : histogram) EXPECT_GT(count, 0);
}

// On a flat background, the changed pixels of each shape must span its box.
TEST(Scene, BoxesAreTightToDrawnShapes) {
  SceneConfig cfg;
  cfg.background = Background::kFlat;
  for (int i = 0; i < 100; ++i) {
    const Scene s = generate_scene_for(cfg, Split::kTest, i);
    const auto bg = [&](int c) {
      // A corner pixel that no box touches gives the flat background.
      for (auto [y, x] : {std::pair{0, 0}, {0, 127}, {127, 0}, {127, 127}}) {
        bool free = true;
        for (const BoundingBox& b : s.annotation.boxes) {
          if (x + 1 > b.x1 && x < b.x2 && y + 1 > b.y1 && y < b.y2) free = false;
        }
        if (free) return s.image.at(y, x, c);
      }
      return -1.0f;
    };
    if (bg(0) < 0.0f) continue;
    const auto covers = [](const BoundingBox& b, int y, int x) {
      return x + 1 > b.x1 && x < b.x2 && y + 1 > b.y1 && y < b.y2;
    };
    const auto changed = [&](int y, int x) {
      double d = 0.0;
      for (int c = 0; c < 3; ++c) d += std::abs(s.image.at(y, x, c) - bg(c));
      return d > 1e-6;
    };
    // Nothing outside the boxes is painted.
    for (int y = 0; y < 128; ++y) {
      for (int x = 0; x < 128; ++x) {
        bool inside = false;
        for (const BoundingBox& b : s.annotation.boxes) inside = inside || covers(b, y, x);
        if (!inside) ASSERT_FALSE(changed(y, x)) << "scene " << i << " pixel " << y << "," << x;
      }
    }
    // Each box is reached by its own shape on every side.
    for (std::size_t j = 0; j < s.annotation.size(); ++j) {
      const BoundingBox& b = s.annotation.boxes[j];
      int lo_x = 1 << 20, lo_y = 1 << 20, hi_x = -1, hi_y = -1;
      for (int y = 0; y < 128; ++y) {
        for (int x = 0; x < 128; ++x) {
          if (!covers(b, y, x) || !changed(y, x)) continue;
          lo_x = std::min(lo_x, x);
          lo_y = std::min(lo_y, y);
          hi_x = std::max(hi_x, x + 1);
          hi_y = std::max(hi_y, y + 1);
        }
      }
      EXPECT_NEAR(lo_x, b.x1, 1.0);
      EXPECT_NEAR(lo_y, b.y1, 1.0);
      EXPECT_NEAR(hi_x, b.x2, 1.0);
      EXPECT_NEAR(hi_y, b.y2, 1.0);
    }
  }
}

TEST(Scene, InvalidConfigIsRejected) {
  SceneConfig cfg;
  cfg.image_side = 100;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.max_object_side = 200;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.min_objects = 3;
  cfg.max_objects = 2;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.num_classes = 4;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Dataset, CountTenWritesTenImagesTenAnnotationsOneManifest) {
  testing::TempDir dir("scene10");
  SceneConfig cfg;
  generate_dataset(cfg, 10, Split::kTrain, dir.path());
  int pngs = 0, jsons = 0;
  for (const auto& e : fs::directory_iterator(dir.path() / "images")) pngs += e.path().extension() == ".png";
  for (const auto& e : fs::directory_iterator(dir.path() / "annotations")) jsons += e.path().extension() == ".json";
  EXPECT_EQ(pngs, 10);
  EXPECT_EQ(jsons, 10);
  EXPECT_TRUE(fs::exists(dir.path() / kManifestFile));
  const DatasetManifest m = read_manifest(dir.path());
  EXPECT_EQ(m.entries.size(), 20u);
  for (const ManifestEntry& e : m.entries) EXPECT_EQ(sha256_file(dir.path() / e.path), e.sha256);
}

TEST(Dataset, RegenerationGivesIdenticalChecksums) {
  testing::TempDir a("sceneA"), b("sceneB");
  SceneConfig cfg;
  cfg.rng_seed = 17;
  const DatasetManifest x = generate_dataset(cfg, 5, Split::kTest, a.path());
  const DatasetManifest y = generate_dataset(cfg, 5, Split::kTest, b.path());
  ASSERT_EQ(x.entries.size(), y.entries.size());
  for (std::size_t i = 0; i < x.entries.size(); ++i) {
    EXPECT_EQ(x.entries[i].path, y.entries[i].path);
    EXPECT_EQ(x.entries[i].sha256, y.entries[i].sha256);
  }
}

TEST(Dataset, CountZeroGivesEmptyManifest) {
  testing::TempDir dir("scene0");
  EXPECT_NO_THROW(generate_dataset(SceneConfig{}, 0, Split::kTrain, dir.path()));
  EXPECT_TRUE(read_manifest(dir.path()).entries.empty());
  EXPECT_TRUE(load_dataset(dir.path()).empty());
}

TEST(Dataset, LoadRoundTripsScenes) {
  testing::TempDir dir("sceneRT");
  SceneConfig cfg;
  generate_dataset(cfg, 4, Split::kTrain, dir.path());
  const auto scenes = load_dataset(dir.path());
  ASSERT_EQ(scenes.size(), 4u);
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const Scene ref = generate_scene_for(cfg, Split::kTrain, static_cast<std::int64_t>(i));
    EXPECT_EQ(scenes[i].scene_id, ref.scene_id);
    EXPECT_EQ(scenes[i].annotation, ref.annotation);
    // 8-bit PNG quantization.
    for (std::size_t k = 0; k < ref.image.size(); ++k) {
      ASSERT_NEAR(scenes[i].image.values()[k], ref.image.values()[k], 0.5 / 255.0 + 1e-6);
    }
  }
}

TEST(Dataset, CorruptedFileFailsChecksum) {
  testing::TempDir dir("sceneBad");
  generate_dataset(SceneConfig{}, 2, Split::kTrain, dir.path());
  {
    std::ofstream out(dir.path() / "annotations" / "scene_000001.json", std::ios::app);
    out << " ";
  }
  EXPECT_THROW(load_dataset(dir.path()), DatasetError);
}

TEST(Dataset, MissingManifestIsDatasetError) {
  testing::TempDir dir("sceneNone");
  EXPECT_THROW(load_dataset(dir.path()), DatasetError);
}

TEST(ScaleAnnotation, DividesCoordinates) {
  Annotation a{{{8, 8, 40, 40}}, {2}};
  const Annotation h = scale_annotation(a, 2.0);
  EXPECT_EQ(h.boxes[0], (BoundingBox{4, 4, 20, 20}));
  EXPECT_EQ(h.class_ids, a.class_ids);
  EXPECT_EQ(scale_annotation(a, 1.0), a);
  Annotation full{{{0, 0, 128, 128}}, {0}};
  EXPECT_EQ(scale_annotation(full, 4.0).boxes[0], (BoundingBox{0, 0, 32, 32}));
}

TEST(ScaleAnnotation, InverseScaleRecovers) {
  Rng rng = make_rng(21, 0);
  for (int t = 0; t < 200; ++t) {
    const Scene s = generate_scene(rng, SceneConfig{});
    const double scale = uniform(rng, 1.0, 4.0);
    const Annotation back = scale_annotation(scale_annotation(s.annotation, scale), 1.0 / scale);
    for (std::size_t i = 0; i < back.size(); ++i) {
      EXPECT_NEAR(back.boxes[i].x1, s.annotation.boxes[i].x1, 1e-9);
      EXPECT_NEAR(back.boxes[i].y1, s.annotation.boxes[i].y1, 1e-9);
      EXPECT_NEAR(back.boxes[i].x2, s.annotation.boxes[i].x2, 1e-9);
      EXPECT_NEAR(back.boxes[i].y2, s.annotation.boxes[i].y2, 1e-9);
    }
  }
}

}  // namespace
}  // namespace restoredet
