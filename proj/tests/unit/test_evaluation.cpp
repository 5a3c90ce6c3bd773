#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "restoredet/checkpoint.hpp"
#include "restoredet/error.hpp"
#include "restoredet/evaluation.hpp"
#include "restoredet/training.hpp"
#include "../common/oracles.hpp"
#include "test_util.hpp"

namespace restoredet {
namespace {

namespace fs = std::filesystem;
using testing::jitter;
using testing::oracle_ap;
using testing::random_box;

TEST(Iou, Examples) {
  const BoundingBox a{0, 0, 2, 2}, b{1, 1, 3, 3};
  EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
  EXPECT_EQ(iou(a, BoundingBox{5, 5, 6, 6}), 0.0);
  EXPECT_EQ(iou(a, BoundingBox{2, 0, 4, 2}), 0.0);  // touching edge
  EXPECT_NEAR(iou(a, b), 1.0 / 7.0, 1e-15);
}

TEST(Iou, SymmetricBoundedAndOneOnlyForIdentical) {
  Rng rng = make_rng(40, 0);
  for (int t = 0; t < 2000; ++t) {
    const BoundingBox a = random_box(rng), b = random_box(rng);
    const double v = iou(a, b);
    EXPECT_EQ(v, iou(b, a));
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    if (!(a == b)) EXPECT_LT(v, 1.0);
  }
}

TEST(ComputeAp, WorkedTwoDetectionExample) {
  const std::vector<Annotation> gt{{{{0, 0, 10, 10}}, {0}}};
  const Detection tp{{0, 0, 10, 10}, 0, 0.9}, fp{{20, 20, 30, 30}, 0, 0.8};
  EXPECT_DOUBLE_EQ(*compute_ap({{tp, fp}}, gt, 1).mean, 1.0);
  Detection tp2 = tp, fp2 = fp;
  tp2.score = 0.8;
  fp2.score = 0.9;
  EXPECT_DOUBLE_EQ(*compute_ap({{tp2, fp2}}, gt, 1).mean, 0.5);
}

TEST(ComputeAp, PerfectAndEmptyDetections) {
  Rng rng = make_rng(41, 0);
  std::vector<Annotation> gt(3);
  std::vector<std::vector<Detection>> perfect(3), none(3);
  for (int i = 0; i < 3; ++i) {
    for (int k = 0; k < 3; ++k) {
      const BoundingBox b{k * 30.0, i * 5.0, k * 30.0 + 20, i * 5.0 + 20};
      gt[i].boxes.push_back(b);
      gt[i].class_ids.push_back(k);
      perfect[i].push_back({b, k, uniform(rng, 0, 1)});
    }
  }
  const ApResult p = compute_ap(perfect, gt, 3);
  for (const auto& v : p.per_class) EXPECT_DOUBLE_EQ(*v, 1.0);
  const ApResult z = compute_ap(none, gt, 3);
  for (const auto& v : z.per_class) EXPECT_EQ(*v, 0.0);
}

TEST(ComputeAp, ClassWithoutGroundTruthIsUndefined) {
  const std::vector<Annotation> gt{{{{0, 0, 10, 10}}, {0}}};
  const ApResult r = compute_ap({{Detection{{0, 0, 10, 10}, 1, 0.5}}}, gt, 2);
  EXPECT_EQ(r.per_class[0], 0.0);
  EXPECT_FALSE(r.per_class[1].has_value());
  EXPECT_EQ(r.mean, 0.0);
}

TEST(ComputeAp, MatchesBruteForceOracleOnRandomInstances) {
  Rng rng = make_rng(42, 0);
  for (int t = 0; t < 1000; ++t) {
    const int images = uniform_int(rng, 1, 3);
    std::vector<Annotation> gt(images);
    std::vector<std::vector<Detection>> dets(images);
    const int ngt = uniform_int(rng, 0, 5), ndet = uniform_int(rng, 0, 10);
    for (int g = 0; g < ngt; ++g) {
      const int img = uniform_int(rng, 0, images - 1);
      gt[img].boxes.push_back(random_box(rng));
      gt[img].class_ids.push_back(uniform_int(rng, 0, 1));
    }
    for (int d = 0; d < ndet; ++d) {
      const int img = uniform_int(rng, 0, images - 1);
      Detection det;
      det.score = uniform(rng, 0, 1);
      if (!gt[img].boxes.empty() && uniform(rng, 0, 1) < 0.7) {
        const int g = uniform_int(rng, 0, static_cast<int>(gt[img].size()) - 1);
        det.box = jitter(rng, gt[img].boxes[g], 1.5);
        det.class_id = uniform(rng, 0, 1) < 0.85 ? gt[img].class_ids[g] : 1 - gt[img].class_ids[g];
      } else {
        det.box = random_box(rng);
        det.class_id = uniform_int(rng, 0, 1);
      }
      dets[img].push_back(det);
    }
    const ApResult r = compute_ap(dets, gt, 2);
    for (int c = 0; c < 2; ++c) {
      const auto want = oracle_ap(dets, gt, c);
      ASSERT_EQ(r.per_class[c].has_value(), want.has_value()) << "instance " << t;
      if (want) ASSERT_NEAR(*r.per_class[c], *want, 1e-9) << "instance " << t << " class " << c;
    }
  }
}

TEST(ComputeAp, InvariantUnderMonotoneScoreTransforms) {
  Rng rng = make_rng(43, 0);
  for (int t = 0; t < 200; ++t) {
    std::vector<Annotation> gt(2);
    std::vector<std::vector<Detection>> dets(2);
    for (int i = 0; i < 2; ++i) {
      for (int g = 0; g < 4; ++g) {
        gt[i].boxes.push_back(random_box(rng));
        gt[i].class_ids.push_back(uniform_int(rng, 0, 2));
        dets[i].push_back({jitter(rng, gt[i].boxes.back(), 2.0), gt[i].class_ids.back(), uniform(rng, 0, 1)});
        dets[i].push_back({random_box(rng), uniform_int(rng, 0, 2), uniform(rng, 0, 1)});
      }
    }
    auto mapped = dets;
    for (auto& v : mapped) {
      for (auto& d : v) d.score = 1.0 / (1.0 + std::exp(-7.0 * d.score + 2.0)) * 0.5;
    }
    const ApResult a = compute_ap(dets, gt, 3), b = compute_ap(mapped, gt, 3);
    for (int c = 0; c < 3; ++c) {
      ASSERT_EQ(a.per_class[c].has_value(), b.per_class[c].has_value());
      if (a.per_class[c]) EXPECT_DOUBLE_EQ(*a.per_class[c], *b.per_class[c]);
    }
  }
}

TEST(ComputeAp, DetectionListOrderIsIrrelevant) {
  Rng rng = make_rng(44, 0);
  for (int t = 0; t < 100; ++t) {
    std::vector<Annotation> gt(1);
    std::vector<std::vector<Detection>> dets(1);
    for (int g = 0; g < 5; ++g) {
      gt[0].boxes.push_back(random_box(rng));
      gt[0].class_ids.push_back(0);
      dets[0].push_back({jitter(rng, gt[0].boxes.back(), 2.0), 0, uniform(rng, 0, 1)});
      dets[0].push_back({random_box(rng), 0, uniform(rng, 0, 1)});
    }
    auto shuffled = dets;
    std::shuffle(shuffled[0].begin(), shuffled[0].end(), rng);
    EXPECT_EQ(compute_ap(dets, gt, 1).mean, compute_ap(shuffled, gt, 1).mean);
  }
}

TEST(ComputeAp, InputValidation) {
  EXPECT_THROW(compute_ap({{}}, {}, 1), ShapeError);
  EXPECT_THROW(compute_ap({{Detection{{0, 0, 1, 1}, 4, 0.5}}}, {Annotation{}}, 3), ConfigError);
}

TEST(EnvelopeArea, HandExample) {
  // PR points (r, p): (0.5, 1), (0.5, 0.5), (1, 0.67); envelope 1 on [0, .5], 2/3 on (.5, 1].
  EXPECT_NEAR(envelope_area({0.5, 0.5, 1.0}, {1.0, 0.5, 2.0 / 3.0}), 0.5 + 0.5 * 2.0 / 3.0, 1e-15);
}

TEST(SizeBuckets, AllLargeLeavesSmallUndefined) {
  const std::vector<Annotation> gt{{{{0, 0, 40, 40}, {50, 50, 90, 90}}, {0, 1}}};
  const std::vector<std::vector<Detection>> dets{{{{0, 0, 40, 40}, 0, 0.9}, {{50, 50, 90, 90}, 1, 0.8}}};
  const SizeBucketedAp r = size_bucketed_ap(dets, gt, 2);
  EXPECT_FALSE(r.small.has_value());
  EXPECT_FALSE(r.medium.has_value());
  EXPECT_DOUBLE_EQ(*r.large, 1.0);
}

TEST(SizeBuckets, SingleSmallTruePositive) {
  const std::vector<Annotation> gt{{{{4, 4, 12, 12}}, {2}}};
  const std::vector<std::vector<Detection>> dets{{{{4, 4, 12, 12}, 2, 0.7}}};
  const SizeBucketedAp r = size_bucketed_ap(dets, gt, 3);
  EXPECT_DOUBLE_EQ(*r.small, 1.0);
  EXPECT_FALSE(r.medium.has_value());
  EXPECT_FALSE(r.large.has_value());
}

TEST(SizeBuckets, BucketsPartitionTheGroundTruth) {
  Rng rng = make_rng(45, 0);
  const SizeBuckets b;
  int counts[3] = {0, 0, 0};
  for (int t = 0; t < 5000; ++t) {
    const double side = uniform(rng, 1.0, 60.0);
    const double area = side * side;
    const int k = size_bucket(area, b);
    ASSERT_GE(k, 0);
    ASSERT_LE(k, 2);
    // Exactly one bucket predicate holds.
    const int hits = (area < 144.0) + (area >= 144.0 && area < 1024.0) + (area >= 1024.0);
    ASSERT_EQ(hits, 1);
    ASSERT_EQ(k, area < 144.0 ? 0 : (area < 1024.0 ? 1 : 2));
    ++counts[k];
  }
  for (int c : counts) EXPECT_GT(c, 0);
  EXPECT_EQ(size_bucket(143.99, b), 0);
  EXPECT_EQ(size_bucket(144.0, b), 1);
  EXPECT_EQ(size_bucket(1024.0, b), 2);
}

TEST(SizeBuckets, PerfectDetectionsScoreOneInEveryPopulatedBucket) {
  Rng rng = make_rng(46, 0);
  std::vector<Annotation> gt(20);
  std::vector<std::vector<Detection>> dets(20);
  for (int i = 0; i < 20; ++i) {
    const double side = uniform(rng, 4.0, 50.0);
    gt[i] = {{{1, 1, 1 + side, 1 + side}}, {i % 3}};
    dets[i] = {{gt[i].boxes[0], i % 3, uniform(rng, 0, 1)}, {{70, 70, 80, 80}, i % 3, 0.0001}};
  }
  // Each bucket's false positives are out-of-bucket here except the 10x10 ones in medium.
  const SizeBucketedAp r = size_bucketed_ap(dets, gt, 3);
  EXPECT_DOUBLE_EQ(*r.small, 1.0);
  EXPECT_DOUBLE_EQ(*r.large, 1.0);
  ASSERT_TRUE(r.medium.has_value());
  EXPECT_LT(*r.medium, 1.0 + 1e-12);
}

TEST(Psnr, Examples) {
  const ImageTensor a(10, 10, 1, 0.5f);
  EXPECT_EQ(psnr(a, a), kPsnrCap);
  ImageTensor b = a;
  for (int i = 0; i < 64; ++i) b.values()[i] = 0.625f;  // 64 of 100 pixels off by 1/8: MSE 0.01
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-12);
  EXPECT_THROW(psnr(a, ImageTensor(10, 11, 1)), ShapeError);
}

TEST(Psnr, MatchesScalarLoop) {
  Rng rng = make_rng(47, 0);
  for (int t = 0; t < 20; ++t) {
    const ImageTensor a = testing::random_image(rng, 16, 16), b = testing::random_image(rng, 16, 16);
    double sum = 0.0;
    for (int y = 0; y < 16; ++y) {
      for (int x = 0; x < 16; ++x) {
        for (int c = 0; c < 3; ++c) sum += std::pow(double(a.at(y, x, c)) - double(b.at(y, x, c)), 2);
      }
    }
    EXPECT_NEAR(psnr(a, b), 10.0 * std::log10(768.0 / sum), 1e-6);
  }
}

TEST(TransformationError, OracleAndConstantPredictors) {
  Rng rng = make_rng(48, 0);
  std::vector<TransformationTarget> targets;
  for (int i = 0; i < 200000; ++i) targets.push_back({uniform(rng, 0, 1), uniform(rng, 0, 1), uniform(rng, 0, 1)});
  const TransformationErrors zero = transformation_error(targets, targets);
  EXPECT_EQ(zero.k, 0.0);
  EXPECT_EQ(zero.s, 0.0);
  EXPECT_EQ(zero.n, 0.0);
  const std::vector<TransformationTarget> half(targets.size(), {0.5, 0.5, 0.5});
  const TransformationErrors e = transformation_error(half, targets);
  EXPECT_NEAR(e.k, 0.25, 0.003);
  EXPECT_NEAR(e.s, 0.25, 0.003);
  EXPECT_NEAR(e.n, 0.25, 0.003);
}

TEST(TransformationError, BestConstantBeatsEveryCandidateConstant) {
  Rng rng = make_rng(49, 0);
  for (int size : {1, 2, 7, 50}) {
    std::vector<TransformationTarget> targets;
    for (int i = 0; i < size; ++i) {
      targets.push_back({uniform(rng, 0, 1), std::pow(uniform(rng, 0, 1), 3), uniform(rng, 0, 1) < 0.3 ? 0.0 : 0.7});
    }
    const TransformationErrors best = best_constant_error(targets);
    // The L1-optimal constant is attained at one of the sample values.
    double min_s = 1e9;
    for (const auto& c : targets) {
      double err = 0.0;
      for (const auto& t : targets) err += std::abs(t.s_norm - c.s_norm);
      min_s = std::min(min_s, err / size);
    }
    EXPECT_NEAR(best.s, min_s, 1e-12);
  }
}

TEST(TransformationError, UntrainedModelIsNoBetterThanItsMeanOutput) {
  SceneConfig sc;
  std::vector<Scene> scenes;
  for (int i = 0; i < 40; ++i) scenes.push_back(generate_scene_for(sc, Split::kTest, i));
  const auto samples = make_eval_set(scenes, Protocol::kRandom, 1, 128);
  ModelConfig mc = ModelConfig::tiny();
  Model<float> model(mc);
  model.init(5);
  const TransformationErrors e = transformation_error(model, samples);
  std::vector<TransformationTarget> preds, targets;
  TransformationTarget mean{0, 0, 0};
  for (const auto& s : samples) {
    const Tensor<float> p = model.transform_decode(model.encode(to_tensor<float>(s.hr)).f16,
                                                   model.encode(to_tensor<float>(s.lr)).f16);
    preds.push_back({p[0], p[1], p[2]});
    targets.push_back(s.target);
    mean.k_norm += p[0] / 40.0;
    mean.s_norm += p[1] / 40.0;
    mean.n_norm += p[2] / 40.0;
  }
  const TransformationErrors c = transformation_error(std::vector<TransformationTarget>(40, mean), targets);
  EXPECT_NEAR(e.k, c.k, 0.02);
  EXPECT_NEAR(e.s, c.s, 0.02);
  EXPECT_NEAR(e.n, c.n, 0.02);
}

TEST(EvalSet, DeterministicAndProtocolFaithful) {
  SceneConfig sc;
  std::vector<Scene> scenes;
  for (int i = 0; i < 30; ++i) scenes.push_back(generate_scene_for(sc, Split::kTest, i));
  const auto a = make_eval_set(scenes, Protocol::kRandom, 9, 128);
  const auto b = make_eval_set(scenes, Protocol::kRandom, 9, 128);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].lr, b[i].lr);
    EXPECT_EQ(a[i].params, b[i].params);
  }
  // A subset sees the same inputs.
  const auto sub = make_eval_set({scenes[7]}, Protocol::kRandom, 9, 128);
  EXPECT_EQ(sub[0].lr, a[7].lr);
  for (auto [protocol, side] : {std::pair{Protocol::kDown2, 64}, {Protocol::kDown4, 32}}) {
    const auto d = make_eval_set(scenes, protocol, 9, 128);
    std::set<double> sigmas;
    std::set<KernelType> kernels;
    for (std::size_t i = 0; i < d.size(); ++i) {
      EXPECT_EQ(d[i].lr.height(), side);
      EXPECT_EQ(d[i].params.scale, 128.0 / side);
      EXPECT_EQ(d[i].lr_annotation, scale_annotation(scenes[i].annotation, 128.0 / side));
      sigmas.insert(d[i].params.noise_sigma);
      kernels.insert(d[i].params.kernel_type);
    }
    EXPECT_GT(sigmas.size(), 20u);
    EXPECT_GT(kernels.size(), 1u);
  }
  EXPECT_EQ(parse_protocol("down4"), Protocol::kDown4);
  EXPECT_THROW(parse_protocol("down3"), ConfigError);
}

TEST(Infer, RunsOnlyTheDeploymentPath) {
  Model<float> model(ModelConfig{});
  model.init(1);
  Rng rng = make_rng(50, 0);
  const ImageTensor img = testing::random_image(rng, 64, 64);
  model.counters() = {};
  const auto a = infer(model, img);
  const auto b = infer(model, img);
  EXPECT_EQ(model.counters().transform_decoder, 0);
  EXPECT_EQ(model.counters().restoration_decoder, 0);
  EXPECT_EQ(model.counters().encoder, 2);
  EXPECT_EQ(model.counters().detect, 2);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].box, b[i].box);
    EXPECT_EQ(a[i].score, b[i].score);
  }
  EXPECT_THROW(infer(model, testing::random_image(rng, 60, 64)), ShapeError);
}

TEST(Fps, PositiveStableAndRestoreIsSlower) {
  Model<float> model(ModelConfig{});
  model.init(2);
  EXPECT_THROW(measure_fps(model, 64, 0, 9), BenchmarkError);
  const double base = measure_fps(model, 128, 5, 100).fps;
  const double doubled = measure_fps(model, 128, 5, 200).fps;
  EXPECT_GT(base, 0.0);
  EXPECT_LT(std::abs(doubled - base) / base, 0.10);
  const FpsResult with_restore = measure_fps(model, 128, 5, 100, true);
  EXPECT_LT(with_restore.fps, base);
  EXPECT_FALSE(with_restore.hardware.empty());
}

TEST(Report, JsonRoundTripKeepsMissingValues) {
  EvalReport r;
  r.label = "vanilla/N";
  r.scheme = "N";
  r.protocol = "down2";
  r.per_class_ap50 = {0.5, std::nullopt, 0.25};
  r.ap50 = 0.375;
  r.size_ap = {std::nullopt, 0.4, 0.6};
  r.fps = 12.5;
  r.trans_error = TransformationErrors{0.1, 0.2, 0.3};
  const EvalReport back = report_from_json(to_jsonl(r));
  EXPECT_EQ(back.label, r.label);
  EXPECT_EQ(back.per_class_ap50, r.per_class_ap50);
  EXPECT_FALSE(back.size_ap.small.has_value());
  EXPECT_EQ(back.size_ap.large, 0.6);
  EXPECT_FALSE(back.psnr.has_value());
  EXPECT_EQ(back.trans_error->s, 0.2);
  EXPECT_FALSE(back.trans_baseline.has_value());
  const std::string table = format_table({r});
  EXPECT_NE(table.find("n/a"), std::string::npos);
  EXPECT_NE(table.find("vanilla/N"), std::string::npos);
}

TEST(Report, AggregateUsesSampleStandardDeviation) {
  std::vector<EvalReport> rs(3);
  const double ap[3] = {0.2, 0.4, 0.6};
  for (int i = 0; i < 3; ++i) {
    rs[i].label = "x";
    rs[i].protocol = "random";
    rs[i].ap50 = ap[i];
    rs[i].fps = 10;
  }
  const auto rows = aggregate_reports(rs);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].runs, 3);
  EXPECT_NEAR(rows[0].ap50_mean, 0.4, 1e-15);
  EXPECT_NEAR(rows[0].ap50_std, 0.2, 1e-15);
}

class BenchmarkTest : public ::testing::Test {
 protected:
  void SetUp() override {
    SceneConfig sc;
    generate_dataset(sc, 4, Split::kTrain, dir_.path() / "data" / "train");
    for (int i = 0; i < 6; ++i) test_.push_back(generate_scene_for(sc, Split::kTest, i));
    TrainConfig c;
    c.model = ModelConfig::tiny();
    c.epochs = 0;
    c.batch_size = 2;
    checkpoint_ = train_loop(c, dir_.path() / "data", dir_.path() / "run").final_checkpoint;
  }
  testing::TempDir dir_{"bench"};
  std::vector<Scene> test_;
  fs::path checkpoint_;
};

TEST_F(BenchmarkTest, SameSeedGivesIdenticalTables) {
  EvalOptions opt;
  opt.measure_speed = false;
  opt.artifact_images = 2;
  const std::vector<BenchmarkEntry> entries{{"a", checkpoint_}, {"b", checkpoint_}};
  run_benchmark(entries, test_, {Protocol::kRandom, Protocol::kDown2}, 3, dir_.path() / "b1", opt);
  run_benchmark(entries, test_, {Protocol::kRandom, Protocol::kDown2}, 3, dir_.path() / "b2", opt);
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  EXPECT_EQ(slurp(dir_.path() / "b1" / "benchmark.txt"), slurp(dir_.path() / "b2" / "benchmark.txt"));
  const auto reports = read_reports(dir_.path() / "b1" / "benchmark.jsonl");
  ASSERT_EQ(reports.size(), 4u);
  EXPECT_EQ(reports[0].ap50, reports[1].ap50);  // same checkpoint, same inputs
  EXPECT_TRUE(reports[0].psnr.has_value());
  EXPECT_TRUE(reports[0].trans_error.has_value());
  EXPECT_TRUE(fs::exists(dir_.path() / "b1" / "pr_random.png"));
  bool found_artifact = false;
  for (const auto& e : fs::recursive_directory_iterator(dir_.path() / "b1")) {
    found_artifact = found_artifact || e.path().filename().string().ends_with("_restored.png");
  }
  EXPECT_TRUE(found_artifact);
}

TEST_F(BenchmarkTest, MissingCheckpointIsBenchmarkError) {
  EvalOptions opt;
  opt.measure_speed = false;
  EXPECT_THROW(run_benchmark({{"a", checkpoint_}, {"gone", dir_.path() / "nope.ckpt"}}, test_, {Protocol::kRandom}, 0,
                             dir_.path() / "b3", opt),
               BenchmarkError);
  EXPECT_FALSE(fs::exists(dir_.path() / "b3" / "benchmark.jsonl"));
}

}  // namespace
}  // namespace restoredet
