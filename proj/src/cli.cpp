#include "restoredet/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "restoredet/checkpoint.hpp"
#include "restoredet/degradation.hpp"
#include "restoredet/error.hpp"
#include "restoredet/evaluation.hpp"
#include "restoredet/image_io.hpp"
#include "restoredet/kv_config.hpp"
#include "restoredet/plot.hpp"
#include "restoredet/scene.hpp"
#include "restoredet/training.hpp"

#ifndef RESTOREDET_VERSION
#define RESTOREDET_VERSION "0.0.0"
#endif
#ifndef RESTOREDET_GIT_REV
#define RESTOREDET_GIT_REV "unknown"
#endif

namespace restoredet::cli {

namespace fs = std::filesystem;

std::string code_version() { return std::string(RESTOREDET_VERSION) + "+" + RESTOREDET_GIT_REV; }

namespace {

struct KeySpec {
  std::string key;
  std::string fallback;  // empty string: no default (value may be required)
  std::string help;
};

struct Context {
  std::string command;
  KeyValueConfig config;  // fully resolved
  fs::path out_dir;
  bool verbose = false;
  std::ostream* out = nullptr;
  std::ostream* err = nullptr;
  std::string manifest_note;

  void log(const std::string& msg) const { *err << msg << std::endl; }

  /// Writes the resolved configuration; rerunning with `--config` on this
  /// file reproduces the run.
  void write_manifest() const {
    fs::create_directories(out_dir);
    std::ofstream f(out_dir / kRunManifest, std::ios::trunc);
    if (!f) throw IoError("cannot write run manifest in " + out_dir.string());
    f << "# restoredet run manifest; reproduce with: restoredet " << command << " --config " << kRunManifest
      << " --out <dir>\n";
    if (!manifest_note.empty()) f << "# " << manifest_note << '\n';
    f << "command = " << command << '\n' << "code_version = " << code_version() << '\n' << config.dump();
  }
};

struct Command {
  std::string name;
  std::string description;
  std::vector<KeySpec> keys;
  std::function<void(Context&)> run;
};

std::string kebab(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return key;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    if (b == std::string::npos) continue;
    out.push_back(item.substr(b, item.find_last_not_of(" \t") - b + 1));
  }
  return out;
}

const std::string& require(const Context& ctx, const std::string& key) {
  const std::string& v = ctx.config.get(key);
  if (v.empty()) throw UsageError(ctx.command + ": --" + kebab(key) + " is required");
  return v;
}

std::uint64_t get_seed(const KeyValueConfig& kv) {
  const long long s = kv.get_int64("seed", 0);
  if (s < 0) throw ConfigError("seed must be >= 0");
  return static_cast<std::uint64_t>(s);
}

// ---- synth -------------------------------------------------------------

void run_synth(Context& ctx) {
  const auto& kv = ctx.config;
  SceneConfig sc;
  sc.image_side = kv.get_int("image_side", sc.image_side);
  sc.num_classes = kv.get_int("num_classes", sc.num_classes);
  sc.min_objects = kv.get_int("min_objects", sc.min_objects);
  sc.max_objects = kv.get_int("max_objects", sc.max_objects);
  sc.min_object_side = kv.get_double("min_object_side", sc.min_object_side);
  sc.max_object_side = kv.get_double("max_object_side", sc.max_object_side);
  sc.background = parse_background(kv.get("background"));
  sc.rng_seed = get_seed(kv);
  sc.validate();
  const Split split = parse_split(kv.get("split"));
  const int count = kv.get_int("count", 0);
  if (count < 0) throw ConfigError("count must be >= 0");
  ctx.write_manifest();
  generate_dataset(sc, count, split, ctx.out_dir);
  *ctx.out << "wrote " << count << " " << to_string(split) << " scenes to " << ctx.out_dir.string()
           << '\n';
}

// ---- degrade -----------------------------------------------------------

void run_degrade(Context& ctx) {
  const auto& kv = ctx.config;
  const fs::path input = require(ctx, "input");
  const ImageTensor image = read_png(input);
  const std::string mode = kv.get("mode");
  Rng rng = make_rng(get_seed(kv), 0);
  DegradationParams p;
  if (mode == "random") {
    if (image.height() != image.width()) throw ParameterError("random mode needs a square image");
    SamplerConfig sampler;
    sampler.hr_side = image.height();
    sampler.stride = kNetworkStride;
    sampler.validate();
    p = sample_degradation(rng, sampler);
  } else if (mode == "fixed") {
    p.kernel_type = parse_kernel_type(kv.get("kernel_type"));
    p.kernel_size = kv.get_int("kernel_size", 0);
    p.width_major = kv.get_double("width_major", 0.0);
    p.width_minor = kv.get_double("width_minor", 0.0);
    p.angle = kv.get_double("angle", 0.0);
    p.scale = kv.get_double("scale", 1.0);
    p.resample_method = parse_resample_method(kv.get("resample_method"));
    p.noise_sigma = kv.get_double("noise_sigma", 0.0);
    p.output_size = {static_cast<int>(std::lround(image.height() / p.scale)),
                     static_cast<int>(std::lround(image.width() / p.scale))};
    p.validate();
  } else {
    throw ConfigError("mode must be random or fixed, got " + mode);
  }
  ctx.write_manifest();
  const ImageTensor lr = degrade(image, p, rng);
  write_png(ctx.out_dir / "degraded.png", lr);

  KeyValueConfig params;
  params.set("kernel_type", std::string(to_string(p.kernel_type)));
  params.set("kernel_size", std::to_string(p.kernel_size));
  params.set("width_major", format_double(p.width_major));
  params.set("width_minor", format_double(p.width_minor));
  params.set("angle", format_double(p.angle));
  params.set("scale", format_double(p.scale));
  params.set("resample_method", std::string(to_string(p.resample_method)));
  params.set("noise_sigma", format_double(p.noise_sigma));
  params.set("output_height", std::to_string(p.output_size.height));
  params.set("output_width", std::to_string(p.output_size.width));
  const TransformationTarget t = normalize_params(p);
  params.set("k_norm", format_double(t.k_norm));
  params.set("s_norm", format_double(t.s_norm));
  params.set("n_norm", format_double(t.n_norm));
  params.set("sha256", sha256_file(ctx.out_dir / "degraded.png"));
  params.save(ctx.out_dir / "params.cfg");

  const BlurKernel k = build_kernel(p);
  if (!k.empty()) {
    std::ofstream f(ctx.out_dir / "kernel.txt");
    f.precision(17);
    for (int r = 0; r < k.size; ++r) {
      for (int c = 0; c < k.size; ++c) f << (c ? " " : "") << k.at(r, c);
      f << '\n';
    }
  }
  *ctx.out << "degraded " << input.string() << " -> " << lr.width() << "x" << lr.height() << " ("
           << to_string(p.kernel_type) << ", s=" << p.scale << ", sigma=" << p.noise_sigma * 255.0 << "/255)\n";
}

// ---- train -------------------------------------------------------------

std::vector<KeySpec> train_keys() {
  const KeyValueConfig defaults = TrainConfig{}.to_kv();
  std::vector<KeySpec> keys;
  for (const auto& k : TrainConfig::keys()) {
    std::string fallback = defaults.get(k);
    if (k == "decay_milestones") fallback = "";  // derived from epochs unless given
    keys.push_back({k, fallback, "training config: " + k});
  }
  keys.push_back({"data", "", "dataset root holding train/ (and optionally test/) splits"});
  keys.push_back({"resume", "", "checkpoint to resume from"});
  return keys;
}

void run_train(Context& ctx) {
  KeyValueConfig tc;
  for (const auto& k : TrainConfig::keys()) {
    const std::string& v = ctx.config.get(k);
    if (!v.empty()) tc.set(k, v);
  }
  const TrainConfig config = TrainConfig::from_kv(tc);
  config.validate();
  const fs::path data = require(ctx, "data");
  if (!fs::exists(data / "train" / kManifestFile)) {
    throw DatasetError("no training split at " + (data / "train").string() + " (run `restoredet synth --split train`)");
  }
  // Record the resolved milestones so the manifest alone reproduces the run.
  ctx.config.set("decay_milestones", join_ints(config.milestones()));
  ctx.manifest_note = "scheme N+L: each batch is degraded with probability 1/2 (per-batch coin flip); label " +
                      config.label() + "; fingerprint " + config.fingerprint();
  TrainOptions options;
  const std::string resume = ctx.config.get("resume");
  if (!resume.empty()) options.resume_from = resume;
  options.log = [&](const std::string& m) { ctx.log(m); };
  // Fail fast on an unreadable dataset before anything lands in out_dir.
  load_dataset(data / "train");
  ctx.write_manifest();
  const TrainResult result = train_loop(config, data, ctx.out_dir, options);
  *ctx.out << "trained " << config.label() << " for " << config.epochs << " epochs; checkpoint "
           << result.final_checkpoint.string() << '\n';
}

// ---- eval --------------------------------------------------------------

fs::path test_split(const fs::path& data) {
  if (fs::exists(data / "test" / kManifestFile)) return data / "test";
  if (fs::exists(data / kManifestFile)) return data;
  throw DatasetError("no test split at " + data.string());
}

void run_eval(Context& ctx) {
  const auto& kv = ctx.config;
  const auto checkpoints = split_list(require(ctx, "checkpoint"));
  const auto labels = split_list(kv.get("label"));
  if (!labels.empty() && labels.size() != checkpoints.size()) {
    throw ConfigError("--label needs one entry per checkpoint");
  }
  std::vector<BenchmarkEntry> entries;
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    if (!fs::exists(checkpoints[i])) throw BenchmarkError("missing checkpoint: " + checkpoints[i]);
    entries.push_back({labels.empty() ? std::string() : labels[i], checkpoints[i]});
  }
  std::vector<Protocol> protocols;
  for (const auto& p : split_list(kv.get("protocols"))) protocols.push_back(parse_protocol(p));
  std::vector<Scene> scenes = load_dataset(test_split(require(ctx, "data")));
  const int limit = kv.get_int("limit", 0);
  if (limit < 0) throw ConfigError("limit must be >= 0");
  if (limit > 0 && static_cast<int>(scenes.size()) > limit) scenes.resize(limit);

  EvalOptions options;
  options.infer.score_threshold = kv.get_double("threshold", options.infer.score_threshold);
  options.infer.max_dets = kv.get_int("max_dets", options.infer.max_dets);
  options.measure_speed = kv.get_bool("fps", true);
  options.fps_iters = kv.get_int("fps_iters", options.fps_iters);
  options.fps_warmup = kv.get_int("fps_warmup", options.fps_warmup);
  options.artifact_images = kv.get_int("artifacts", 0);
  ctx.write_manifest();
  const auto reports = run_benchmark(entries, scenes, protocols, get_seed(kv), ctx.out_dir, options);
  *ctx.out << format_table(reports);
}

// ---- infer -------------------------------------------------------------

void run_infer(Context& ctx) {
  const auto& kv = ctx.config;
  const fs::path ckpt_path = require(ctx, "checkpoint");
  std::vector<std::string> inputs;
  for (const auto& in : split_list(require(ctx, "input"))) {
    if (!fs::is_directory(in)) {
      inputs.push_back(in);
      continue;
    }
    std::vector<std::string> pngs;
    for (const auto& e : fs::directory_iterator(in)) {
      if (e.path().extension() == ".png") pngs.push_back(e.path().string());
    }
    std::sort(pngs.begin(), pngs.end());
    inputs.insert(inputs.end(), pngs.begin(), pngs.end());
  }
  if (inputs.empty()) throw UsageError("no PNG inputs found");
  const LoadedCheckpoint ckpt = load_checkpoint(ckpt_path);
  InferOptions options;
  options.score_threshold = kv.get_double("threshold", options.score_threshold);
  options.max_dets = kv.get_int("max_dets", options.max_dets);
  const double draw = kv.get_double("draw_threshold", 0.3);
  std::vector<ImageTensor> images;
  for (const auto& in : inputs) images.push_back(read_png(in));
  ctx.write_manifest();

  std::ofstream jsonl(ctx.out_dir / "detections.jsonl", std::ios::trunc);
  if (!jsonl) throw IoError("cannot write detections.jsonl");
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto dets = infer(*ckpt.model, images[i], options);
    nlohmann::json j = {{"input", inputs[i]}, {"detections", nlohmann::json::array()}};
    for (const auto& d : dets) {
      j["detections"].push_back({{"class_id", d.class_id},
                                 {"class", class_name(d.class_id)},
                                 {"score", d.score},
                                 {"box", {d.box.x1, d.box.y1, d.box.x2, d.box.y2}}});
    }
    jsonl << j.dump() << '\n';
    const int up = std::max(1, 256 / images[i].width());
    write_png(ctx.out_dir / (fs::path(inputs[i]).stem().string() + "_detections.png"),
              annotate_detections(images[i], dets, {}, up, draw));
    int shown = 0;
    for (const auto& d : dets) shown += d.score >= draw;
    *ctx.out << inputs[i] << ": " << dets.size() << " detections (" << shown << " with score >= " << draw << ")\n";
  }
}

// ---- report ------------------------------------------------------------

fs::path reports_file(const fs::path& p) {
  if (fs::is_directory(p)) return p / "benchmark.jsonl";
  if (p.filename() == kRunManifest) return p.parent_path() / "benchmark.jsonl";
  return p;
}

void run_report(Context& ctx) {
  std::vector<EvalReport> all;
  for (const auto& in : split_list(require(ctx, "inputs"))) {
    const fs::path f = reports_file(in);
    if (!fs::exists(f)) throw IoError("no evaluation records at " + f.string());
    const auto rs = read_reports(f);
    all.insert(all.end(), rs.begin(), rs.end());
  }
  ctx.write_manifest();
  const std::string text = format_table(all) + "\n" + format_aggregate(aggregate_reports(all));
  std::ofstream(ctx.out_dir / "report.txt", std::ios::trunc) << text;
  std::ofstream jsonl(ctx.out_dir / "report.jsonl", std::ios::trunc);
  for (const auto& r : all) jsonl << to_jsonl(r) << '\n';
  *ctx.out << text;
}

std::vector<Command> commands() {
  return {
      {"synth",
       "Generate a synthetic shapes split (PNG images, JSON annotations, checksummed manifest)",
       {{"split", "train", "train or test"},
        {"count", "100", "number of scenes"},
        {"seed", "0", "dataset seed"},
        {"image_side", "128", "HR image side in pixels"},
        {"num_classes", "3", "shape classes (1-3)"},
        {"min_objects", "1", "objects per scene, lower bound"},
        {"max_objects", "4", "objects per scene, upper bound"},
        {"min_object_side", "16", "object box side lower bound (pixels)"},
        {"max_object_side", "56", "object box side upper bound (pixels)"},
        {"background", "gradient", "flat, gradient or textured"}},
       run_synth},
      {"degrade",
       "Apply blur -> resample -> noise to one PNG (random or fixed parameters)",
       {{"input", "", "input PNG"},
        {"mode", "random", "random (sampled, stride-32 output) or fixed (parameters below)"},
        {"seed", "0", "sampling / noise seed"},
        {"kernel_type", "none", "none, isotropic or anisotropic"},
        {"kernel_size", "0", "odd kernel size in [7, 21] (0 for none)"},
        {"width_major", "0", "major std-dev (pixels)"},
        {"width_minor", "0", "minor std-dev (pixels)"},
        {"angle", "0", "rotation in radians"},
        {"scale", "1", "downsampling ratio in [1, 4]"},
        {"resample_method", "bilinear", "nearest, bilinear or bicubic"},
        {"noise_sigma", "0", "AWGN std-dev on the [0, 1] scale"}},
       run_degrade},
      {"train", "Train a detector (vanilla or RestoreDet variants) on a synthetic dataset", train_keys(), run_train},
      {"eval",
       "Evaluate checkpoints on a degraded test split and write tables, PR curves and artifacts",
       {{"checkpoint", "", "comma-separated checkpoint paths"},
        {"label", "", "comma-separated display labels (default: from each checkpoint's config)"},
        {"data", "", "dataset root (uses test/) or a split directory"},
        {"protocols", "random", "comma-separated: random, down2, down4"},
        {"seed", "0", "degradation seed shared by all checkpoints"},
        {"limit", "0", "evaluate only the first N test scenes (0: all)"},
        {"threshold", "0.01", "minimum detection score kept for AP"},
        {"max_dets", "100", "detections kept per image"},
        {"fps", "true", "measure batch-1 throughput"},
        {"fps_iters", "30", "timed iterations for throughput"},
        {"fps_warmup", "5", "warm-up iterations for throughput"},
        {"artifacts", "8", "annotated detection / restoration images per configuration"}},
       run_eval},
      {"infer",
       "Run the deployment path (encoder, upscaling blocks, detection heads) on PNG images",
       {{"checkpoint", "", "checkpoint path"},
        {"input", "", "comma-separated input PNGs or directories of PNGs (sides must be multiples of 32)"},
        {"threshold", "0.01", "minimum score written to detections.jsonl"},
        {"max_dets", "100", "detections kept per image"},
        {"draw_threshold", "0.3", "minimum score drawn on the annotated images"}},
       run_infer},
      {"report",
       "Merge evaluation records (benchmark.jsonl files, eval output dirs or their run manifests) into one table",
       {{"inputs", "", "comma-separated files or directories"}},
       run_report},
  };
}

int fail(std::ostream& err, int code, const std::string& what) {
  err << "restoredet: " << what << '\n';
  return code;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  const std::vector<Command> cmds = commands();
  CLI::App app{"restoredet: degradation-aware object detection on synthetic shapes (desk scale)", "restoredet"};
  app.require_subcommand(1);
  app.set_version_flag("--version", code_version());
  app.footer("Flags override values from --config. If --out is omitted, output goes to $" +
             std::string(kOutputDirEnv) + "/<command>.");

  struct Parsed {
    std::string config_path;
    std::string out_dir;
    bool verbose = false;
    std::map<std::string, std::string> values;
    CLI::App* app = nullptr;
  };
  std::vector<Parsed> parsed(cmds.size());
  for (std::size_t i = 0; i < cmds.size(); ++i) {
    auto* sub = app.add_subcommand(cmds[i].name, cmds[i].description);
    parsed[i].app = sub;
    sub->add_option("--config", parsed[i].config_path, "key = value config file (flags take precedence)");
    sub->add_option("-o,--out", parsed[i].out_dir, "output directory");
    sub->add_flag("-v,--verbose", parsed[i].verbose, "verbose logging");
    for (const auto& k : cmds[i].keys) {
      std::string help = k.help;
      if (!k.fallback.empty()) help += " [default: " + k.fallback + "]";
      sub->add_option("--" + kebab(k.key), parsed[i].values[k.key], help);
    }
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  for (std::size_t i = 0; i < cmds.size(); ++i) {
    if (!parsed[i].app->parsed()) continue;
    const Command& cmd = cmds[i];
    Parsed& p = parsed[i];
    try {
      Context ctx;
      ctx.command = cmd.name;
      ctx.verbose = p.verbose;
      ctx.out = &out;
      ctx.err = &err;
      KeyValueConfig kv;
      if (!p.config_path.empty()) kv = KeyValueConfig::load(p.config_path);
      std::vector<std::string> known{"command", "code_version"};
      for (const auto& k : cmd.keys) known.push_back(k.key);
      const auto unknown = kv.unknown_keys(known);
      if (!unknown.empty()) throw ConfigError(p.config_path + ": unknown key '" + unknown.front() + "' for " + cmd.name);
      if (kv.has("command") && kv.get("command") != cmd.name) {
        throw ConfigError(p.config_path + " is a manifest for '" + kv.get("command") + "', not '" + cmd.name + "'");
      }
      for (const auto& k : cmd.keys) {
        if (p.app->count("--" + kebab(k.key)) > 0) {
          ctx.config.set(k.key, p.values[k.key]);
        } else if (kv.has(k.key)) {
          ctx.config.set(k.key, kv.get(k.key));
        } else {
          ctx.config.set(k.key, k.fallback);
        }
      }
      if (!p.out_dir.empty()) {
        ctx.out_dir = p.out_dir;
      } else if (const char* env = std::getenv(kOutputDirEnv); env != nullptr && *env != '\0') {
        ctx.out_dir = fs::path(env) / cmd.name;
      } else {
        throw UsageError(cmd.name + ": --out is required (or set " + std::string(kOutputDirEnv) + ")");
      }
      cmd.run(ctx);
      return kExitOk;
    } catch (const Error& e) {
      const bool usage = e.kind() == ErrorKind::kUsage || e.kind() == ErrorKind::kConfig;
      return fail(err, usage ? kExitUsage : kExitRuntime, std::string(to_string(e.kind())) + ": " + e.what());
    } catch (const std::exception& e) {
      return fail(err, kExitRuntime, std::string("runtime error: ") + e.what());
    }
  }
  return fail(err, kExitUsage, "no subcommand given");
}

int dispatch(int argc, const char* const* argv) {
  std::vector<std::string> args(argv, argv + argc);
  return dispatch(args, std::cout, std::cerr);
}

}  // namespace restoredet::cli
