#include "restoredet/checkpoint.hpp"

#include <array>
#include <fstream>
#include <string>

#include <cereal/archives/portable_binary.hpp>
#include <cereal/types/array.hpp>
#include <cereal/types/string.hpp>
#include <cereal/types/vector.hpp>

#include "restoredet/error.hpp"

namespace restoredet {

namespace {

constexpr const char* kMagic = "restoredet-checkpoint";
constexpr int kFormatVersion = 1;

struct TensorRecord {
  std::string name;
  std::array<int, 4> shape{};
  std::vector<float> values;

  template <class Archive>
  void serialize(Archive& ar) {
    ar(name, shape, values);
  }
};

struct CheckpointRecord {
  std::string magic;
  int version = 0;
  std::string config_kv;
  std::string fingerprint;
  int epoch = 0;
  long long iteration = 0;
  std::vector<TensorRecord> params;
  std::vector<TensorRecord> velocity;

  template <class Archive>
  void serialize(Archive& ar) {
    ar(magic, version, config_kv, fingerprint, epoch, iteration, params, velocity);
  }
};

TensorRecord to_record(const std::string& name, const Tensor<float>& t) {
  return {name, t.shape(), std::vector<float>(t.values().begin(), t.values().end())};
}

void copy_into(const TensorRecord& rec, Tensor<float>& t, const std::filesystem::path& path) {
  if (rec.shape != t.shape() || rec.values.size() != t.size()) {
    throw ConfigError("checkpoint " + path.string() + ": shape mismatch for " + rec.name);
  }
  std::copy(rec.values.begin(), rec.values.end(), t.values().begin());
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const TrainConfig& config, Model<float>& model,
                     const SgdMomentum<float>& optimizer, int epoch, long long iteration) {
  CheckpointRecord rec;
  rec.magic = kMagic;
  rec.version = kFormatVersion;
  rec.config_kv = config.to_kv().dump();
  rec.fingerprint = config.fingerprint();
  rec.epoch = epoch;
  rec.iteration = iteration;
  const auto params = model.parameters();
  for (const auto* p : params) rec.params.push_back(to_record(p->name, p->value));
  const auto& velocity = optimizer.velocity();
  for (std::size_t i = 0; i < velocity.size() && i < params.size(); ++i) {
    rec.velocity.push_back(to_record(params[i]->name, velocity[i]));
  }

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + tmp.string());
    cereal::PortableBinaryOutputArchive archive(out);
    archive(rec);
    if (!out) throw IoError("failed writing checkpoint: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place: " + path.string() + ": " + ec.message());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint: " + path.string());
  CheckpointRecord rec;
  try {
    cereal::PortableBinaryInputArchive archive(in);
    archive(rec);
  } catch (const std::exception& e) {
    throw IoError("corrupt checkpoint " + path.string() + ": " + e.what());
  }
  if (rec.magic != kMagic || rec.version != kFormatVersion) {
    throw IoError("not a checkpoint (or unsupported version): " + path.string());
  }
  LoadedCheckpoint out;
  out.config = TrainConfig::from_kv(KeyValueConfig::parse(rec.config_kv, path.string()));
  out.fingerprint = rec.fingerprint;
  out.epoch = rec.epoch;
  out.iteration = rec.iteration;
  out.model = std::make_unique<Model<float>>(out.config.resolved_model());
  const auto params = out.model->parameters();
  if (params.size() != rec.params.size()) {
    throw ConfigError("checkpoint " + path.string() + ": parameter count mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->name != rec.params[i].name) {
      throw ConfigError("checkpoint " + path.string() + ": unexpected parameter " + rec.params[i].name);
    }
    copy_into(rec.params[i], params[i]->value, path);
  }
  for (std::size_t i = 0; i < rec.velocity.size(); ++i) {
    Tensor<float> v(params[i]->value.n(), params[i]->value.c(), params[i]->value.h(), params[i]->value.w());
    copy_into(rec.velocity[i], v, path);
    out.velocity.push_back(std::move(v));
  }
  return out;
}

}  // namespace restoredet
