#pragma once

#include <filesystem>
#include <memory>
#include <vector>

#include "restoredet/model.hpp"
#include "restoredet/training.hpp"

namespace restoredet {

struct LoadedCheckpoint {
  TrainConfig config;
  std::string fingerprint;
  int epoch = 0;
  long long iteration = 0;
  std::unique_ptr<Model<float>> model;
  std::vector<Tensor<float>> velocity;
};

/// Parameters, optimizer state, resolved config and progress counters in a
/// single binary archive (written to a temp file, then renamed).
void save_checkpoint(const std::filesystem::path& path, const TrainConfig& config, Model<float>& model,
                     const SgdMomentum<float>& optimizer, int epoch, long long iteration);

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace restoredet
