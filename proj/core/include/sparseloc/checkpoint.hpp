#pragma once

#include <cstdint>
#include <string>

#include "sparseloc/train.hpp"

namespace sparseloc {

struct CheckpointMeta {
  std::uint64_t config_hash = 0;
  std::int64_t step = 0;
  std::int64_t total_steps = 1;
  double lr_max = 1e-4;
  double lr_min = 1e-7;
};

// One STEN file per parameter (and per Adam moment pair) plus a manifest
// mapping names to files and recording the config hash.
void save_checkpoint(const std::string& dir, const TrainState& state, std::uint64_t config_hash);

CheckpointMeta read_checkpoint_meta(const std::string& dir);

// Rebuilds the model structure from `cfg` and overwrites every parameter and
// moment from the checkpoint. Every model parameter must be present.
TrainState load_checkpoint(const std::string& dir, const ModelConfig& cfg);

}  // namespace sparseloc
