#pragma once

#include <span>
#include <string>
#include <vector>

#include "sparseloc/synth.hpp"
#include "sparseloc/tensor.hpp"

namespace sparseloc {

struct DatasetItem {
  std::uint64_t seed = 0;
  std::string image_path;  // resolved when read back
  std::string mask_path;
  std::string variant;
};

void write_dataset_manifest(const std::string& path, const std::vector<DatasetItem>& items);
// Paths in the returned items are resolved against the manifest directory.
std::vector<DatasetItem> read_dataset_manifest(const std::string& path);

// Per-dataset knobs used by the synth command. Scene seeds are consecutive
// integers starting at the root seed, so the three splits occupy disjoint
// seed ranges by construction.
struct SynthesisParams {
  int size = 256;
  int train_count = 512;
  int val_count = 64;
  int test_count = 64;
  double area_min = 0.05;
  double area_max = 0.35;
  double host_sigma_min = 0.010;
  double host_sigma_max = 0.020;
  double donor_sigma_gap = 0.045;
  double host_amp_min = 0.005;
  double host_amp_max = 0.015;
  double donor_amp_gap = 0.020;
  bool hard_negative = false;
};

// Builds the scene of one global sample index under a dataset root seed.
SceneSpec scene_for_index(const SynthesisParams& params, std::uint64_t root_seed,
                          std::int64_t global_index);

struct DatasetPaths {
  std::string train_manifest;
  std::string val_manifest;
  std::string test_manifest;
};

// Writes out_dir/{train,val,test}/ with PPM images, PGM masks and a manifest
// per split. Deterministic per (params, seed).
DatasetPaths synthesize_dataset(const std::string& out_dir, const SynthesisParams& params,
                                std::uint64_t seed);

// 8-bit in-memory cache of one sample, planar RGB.
struct CompactSample {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> rgb;
  std::vector<std::uint8_t> mask;
};

CompactSample load_compact_sample(const DatasetItem& item);

Tensor batch_images(std::span<const CompactSample> samples, std::span<const int> indices);
Tensor batch_masks(std::span<const CompactSample> samples, std::span<const int> indices);

}  // namespace sparseloc
