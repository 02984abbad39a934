#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "sparseloc/attention.hpp"
#include "sparseloc/tensor.hpp"

namespace sparseloc {

struct StageConfig {
  int depth = 1;
  int channels = 32;
  int max_exponent = 0;  // rates span 2^max_exponent down to 2^0
  int downsample = 16;   // spatial factor relative to the input image
};

// Per-block sparsity rates for one transformer stage plus the tap points
// (last block of each distinct rate) whose outputs feed the fusion head.
struct SparsityPlan {
  std::vector<int> rates;
  std::vector<int> tap_indices;
};

// Rate of block i in a stage of `depth` blocks whose rates decay
// exponentially from 2^max_exponent to 1: 2^(E - floor(i*(E+1)/depth)).
int sparsity_schedule(int depth, int max_exponent, int i);

SparsityPlan build_plan(const StageConfig& cfg);

// Uniform-rate ablation: every block runs at `rate`, single tap at the end.
SparsityPlan uniform_plan(int depth, int rate);

struct ModelConfig {
  int input_size = 256;
  std::array<int, 4> channels{32, 64, 96, 128};
  std::array<int, 4> depths{2, 2, 8, 4};
  int stage3_exponent = 3;
  int stage4_exponent = 1;
  int head_dim = 32;
  int unified_channels = 128;  // fusion width; must equal channels[3]
  int uniform_rate = 0;        // > 0 switches stages 3-4 to the uniform ablation plan

  int stage3_grid() const { return input_size / 16; }
  int stage4_grid() const { return input_size / 32; }
  SparsityPlan stage3_plan() const;
  SparsityPlan stage4_plan() const;
  void validate() const;
};

struct PyramidMap {
  Tensor map;  // [B,C,h,w] (or [C,h,w] for unbatched input)
  int stage = 3;
  int rate = 1;
};

// The tapped multi-scale feature maps: stage-3 taps at input/16 resolution
// followed by stage-4 taps at input/32.
struct FeaturePyramid {
  std::vector<PyramidMap> maps;
  int input_h = 0;
  int input_w = 0;
  int stage3_count = 0;
  int stage4_count = 0;
};

// Encoder: two conv stages, then two transformer stages whose blocks apply
// sparse self-attention with the plan's per-block rates. Stage resolutions
// are input/4, input/8, input/16, input/32.
class Encoder {
 public:
  static Encoder init(const ModelConfig& cfg, std::uint64_t seed);

  FeaturePyramid forward(const Tensor& image) const;  // [B,3,H,W] or [3,H,W]

  const ModelConfig& config() const { return config_; }
  const SparsityPlan& stage3_plan() const { return plan3_; }
  const SparsityPlan& stage4_plan() const { return plan4_; }

  const std::map<std::string, Tensor>& params() const { return params_; }
  std::map<std::string, Tensor>& params() { return params_; }

  static constexpr double kLayerNormEps = 1e-5;

 private:
  Tensor param(const std::string& name) const;
  Tensor conv_block(const Tensor& x, const std::string& prefix, int stride, bool act) const;
  Tensor transformer_block(const Tensor& tokens, const std::string& prefix, int rate,
                           int heads) const;

  ModelConfig config_;
  SparsityPlan plan3_, plan4_;
  std::map<std::string, Tensor> params_;
};

}  // namespace sparseloc
