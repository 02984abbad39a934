#pragma once

#include <vector>

#include "sparseloc/backbone.hpp"
#include "sparseloc/tensor.hpp"

namespace sparseloc {

// Learnable feature fusion head: stage-3 maps are channel-unified by 1x1
// projections, stage-4 maps upsampled to match; every map is scaled by its
// own per-channel gamma (initialized to 1e-6), summed, projected to one
// channel and upsampled to input resolution.
struct LffParams {
  std::vector<Tensor> proj;   // [Cf,C3,1,1] per stage-3 map, bias-free
  std::vector<Tensor> gamma;  // [Cf] per pyramid map
  Tensor head_w;              // [1,Cf,1,1]
  Tensor head_b;              // [1], initialized zero

  int fused_channels() const { return head_w.shape()[1]; }
  void validate(int stage3_maps, int stage4_maps) const;

  static LffParams init(int stage3_maps, int stage4_maps, int stage3_channels,
                        int fused_channels, std::uint64_t seed);

  static constexpr double kGammaInit = 1e-6;
};

// Projects stage-3 maps to the fused width and upsamples stage-4 maps to the
// stage-3 resolution; all returned maps share one shape.
std::vector<Tensor> unify_channels(const FeaturePyramid& pyramid, const LffParams& params);

// gamma-scale each map, sum, 1-channel projection, bilinear upsample to the
// pyramid's input resolution. Returns raw logits [B,1,H,W] (or [1,H,W]).
Tensor fuse(const std::vector<Tensor>& unified, const LffParams& params, int out_h, int out_w);

// Binary mask: 1 where sigmoid(logit) > threshold (strict). threshold must
// lie in (0,1).
Tensor predict_mask(const Tensor& logits, double threshold = 0.5);

}  // namespace sparseloc
