#include "sparseloc/lff.hpp"

#include <cmath>

namespace sparseloc {

void LffParams::validate(int stage3_maps, int stage4_maps) const {
  if (static_cast<int>(proj.size()) != stage3_maps) {
    throw ShapeError("lff: " + std::to_string(proj.size()) + " projections for " +
                     std::to_string(stage3_maps) + " stage-3 maps");
  }
  if (static_cast<int>(gamma.size()) != stage3_maps + stage4_maps) {
    throw ShapeError("lff: " + std::to_string(gamma.size()) + " gamma vectors for " +
                     std::to_string(stage3_maps + stage4_maps) + " pyramid maps");
  }
  const int cf = fused_channels();
  for (const Tensor& g : gamma) {
    if (g.rank() != 1 || g.shape()[0] != cf) {
      throw ShapeError("lff: gamma must be [" + std::to_string(cf) + "], got " +
                       shape_str(g.shape()));
    }
  }
  for (const Tensor& p : proj) {
    if (p.rank() != 4 || p.shape()[0] != cf || p.shape()[2] != 1 || p.shape()[3] != 1) {
      throw ShapeError("lff: projection must be [Cf,C3,1,1], got " + shape_str(p.shape()));
    }
  }
}

LffParams LffParams::init(int stage3_maps, int stage4_maps, int stage3_channels,
                          int fused_channels, std::uint64_t seed) {
  LffParams p;
  const double proj_std = std::sqrt(2.0 / static_cast<double>(stage3_channels + fused_channels));
  for (int i = 0; i < stage3_maps; ++i) {
    Rng rng = substream(seed, "init/lff.proj" + std::to_string(i));
    p.proj.push_back(Tensor::randn({fused_channels, stage3_channels, 1, 1}, rng, proj_std, true));
  }
  for (int i = 0; i < stage3_maps + stage4_maps; ++i) {
    p.gamma.push_back(Tensor::full({fused_channels}, kGammaInit, true));
  }
  Rng rng = substream(seed, "init/lff.head");
  p.head_w = Tensor::randn({1, fused_channels, 1, 1}, rng,
                           std::sqrt(2.0 / static_cast<double>(fused_channels + 1)), true);
  p.head_b = Tensor::zeros({1}, true);
  p.validate(stage3_maps, stage4_maps);
  return p;
}

namespace {

Tensor as_batched(const Tensor& t) {
  if (t.rank() == 4) return t;
  return reshape(t, {1, t.shape()[0], t.shape()[1], t.shape()[2]});
}

}  // namespace

std::vector<Tensor> unify_channels(const FeaturePyramid& pyramid, const LffParams& params) {
  params.validate(pyramid.stage3_count, pyramid.stage4_count);
  if (pyramid.maps.empty()) throw ShapeError("unify_channels: empty pyramid");
  const int cf = params.fused_channels();

  // Target resolution is the stage-3 tap resolution (input/16).
  const Tensor first = as_batched(pyramid.maps.front().map);
  const int th = first.shape()[2];
  const int tw = first.shape()[3];

  std::vector<Tensor> unified;
  int proj_idx = 0;
  for (const PyramidMap& m : pyramid.maps) {
    const Tensor map = as_batched(m.map);
    if (m.stage == 3) {
      unified.push_back(conv2d(map, params.proj[proj_idx++], 1, 0));
    } else {
      if (map.shape()[1] != cf) {
        throw ShapeError("unify_channels: stage-4 map has " + std::to_string(map.shape()[1]) +
                         " channels but fused width is " + std::to_string(cf) +
                         " (stage-4 maps are not projected)");
      }
      unified.push_back(bilinear_upsample(map, th, tw));
    }
  }
  return unified;
}

Tensor fuse(const std::vector<Tensor>& unified, const LffParams& params, int out_h, int out_w) {
  if (unified.empty()) throw ShapeError("fuse: no maps");
  if (unified.size() != params.gamma.size()) {
    throw ShapeError("fuse: " + std::to_string(unified.size()) + " maps vs " +
                     std::to_string(params.gamma.size()) + " gamma vectors");
  }
  const Shape& s = unified.front().shape();
  const int cf = params.fused_channels();
  Tensor acc;
  for (std::size_t i = 0; i < unified.size(); ++i) {
    if (unified[i].shape() != s) {
      throw ShapeError("fuse: map " + std::to_string(i) + " shape " +
                       shape_str(unified[i].shape()) + " differs from " + shape_str(s));
    }
    const Tensor scaled = mul(unified[i], reshape(params.gamma[i], {cf, 1, 1}));
    acc = i == 0 ? scaled : add(acc, scaled);
  }
  Tensor logits = conv2d(acc, params.head_w, 1, 0);
  logits = add(logits, reshape(params.head_b, {1, 1, 1}));
  return bilinear_upsample(logits, out_h, out_w);
}

Tensor predict_mask(const Tensor& logits, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw ConfigError("predict_mask: threshold must lie in (0,1), got " + std::to_string(threshold));
  }
  std::vector<double> mask(static_cast<std::size_t>(logits.size()));
  const double* lp = logits.data().data();
  for (std::int64_t i = 0; i < logits.size(); ++i) {
    const double v = lp[i];
    const double p = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    mask[i] = p > threshold ? 1.0 : 0.0;
  }
  return Tensor::from_data(logits.shape(), std::move(mask));
}

}  // namespace sparseloc
