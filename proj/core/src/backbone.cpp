#include "sparseloc/backbone.hpp"

#include <cmath>

namespace sparseloc {

int sparsity_schedule(int depth, int max_exponent, int i) {
  if (depth < 1) throw ConfigError("sparsity_schedule: depth must be >= 1");
  if (max_exponent < 0) throw ConfigError("sparsity_schedule: max_exponent must be >= 0");
  if (i < 0 || i >= depth) {
    throw ConfigError("sparsity_schedule: block index " + std::to_string(i) +
                      " out of range for depth " + std::to_string(depth));
  }
  const int exponent = max_exponent - (i * (max_exponent + 1)) / depth;
  return 1 << exponent;
}

SparsityPlan build_plan(const StageConfig& cfg) {
  if (cfg.depth < cfg.max_exponent + 1) {
    throw ConfigError("build_plan: depth " + std::to_string(cfg.depth) +
                      " too small for max_exponent " + std::to_string(cfg.max_exponent) +
                      " (every rate must appear at least once)");
  }
  SparsityPlan plan;
  plan.rates.reserve(cfg.depth);
  for (int i = 0; i < cfg.depth; ++i) plan.rates.push_back(sparsity_schedule(cfg.depth, cfg.max_exponent, i));
  for (int i = 0; i < cfg.depth; ++i) {
    if (i + 1 == cfg.depth || plan.rates[i + 1] != plan.rates[i]) plan.tap_indices.push_back(i);
  }
  return plan;
}

SparsityPlan uniform_plan(int depth, int rate) {
  SparsityRate check(rate);
  SparsityPlan plan;
  plan.rates.assign(static_cast<std::size_t>(depth), check.value());
  plan.tap_indices.push_back(depth - 1);
  return plan;
}

SparsityPlan ModelConfig::stage3_plan() const {
  if (uniform_rate > 0) return uniform_plan(depths[2], uniform_rate);
  return build_plan({depths[2], channels[2], stage3_exponent, 16});
}

SparsityPlan ModelConfig::stage4_plan() const {
  if (uniform_rate > 0) return uniform_plan(depths[3], uniform_rate);
  return build_plan({depths[3], channels[3], stage4_exponent, 32});
}

void ModelConfig::validate() const {
  if (input_size <= 0 || input_size % 32 != 0) {
    throw ConfigError("config: input_size must be a positive multiple of 32, got " +
                      std::to_string(input_size));
  }
  for (const int c : channels) {
    if (c <= 0) throw ConfigError("config: channels must be positive");
  }
  for (const int d : depths) {
    if (d <= 0) throw ConfigError("config: depths must be positive");
  }
  if (head_dim <= 0 || channels[2] % head_dim != 0 || channels[3] % head_dim != 0) {
    throw ConfigError("config: head_dim " + std::to_string(head_dim) +
                      " must divide stage-3 channels " + std::to_string(channels[2]) +
                      " and stage-4 channels " + std::to_string(channels[3]));
  }
  if (unified_channels != channels[3]) {
    throw ConfigError("config: unified_channels (" + std::to_string(unified_channels) +
                      ") must equal stage-4 channels (" + std::to_string(channels[3]) +
                      "): stage-4 maps are fused unprojected");
  }
  // Every planned rate must divide its stage grid; rates are powers of two so
  // the maximum rate suffices.
  const auto check_grid = [&](const SparsityPlan& plan, int grid, const char* stage) {
    for (const int r : plan.rates) {
      if (grid % r != 0) {
        throw ConfigError(std::string("config: sparsity rate ") + std::to_string(r) + " of " +
                          stage + " does not divide its token grid " + std::to_string(grid) +
                          "x" + std::to_string(grid) + " (input_size " +
                          std::to_string(input_size) + ")");
      }
    }
  };
  check_grid(stage3_plan(), stage3_grid(), "stage 3");
  check_grid(stage4_plan(), stage4_grid(), "stage 4");
}

namespace {

double glorot_stddev(std::int64_t fan_in, std::int64_t fan_out) {
  return std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
}

}  // namespace

Encoder Encoder::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Encoder enc;
  enc.config_ = cfg;
  enc.plan3_ = cfg.stage3_plan();
  enc.plan4_ = cfg.stage4_plan();

  const auto add_conv = [&](const std::string& name, int out_c, int in_c, int k) {
    Rng rng = substream(seed, "init/" + name);
    const double stddev = glorot_stddev(static_cast<std::int64_t>(in_c) * k * k,
                                        static_cast<std::int64_t>(out_c) * k * k);
    enc.params_[name] = Tensor::randn({out_c, in_c, k, k}, rng, stddev, true);
  };
  const auto add_norm = [&](const std::string& prefix, int c) {
    enc.params_[prefix + ".g"] = Tensor::ones({c}, true);
    enc.params_[prefix + ".b"] = Tensor::zeros({c}, true);
  };
  const auto add_linear = [&](const std::string& name, int in_c, int out_c, bool bias) {
    Rng rng = substream(seed, "init/" + name);
    enc.params_[name + ".w"] = Tensor::randn({in_c, out_c}, rng, glorot_stddev(in_c, out_c), true);
    if (bias) enc.params_[name + ".b"] = Tensor::zeros({out_c}, true);
  };

  const auto [c1, c2, c3, c4] = cfg.channels;

  add_conv("stem.conv1.w", c1, 3, 3);
  add_conv("stem.conv2.w", c1, c1, 3);
  add_norm("stem.norm", c1);
  for (int i = 0; i < cfg.depths[0]; ++i) {
    const std::string p = "stage1.block" + std::to_string(i);
    add_conv(p + ".conv.w", c1, c1, 3);
    add_norm(p + ".norm", c1);
  }
  add_conv("stage2.embed.conv.w", c2, c1, 3);
  add_norm("stage2.embed.norm", c2);
  for (int i = 0; i < cfg.depths[1]; ++i) {
    const std::string p = "stage2.block" + std::to_string(i);
    add_conv(p + ".conv.w", c2, c2, 3);
    add_norm(p + ".norm", c2);
  }

  const auto add_transformer_stage = [&](const std::string& stage, int depth, int c) {
    add_conv(stage + ".embed.conv.w", c, stage == "stage3" ? c2 : c3, 3);
    add_norm(stage + ".embed.norm", c);
    for (int i = 0; i < depth; ++i) {
      const std::string p = stage + ".block" + std::to_string(i);
      add_norm(p + ".ln1", c);
      for (const char* w : {"wq", "wk", "wv", "wo"}) {
        Rng rng = substream(seed, "init/" + p + ".attn." + w);
        enc.params_[p + ".attn." + w] =
            Tensor::randn({c, c}, rng, 1.0 / std::sqrt(static_cast<double>(c)), true);
      }
      add_norm(p + ".ln2", c);
      add_linear(p + ".mlp.fc1", c, 4 * c, true);
      add_linear(p + ".mlp.fc2", 4 * c, c, true);
    }
  };
  add_transformer_stage("stage3", cfg.depths[2], c3);
  add_transformer_stage("stage4", cfg.depths[3], c4);

  return enc;
}

Tensor Encoder::param(const std::string& name) const {
  const auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("encoder: missing parameter " + name);
  return it->second;
}

namespace {

// LayerNorm over the channel axis of a [B,C,H,W] (or [C,H,W]) feature map.
Tensor channel_norm(const Tensor& x, const Tensor& g, const Tensor& b, double eps) {
  if (x.rank() == 4) {
    const Tensor t = permute(x, {0, 2, 3, 1});
    return permute(layer_norm(t, g, b, eps), {0, 3, 1, 2});
  }
  const Tensor t = permute(x, {1, 2, 0});
  return permute(layer_norm(t, g, b, eps), {2, 0, 1});
}

}  // namespace

Tensor Encoder::conv_block(const Tensor& x, const std::string& prefix, int stride, bool act) const {
  Tensor y = conv2d(x, param(prefix + ".conv.w"), stride, 1);
  y = channel_norm(y, param(prefix + ".norm.g"), param(prefix + ".norm.b"), kLayerNormEps);
  return act ? gelu(y) : y;
}

Tensor Encoder::transformer_block(const Tensor& tokens, const std::string& prefix, int rate,
                                  int heads) const {
  AttentionParams attn;
  attn.wq = param(prefix + ".attn.wq");
  attn.wk = param(prefix + ".attn.wk");
  attn.wv = param(prefix + ".attn.wv");
  attn.wo = param(prefix + ".attn.wo");
  attn.heads = heads;

  // Pre-norm residual blocks: x + Attn(LN(x)), then x + MLP(LN(x)).
  const Tensor normed1 =
      layer_norm(tokens, param(prefix + ".ln1.g"), param(prefix + ".ln1.b"), kLayerNormEps);
  const Tensor attended = sparse_attention_batched(normed1, rate, attn);
  const Tensor mid = add(tokens, attended);

  const Tensor normed2 =
      layer_norm(mid, param(prefix + ".ln2.g"), param(prefix + ".ln2.b"), kLayerNormEps);
  const Shape& s = mid.shape();
  const int b = s[0], h = s[1], w = s[2], c = s[3];
  Tensor m = reshape(normed2, {b, h * w, c});
  m = add(matmul(m, param(prefix + ".mlp.fc1.w")), param(prefix + ".mlp.fc1.b"));
  m = gelu(m);
  m = add(matmul(m, param(prefix + ".mlp.fc2.w")), param(prefix + ".mlp.fc2.b"));
  return add(mid, reshape(m, {b, h, w, c}));
}

FeaturePyramid Encoder::forward(const Tensor& image) const {
  const bool squeeze = image.rank() == 3;
  if (image.rank() != 3 && image.rank() != 4) {
    throw ShapeError("encoder: image must be [B,3,H,W] or [3,H,W], got " + shape_str(image.shape()));
  }
  Tensor x = image;
  if (squeeze) {
    x = reshape(x, {1, image.shape()[0], image.shape()[1], image.shape()[2]});
  }
  const Shape& s = x.shape();
  if (s[1] != 3) throw ShapeError("encoder: expected 3 input channels, got " + shape_str(s));
  if (s[2] % 32 != 0 || s[3] % 32 != 0) {
    throw ConfigError("encoder: spatial extents must be multiples of 32, got " + shape_str(s));
  }
  const int height = s[2], width = s[3];

  // Stem: two stride-2 convs (x4 total), one norm at the merged resolution.
  x = conv2d(x, param("stem.conv1.w"), 2, 1);
  x = conv2d(x, param("stem.conv2.w"), 2, 1);
  x = channel_norm(x, param("stem.norm.g"), param("stem.norm.b"), kLayerNormEps);
  for (int i = 0; i < config_.depths[0]; ++i) {
    x = conv_block(x, "stage1.block" + std::to_string(i), 1, true);
  }

  x = conv_block(x, "stage2.embed", 2, false);
  for (int i = 0; i < config_.depths[1]; ++i) {
    x = conv_block(x, "stage2.block" + std::to_string(i), 1, true);
  }

  FeaturePyramid pyr;
  pyr.input_h = height;
  pyr.input_w = width;

  const auto run_stage = [&](const char* stage, const SparsityPlan& plan, int heads, int stage_id,
                             Tensor feat) {
    feat = conv_block(feat, std::string(stage) + ".embed", 2, false);
    Tensor tokens = permute(feat, {0, 2, 3, 1});  // [B,h,w,C]
    std::size_t next_tap = 0;
    for (int i = 0; i < static_cast<int>(plan.rates.size()); ++i) {
      tokens = transformer_block(tokens, std::string(stage) + ".block" + std::to_string(i),
                                 plan.rates[i], heads);
      if (next_tap < plan.tap_indices.size() && plan.tap_indices[next_tap] == i) {
        pyr.maps.push_back({permute(tokens, {0, 3, 1, 2}), stage_id, plan.rates[i]});
        ++next_tap;
      }
    }
    return permute(tokens, {0, 3, 1, 2});
  };

  x = run_stage("stage3", plan3_, config_.channels[2] / config_.head_dim, 3, x);
  pyr.stage3_count = static_cast<int>(pyr.maps.size());
  run_stage("stage4", plan4_, config_.channels[3] / config_.head_dim, 4, x);
  pyr.stage4_count = static_cast<int>(pyr.maps.size()) - pyr.stage3_count;

  if (squeeze) {
    for (PyramidMap& m : pyr.maps) {
      const Shape& ms = m.map.shape();
      m.map = reshape(m.map, {ms[1], ms[2], ms[3]});
    }
  }
  return pyr;
}

}  // namespace sparseloc
