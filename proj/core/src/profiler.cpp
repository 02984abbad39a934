#include "sparseloc/profiler.hpp"

#include <cstdio>
#include <ostream>

namespace sparseloc {

namespace {

// Per-element costs of non-matmul ops, as documented in the CSV header.
constexpr std::uint64_t kLayerNormCost = 8;
constexpr std::uint64_t kGeluCost = 8;
constexpr std::uint64_t kSoftmaxCost = 5;
constexpr std::uint64_t kBilinearCost = 8;

using u64 = std::uint64_t;

}  // namespace

u64 CostReport::total_params() const {
  u64 total = 0;
  for (const LayerCost& l : layers) total += l.params;
  return total;
}

u64 CostReport::total_flops() const {
  u64 total = 0;
  for (const LayerCost& l : layers) total += l.flops;
  return total;
}

u64 attention_flops(std::int64_t tokens, std::int64_t channels, int heads, int rate) {
  SparsityRate checked(rate);
  if (tokens <= 0 || channels <= 0) throw ConfigError("attention_flops: extents must be positive");
  if (heads < 1 || channels % heads != 0) {
    throw ConfigError("attention_flops: heads must divide channels");
  }
  const std::int64_t groups = static_cast<std::int64_t>(rate) * rate;
  if (tokens % groups != 0) {
    throw ConfigError("attention_flops: s^2 = " + std::to_string(groups) +
                      " must divide token count " + std::to_string(tokens));
  }
  const u64 n = static_cast<u64>(tokens);
  const u64 c = static_cast<u64>(channels);
  const u64 projections = 8 * n * c * c;
  const u64 quadratic = 4 * n * n * c / static_cast<u64>(groups);
  return projections + quadratic;
}

namespace {

struct CostBuilder {
  CostReport report;

  void conv(const std::string& name, std::int64_t in_c, std::int64_t out_c, std::int64_t k,
            std::int64_t out_hw) {
    report.layers.push_back({name, static_cast<u64>(out_c * in_c * k * k),
                             static_cast<u64>(2 * k * k * in_c * out_c * out_hw)});
  }
  void norm(const std::string& name, std::int64_t c, std::int64_t positions) {
    report.layers.push_back({name, static_cast<u64>(2 * c), kLayerNormCost * static_cast<u64>(c * positions)});
  }
  void act(const std::string& name, std::int64_t elements) {
    report.layers.push_back({name, 0, kGeluCost * static_cast<u64>(elements)});
  }
};

}  // namespace

CostReport model_cost_with_plans(const ModelConfig& cfg, int input_size, const SparsityPlan& plan3,
                                 const SparsityPlan& plan4) {
  if (input_size <= 0 || input_size % 32 != 0) {
    throw ConfigError("model_cost: input size must be a positive multiple of 32");
  }
  const auto [c1, c2, c3, c4] = cfg.channels;
  const std::int64_t hw2 = static_cast<std::int64_t>(input_size / 2) * (input_size / 2);
  const std::int64_t hw4 = hw2 / 4, hw8 = hw4 / 4, hw16 = hw8 / 4, hw32 = hw16 / 4;

  CostBuilder b;
  b.conv("stem.conv1", 3, c1, 3, hw2);
  b.conv("stem.conv2", c1, c1, 3, hw4);
  b.norm("stem.norm", c1, hw4);
  for (int i = 0; i < cfg.depths[0]; ++i) {
    const std::string p = "stage1.block" + std::to_string(i);
    b.conv(p + ".conv", c1, c1, 3, hw4);
    b.norm(p + ".norm", c1, hw4);
    b.act(p + ".gelu", c1 * hw4);
  }
  b.conv("stage2.embed.conv", c1, c2, 3, hw8);
  b.norm("stage2.embed.norm", c2, hw8);
  for (int i = 0; i < cfg.depths[1]; ++i) {
    const std::string p = "stage2.block" + std::to_string(i);
    b.conv(p + ".conv", c2, c2, 3, hw8);
    b.norm(p + ".norm", c2, hw8);
    b.act(p + ".gelu", c2 * hw8);
  }

  const auto transformer_stage = [&](const std::string& stage, const SparsityPlan& plan,
                                     std::int64_t c, std::int64_t in_c, std::int64_t tokens,
                                     int heads) {
    b.conv(stage + ".embed.conv", in_c, c, 3, tokens);
    b.norm(stage + ".embed.norm", c, tokens);
    for (std::size_t i = 0; i < plan.rates.size(); ++i) {
      const std::string p = stage + ".block" + std::to_string(i);
      const int s = plan.rates[i];
      const u64 score_elements =
          static_cast<u64>(heads) * static_cast<u64>(tokens) * static_cast<u64>(tokens) /
          static_cast<u64>(s) / static_cast<u64>(s);
      u64 flops = attention_flops(tokens, c, heads, s);
      flops += kSoftmaxCost * score_elements;  // softmax over attention scores
      flops += score_elements;                 // 1/sqrt(d) scaling
      b.report.layers.push_back(
          {p + ".attn", static_cast<u64>(4 * c * c), flops});
      b.norm(p + ".ln1", c, tokens);
      b.norm(p + ".ln2", c, tokens);
      const u64 mlp_flops = static_cast<u64>(16 * tokens * c * c)  // two projections
                            + kGeluCost * static_cast<u64>(4 * c * tokens)
                            + static_cast<u64>(7 * c * tokens);  // biases + two residual adds
      b.report.layers.push_back(
          {p + ".mlp", static_cast<u64>(8 * c * c + 5 * c), mlp_flops});
    }
  };
  transformer_stage("stage3", plan3, c3, c2, hw16, c3 / cfg.head_dim);
  transformer_stage("stage4", plan4, c4, c3, hw32, c4 / cfg.head_dim);

  // Fusion head: stage-3 taps projected, stage-4 taps upsampled, gamma-scale,
  // sum, 1-channel head, full-resolution upsample.
  const std::int64_t cf = cfg.unified_channels;
  const std::int64_t maps3 = static_cast<std::int64_t>(plan3.tap_indices.size());
  const std::int64_t maps4 = static_cast<std::int64_t>(plan4.tap_indices.size());
  for (std::int64_t i = 0; i < maps3; ++i) {
    b.conv("lff.proj" + std::to_string(i), c3, cf, 1, hw16);
  }
  for (std::int64_t i = 0; i < maps4; ++i) {
    b.report.layers.push_back({"lff.upsample" + std::to_string(maps3 + i), 0,
                               kBilinearCost * static_cast<u64>(cf * hw16)});
  }
  const std::int64_t maps = maps3 + maps4;
  b.report.layers.push_back({"lff.fuse", static_cast<u64>(maps * cf),
                             static_cast<u64>((2 * maps - 1) * cf * hw16)});
  b.report.layers.push_back({"lff.head", static_cast<u64>(cf + 1),
                             static_cast<u64>(2 * cf * hw16 + hw16)});
  b.report.layers.push_back({"lff.mask_upsample", 0,
                             kBilinearCost * static_cast<u64>(input_size) * input_size});
  return b.report;
}

CostReport model_cost(const ModelConfig& cfg, int input_size) {
  ModelConfig sized = cfg;
  sized.input_size = input_size;
  sized.validate();
  return model_cost_with_plans(cfg, input_size, sized.stage3_plan(), sized.stage4_plan());
}

AbComparison ab_compare(const ModelConfig& cfg, int input_size) {
  ModelConfig sized = cfg;
  sized.input_size = input_size;
  sized.validate();

  AbComparison ab;
  const SparsityPlan plan3 = sized.stage3_plan();
  const SparsityPlan plan4 = sized.stage4_plan();
  ab.sparse = model_cost_with_plans(cfg, input_size, plan3, plan4);

  // Same architecture and tap structure with every rate forced to 1.
  SparsityPlan g3 = plan3, g4 = plan4;
  for (int& r : g3.rates) r = 1;
  for (int& r : g4.rates) r = 1;
  ab.global = model_cost_with_plans(cfg, input_size, g3, g4);
  ab.flops_ratio = static_cast<double>(ab.sparse.total_flops()) /
                   static_cast<double>(ab.global.total_flops());
  return ab;
}

namespace {

void write_convention_header(std::ostream& out) {
  out << "# FLOPs convention: multiply-add = 2; layer_norm 8/element; gelu 8/element;\n"
         "# softmax 5 per attention score element (plus 1 for the 1/sqrt(d) scale);\n"
         "# bilinear 8 per output element; elementwise add/mul 1.\n"
         "# attention row = 8*N*C^2 projections + 4*N^2*C/S^2 grouped score terms.\n";
}

}  // namespace

void write_cost_csv(std::ostream& out, const CostReport& report) {
  write_convention_header(out);
  out << "layer,params,flops\n";
  for (const LayerCost& l : report.layers) {
    out << l.name << "," << l.params << "," << l.flops << "\n";
  }
  out << "TOTAL," << report.total_params() << "," << report.total_flops() << "\n";
}

void write_ab_csv(std::ostream& out, const AbComparison& ab) {
  write_convention_header(out);
  out << "variant,params,flops\n";
  out << "sparse," << ab.sparse.total_params() << "," << ab.sparse.total_flops() << "\n";
  out << "global," << ab.global.total_params() << "," << ab.global.total_flops() << "\n";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", ab.flops_ratio);
  out << "ratio,," << buf << "\n";
}

}  // namespace sparseloc
