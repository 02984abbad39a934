#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "sparseloc/backbone.hpp"

namespace sparseloc {

struct LayerCost {
  std::string name;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
};

struct CostReport {
  std::vector<LayerCost> layers;
  std::uint64_t total_params() const;
  std::uint64_t total_flops() const;
};

// FLOPs of one sparse attention layer over N tokens at rate s:
//   projections 8*N*C^2, score + weighted-sum terms 4*N^2*C/s^2
// (multiply-add counted as 2; matmul contractions only, softmax accounted
// separately by model_cost). s^2 must divide N.
std::uint64_t attention_flops(std::int64_t tokens, std::int64_t channels, int heads, int rate);

// Analytic per-layer cost of the full model at the given input size; no
// activations are allocated, so full-scale configs are cheap.
CostReport model_cost(const ModelConfig& cfg, int input_size);

struct AbComparison {
  CostReport sparse;
  CostReport global;  // identical architecture, every attention rate forced to 1
  double flops_ratio = 1.0;
};

AbComparison ab_compare(const ModelConfig& cfg, int input_size);

// CSV: one `layer,params,flops` row per layer plus a TOTAL row; the FLOPs
// convention is documented in comment lines at the top.
void write_cost_csv(std::ostream& out, const CostReport& report);
void write_ab_csv(std::ostream& out, const AbComparison& ab);

}  // namespace sparseloc
