#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sparseloc/backbone.hpp"
#include "sparseloc/lff.hpp"

namespace sparseloc {

// Encoder plus fusion head; the complete mask predictor.
struct Model {
  Encoder encoder;
  LffParams head;

  static Model init(const ModelConfig& cfg, std::uint64_t seed);

  // Raw mask logits at input resolution: [B,1,H,W] (or [1,H,W]).
  Tensor forward_logits(const Tensor& image) const;

  // Deterministically ordered (name, tensor) view over every parameter.
  std::vector<std::pair<std::string, Tensor>> named_params() const;
  void zero_grad();
};

// Cosine decay from lr_max at step 0 to exactly lr_min at the final step.
double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr_max, double lr_min);

struct AdamMoments {
  std::vector<double> m, v;
};

struct TrainState {
  Model model;
  std::map<std::string, AdamMoments> moments;
  std::int64_t step = 0;
  std::int64_t total_steps = 1;
  double lr_max = 1e-4;
  double lr_min = 1e-7;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  static TrainState init(Model model, std::int64_t total_steps, double lr_max = 1e-4,
                         double lr_min = 1e-7);
};

struct StepStats {
  std::int64_t step = 0;  // index of the step that just ran
  double lr = 0.0;
  double loss = 0.0;
};

// One optimizer step of BCE-with-logits against binary masks. Masks must hold
// only 0/1 values; a non-finite loss aborts with step/lr diagnostics.
StepStats train_step(TrainState& state, const Tensor& images, const Tensor& masks);

}  // namespace sparseloc
