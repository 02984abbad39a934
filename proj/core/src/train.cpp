#include "sparseloc/train.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace sparseloc {

Model Model::init(const ModelConfig& cfg, std::uint64_t seed) {
  Model m;
  m.encoder = Encoder::init(cfg, seed);
  m.head = LffParams::init(static_cast<int>(m.encoder.stage3_plan().tap_indices.size()),
                           static_cast<int>(m.encoder.stage4_plan().tap_indices.size()),
                           cfg.channels[2], cfg.unified_channels, seed);
  return m;
}

Tensor Model::forward_logits(const Tensor& image) const {
  const FeaturePyramid pyramid = encoder.forward(image);
  const std::vector<Tensor> unified = unify_channels(pyramid, head);
  return fuse(unified, head, pyramid.input_h, pyramid.input_w);
}

std::vector<std::pair<std::string, Tensor>> Model::named_params() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& [name, t] : encoder.params()) out.emplace_back(name, t);
  for (std::size_t i = 0; i < head.proj.size(); ++i) {
    out.emplace_back("lff.proj" + std::to_string(i) + ".w", head.proj[i]);
  }
  for (std::size_t i = 0; i < head.gamma.size(); ++i) {
    out.emplace_back("lff.gamma" + std::to_string(i), head.gamma[i]);
  }
  out.emplace_back("lff.head.w", head.head_w);
  out.emplace_back("lff.head.b", head.head_b);
  return out;
}

void Model::zero_grad() {
  for (auto& [name, t] : named_params()) {
    Tensor copy = t;
    copy.zero_grad();
  }
}

double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr_max, double lr_min) {
  if (total_steps < 1) throw ConfigError("cosine_lr: total_steps must be >= 1");
  if (total_steps == 1) return lr_max;
  const std::int64_t s = std::min(std::max<std::int64_t>(step, 0), total_steps - 1);
  const double phase = std::numbers::pi * static_cast<double>(s) / static_cast<double>(total_steps - 1);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(phase));
}

TrainState TrainState::init(Model model, std::int64_t total_steps, double lr_max, double lr_min) {
  TrainState st;
  st.model = std::move(model);
  st.total_steps = total_steps;
  st.lr_max = lr_max;
  st.lr_min = lr_min;
  for (const auto& [name, t] : st.model.named_params()) {
    AdamMoments& mom = st.moments[name];
    mom.m.assign(static_cast<std::size_t>(t.size()), 0.0);
    mom.v.assign(static_cast<std::size_t>(t.size()), 0.0);
  }
  return st;
}

StepStats train_step(TrainState& state, const Tensor& images, const Tensor& masks) {
  if (images.size() == 0 || masks.size() == 0) throw ConfigError("train_step: empty batch");
  for (const double v : masks.data()) {
    if (v != 0.0 && v != 1.0) {
      throw ConfigError("train_step: masks must be binary 0/1, found " + std::to_string(v));
    }
  }

  const double lr = cosine_lr(state.step, state.total_steps, state.lr_max, state.lr_min);
  StepStats stats;
  stats.step = state.step;
  stats.lr = lr;

  try {
    const Tensor logits = state.model.forward_logits(images);
    const Tensor loss = bce_with_logits(logits, masks);
    stats.loss = loss.item();
    if (!std::isfinite(stats.loss)) {
      throw NumericError("loss is not finite");
    }
    loss.backward();
  } catch (const NumericError& e) {
    std::ostringstream os;
    os << "train_step aborted: step=" << state.step << " lr=" << lr << " loss="
       << (std::isfinite(stats.loss) ? std::to_string(stats.loss) : std::string("non-finite"))
       << " (" << e.what() << ")";
    throw NumericError(os.str());
  }

  const std::int64_t t = state.step + 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(t));
  for (auto& [name, tensor] : state.model.named_params()) {
    AdamMoments& mom = state.moments.at(name);
    Tensor param = tensor;
    auto data = param.mutable_data();
    const bool has_grad = param.has_grad();
    const std::span<const double> grad = has_grad ? param.grad() : std::span<const double>{};
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = has_grad ? grad[i] : 0.0;
      mom.m[i] = state.beta1 * mom.m[i] + (1.0 - state.beta1) * g;
      mom.v[i] = state.beta2 * mom.v[i] + (1.0 - state.beta2) * g * g;
      data[i] -= lr * (mom.m[i] / bc1) / (std::sqrt(mom.v[i] / bc2) + state.adam_eps);
    }
    param.zero_grad();
  }

  ++state.step;
  return stats;
}

}  // namespace sparseloc
