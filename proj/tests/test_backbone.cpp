#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "sparseloc/backbone.hpp"
#include "sparseloc/checkpoint.hpp"
#include "sparseloc/rng.hpp"
#include "sparseloc/train.hpp"

using namespace sparseloc;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.input_size = 64;
  cfg.channels = {8, 12, 16, 16};
  cfg.depths = {1, 1, 3, 2};
  cfg.stage3_exponent = 2;
  cfg.stage4_exponent = 1;
  cfg.head_dim = 8;
  cfg.unified_channels = 16;
  return cfg;
}

Tensor random_image(int b, int size, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> data(static_cast<std::size_t>(b) * 3 * size * size);
  for (double& v : data) v = rng.uniform(0.0, 1.0);
  return Tensor::from_data({b, 3, size, size}, std::move(data));
}

Tensor random_mask(int b, int size, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> data(static_cast<std::size_t>(b) * size * size);
  for (double& v : data) v = rng.uniform() < 0.3 ? 1.0 : 0.0;
  return Tensor::from_data({b, 1, size, size}, std::move(data));
}

}  // namespace

TEST_CASE("sparsity schedule reproduces the stage-3 and stage-4 laws") {
  CHECK(sparsity_schedule(20, 3, 0) == 8);
  CHECK(sparsity_schedule(20, 3, 19) == 1);
  CHECK(sparsity_schedule(7, 1, 3) == 2);
  CHECK(sparsity_schedule(7, 1, 4) == 1);
  CHECK_THROWS_AS(sparsity_schedule(20, 3, 20), ConfigError);
  CHECK_THROWS_AS(sparsity_schedule(20, 3, -1), ConfigError);
}

TEST_CASE("stage-3 plan: five blocks per rate, taps at 4/9/14/19") {
  const SparsityPlan plan = build_plan({20, 320, 3, 16});
  const std::vector<int> expect{8, 8, 8, 8, 8, 4, 4, 4, 4, 4, 2, 2, 2, 2, 2, 1, 1, 1, 1, 1};
  CHECK(plan.rates == expect);
  CHECK(plan.tap_indices == std::vector<int>{4, 9, 14, 19});
}

TEST_CASE("stage-4 plan: rates 2,2,2,2,1,1,1 with taps at 3 and 6") {
  const SparsityPlan plan = build_plan({7, 512, 1, 32});
  CHECK(plan.rates == std::vector<int>{2, 2, 2, 2, 1, 1, 1});
  CHECK(plan.tap_indices == std::vector<int>{3, 6});
}

TEST_CASE("uniform ablation plan: single rate, single tap") {
  const SparsityPlan plan = uniform_plan(20, 4);
  CHECK(plan.rates == std::vector<int>(20, 4));
  CHECK(plan.tap_indices == std::vector<int>{19});
}

TEST_CASE("plan invariants: non-increasing powers of two ending at 1") {
  for (const auto& [depth, exponent] : std::vector<std::pair<int, int>>{{20, 3}, {7, 1}, {8, 3}, {4, 1}, {5, 2}}) {
    const SparsityPlan plan = build_plan({depth, 64, exponent, 16});
    CHECK(plan.rates.front() == (1 << exponent));
    CHECK(plan.rates.back() == 1);
    for (std::size_t i = 0; i + 1 < plan.rates.size(); ++i) {
      CHECK(plan.rates[i] >= plan.rates[i + 1]);
      CHECK((plan.rates[i] & (plan.rates[i] - 1)) == 0);
    }
    // Tap count equals number of distinct rates.
    std::vector<int> distinct;
    for (const int r : plan.rates) {
      if (distinct.empty() || distinct.back() != r) distinct.push_back(r);
    }
    CHECK(plan.tap_indices.size() == distinct.size());
  }
}

TEST_CASE("plan rejects depth smaller than exponent span") {
  CHECK_THROWS_AS(build_plan({3, 64, 3, 16}), ConfigError);
}

TEST_CASE("config validation catches indivisible grids and channel mismatches") {
  ModelConfig cfg = tiny_config();
  cfg.input_size = 100;  // not a multiple of 32
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  cfg = tiny_config();
  cfg.stage3_exponent = 3;  // rate 8 cannot divide the 4x4 stage-3 grid at 64
  cfg.depths[2] = 4;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  cfg = tiny_config();
  cfg.unified_channels = 32;  // != stage-4 channels
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  cfg = tiny_config();
  cfg.head_dim = 7;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  CHECK_NOTHROW(tiny_config().validate());
}

TEST_CASE("encoder forward produces the planned pyramid shapes") {
  const ModelConfig cfg = tiny_config();
  const Encoder enc = Encoder::init(cfg, 7);
  NoGradGuard no_grad;
  const FeaturePyramid pyr = enc.forward(random_image(2, 64, 100));

  REQUIRE(pyr.stage3_count == 3);  // rates 4,2,1
  REQUIRE(pyr.stage4_count == 2);  // rates 2,1
  for (int i = 0; i < pyr.stage3_count; ++i) {
    CHECK(pyr.maps[i].map.shape() == Shape{2, 16, 4, 4});
    CHECK(pyr.maps[i].stage == 3);
  }
  for (int i = pyr.stage3_count; i < 5; ++i) {
    CHECK(pyr.maps[i].map.shape() == Shape{2, 16, 2, 2});
    CHECK(pyr.maps[i].stage == 4);
  }
  CHECK(pyr.maps[0].rate == 4);
  CHECK(pyr.maps[2].rate == 1);
  CHECK(pyr.maps[3].rate == 2);
  CHECK(pyr.maps[4].rate == 1);
}

TEST_CASE("desk config taps: F1..F4 at 16x16, F5..F6 at 8x8") {
  const ModelConfig cfg;  // desk defaults
  cfg.validate();
  const Encoder enc = Encoder::init(cfg, 1);
  NoGradGuard no_grad;
  const FeaturePyramid pyr = enc.forward(random_image(1, 256, 101));
  REQUIRE(pyr.maps.size() == 6);
  REQUIRE(pyr.stage3_count == 4);
  for (int i = 0; i < 4; ++i) CHECK(pyr.maps[i].map.shape() == Shape{1, 96, 16, 16});
  for (int i = 4; i < 6; ++i) CHECK(pyr.maps[i].map.shape() == Shape{1, 128, 8, 8});
}

TEST_CASE("forward is deterministic") {
  const Encoder enc = Encoder::init(tiny_config(), 11);
  const Tensor img = random_image(1, 64, 102);
  NoGradGuard no_grad;
  const FeaturePyramid a = enc.forward(img);
  const FeaturePyramid b = enc.forward(img);
  for (std::size_t m = 0; m < a.maps.size(); ++m) {
    for (std::int64_t i = 0; i < a.maps[m].map.size(); ++i) {
      CHECK(a.maps[m].map.data()[i] == b.maps[m].map.data()[i]);
    }
  }
}

TEST_CASE("zeroed block projections leave only the residual path") {
  const ModelConfig cfg = tiny_config();
  Encoder enc = Encoder::init(cfg, 13);
  // Zero every attention output projection and MLP second layer; each
  // transformer block then reduces to the identity.
  for (auto& [name, t] : enc.params()) {
    if (name.find(".attn.wo") != std::string::npos || name.find(".mlp.fc2.w") != std::string::npos) {
      Tensor p = t;
      for (double& v : p.mutable_data()) v = 0.0;
    }
  }
  NoGradGuard no_grad;
  const FeaturePyramid pyr = enc.forward(random_image(1, 64, 103));
  // All stage-3 taps collapse to the stage-3 embed output.
  for (int i = 1; i < pyr.stage3_count; ++i) {
    for (std::int64_t k = 0; k < pyr.maps[0].map.size(); ++k) {
      CHECK(pyr.maps[i].map.data()[k] == pyr.maps[0].map.data()[k]);
    }
  }
  for (const PyramidMap& m : pyr.maps) {
    for (const double v : m.map.data()) CHECK(std::isfinite(v));
  }
}

TEST_CASE("gradient reaches every parameter") {
  // Input 128 keeps every attention group larger than one token; a
  // single-token group makes wq/wk structurally gradient-free (softmax over
  // one logit is constant), which is degeneracy, not disconnection.
  ModelConfig cfg = tiny_config();
  cfg.input_size = 128;
  Model model = Model::init(cfg, 17);
  const Tensor img = random_image(2, 128, 104);
  const Tensor mask = random_mask(2, 128, 105);
  const Tensor loss = bce_with_logits(model.forward_logits(img), mask);
  loss.backward();
  for (const auto& [name, t] : model.named_params()) {
    REQUIRE_MESSAGE(t.has_grad(), name);
    double max_abs = 0.0;
    for (const double g : t.grad()) max_abs = std::max(max_abs, std::abs(g));
    CHECK_MESSAGE(max_abs > 0.0, "gradient identically zero for ", name);
  }
}

TEST_CASE("cosine schedule hits both endpoints exactly") {
  CHECK(cosine_lr(0, 1280, 1e-4, 1e-7) == 1e-4);
  CHECK(cosine_lr(1279, 1280, 1e-4, 1e-7) == doctest::Approx(1e-7).epsilon(1e-12));
  CHECK(cosine_lr(5000, 1280, 1e-4, 1e-7) == doctest::Approx(1e-7).epsilon(1e-12));  // clamped
  CHECK(cosine_lr(0, 1, 5e-4, 1e-7) == 5e-4);
  // Midpoint sits halfway for an odd-length schedule.
  CHECK(cosine_lr(1, 3, 1e-4, 1e-7) == doctest::Approx((1e-4 + 1e-7) / 2).epsilon(1e-12));
}

TEST_CASE("BCE at a zeroed head equals ln 2") {
  Model model = Model::init(tiny_config(), 19);
  for (Tensor w : {model.head.head_w, model.head.head_b}) {
    for (double& v : w.mutable_data()) v = 0.0;
  }
  const Tensor img = random_image(1, 64, 106);
  const Tensor mask = Tensor::zeros({1, 1, 64, 64});
  NoGradGuard no_grad;
  const Tensor loss = bce_with_logits(model.forward_logits(img), mask);
  CHECK(loss.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("train_step validates batches and lowers the loss on a smoke run") {
  const ModelConfig cfg = tiny_config();
  TrainState state = TrainState::init(Model::init(cfg, 23), 40, 3e-3, 1e-5);

  CHECK_THROWS_AS(train_step(state, random_image(1, 64, 107), Tensor::full({1, 1, 64, 64}, 0.5)),
                  ConfigError);

  const Tensor img = random_image(2, 64, 108);
  const Tensor mask = random_mask(2, 64, 109);
  double first = 0.0, last = 0.0;
  for (int s = 0; s < 40; ++s) {
    const StepStats stats = train_step(state, img, mask);
    if (s == 0) {
      first = stats.loss;
      CHECK(stats.lr == 3e-3);
    }
    last = stats.loss;
    CHECK(std::isfinite(stats.loss));
  }
  CHECK(state.step == 40);
  CHECK(last < first);
}

TEST_CASE("identical seed and data give identical loss trajectories") {
  const ModelConfig cfg = tiny_config();
  const Tensor img = random_image(2, 64, 110);
  const Tensor mask = random_mask(2, 64, 111);
  std::vector<double> a, b;
  for (std::vector<double>* out : {&a, &b}) {
    TrainState state = TrainState::init(Model::init(cfg, 29), 10, 1e-3, 1e-5);
    for (int s = 0; s < 6; ++s) out->push_back(train_step(state, img, mask).loss);
  }
  for (int s = 0; s < 6; ++s) CHECK(a[s] == b[s]);
}

TEST_CASE("checkpoint round-trip resumes the exact trajectory") {
  const std::string dir =
      (std::filesystem::temp_directory_path() / "sparseloc_ckpt_test").string();
  std::filesystem::remove_all(dir);

  const ModelConfig cfg = tiny_config();
  const Tensor img = random_image(2, 64, 112);
  const Tensor mask = random_mask(2, 64, 113);

  // Uninterrupted run of 5 steps.
  std::vector<double> uninterrupted;
  {
    TrainState state = TrainState::init(Model::init(cfg, 31), 5, 1e-3, 1e-6);
    for (int s = 0; s < 5; ++s) uninterrupted.push_back(train_step(state, img, mask).loss);
  }

  // Same run interrupted after 3 steps.
  {
    TrainState state = TrainState::init(Model::init(cfg, 31), 5, 1e-3, 1e-6);
    for (int s = 0; s < 3; ++s) train_step(state, img, mask);
    save_checkpoint(dir, state, 0xABCDEF);
  }
  const CheckpointMeta meta = read_checkpoint_meta(dir);
  CHECK(meta.config_hash == 0xABCDEF);
  CHECK(meta.step == 3);
  CHECK(meta.total_steps == 5);

  TrainState resumed = load_checkpoint(dir, cfg);
  CHECK(resumed.step == 3);
  for (int s = 3; s < 5; ++s) {
    const double loss = train_step(resumed, img, mask).loss;
    CHECK(std::abs(loss - uninterrupted[s]) <= 1e-12);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoint refuses a manifest with missing parameters") {
  const std::string dir =
      (std::filesystem::temp_directory_path() / "sparseloc_ckpt_missing").string();
  std::filesystem::remove_all(dir);
  const ModelConfig cfg = tiny_config();
  TrainState state = TrainState::init(Model::init(cfg, 37), 2, 1e-3, 1e-6);
  save_checkpoint(dir, state, 1);
  std::filesystem::remove(dir + "/stem.conv1.w.sten");
  CHECK_THROWS_AS(load_checkpoint(dir, cfg), IoError);
  std::filesystem::remove_all(dir);
}
