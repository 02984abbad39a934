#include <CLI11.hpp>

#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "sparseloc/checkpoint.hpp"
#include "sparseloc/config.hpp"
#include "sparseloc/dataset.hpp"
#include "sparseloc/metrics.hpp"
#include "sparseloc/profiler.hpp"
#include "sparseloc/train.hpp"

namespace {

using namespace sparseloc;

constexpr const char* kVersion = "sparseloc 0.1.0";

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::optional<std::int64_t> seed;
  bool force = false;
};

std::string iso_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

std::string hash_hex(std::uint64_t hash) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016" PRIx64, hash);
  return buf;
}

ConfigFile load_config(const CommonArgs& args) {
  if (args.config_path.empty()) throw ConfigError("--config is required");
  ConfigFile file = ConfigFile::parse_file(args.config_path);
  if (args.seed) file.set("seed", std::to_string(*args.seed));
  return file;
}

// synth/train own their output directory; refuse to clobber without --force.
void claim_out_dir(const CommonArgs& args, bool protect) {
  if (args.out_dir.empty()) throw ConfigError("--out is required");
  namespace fs = std::filesystem;
  if (protect && fs::exists(args.out_dir) && !fs::is_empty(args.out_dir) && !args.force) {
    throw ConfigError("output directory " + args.out_dir +
                      " exists and is not empty (use --force to reuse it)");
  }
  fs::create_directories(args.out_dir);
}

void write_text_atomic(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp);
    out << text;
  }
  std::filesystem::rename(tmp, path);
}

void write_run_manifest(const CommonArgs& args, const ConfigFile& file, const std::string& command,
                        const std::string& started, const std::string& extra = "") {
  std::ostringstream os;
  os << "command " << command << "\n";
  os << "config_path " << std::filesystem::absolute(args.config_path).string() << "\n";
  os << "config_hash " << hash_hex(file.hash()) << "\n";
  os << "seed " << file.get_or("seed", "42") << "\n";
  os << "version " << kVersion << "\n";
  os << "out_dir " << std::filesystem::absolute(args.out_dir).string() << "\n";
  os << "started " << started << "\n";
  os << "finished " << iso_now() << "\n";
  if (!extra.empty()) os << extra;
  write_text_atomic(args.out_dir + "/run_manifest.txt", os.str());
}

std::string fmt_full(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// ---- synth ----

int cmd_synth(const CommonArgs& args) {
  const std::string started = iso_now();
  const ConfigFile file = load_config(args);
  const RunConfig rc = RunConfig::from_config(file);
  claim_out_dir(args, /*protect=*/true);

  const std::uint64_t data_seed = substream_seed(rc.seed, "data");
  const DatasetPaths paths = synthesize_dataset(args.out_dir, rc.synth, data_seed);
  std::cout << "synth: " << rc.synth.train_count << " train / " << rc.synth.val_count << " val / "
            << rc.synth.test_count << " test samples at " << rc.synth.size << "x" << rc.synth.size
            << (rc.synth.hard_negative ? " (hard-negative variant)" : "") << " -> " << args.out_dir
            << "\n";
  write_run_manifest(args, file, "synth", started,
                     "data_seed_base " + std::to_string(data_seed) + "\n");
  (void)paths;
  return 0;
}

// ---- train ----

int cmd_train(const CommonArgs& args, const std::string& resume_path) {
  const std::string started = iso_now();
  const ConfigFile file = load_config(args);
  const RunConfig rc = RunConfig::from_config(file);
  if (rc.data_dir.empty()) throw ConfigError("config: data_dir is required for train");
  claim_out_dir(args, /*protect=*/true);

  const std::vector<DatasetItem> items = read_dataset_manifest(rc.data_dir + "/train/manifest.csv");
  if (items.empty()) throw ConfigError("train: dataset at " + rc.data_dir + " has no train samples");
  std::vector<CompactSample> samples;
  samples.reserve(items.size());
  for (const DatasetItem& item : items) samples.push_back(load_compact_sample(item));

  const std::int64_t steps_per_epoch = static_cast<std::int64_t>(samples.size()) / rc.batch_size;
  if (steps_per_epoch < 1) throw ConfigError("train: batch_size exceeds the dataset size");
  const std::int64_t total_steps = steps_per_epoch * rc.epochs;

  TrainState state = resume_path.empty()
                         ? TrainState::init(Model::init(rc.model, rc.seed), total_steps, rc.lr_max,
                                            rc.lr_min)
                         : load_checkpoint(resume_path, rc.model);
  if (!resume_path.empty() && state.total_steps != total_steps) {
    throw ConfigError("train: checkpoint total_steps " + std::to_string(state.total_steps) +
                      " disagrees with config schedule " + std::to_string(total_steps));
  }

  std::ostringstream loss_csv;
  loss_csv << "step,lr,loss\n";
  const std::string loss_path = args.out_dir + "/loss.csv";
  const auto flush_loss = [&] { write_text_atomic(loss_path, loss_csv.str()); };

  const std::string uniform_note =
      rc.model.uniform_rate > 0
          ? "uniform_rate " + std::to_string(rc.model.uniform_rate) + "\n" +
                "stage3_taps " + std::to_string(state.model.encoder.stage3_plan().tap_indices.size()) +
                "\nstage4_taps " +
                std::to_string(state.model.encoder.stage4_plan().tap_indices.size()) + "\n"
          : "";

  std::vector<int> order(samples.size());
  try {
    while (state.step < total_steps) {
      const std::int64_t epoch = state.step / steps_per_epoch;
      // Epoch order is reconstructed statelessly from the seed, so resumed
      // runs see the same batches.
      Rng shuffle_rng = substream(rc.seed, "order/epoch" + std::to_string(epoch));
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
      for (std::size_t i = order.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
        std::swap(order[i - 1], order[j]);
      }

      const std::int64_t epoch_end = std::min(total_steps, (epoch + 1) * steps_per_epoch);
      double epoch_loss = 0.0;
      std::int64_t epoch_steps = 0;
      while (state.step < epoch_end) {
        const std::int64_t pos = (state.step % steps_per_epoch) * rc.batch_size;
        const std::span<const int> batch_idx(order.data() + pos, rc.batch_size);
        const Tensor images = batch_images(samples, batch_idx);
        const Tensor masks = batch_masks(samples, batch_idx);
        const StepStats stats = train_step(state, images, masks);
        loss_csv << stats.step << "," << fmt_full(stats.lr) << "," << fmt_full(stats.loss) << "\n";
        epoch_loss += stats.loss;
        ++epoch_steps;
        if (rc.checkpoint_every > 0 && state.step % rc.checkpoint_every == 0 &&
            state.step < total_steps) {
          save_checkpoint(args.out_dir + "/checkpoint-" + std::to_string(state.step), state,
                          file.hash());
        }
      }
      std::cout << "epoch " << epoch + 1 << "/" << rc.epochs << " mean_loss "
                << epoch_loss / static_cast<double>(epoch_steps) << " lr "
                << cosine_lr(state.step - 1, total_steps, rc.lr_max, rc.lr_min) << "\n";
    }
  } catch (...) {
    flush_loss();  // preserve partial artifacts on abort
    throw;
  }

  save_checkpoint(args.out_dir + "/checkpoint-final", state, file.hash());
  flush_loss();
  write_run_manifest(args, file, "train", started,
                     "total_steps " + std::to_string(total_steps) + "\n" + uniform_note);
  std::cout << "train: " << total_steps << " steps -> " << args.out_dir << "/checkpoint-final\n";
  return 0;
}

// ---- eval ----

int cmd_eval(const CommonArgs& args, const std::string& checkpoint, bool allow_mismatch) {
  const std::string started = iso_now();
  const ConfigFile file = load_config(args);
  const RunConfig rc = RunConfig::from_config(file);
  if (rc.data_dir.empty()) throw ConfigError("config: data_dir is required for eval");
  if (checkpoint.empty()) throw ConfigError("--checkpoint is required");
  claim_out_dir(args, /*protect=*/false);

  const CheckpointMeta meta = read_checkpoint_meta(checkpoint);
  if (meta.config_hash != file.hash() && !allow_mismatch) {
    throw ConfigError("eval: checkpoint config hash " + hash_hex(meta.config_hash) +
                      " does not match current config " + hash_hex(file.hash()) +
                      " (pass --allow-mismatch to override)");
  }

  const TrainState state = load_checkpoint(checkpoint, rc.model);
  const Model& model = state.model;
  const Scorer scorer = [&model](const Image& img) {
    NoGradGuard no_grad;
    const Tensor input = Tensor::from_data({3, img.height, img.width}, img.rgb);
    const Tensor logits = model.forward_logits(input);  // [1,H,W]
    const Tensor probs = sigmoid(logits);
    return std::vector<double>(probs.data().begin(), probs.data().end());
  };

  const std::string manifest = rc.data_dir + "/test/manifest.csv";
  const EvalReport report =
      evaluate_dataset(scorer, manifest, rc.threshold, rc.robustness ? &rc.grid : nullptr);

  std::ostringstream eval_csv;
  write_eval_csv(eval_csv, report);
  write_text_atomic(args.out_dir + "/eval.csv", eval_csv.str());
  if (rc.robustness) {
    std::ostringstream rob_csv;
    write_robustness_csv(rob_csv, report);
    write_text_atomic(args.out_dir + "/robustness.csv", rob_csv.str());
  }
  write_run_manifest(args, file, "eval", started,
                     "checkpoint " + std::filesystem::absolute(checkpoint).string() + "\n");

  std::cout << "eval: " << report.samples.size() << " samples, mean_f1 " << report.mean_f1()
            << ", mean_iou " << report.mean_iou() << ", mean_auc "
            << (report.mean_auc() ? std::to_string(*report.mean_auc()) : std::string("NA"))
            << ", skipped " << report.skipped << "\n";
  return 0;
}

// ---- profile ----

int cmd_profile(const CommonArgs& args, bool ab_global) {
  const std::string started = iso_now();
  const ConfigFile file = load_config(args);
  const RunConfig rc = RunConfig::from_config(file);
  claim_out_dir(args, /*protect=*/false);

  const CostReport report = model_cost(rc.model, rc.model.input_size);
  std::ostringstream cost_csv;
  write_cost_csv(cost_csv, report);
  write_text_atomic(args.out_dir + "/cost.csv", cost_csv.str());
  std::cout << "profile: params " << report.total_params() << ", flops " << report.total_flops()
            << " at " << rc.model.input_size << "x" << rc.model.input_size << "\n";

  if (ab_global) {
    const AbComparison ab = ab_compare(rc.model, rc.model.input_size);
    std::ostringstream ab_csv;
    write_ab_csv(ab_csv, ab);
    write_text_atomic(args.out_dir + "/ab.csv", ab_csv.str());
    std::cout << "profile: sparse/global flops ratio " << ab.flops_ratio << "\n";
  }
  write_run_manifest(args, file, "profile", started);
  return 0;
}

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "configuration file (key = value lines)");
  cmd->add_option("--out", args.out_dir, "output directory");
  cmd->add_option("--seed", args.seed, "override the config seed");
  cmd->add_flag("--force", args.force, "reuse a non-empty output directory");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sparse-attention manipulation localization toolkit"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  CommonArgs synth_args, train_args, eval_args, profile_args;
  std::string resume_path, checkpoint_path;
  bool allow_mismatch = false, ab_global = false;

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic splice dataset");
  add_common(synth, synth_args);
  CLI::App* train = app.add_subcommand("train", "train the localizer");
  add_common(train, train_args);
  train->add_option("--resume", resume_path, "checkpoint directory to resume from");
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  add_common(eval, eval_args);
  eval->add_option("--checkpoint", checkpoint_path, "checkpoint directory");
  eval->add_flag("--allow-mismatch", allow_mismatch, "ignore config-hash mismatch");
  CLI::App* profile = app.add_subcommand("profile", "analytic parameter and FLOPs report");
  add_common(profile, profile_args);
  profile->add_flag("--ab-global", ab_global, "also compare against the all-global-attention twin");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return cmd_synth(synth_args);
    if (train->parsed()) return cmd_train(train_args, resume_path);
    if (eval->parsed()) return cmd_eval(eval_args, checkpoint_path, allow_mismatch);
    if (profile->parsed()) return cmd_profile(profile_args, ab_global);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "abort: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
