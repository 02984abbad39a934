#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sparseloc/dataset.hpp"
#include "sparseloc/synth.hpp"

namespace sparseloc {

struct ConfusionCounts {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  std::int64_t total() const { return tp + fp + fn + tn; }
};

ConfusionCounts confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);

// 2tp/(2tp+fp+fn); 1.0 when prediction and ground truth are both all-negative.
double f1_score(const ConfusionCounts& c);
// tp/(tp+fp+fn); same all-negative convention.
double iou_score(const ConfusionCounts& c);
double f1(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);
double iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);

// Mann-Whitney AUC via average ranks: P(score+ > score-) + 0.5*P(tie).
// Undefined (nullopt) when gt holds a single class.
std::optional<double> auc(std::span<const double> scores, std::span<const std::uint8_t> gt);

struct SampleMetrics {
  std::string id;
  double f1 = 0.0;
  double iou = 0.0;
  std::optional<double> auc;
};

struct RobustnessCell {
  std::string perturbation;
  double severity = 0.0;
  double mean_f1 = 0.0;
  int samples = 0;
};

struct EvalReport {
  std::vector<SampleMetrics> samples;
  double threshold = 0.5;
  int skipped = 0;       // unreadable samples
  int auc_excluded = 0;  // single-class ground truths
  std::vector<RobustnessCell> robustness;

  double mean_f1() const;
  double mean_iou() const;
  std::optional<double> mean_auc() const;
};

// A model stands in as a scorer: per-pixel probabilities, row-major H*W.
using Scorer = std::function<std::vector<double>(const Image&)>;

struct PerturbationGrid {
  std::vector<int> jpeg_qualities{90, 70, 50, 30};
  std::vector<int> blur_kernels{3, 5, 7};  // sigma = k/3
  std::vector<double> noise_sigmas{0.02, 0.05, 0.1};
};

// Per-sample metrics at a fixed threshold over a dataset manifest; when a
// grid is given, re-evaluates perturbed inputs (clean model) into the
// robustness matrix. Unreadable samples are skipped and counted.
EvalReport evaluate_dataset(const Scorer& scorer, const std::string& manifest_path,
                            double threshold = 0.5, const PerturbationGrid* grid = nullptr);

// CSV: `sample,f1,auc,iou` rows followed by a SUMMARY block.
void write_eval_csv(std::ostream& out, const EvalReport& report);
// CSV: `perturbation,severity,mean_f1` rows.
void write_robustness_csv(std::ostream& out, const EvalReport& report);

}  // namespace sparseloc
