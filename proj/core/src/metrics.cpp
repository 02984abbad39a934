#include "sparseloc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <numeric>
#include <ostream>

namespace sparseloc {

ConfusionCounts confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  if (pred.size() != gt.size()) {
    throw ShapeError("confusion: prediction has " + std::to_string(pred.size()) +
                     " pixels, ground truth " + std::to_string(gt.size()));
  }
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0;
    const bool g = gt[i] != 0;
    if (p && g) {
      ++c.tp;
    } else if (p && !g) {
      ++c.fp;
    } else if (!p && g) {
      ++c.fn;
    } else {
      ++c.tn;
    }
  }
  return c;
}

double f1_score(const ConfusionCounts& c) {
  const std::int64_t denom = 2 * c.tp + c.fp + c.fn;
  if (denom == 0) return 1.0;  // both all-negative
  return 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

double iou_score(const ConfusionCounts& c) {
  const std::int64_t denom = c.tp + c.fp + c.fn;
  if (denom == 0) return 1.0;
  return static_cast<double>(c.tp) / static_cast<double>(denom);
}

double f1(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  return f1_score(confusion(pred, gt));
}

double iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  return iou_score(confusion(pred, gt));
}

std::optional<double> auc(std::span<const double> scores, std::span<const std::uint8_t> gt) {
  if (scores.size() != gt.size()) {
    throw ShapeError("auc: scores and ground truth sizes disagree");
  }
  std::int64_t positives = 0;
  for (const std::uint8_t g : gt) positives += g != 0;
  const std::int64_t negatives = static_cast<std::int64_t>(gt.size()) - positives;
  if (positives == 0 || negatives == 0) return std::nullopt;

  std::vector<std::int32_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::int32_t a, std::int32_t b) { return scores[a] < scores[b]; });

  // Average ranks across ties, summed over positives.
  double positive_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));  // 1-based
    for (std::size_t k = i; k < j; ++k) {
      if (gt[order[k]] != 0) positive_rank_sum += avg_rank;
    }
    i = j;
  }
  const double np = static_cast<double>(positives);
  const double nn = static_cast<double>(negatives);
  return (positive_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

double EvalReport::mean_f1() const {
  if (samples.empty()) return 0.0;
  double acc = 0.0;
  for (const SampleMetrics& s : samples) acc += s.f1;
  return acc / static_cast<double>(samples.size());
}

double EvalReport::mean_iou() const {
  if (samples.empty()) return 0.0;
  double acc = 0.0;
  for (const SampleMetrics& s : samples) acc += s.iou;
  return acc / static_cast<double>(samples.size());
}

std::optional<double> EvalReport::mean_auc() const {
  double acc = 0.0;
  int count = 0;
  for (const SampleMetrics& s : samples) {
    if (s.auc) {
      acc += *s.auc;
      ++count;
    }
  }
  if (count == 0) return std::nullopt;
  return acc / count;
}

namespace {

std::vector<std::uint8_t> threshold_probs(const std::vector<double>& probs, double threshold) {
  std::vector<std::uint8_t> pred(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) pred[i] = probs[i] > threshold ? 1 : 0;
  return pred;
}

double mean_f1_over(const Scorer& scorer, const std::vector<Image>& images,
                    const std::vector<std::vector<std::uint8_t>>& masks, double threshold) {
  double acc = 0.0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::vector<double> probs = scorer(images[i]);
    acc += f1(threshold_probs(probs, threshold), masks[i]);
  }
  return images.empty() ? 0.0 : acc / static_cast<double>(images.size());
}

}  // namespace

EvalReport evaluate_dataset(const Scorer& scorer, const std::string& manifest_path,
                            double threshold, const PerturbationGrid* grid) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw ConfigError("evaluate_dataset: threshold must lie in (0,1)");
  }
  const std::vector<DatasetItem> items = read_dataset_manifest(manifest_path);

  EvalReport report;
  report.threshold = threshold;
  std::vector<Image> images;
  std::vector<std::vector<std::uint8_t>> masks;
  std::vector<std::string> ids;
  for (const DatasetItem& item : items) {
    try {
      Image image = read_ppm(item.image_path);
      int mh = 0, mw = 0;
      std::vector<std::uint8_t> mask = read_pgm(item.mask_path, mh, mw);
      if (mh != image.height || mw != image.width) throw IoError("image/mask extent mismatch");
      images.push_back(std::move(image));
      masks.push_back(std::move(mask));
      ids.push_back(std::to_string(item.seed));
    } catch (const IoError& e) {
      std::cerr << "evaluate_dataset: skipping sample seed " << item.seed << ": " << e.what()
                << "\n";
      ++report.skipped;
    }
  }

  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::vector<double> probs = scorer(images[i]);
    SampleMetrics m;
    m.id = ids[i];
    const ConfusionCounts c = confusion(threshold_probs(probs, threshold), masks[i]);
    m.f1 = f1_score(c);
    m.iou = iou_score(c);
    m.auc = auc(probs, masks[i]);
    if (!m.auc) ++report.auc_excluded;
    report.samples.push_back(std::move(m));
  }

  if (grid != nullptr) {
    for (const int q : grid->jpeg_qualities) {
      std::vector<Image> perturbed;
      perturbed.reserve(images.size());
      for (const Image& img : images) perturbed.push_back(perturb_jpeg_like(img, q));
      report.robustness.push_back({"jpeg", static_cast<double>(q),
                                   mean_f1_over(scorer, perturbed, masks, threshold),
                                   static_cast<int>(perturbed.size())});
    }
    for (const int k : grid->blur_kernels) {
      std::vector<Image> perturbed;
      perturbed.reserve(images.size());
      for (const Image& img : images) {
        perturbed.push_back(perturb_gaussian_blur(img, k, static_cast<double>(k) / 3.0));
      }
      report.robustness.push_back({"blur", static_cast<double>(k),
                                   mean_f1_over(scorer, perturbed, masks, threshold),
                                   static_cast<int>(perturbed.size())});
    }
    for (const double sigma : grid->noise_sigmas) {
      std::vector<Image> perturbed;
      perturbed.reserve(images.size());
      for (std::size_t i = 0; i < images.size(); ++i) {
        perturbed.push_back(perturb_gaussian_noise(images[i], sigma, 0x9e11 + i));
      }
      report.robustness.push_back({"noise", sigma,
                                   mean_f1_over(scorer, perturbed, masks, threshold),
                                   static_cast<int>(perturbed.size())});
    }
  }
  return report;
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

}  // namespace

void write_eval_csv(std::ostream& out, const EvalReport& report) {
  out << "sample,f1,auc,iou\n";
  for (const SampleMetrics& s : report.samples) {
    out << s.id << "," << fmt(s.f1) << "," << (s.auc ? fmt(*s.auc) : std::string("NA")) << ","
        << fmt(s.iou) << "\n";
  }
  out << "SUMMARY,threshold," << fmt(report.threshold) << "\n";
  out << "SUMMARY,samples," << report.samples.size() << "\n";
  out << "SUMMARY,skipped," << report.skipped << "\n";
  out << "SUMMARY,auc_excluded," << report.auc_excluded << "\n";
  out << "SUMMARY,mean_f1," << fmt(report.mean_f1()) << "\n";
  out << "SUMMARY,mean_iou," << fmt(report.mean_iou()) << "\n";
  out << "SUMMARY,mean_auc," << (report.mean_auc() ? fmt(*report.mean_auc()) : std::string("NA"))
      << "\n";
}

void write_robustness_csv(std::ostream& out, const EvalReport& report) {
  out << "perturbation,severity,mean_f1\n";
  for (const RobustnessCell& cell : report.robustness) {
    out << cell.perturbation << "," << fmt(cell.severity) << "," << fmt(cell.mean_f1) << "\n";
  }
}

}  // namespace sparseloc
