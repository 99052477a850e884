#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "uslseg/image.hpp"

namespace uslseg::metrics {

struct ConfusionCounts {
  std::int64_t tp = 0, tn = 0, fp = 0, fn = 0;

  std::int64_t total() const { return tp + tn + fp + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp, tn += o.tn, fp += o.fp, fn += o.fn;
    return *this;
  }
  bool operator==(const ConfusionCounts&) const = default;
};

struct Scores {
  double acc = 0, dic = 0, jac = 0, sen = 0, spe = 0, recall = 0, precision = 0;
};

struct ImageScores {
  std::string id;
  ConfusionCounts counts;
  Scores scores;
};

struct MetricReport {
  std::vector<ImageScores> per_image;
  Scores averages;
  bool pooled = false;

  std::string to_csv() const;
  // Percentages with one decimal, laid out like a comparison table row.
  std::string to_table(const std::string& method_name = "USL-Net (this run)") const;
  void write_csv(const std::filesystem::path& path) const;
};

ConfusionCounts confusion(const Mask& pred, const Mask& gt);

// Degenerate denominators: SEN = 1 when tp+fn = 0, SPE = 1 when tn+fp = 0,
// Precision = 1 when tp+fp = 0 and fn = 0 (else 0), DIC = JAC = 1 when both
// masks are empty.
Scores compute_metrics(const ConfusionCounts& c);

// Unweighted mean over images, or metrics of the pooled counts when `pooled`.
MetricReport evaluate_dataset(const std::map<std::string, Mask>& preds, const std::map<std::string, Mask>& gts,
                              bool pooled = false);

}  // namespace uslseg::metrics
