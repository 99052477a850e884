#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "uslseg/config.hpp"
#include "uslseg/metrics.hpp"

namespace uslseg {

enum class Stage { pretrain, ccam, labels, train, refine, infer, evaluate, all };
std::string to_string(Stage s);
Stage parse_stage(const std::string& s);

struct StageRecord {
  std::string stage;
  std::string hash;     // content address of the stage's inputs
  double seconds = 0;   // wall clock
  bool reused = false;  // artifacts already present for this hash
  bool skipped = false; // not part of the configured variant
  std::map<std::string, std::string> artifacts;  // name -> path
};

struct RunOptions {
  bool pooled = false;
  std::optional<std::filesystem::path> cache_root;  // beats USLSEG_CACHE
  std::ostream* log = nullptr;
};

struct RunResult {
  std::filesystem::path manifest;
  std::vector<StageRecord> stages;
  std::optional<metrics::MetricReport> report;
};

// Runs one stage (or every stage in order for Stage::all) and appends the
// run to <output_dir>/manifest.json. Throws MissingPrerequisite when an
// upstream artifact for the current configuration does not exist.
RunResult run(Stage stage, const PipelineConfig& config, const RunOptions& options = {});

// Artifact cache root: RunOptions, then USLSEG_CACHE, then <output_dir>/cache.
std::filesystem::path cache_root(const PipelineConfig& config, const RunOptions& options);

// Red over over-segmented pixels, green over under-segmented ones.
Tensor overlay(const Mask& pred, const Mask& gt, const Tensor& image);

// Channel mean of a feature map, min-max normalised and upsampled to a CAM.
ccam::Cam naive_cam(const Tensor& features);

// Keeps the thresholded CAM region chosen by connectivity and centrality.
// Returns nullopt when no region qualifies.
std::optional<Mask> centrality_filter(const FloatMap& saliency, const um::UmConfig& config, double threshold = 0.5);

struct SweepRow {
  double x = 0;
  double naive_x_acc = 0;    // accuracy of S >= x
  double naive_1mx_acc = 0;  // accuracy of S >= 1 - x
  double um_acc = 0;         // certain-pixel accuracy of UM labels at (x, 1 - x)
};

// Grid values must lie in (0, 0.5); others are dropped.
std::vector<SweepRow> threshold_sweep(const std::vector<FloatMap>& saliency, const std::vector<Mask>& gts,
                                      const std::vector<double>& grid, const um::UmConfig& base);
std::string sweep_csv(const std::vector<SweepRow>& rows);

}  // namespace uslseg
