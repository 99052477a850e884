#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "uslseg/ccam.hpp"
#include "uslseg/contrastive.hpp"
#include "uslseg/dataset.hpp"
#include "uslseg/seg_net.hpp"
#include "uslseg/uncertainty.hpp"

namespace uslseg {

// Which variant of the pipeline produces the final masks.
enum class Variant {
  full,      // UM labels, uncertainty loss, iterative refinement
  baseline,  // naive channel-mean CAM of the moco_v2 features, thresholded
  model1,    // CCAM CAM, thresholded
  model2,    // thresholded CCAM CAM filtered by connectivity and centrality
  model3,    // network trained on model2 masks as fully certain labels
  model4,    // network trained once on UM labels
  model5,    // model4 plus iterative refinement (same as full)
};
std::string to_string(Variant v);
Variant parse_variant(const std::string& s);

enum class CamMode { fused, per_method };
std::string to_string(CamMode m);
CamMode parse_cam_mode(const std::string& s);

struct DatasetSection {
  std::string root;
  Layout layout = Layout::isic;
  Split split = Split::train;
  std::string eval_root;  // empty: evaluate on `root`
  Split eval_split = Split::test;
  bool skip_bad = false;
  bool operator==(const DatasetSection&) const = default;
};

struct ContrastiveSection {
  std::vector<ContrastiveMethod> methods{ContrastiveMethod::simclr, ContrastiveMethod::moco_v1,
                                         ContrastiveMethod::moco_v2};
  int epochs = 200;
  int batch = 256;
  double tau = 0.07;
  int queue = 4096;
  double momentum = 0.999;
  int embedding_dim = 128;
  double base_lr = 0.03;
  int base_width = 64;
  std::vector<int> blocks{3, 4, 6, 3};
  std::vector<int> feature_stages{4, 5};
  bool operator==(const ContrastiveSection&) const = default;
};

struct CcamSection {
  int epochs = 5;
  int batch = 8;
  int proj_channels = 256;
  double lr = 0.05;
  double fg_pull = 1.0;
  double bg_pull = 1.0;
  double push = 1.0;
  double separation = 0.1;
  CamMode mode = CamMode::fused;
  bool operator==(const CcamSection&) const = default;
};

struct UmSection {
  double lo = 0.35;
  double hi = 0.65;
  double alpha = 500.0;
  int connectivity = 4;
  std::string comparator = "min";
  std::string weight_mode = "mean";
  double far_fraction = 0.40;
  bool operator==(const UmSection&) const = default;
};

struct SegSection {
  int epochs_per_iteration = 300;
  int n_iterations = 5;
  int export_iteration = 2;
  int batch = 8;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double poly_power = 0.9;
  bool flip = true;
  int base_width = 64;
  std::vector<int> blocks{3, 4, 6};
  bool init_from_contrastive = true;
  bool operator==(const SegSection&) const = default;
};

struct InferSection {
  double threshold = 0.5;
  bool operator==(const InferSection&) const = default;
};

struct PipelineConfig {
  DatasetSection dataset;
  ContrastiveSection contrastive;
  CcamSection ccam;
  UmSection um;
  SegSection seg;
  InferSection infer;
  Variant variant = Variant::full;
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";

  bool operator==(const PipelineConfig&) const = default;

  // Throws ConfigError naming the offending field path.
  void validate() const;

  um::UmConfig um_config() const;
  contrastive::EncoderConfig encoder_config() const;
  contrastive::ContrastiveOptions contrastive_options(ContrastiveMethod method) const;
  ccam::CcamOptions ccam_options() const;
  seg::SegConfig seg_model_config() const;
  seg::SegTrainOptions seg_train_options() const;
  seg::RefinementSchedule schedule() const;
};

// Flat text form: `[section]` headers, `key = value` lines, lists in
// brackets, `#` comments. Keys outside any section sit at the top level.
PipelineConfig parse_config(const std::string& text);
PipelineConfig load_config(const std::filesystem::path& path);
std::string to_text(const PipelineConfig& config);
void save_config(const PipelineConfig& config, const std::filesystem::path& path);

// Ablation presets applied on top of an existing config.
PipelineConfig apply_preset(PipelineConfig config, Variant variant);

// Small-scale settings used for the synthetic experiments.
PipelineConfig toy_config(const std::string& dataset_root, const std::string& output_dir);

// 16 hex digits of a stable hash.
std::string stable_hash(const std::string& text);

}  // namespace uslseg
