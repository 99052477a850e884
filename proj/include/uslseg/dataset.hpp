#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "uslseg/image.hpp"
#include "uslseg/tensor.hpp"

namespace uslseg {

enum class Split { train, test };
enum class Layout { isic, ph2 };
enum class ContrastiveMethod { simclr, moco_v1, moco_v2 };

std::string to_string(Split s);
std::string to_string(Layout l);
std::string to_string(ContrastiveMethod m);
Split parse_split(const std::string& s);
Layout parse_layout(const std::string& s);
ContrastiveMethod parse_method(const std::string& s);

struct ImageSample {
  std::string id;
  Tensor pixels;               // 1x3x224x224, values k/255
  std::optional<Mask> gt_mask; // evaluation only
  Split split = Split::train;
};

struct LoadOptions {
  bool skip_bad = false;
};

// Layouts:
//   isic: <root>/images/<id>.{png,jpg,jpeg,bmp}; masks optional in <root>/masks/
//         as <id>.png or <id>_segmentation.png. Images directly under <root> are
//         accepted when there is no images/ directory.
//   ph2:  <root>/<id>/<id>_Dermoscopic_Image/<id>.* with masks at
//         <root>/<id>/<id>_lesion/<id>_lesion.*
std::vector<ImageSample> load_dataset(const std::filesystem::path& root, Layout layout, Split split,
                                      const LoadOptions& options = {});

// Writes the canonical 224x224 samples as 8-bit PNGs in the isic layout plus a
// manifest.json with one record per sample; returns the manifest path.
std::filesystem::path save_sample_cache(const std::vector<ImageSample>& samples, const std::filesystem::path& dir);

// ------------------------------------------------------------------ augmentation

struct RandomResizedCrop {
  double scale_min = 0.2, scale_max = 1.0;
  double ratio_min = 3.0 / 4.0, ratio_max = 4.0 / 3.0;
};
struct HorizontalFlip {
  double p = 0.5;
};
struct ColorJitter {
  double p = 0.8;
  double brightness = 0.4, contrast = 0.4, saturation = 0.4, hue = 0.1;
};
struct Grayscale {
  double p = 0.2;
};
struct GaussianBlur {
  double p = 0.5;
  double sigma_min = 0.1, sigma_max = 2.0;
};

using AugOp = std::variant<RandomResizedCrop, HorizontalFlip, ColorJitter, Grayscale, GaussianBlur>;

struct AugmentationSpec {
  ContrastiveMethod method = ContrastiveMethod::moco_v2;
  std::vector<AugOp> ops;
  std::uint64_t seed = 0;

  // Canonical recipe of the named method.
  static AugmentationSpec canonical(ContrastiveMethod method, std::uint64_t seed);
  bool has_blur() const;
};

// Two independently sampled views; deterministic in (spec, seed, sample id, pixels).
std::pair<Tensor, Tensor> augment_two_views(const ImageSample& sample, const AugmentationSpec& spec);

// ------------------------------------------------------------------ synthetic suite

struct SyntheticOptions {
  int count = 40;
  std::uint64_t seed = 2024;
  double hair_probability = 0.6;
  double dark_corner_probability = 0.5;
};

// Dermoscopy-like images: one dark elliptical lesion near the centre on a
// shaded skin background, with hair-like strokes and dark peripheral corners
// as distractors. Ground truth is the ellipse.
std::vector<ImageSample> make_synthetic_suite(const SyntheticOptions& options);

// Writes the suite in the isic layout (images/ + masks/).
void write_synthetic_suite(const std::filesystem::path& dir, const SyntheticOptions& options);

}  // namespace uslseg
