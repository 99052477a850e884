#pragma once

#include <filesystem>
#include <vector>

#include "uslseg/image.hpp"

namespace uslseg::um {

enum class Connectivity { four = 4, eight = 8 };

// Which extreme of the centrality weight wins the foreground slot. `min`
// keeps the region closest to the centre; `max` reproduces the literal
// comparator of the reference pseudo-code for ablation.
enum class Comparator { min, max };

// `mean` divides the summed centre distance by region size; `sum` uses the raw sum.
enum class WeightMode { mean, sum };

struct Point {
  int row = 0;
  int col = 0;
  bool operator==(const Point&) const = default;
  auto operator<=>(const Point&) const = default;
};

struct Region {
  std::vector<Point> pixels;  // raster order
  double weight = 0.0;        // summed distance to the image centre

  std::size_t size() const { return pixels.size(); }
  const Point& first() const { return pixels.front(); }
};

struct UmConfig {
  double lo = 0.35;
  double hi = 0.65;
  double alpha = 500.0;  // minimum region size, in 224x224 pixel units
  Connectivity connectivity = Connectivity::four;
  Comparator comparator = Comparator::min;
  WeightMode weight_mode = WeightMode::mean;
  double far_fraction = 0.40;  // of the half diagonal

  bool operator==(const UmConfig&) const = default;
};

struct TriMasks {
  Mask background;  // S < lo
  Mask uncertain;   // lo <= S <= hi
  Mask high;        // S > hi
};

struct TriLabel {
  FloatMap values;  // {0, 0.5, 1}
  bool excluded = false;
};

// Fails with InvalidThresholds unless 0 <= lo < hi <= 1.
void validate_thresholds(double lo, double hi);

TriMasks tri_threshold(const FloatMap& saliency, double lo = 0.35, double hi = 0.65);

// Maximal connected regions of the set pixels, ordered by their first pixel in
// raster order. Region weights are filled in for the mask's own grid.
std::vector<Region> connected_components(const Mask& mask, Connectivity connectivity = Connectivity::four);

double centrality_weight(const Region& region, int height, int width);

// Size threshold alpha rescaled from 224x224 units to a rows x cols grid.
double scaled_alpha(double alpha, int rows, int cols);

// Index into `survivors` of the foreground region, or -1 when empty. The result
// does not depend on the order of `survivors`.
int select_foreground(const std::vector<Region>& survivors, const UmConfig& config);

TriLabel make_pseudo_label(const FloatMap& saliency, const UmConfig& config = {});

// Persisted as 8-bit grayscale with 0 -> 0, 0.5 -> 128, 1 -> 255.
void write_trilabel_png(const std::filesystem::path& path, const TriLabel& label);
TriLabel read_trilabel_png(const std::filesystem::path& path);

}  // namespace uslseg::um
