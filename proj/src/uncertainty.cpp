#include "uslseg/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <queue>

#include "uslseg/errors.hpp"

namespace uslseg::um {

void validate_thresholds(double lo, double hi) {
  if (!(lo >= 0.0 && hi <= 1.0 && lo < hi))
    throw InvalidThresholds("thresholds must satisfy 0 <= lo < hi <= 1 (lo=" + std::to_string(lo) +
                            ", hi=" + std::to_string(hi) + ")");
}

TriMasks tri_threshold(const FloatMap& saliency, double lo, double hi) {
  validate_thresholds(lo, hi);
  TriMasks m{Mask(saliency.rows, saliency.cols), Mask(saliency.rows, saliency.cols), Mask(saliency.rows, saliency.cols)};
  // Thresholds are compared at storage precision so a stored 0.35 counts as 0.35.
  const float flo = static_cast<float>(lo), fhi = static_cast<float>(hi);
  for (std::size_t i = 0; i < saliency.size(); ++i) {
    const float s = saliency.data[i];
    if (s < flo) {
      m.background.data[i] = 1;
    } else if (s > fhi) {
      m.high.data[i] = 1;
    } else {
      m.uncertain.data[i] = 1;
    }
  }
  return m;
}

std::vector<Region> connected_components(const Mask& mask, Connectivity connectivity) {
  static constexpr int kDr[8] = {-1, 1, 0, 0, -1, -1, 1, 1};
  static constexpr int kDc[8] = {0, 0, -1, 1, -1, 1, -1, 1};
  const int neighbours = connectivity == Connectivity::four ? 4 : 8;
  std::vector<std::uint8_t> seen(mask.size(), 0);
  std::vector<Region> regions;
  std::queue<Point> frontier;
  for (int r = 0; r < mask.rows; ++r) {
    for (int c = 0; c < mask.cols; ++c) {
      const std::size_t idx = static_cast<std::size_t>(r) * mask.cols + c;
      if (!mask.data[idx] || seen[idx]) continue;
      Region region;
      seen[idx] = 1;
      frontier.push({r, c});
      while (!frontier.empty()) {
        const Point p = frontier.front();
        frontier.pop();
        region.pixels.push_back(p);
        for (int k = 0; k < neighbours; ++k) {
          const int nr = p.row + kDr[k], nc = p.col + kDc[k];
          if (nr < 0 || nr >= mask.rows || nc < 0 || nc >= mask.cols) continue;
          const std::size_t nidx = static_cast<std::size_t>(nr) * mask.cols + nc;
          if (mask.data[nidx] && !seen[nidx]) {
            seen[nidx] = 1;
            frontier.push({nr, nc});
          }
        }
      }
      std::sort(region.pixels.begin(), region.pixels.end());
      region.weight = centrality_weight(region, mask.rows, mask.cols);
      regions.push_back(std::move(region));
    }
  }
  return regions;
}

double centrality_weight(const Region& region, int height, int width) {
  const double cr = height / 2.0, cc = width / 2.0;
  double sum = 0.0;
  for (const Point& p : region.pixels) sum += std::sqrt((p.row - cr) * (p.row - cr) + (p.col - cc) * (p.col - cc));
  return sum;
}

double scaled_alpha(double alpha, int rows, int cols) {
  return alpha * (static_cast<double>(rows) * cols) / (static_cast<double>(kImageSize) * kImageSize);
}

int select_foreground(const std::vector<Region>& survivors, const UmConfig& config) {
  int best = -1;
  double best_key = 0.0;
  for (int i = 0; i < static_cast<int>(survivors.size()); ++i) {
    const Region& r = survivors[i];
    const double key = config.weight_mode == WeightMode::mean ? r.weight / static_cast<double>(r.size()) : r.weight;
    if (best < 0) {
      best = i;
      best_key = key;
      continue;
    }
    const Region& b = survivors[best];
    const bool better_key = config.comparator == Comparator::min ? key < best_key : key > best_key;
    bool take = better_key;
    if (key == best_key) take = r.size() > b.size() || (r.size() == b.size() && r.first() < b.first());
    if (take) {
      best = i;
      best_key = key;
    }
  }
  return best;
}

TriLabel make_pseudo_label(const FloatMap& saliency, const UmConfig& config) {
  const TriMasks masks = tri_threshold(saliency, config.lo, config.hi);
  TriLabel label{FloatMap(saliency.rows, saliency.cols, 0.0f), false};
  for (std::size_t i = 0; i < saliency.size(); ++i)
    if (masks.uncertain.data[i]) label.values.data[i] = 0.5f;

  const double min_size = scaled_alpha(config.alpha, saliency.rows, saliency.cols);
  std::vector<Region> survivors;
  for (auto& r : connected_components(masks.high, config.connectivity)) {
    if (static_cast<double>(r.size()) >= min_size) survivors.push_back(std::move(r));
  }
  const int chosen = select_foreground(survivors, config);
  if (chosen < 0) {
    label.excluded = true;
    return label;
  }
  for (const Region& r : survivors)
    for (const Point& p : r.pixels) label.values.at(p.row, p.col) = 0.5f;

  const Region& fg = survivors[chosen];
  const double mean_dist = fg.weight / static_cast<double>(fg.size());
  const double half_diag = std::sqrt(static_cast<double>(saliency.rows) * saliency.rows +
                                     static_cast<double>(saliency.cols) * saliency.cols) / 2.0;
  if (mean_dist > config.far_fraction * half_diag) {
    label.excluded = true;
    return label;
  }
  for (const Point& p : fg.pixels) label.values.at(p.row, p.col) = 1.0f;
  return label;
}

void write_trilabel_png(const std::filesystem::path& path, const TriLabel& label) {
  Grid<std::uint8_t> g(label.values.rows, label.values.cols);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const float v = label.values.data[i];
    g.data[i] = v == 0.0f ? 0 : (v == 1.0f ? 255 : 128);
  }
  write_gray_png(path, g);
}

TriLabel read_trilabel_png(const std::filesystem::path& path) {
  const auto g = read_gray(path);
  TriLabel label{FloatMap(g.rows, g.cols), false};
  for (std::size_t i = 0; i < g.size(); ++i) {
    switch (g.data[i]) {
      case 0: label.values.data[i] = 0.0f; break;
      case 128: label.values.data[i] = 0.5f; break;
      case 255: label.values.data[i] = 1.0f; break;
      default: throw DecodeError(path.filename().string(), "tri-label pixel value " + std::to_string(g.data[i]));
    }
  }
  return label;
}

}  // namespace uslseg::um
