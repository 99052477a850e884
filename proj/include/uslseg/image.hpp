#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "uslseg/tensor.hpp"

namespace uslseg {

inline constexpr int kImageSize = 224;

// Row-major 2-D grid used for masks, saliency maps, labels and predictions.
template <class T>
struct Grid {
  int rows = 0;
  int cols = 0;
  std::vector<T> data;

  Grid() = default;
  Grid(int r, int c, T fill = T{}) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}

  T& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  const T& at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
  std::size_t size() const { return data.size(); }
  bool same_shape(const Grid& o) const { return rows == o.rows && cols == o.cols; }
  bool operator==(const Grid&) const = default;
};

using Mask = Grid<std::uint8_t>;  // values {0,1}
using FloatMap = Grid<float>;

// RGB image stored as a 1x3xHxW tensor with values in [0,1].
Tensor read_rgb(const std::filesystem::path& path);
void write_rgb_png(const std::filesystem::path& path, const Tensor& image);

// Grayscale mask; any nonzero value counts as foreground.
Mask read_mask(const std::filesystem::path& path);
void write_gray_png(const std::filesystem::path& path, const Grid<std::uint8_t>& gray);
Grid<std::uint8_t> read_gray(const std::filesystem::path& path);

// Mask encoded as {0,255}.
void write_mask_png(const std::filesystem::path& path, const Mask& mask);

Tensor resize_bilinear(const Tensor& image, int height, int width);
Mask resize_nearest(const Mask& mask, int rows, int cols);
FloatMap resize_bilinear(const FloatMap& map, int rows, int cols);

// Rounds every value to the nearest multiple of 1/255.
void quantize_8bit(Tensor& image);

FloatMap tensor_plane(const Tensor& t, int sample = 0, int channel = 0);
Tensor map_to_tensor(const FloatMap& map);

}  // namespace uslseg
