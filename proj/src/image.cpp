#include "uslseg/image.hpp"

#include <algorithm>
#include <cmath>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "uslseg/errors.hpp"
#include "uslseg/nn/layers.hpp"

namespace uslseg {

namespace fs = std::filesystem;

namespace {

void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

std::uint8_t to_byte(float v) {
  const float s = std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f);
  return static_cast<std::uint8_t>(s);
}

}  // namespace

Tensor read_rgb(const fs::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw DecodeError(path.filename().string(), "unreadable or unsupported image");
  Tensor out(1, 3, bgr.rows, bgr.cols);
  for (int y = 0; y < bgr.rows; ++y) {
    const auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < bgr.cols; ++x) {
      out.at(0, 0, y, x) = row[x][2] / 255.0f;
      out.at(0, 1, y, x) = row[x][1] / 255.0f;
      out.at(0, 2, y, x) = row[x][0] / 255.0f;
    }
  }
  return out;
}

void write_rgb_png(const fs::path& path, const Tensor& image) {
  if (image.n() != 1 || image.c() != 3) throw ShapeError("write_rgb_png expects 1x3xHxW, got " + image.shape_str());
  cv::Mat bgr(image.h(), image.w(), CV_8UC3);
  for (int y = 0; y < image.h(); ++y) {
    auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < image.w(); ++x) {
      row[x][2] = to_byte(image.at(0, 0, y, x));
      row[x][1] = to_byte(image.at(0, 1, y, x));
      row[x][0] = to_byte(image.at(0, 2, y, x));
    }
  }
  ensure_parent(path);
  if (!cv::imwrite(path.string(), bgr)) throw Error("cannot write " + path.string());
}

Grid<std::uint8_t> read_gray(const fs::path& path) {
  cv::Mat g = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (g.empty()) throw DecodeError(path.filename().string(), "unreadable or unsupported image");
  Grid<std::uint8_t> out(g.rows, g.cols);
  for (int y = 0; y < g.rows; ++y) std::copy_n(g.ptr<std::uint8_t>(y), g.cols, &out.at(y, 0));
  return out;
}

Mask read_mask(const fs::path& path) {
  Mask m = read_gray(path);
  for (auto& v : m.data) v = v != 0 ? 1 : 0;
  return m;
}

void write_gray_png(const fs::path& path, const Grid<std::uint8_t>& gray) {
  cv::Mat g(gray.rows, gray.cols, CV_8UC1);
  for (int y = 0; y < gray.rows; ++y) std::copy_n(&gray.at(y, 0), gray.cols, g.ptr<std::uint8_t>(y));
  ensure_parent(path);
  if (!cv::imwrite(path.string(), g)) throw Error("cannot write " + path.string());
}

void write_mask_png(const fs::path& path, const Mask& mask) {
  Grid<std::uint8_t> g(mask.rows, mask.cols);
  for (std::size_t i = 0; i < mask.size(); ++i) g.data[i] = mask.data[i] ? 255 : 0;
  write_gray_png(path, g);
}

Tensor resize_bilinear(const Tensor& image, int height, int width) {
  if (image.h() == height && image.w() == width) return image;
  return nn::upsample_bilinear(image, height, width);
}

FloatMap resize_bilinear(const FloatMap& map, int rows, int cols) {
  if (map.rows == rows && map.cols == cols) return map;
  return tensor_plane(nn::upsample_bilinear(map_to_tensor(map), rows, cols));
}

Mask resize_nearest(const Mask& mask, int rows, int cols) {
  if (mask.rows == rows && mask.cols == cols) return mask;
  Mask out(rows, cols);
  const double sy = static_cast<double>(mask.rows) / rows;
  const double sx = static_cast<double>(mask.cols) / cols;
  for (int r = 0; r < rows; ++r) {
    const int src_r = std::min(static_cast<int>(std::floor((r + 0.5) * sy)), mask.rows - 1);
    for (int c = 0; c < cols; ++c) {
      const int src_c = std::min(static_cast<int>(std::floor((c + 0.5) * sx)), mask.cols - 1);
      out.at(r, c) = mask.at(src_r, src_c);
    }
  }
  return out;
}

void quantize_8bit(Tensor& image) {
  for (auto& v : image.data) v = to_byte(v) / 255.0f;
}

FloatMap tensor_plane(const Tensor& t, int sample, int channel) {
  FloatMap m(t.h(), t.w());
  std::copy_n(t.channel(sample, channel), t.plane(), m.data.data());
  return m;
}

Tensor map_to_tensor(const FloatMap& map) {
  Tensor t(1, 1, map.rows, map.cols);
  std::copy(map.data.begin(), map.data.end(), t.data.begin());
  return t;
}

}  // namespace uslseg
