#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace uslseg {

// Dense float tensor in NCHW layout. Vectors are N x C x 1 x 1.
struct Tensor {
  std::array<int, 4> shape{0, 0, 0, 0};
  std::vector<float> data;

  Tensor() = default;
  Tensor(int n, int c, int h, int w, float fill = 0.0f)
      : shape{n, c, h, w}, data(static_cast<std::size_t>(n) * c * h * w, fill) {}

  int n() const { return shape[0]; }
  int c() const { return shape[1]; }
  int h() const { return shape[2]; }
  int w() const { return shape[3]; }
  std::size_t size() const { return data.size(); }
  std::size_t plane() const { return static_cast<std::size_t>(shape[2]) * shape[3]; }
  std::size_t sample_size() const { return plane() * shape[1]; }
  bool empty() const { return data.empty(); }

  float* sample(int i) { return data.data() + sample_size() * i; }
  const float* sample(int i) const { return data.data() + sample_size() * i; }
  float* channel(int i, int ch) { return sample(i) + plane() * ch; }
  const float* channel(int i, int ch) const { return sample(i) + plane() * ch; }

  float& at(int i, int ch, int y, int x) { return channel(i, ch)[static_cast<std::size_t>(y) * shape[3] + x]; }
  float at(int i, int ch, int y, int x) const { return channel(i, ch)[static_cast<std::size_t>(y) * shape[3] + x]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  std::string shape_str() const;
};

// Channel concatenation of tensors that share N, H and W.
Tensor concat_channels(std::span<const Tensor* const> parts);

// Inverse of concat_channels for gradients: splits `t` into pieces of the given widths.
std::vector<Tensor> split_channels(const Tensor& t, std::span<const int> widths);

// Stacks single-sample tensors into one batch.
Tensor stack(std::span<const Tensor> samples);

// Extracts sample i as a 1-sample tensor.
Tensor take_sample(const Tensor& t, int i);

}  // namespace uslseg
