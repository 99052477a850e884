#include "uslseg/tensor.hpp"

#include <algorithm>

#include "uslseg/errors.hpp"

namespace uslseg {

std::string Tensor::shape_str() const {
  return std::to_string(shape[0]) + "x" + std::to_string(shape[1]) + "x" + std::to_string(shape[2]) + "x" +
         std::to_string(shape[3]);
}

Tensor concat_channels(std::span<const Tensor* const> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const Tensor& first = *parts.front();
  int channels = 0;
  for (const Tensor* p : parts) {
    if (p->n() != first.n() || p->h() != first.h() || p->w() != first.w())
      throw ShapeError("concat_channels: mismatched shapes " + first.shape_str() + " vs " + p->shape_str());
    channels += p->c();
  }
  Tensor out(first.n(), channels, first.h(), first.w());
  for (int i = 0; i < first.n(); ++i) {
    float* dst = out.sample(i);
    for (const Tensor* p : parts) {
      dst = std::copy_n(p->sample(i), p->sample_size(), dst);
    }
  }
  return out;
}

std::vector<Tensor> split_channels(const Tensor& t, std::span<const int> widths) {
  int total = 0;
  for (int w : widths) total += w;
  if (total != t.c()) throw ShapeError("split_channels: widths do not sum to " + std::to_string(t.c()));
  std::vector<Tensor> out;
  out.reserve(widths.size());
  for (int w : widths) out.emplace_back(t.n(), w, t.h(), t.w());
  for (int i = 0; i < t.n(); ++i) {
    const float* src = t.sample(i);
    for (auto& piece : out) {
      std::copy_n(src, piece.sample_size(), piece.sample(i));
      src += piece.sample_size();
    }
  }
  return out;
}

Tensor stack(std::span<const Tensor> samples) {
  if (samples.empty()) throw ShapeError("stack: no samples");
  const auto& s0 = samples.front();
  Tensor out(static_cast<int>(samples.size()) * s0.n(), s0.c(), s0.h(), s0.w());
  float* dst = out.data.data();
  for (const auto& s : samples) {
    if (s.c() != s0.c() || s.h() != s0.h() || s.w() != s0.w())
      throw ShapeError("stack: mismatched shapes " + s0.shape_str() + " vs " + s.shape_str());
    dst = std::copy(s.data.begin(), s.data.end(), dst);
  }
  return out;
}

Tensor take_sample(const Tensor& t, int i) {
  Tensor out(1, t.c(), t.h(), t.w());
  std::copy_n(t.sample(i), t.sample_size(), out.data.data());
  return out;
}

}  // namespace uslseg
