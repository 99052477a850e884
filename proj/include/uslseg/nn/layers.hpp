#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "uslseg/tensor.hpp"

namespace uslseg::nn {

using Rng = std::mt19937_64;

struct Param {
  std::string name;
  std::vector<float> value;
  std::vector<float> grad;
  bool decay = true;

  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0f); }
};

struct Buffer {
  std::string name;
  std::vector<float>* values;
};

// Parameter owner. Layers cache what they need from the last forward call, so a
// layer instance must not be shared between two interleaved forward passes.
class Module {
 public:
  virtual ~Module() = default;
  virtual void collect_params(std::vector<Param*>& out) = 0;
  virtual void collect_buffers(std::vector<Buffer>& /*out*/) {}

  std::vector<Param*> params();
  std::vector<Buffer> buffers();
  void zero_grad();
};

class Conv2d : public Module {
 public:
  Conv2d() = default;
  Conv2d(std::string name, int in_ch, int out_ch, int kernel, int stride, int pad, bool bias, Rng& rng);

  Tensor forward(const Tensor& x);
  // With input_grad=false only parameter gradients are accumulated and an empty tensor is returned.
  Tensor backward(const Tensor& grad_out, bool input_grad = true);
  void collect_params(std::vector<Param*>& out) override;

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  int out_size(int in_size) const { return (in_size + 2 * pad_ - k_) / stride_ + 1; }
  Param& weight() { return weight_; }
  Param& bias() { return bias_; }

 private:
  int in_ = 0, out_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
  bool has_bias_ = false;
  Param weight_;  // out x (in*k*k), row-major
  Param bias_;
  Tensor input_;
};

class BatchNorm2d : public Module {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(std::string name, int channels);

  Tensor forward(const Tensor& x, bool train);
  Tensor backward(const Tensor& grad_out);
  void collect_params(std::vector<Param*>& out) override;
  void collect_buffers(std::vector<Buffer>& out) override;

  Param& gamma() { return gamma_; }

 private:
  int channels_ = 0;
  float momentum_ = 0.1f;
  float eps_ = 1e-5f;
  std::string name_;
  Param gamma_, beta_;
  std::vector<float> running_mean_, running_var_;
  // cached from the last training-mode forward
  Tensor xhat_;
  std::vector<float> inv_std_;
  bool last_train_ = false;
};

class ReLU {
 public:
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out) const;

 private:
  Tensor out_;
};

class MaxPool2d {
 public:
  MaxPool2d(int kernel = 3, int stride = 2, int pad = 1) : k_(kernel), stride_(stride), pad_(pad) {}
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out) const;

 private:
  int k_, stride_, pad_;
  std::array<int, 4> in_shape_{};
  std::vector<std::int32_t> argmax_;
};

// Fully connected layer on N x C x 1 x 1 tensors.
class Linear : public Module {
 public:
  Linear() = default;
  Linear(std::string name, int in_features, int out_features, bool bias, Rng& rng);

  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out);
  void collect_params(std::vector<Param*>& out) override;

 private:
  int in_ = 0, out_ = 0;
  bool has_bias_ = false;
  Param weight_, bias_;
  Tensor input_;
};

Tensor global_avg_pool(const Tensor& x);
Tensor global_avg_pool_backward(const Tensor& grad_out, int h, int w);

// Bilinear resampling with half-pixel centres (sample i of the output reads the
// input at (i + 0.5) * in / out - 0.5, clamped at the low edge).
Tensor upsample_bilinear(const Tensor& x, int out_h, int out_w);
Tensor upsample_bilinear_backward(const Tensor& grad_out, int in_h, int in_w);

float sigmoid(float z);
Tensor sigmoid(const Tensor& z);

void add_inplace(Tensor& dst, const Tensor& src);

// Kaiming-normal (fan_out, ReLU gain) used for convolutions.
void kaiming_normal(std::vector<float>& w, int fan_out, Rng& rng);

}  // namespace uslseg::nn
