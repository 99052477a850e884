#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "uslseg/nn/layers.hpp"

namespace uslseg::nn {

// ResNet-50 style bottleneck layout. Stages are numbered the way the
// segmentation literature counts them: stage 1 is the 7x7 stem plus max-pool,
// stages 2..5 are the residual stages with widths 4w, 8w, 16w, 32w.
struct BackboneConfig {
  int base_width = 64;
  std::array<int, 4> blocks{3, 4, 6, 3};
  int final_stage_stride = 1;
  int last_stage = 5;

  int stage_channels(int stage) const { return base_width * 4 << (stage - 2); }
  bool operator==(const BackboneConfig&) const = default;
};

class Bottleneck : public Module {
 public:
  Bottleneck(const std::string& name, int in_ch, int width, int stride, Rng& rng);

  Tensor forward(const Tensor& x, bool train);
  Tensor backward(const Tensor& grad_out);
  void collect_params(std::vector<Param*>& out) override;
  void collect_buffers(std::vector<Buffer>& out) override;

 private:
  Conv2d conv1_, conv2_, conv3_;
  BatchNorm2d bn1_, bn2_, bn3_;
  ReLU relu1_, relu2_, relu_out_;
  bool has_down_ = false;
  Conv2d down_conv_;
  BatchNorm2d down_bn_;
};

class ResNet : public Module {
 public:
  ResNet(const BackboneConfig& config, Rng& rng, const std::string& prefix = "backbone");

  // Outputs of stages 2..last_stage; element i holds stage i + 2.
  std::vector<Tensor> forward(const Tensor& x, bool train);

  // grads[i] is the gradient w.r.t. forward()[i]; empty tensors count as zero.
  // Only parameter gradients are produced; the image gradient is not needed.
  void backward(const std::vector<Tensor>& grads);

  void collect_params(std::vector<Param*>& out) override;
  void collect_buffers(std::vector<Buffer>& out) override;

  const BackboneConfig& config() const { return config_; }

 private:
  BackboneConfig config_;
  Conv2d stem_conv_;
  BatchNorm2d stem_bn_;
  ReLU stem_relu_;
  MaxPool2d pool_;
  std::vector<std::vector<std::unique_ptr<Bottleneck>>> stages_;
};

}  // namespace uslseg::nn
