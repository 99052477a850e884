#include "uslseg/nn/resnet.hpp"

#include "uslseg/errors.hpp"

namespace uslseg::nn {

Bottleneck::Bottleneck(const std::string& name, int in_ch, int width, int stride, Rng& rng)
    : conv1_(name + ".conv1", in_ch, width, 1, 1, 0, false, rng),
      conv2_(name + ".conv2", width, width, 3, stride, 1, false, rng),
      conv3_(name + ".conv3", width, width * 4, 1, 1, 0, false, rng),
      bn1_(name + ".bn1", width),
      bn2_(name + ".bn2", width),
      bn3_(name + ".bn3", width * 4) {
  if (stride != 1 || in_ch != width * 4) {
    has_down_ = true;
    down_conv_ = Conv2d(name + ".down", in_ch, width * 4, 1, stride, 0, false, rng);
    down_bn_ = BatchNorm2d(name + ".down_bn", width * 4);
  }
}

void Bottleneck::collect_params(std::vector<Param*>& out) {
  conv1_.collect_params(out);
  bn1_.collect_params(out);
  conv2_.collect_params(out);
  bn2_.collect_params(out);
  conv3_.collect_params(out);
  bn3_.collect_params(out);
  if (has_down_) {
    down_conv_.collect_params(out);
    down_bn_.collect_params(out);
  }
}

void Bottleneck::collect_buffers(std::vector<Buffer>& out) {
  bn1_.collect_buffers(out);
  bn2_.collect_buffers(out);
  bn3_.collect_buffers(out);
  if (has_down_) down_bn_.collect_buffers(out);
}

Tensor Bottleneck::forward(const Tensor& x, bool train) {
  Tensor h = relu1_.forward(bn1_.forward(conv1_.forward(x), train));
  h = relu2_.forward(bn2_.forward(conv2_.forward(h), train));
  h = bn3_.forward(conv3_.forward(h), train);
  if (has_down_) {
    add_inplace(h, down_bn_.forward(down_conv_.forward(x), train));
  } else {
    add_inplace(h, x);
  }
  return relu_out_.forward(h);
}

Tensor Bottleneck::backward(const Tensor& grad_out) {
  const Tensor g = relu_out_.backward(grad_out);
  Tensor dx = has_down_ ? down_conv_.backward(down_bn_.backward(g)) : g;
  Tensor h = conv3_.backward(bn3_.backward(g));
  h = conv2_.backward(bn2_.backward(relu2_.backward(h)));
  h = conv1_.backward(bn1_.backward(relu1_.backward(h)));
  add_inplace(dx, h);
  return dx;
}

ResNet::ResNet(const BackboneConfig& config, Rng& rng, const std::string& prefix)
    : config_(config),
      stem_conv_(prefix + ".stem", 3, config.base_width, 7, 2, 3, false, rng),
      stem_bn_(prefix + ".stem_bn", config.base_width) {
  if (config.last_stage < 2 || config.last_stage > 5) throw ShapeError("backbone last_stage must be in [2,5]");
  if (config.base_width <= 0) throw ShapeError("backbone base_width must be positive");
  int in_ch = config.base_width;
  for (int stage = 2; stage <= config.last_stage; ++stage) {
    const int width = config.base_width << (stage - 2);
    int stride = stage == 2 ? 1 : 2;
    if (stage == 5) stride = config.final_stage_stride;
    auto& blocks = stages_.emplace_back();
    for (int b = 0; b < config.blocks[stage - 2]; ++b) {
      const std::string name = prefix + ".stage" + std::to_string(stage) + "." + std::to_string(b);
      blocks.push_back(std::make_unique<Bottleneck>(name, in_ch, width, b == 0 ? stride : 1, rng));
      in_ch = width * 4;
    }
  }
}

void ResNet::collect_params(std::vector<Param*>& out) {
  stem_conv_.collect_params(out);
  stem_bn_.collect_params(out);
  for (auto& blocks : stages_)
    for (auto& b : blocks) b->collect_params(out);
}

void ResNet::collect_buffers(std::vector<Buffer>& out) {
  stem_bn_.collect_buffers(out);
  for (auto& blocks : stages_)
    for (auto& b : blocks) b->collect_buffers(out);
}

std::vector<Tensor> ResNet::forward(const Tensor& x, bool train) {
  if (x.c() != 3) throw ShapeError("backbone expects 3-channel input, got " + x.shape_str());
  Tensor h = pool_.forward(stem_relu_.forward(stem_bn_.forward(stem_conv_.forward(x), train)));
  std::vector<Tensor> outs;
  for (auto& blocks : stages_) {
    for (auto& b : blocks) h = b->forward(h, train);
    outs.push_back(h);
  }
  return outs;
}

void ResNet::backward(const std::vector<Tensor>& grads) {
  if (grads.size() != stages_.size()) throw ShapeError("backbone backward: expected one gradient per stage");
  Tensor g;
  for (int s = static_cast<int>(stages_.size()) - 1; s >= 0; --s) {
    if (!grads[s].empty()) {
      if (g.empty()) {
        g = grads[s];
      } else {
        add_inplace(g, grads[s]);
      }
    }
    if (g.empty()) continue;  // nothing downstream of this stage was used
    auto& blocks = stages_[s];
    for (int b = static_cast<int>(blocks.size()) - 1; b >= 0; --b) g = blocks[b]->backward(g);
  }
  if (g.empty()) return;
  g = pool_.backward(g);
  stem_conv_.backward(stem_bn_.backward(stem_relu_.backward(g)), false);
}

}  // namespace uslseg::nn
