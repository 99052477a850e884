#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "uslseg/dataset.hpp"
#include "uslseg/nn/optim.hpp"
#include "uslseg/nn/resnet.hpp"

namespace uslseg::contrastive {

struct EncoderConfig {
  nn::BackboneConfig backbone;         // final_stage_stride defaults to 1
  std::vector<int> feature_stages{4, 5};

  // Channel width D of the emitted feature map.
  int feature_channels() const;
  bool operator==(const EncoderConfig&) const = default;
};

struct FeatureMap {
  Tensor values;  // 1 x D x h' x w'
  std::string method;
  std::vector<int> stages;

  int channels() const { return values.c(); }
};

class Encoder {
 public:
  Encoder(const EncoderConfig& config, std::uint64_t seed);

  // Eval-mode activations of the configured stages, channel-concatenated.
  // Throws ShapeError unless the image is 1x3x224x224.
  FeatureMap encode(const Tensor& image, const std::string& method = "");

  nn::ResNet& backbone() { return *backbone_; }
  const EncoderConfig& config() const { return config_; }

 private:
  EncoderConfig config_;
  std::unique_ptr<nn::ResNet> backbone_;
};

// -------------------------------------------------------------- InfoNCE

struct InfoNceResult {
  double loss = 0.0;
  std::vector<float> grad_q;
  std::vector<float> grad_positive;
  std::vector<std::vector<float>> grad_negatives;
};

// -log( exp(q.k+/tau) / (exp(q.k+/tau) + sum_i exp(q.k_i/tau)) ) over raw dot
// products. Throws DegenerateInput when tau <= 0 or there are no negatives.
double info_nce(std::span<const float> q, std::span<const float> positive,
                const std::vector<std::span<const float>>& negatives, double tau);

// Same loss plus gradients with respect to the inputs. grad_negatives stays
// empty when negatives_grad is false (queue keys receive no gradient).
InfoNceResult info_nce_with_grad(std::span<const float> q, std::span<const float> positive,
                                 const std::vector<std::span<const float>>& negatives, double tau,
                                 bool negatives_grad = true);

// Loss from precomputed similarities (positive first); used by the trainers.
double info_nce_from_logits(std::span<const double> similarities, double tau);

// -------------------------------------------------------------- key queue

class KeyQueue {
 public:
  explicit KeyQueue(std::size_t capacity) : capacity_(capacity) {}

  void push(std::vector<float> key);
  std::size_t size() const { return keys_.size(); }
  std::size_t capacity() const { return capacity_; }
  const std::deque<std::vector<float>>& keys() const { return keys_; }

 private:
  std::size_t capacity_;
  std::deque<std::vector<float>> keys_;  // front = oldest
};

// -------------------------------------------------------------- projection heads

enum class HeadKind { fc, mlp };
std::string to_string(HeadKind h);
HeadKind head_for(ContrastiveMethod method);

class ProjectionHead : public nn::Module {
 public:
  ProjectionHead(HeadKind kind, int in_features, int out_features, nn::Rng& rng, const std::string& prefix = "head");

  Tensor forward(const Tensor& pooled);
  Tensor backward(const Tensor& grad_out);
  void collect_params(std::vector<nn::Param*>& out) override;
  HeadKind kind() const { return kind_; }

 private:
  HeadKind kind_;
  nn::Linear fc1_, fc2_;
  nn::ReLU relu_;
};

// -------------------------------------------------------------- state / momentum

struct ContrastiveOptions {
  int epochs = 200;
  int batch_size = 256;
  double tau = 0.07;
  std::size_t queue_capacity = 4096;
  double momentum = 0.999;
  int embedding_dim = 128;
  double base_lr = 0.03;  // scaled by batch/256
  double sgd_momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> init_checkpoint;
};

struct ContrastiveState {
  ContrastiveState(ContrastiveMethod method, const EncoderConfig& config, const ContrastiveOptions& options);

  ContrastiveMethod method;
  double tau;
  double momentum;
  Encoder query;
  std::unique_ptr<Encoder> key;  // moco variants only
  std::unique_ptr<ProjectionHead> query_head;
  std::unique_ptr<ProjectionHead> key_head;
  std::optional<KeyQueue> queue;  // moco variants only
};

// key <- m * key + (1 - m) * query for every parameter.
void momentum_update(std::span<float> key, std::span<const float> query, double m);

// Applies the update to the key encoder and key head. Throws InvalidMethod for simclr.
void momentum_update(ContrastiveState& state);

// -------------------------------------------------------------- training

struct ContrastiveCheckpoint {
  std::filesystem::path weights;   // backbone + head blob
  std::filesystem::path metadata;  // JSON sidecar
  ContrastiveMethod method = ContrastiveMethod::moco_v2;
  EncoderConfig encoder;
  std::vector<double> loss_trace;
};

ContrastiveCheckpoint train_contrastive(ContrastiveMethod method, const std::vector<ImageSample>& dataset,
                                        const EncoderConfig& config, const ContrastiveOptions& options,
                                        const std::filesystem::path& out_dir);

ContrastiveCheckpoint read_checkpoint(const std::filesystem::path& metadata);

// Builds an encoder with the checkpoint's backbone weights.
Encoder load_encoder(const ContrastiveCheckpoint& checkpoint);

// -------------------------------------------------------------- fusion

// Channel concatenation in the fixed order simclr, moco_v1, moco_v2 (untagged
// maps keep their relative order after the tagged ones).
FeatureMap fuse_features(const std::vector<FeatureMap>& maps);

std::string encoder_to_json(const EncoderConfig& config);

}  // namespace uslseg::contrastive
