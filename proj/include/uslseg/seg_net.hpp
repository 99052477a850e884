#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "uslseg/dataset.hpp"
#include "uslseg/nn/optim.hpp"
#include "uslseg/nn/resnet.hpp"
#include "uslseg/uncertainty.hpp"

namespace uslseg::seg {

// Probability map p in [0,1], same grid as the image.
using Prediction = FloatMap;

struct SegConfig {
  nn::BackboneConfig backbone{64, {3, 4, 6, 3}, 1, 4};
  int merge_channels = 256;
  bool operator==(const SegConfig&) const = default;
};

// Activation shapes recorded by the last forward call (NCHW).
struct ForwardShapes {
  std::array<int, 4> stage2{}, stage3{}, stage4{};
  std::array<int, 4> merged{};  // after upsampling and merging the three stages
  std::array<int, 4> logits{};  // one-channel map at merge resolution
  std::array<int, 4> output{};  // full-resolution probabilities
};

// Residual encoder (stages 2..4) with a decoder that upsamples every stage to
// 1/4 of the input, merges them into `merge_channels` maps, projects to one
// channel and upsamples bilinearly to the input size.
class SegModel : public nn::Module {
 public:
  SegModel(const SegConfig& config, std::uint64_t seed);

  // N x 3 x 224 x 224 images -> N x 1 x 224 x 224 pre-sigmoid scores.
  Tensor forward_logits(const Tensor& images, bool train);
  // Same, squashed to [0,1]. Throws ShapeError for anything but 224x224 RGB.
  Tensor forward(const Tensor& images, bool train = false);
  // Gradient with respect to the full-resolution logits of the last forward.
  void backward(const Tensor& grad_logits);

  const ForwardShapes& shapes() const { return shapes_; }
  const SegConfig& config() const { return config_; }
  nn::ResNet& encoder() { return encoder_; }

  // Copies backbone weights from a contrastive checkpoint blob.
  void load_encoder(const std::filesystem::path& weights);

  void collect_params(std::vector<nn::Param*>& out) override;
  void collect_buffers(std::vector<nn::Buffer>& out) override;

 private:
  SegConfig config_;
  nn::Rng rng_;
  nn::ResNet encoder_;
  std::array<nn::Conv2d, 3> lateral_;
  nn::BatchNorm2d merge_bn_;
  nn::ReLU merge_relu_;
  nn::Conv2d classifier_;
  ForwardShapes shapes_;
  std::array<std::array<int, 2>, 3> stage_hw_{};
  int merge_h_ = 0, merge_w_ = 0;
};

// Single-image prediction in eval mode.
Prediction predict(SegModel& model, const Tensor& image);
// Eval-mode predictions for a list of images, batched.
std::vector<Prediction> predict_all(SegModel& model, const std::vector<ImageSample>& samples, int batch_size = 8);

// ---------------------------------------------------------------- loss

// h*w - 4 * sum (1 - l) l, floored at a small guard.
double usl_denominator(const FloatMap& label);

// Masked binary cross-entropy: sum (l - 0.5)^2 BCE(l, p) / denominator, with p
// clamped to [1e-7, 1 - 1e-7]. Returns 0 when the label has no certain pixels.
double usl_loss(const Prediction& p, const FloatMap& label);
// Derivative of usl_loss with respect to p.
FloatMap usl_loss_grad(const Prediction& p, const FloatMap& label);
// Loss evaluated on logits z; optionally writes dL/dz.
double usl_loss_logits(const FloatMap& z, const FloatMap& label, FloatMap* grad_z = nullptr);

// ---------------------------------------------------------------- inference

// p >= threshold. Throws InvalidThreshold unless 0 < threshold < 1.
Mask infer(const Prediction& p, double threshold = 0.5);
Mask infer(SegModel& model, const Tensor& image, double threshold = 0.5);

// Pixels labelled certain foreground.
Mask label_to_mask(const um::TriLabel& label);

// ---------------------------------------------------------------- training

struct SegTrainOptions {
  int epochs = 300;
  int batch_size = 8;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double poly_power = 0.9;
  bool flip = true;
  std::uint64_t seed = 0;
};

struct TrainReport {
  std::vector<double> loss_trace;
  std::vector<Prediction> predictions;  // every sample, excluded ones included
  int excluded_count = 0;
};

// Trains on the non-excluded samples and predicts every sample afterwards.
// Throws NoTrainableSamples when every label is excluded.
TrainReport train_iteration(SegModel& model, const std::vector<ImageSample>& samples,
                            const std::vector<um::TriLabel>& labels, const SegTrainOptions& options);

struct RefinementSchedule {
  int n_iterations = 5;
  int epochs_per_iteration = 300;
  int export_iteration = 2;
  void validate() const;  // ConfigError unless 0 <= export <= n
};

struct IterationRecord {
  int iteration = 0;
  int epochs = 0;
  std::vector<double> loss_trace;
  int excluded_count = 0;
  bool resumed = false;
  std::filesystem::path checkpoint;
  std::filesystem::path metadata;
};

// Called after every iteration with the labels it trained on and the
// predictions of the resulting model.
using IterationCallback = std::function<void(const IterationRecord&, const std::vector<um::TriLabel>& labels,
                                             const std::vector<Prediction>& predictions)>;

struct RefineResult {
  std::vector<IterationRecord> iterations;  // 0..n
  int exported = 0;
  std::vector<Prediction> predictions;   // of the exported iteration
  std::vector<um::TriLabel> next_labels;  // labels derived from the last iteration
};

// Iteration 0 trains on `initial`; iteration k >= 1 trains on labels derived
// from the predictions of iteration k-1. Each iteration is checkpointed under
// out_dir/iter_<k>; a checkpoint whose metadata matches `fingerprint`, the
// epoch count and seed is loaded instead of retrained. The model ends up with
// the exported iteration's weights.
RefineResult refine(SegModel& model, const std::vector<ImageSample>& samples, const std::vector<um::TriLabel>& initial,
                    const RefinementSchedule& schedule, const SegTrainOptions& options, const um::UmConfig& um_config,
                    const std::filesystem::path& out_dir, const std::string& fingerprint = "",
                    const IterationCallback& on_iteration = {});

}  // namespace uslseg::seg
