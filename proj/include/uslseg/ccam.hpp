#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "uslseg/image.hpp"
#include "uslseg/nn/layers.hpp"
#include "uslseg/nn/optim.hpp"

namespace uslseg::ccam {

// Class-agnostic activation map on the feature grid, values in [0,1].
struct ActivationMap {
  FloatMap values;
};

// 224x224 saliency in [0,255].
struct Cam {
  FloatMap values;
};

struct ClassVectors {
  std::vector<float> fg;
  std::vector<float> bg;
};

ActivationMap complement(const ActivationMap& m);

// Bilinear upsample to 224x224 (half-pixel centres), scaled by 255.
Cam to_cam(const ActivationMap& m);

// Value of the same bilinear interpolant at a continuous output coordinate
// (pixel i spans [i, i+1), so the geometric centre of a 224 grid is 112.0).
double interpolate_at(const FloatMap& m, double y, double x, int out_rows, int out_cols);

// bg = F^T M and fg = F^T (1 - M) with F flattened to N x D (N = h*w).
ClassVectors disentangle(const Tensor& features, const ActivationMap& m);

enum class Polarity { complement_is_foreground, map_is_foreground };

// Picks the side whose above-0.5 area is smaller on average; ties keep the complement.
Polarity calibrate_polarity(const std::vector<ActivationMap>& background_maps);
ActivationMap select_foreground(const ActivationMap& background_map, Polarity polarity);

struct CcamLossWeights {
  double fg_pull = 1.0;     // fg-fg similarity across the batch
  double bg_pull = 1.0;     // bg-bg similarity across the batch
  double push = 1.0;        // fg-bg dissimilarity
  double separation = 0.1;  // pushes M away from 0.5
  bool operator==(const CcamLossWeights&) const = default;
};

struct CcamLossResult {
  double loss = 0;
  std::vector<std::vector<float>> grad_fg, grad_bg;
};

// Disentangling objective over a batch of class vectors, excluding the
// separation term (which acts on the maps directly).
CcamLossResult disentangle_loss(const std::vector<ClassVectors>& batch, const CcamLossWeights& weights);

// 1x1 projection (D -> proj, ReLU) followed by a 1x1 convolution to one channel
// and a logistic squashing. Inputs are standardised per channel with statistics
// fixed at construction.
class CcamHead : public nn::Module {
 public:
  CcamHead(int in_channels, int proj_channels, std::uint64_t seed);

  void set_input_stats(std::vector<float> mean, std::vector<float> inv_std);

  // Background activation map M for every sample of an N x D x h x w batch.
  Tensor forward(const Tensor& features);
  // Projected features P from the last forward (N x proj x h x w).
  const Tensor& projected() const { return projected_; }
  // Gradients w.r.t. P (direct use in the class vectors) and M.
  void backward(const Tensor& grad_projected, const Tensor& grad_map);

  ActivationMap background_head(const Tensor& features);

  void collect_params(std::vector<nn::Param*>& out) override;
  void collect_buffers(std::vector<nn::Buffer>& out) override;

  nn::Conv2d& mask_conv() { return mask_conv_; }
  int in_channels() const { return in_channels_; }
  int proj_channels() const { return proj_conv_.out_channels(); }

 private:
  Tensor standardize(const Tensor& f) const;

  int in_channels_;
  std::vector<float> mean_, inv_std_;
  nn::Conv2d proj_conv_;
  nn::ReLU relu_;
  nn::Conv2d mask_conv_;
  Tensor projected_;
  Tensor map_;
};

struct CcamOptions {
  int epochs = 5;
  int batch_size = 8;
  int proj_channels = 256;
  double lr = 0.05;
  double sgd_momentum = 0.9;
  double weight_decay = 1e-4;
  CcamLossWeights weights;
  std::uint64_t seed = 0;
};

struct CcamResult {
  std::filesystem::path weights;
  std::filesystem::path metadata;
  Polarity polarity = Polarity::complement_is_foreground;
  std::vector<double> loss_trace;
  std::vector<Cam> cams;  // one per input feature map, same order
};

// Trains a head over frozen features (one 1 x D x h x w tensor per image) and
// emits a CAM per image.
CcamResult train_ccam(const std::vector<Tensor>& features, const CcamOptions& options,
                      const std::filesystem::path& out_dir);

// Rebuilds a trained head from its metadata and emits CAMs for new features.
std::vector<Cam> apply_ccam(const std::filesystem::path& metadata, const std::vector<Tensor>& features);

// 8-bit grayscale, value = round(C).
void write_cam_png(const std::filesystem::path& path, const Cam& cam);
Cam read_cam_png(const std::filesystem::path& path);

// C / 255 as a saliency map in [0,1].
FloatMap cam_to_saliency(const Cam& cam);

}  // namespace uslseg::ccam
